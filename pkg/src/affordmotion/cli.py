"""Command-line entry point: ``affordmotion <command> [--config FILE] [--seed N] [--out DIR] [--override k=v]``.

Every command merges its defaults with an optional YAML file and ``--override``
pairs (dotted keys, YAML-typed values), rejects unknown keys, and writes the
effective config plus a run manifest into its output directory. Relative data
paths are resolved against ``$AFFORDMOTION_DATA`` when set.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__

log = logging.getLogger("affordmotion")

DATA_ENV = "AFFORDMOTION_DATA"


class ConfigError(ValueError):
    pass


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _dc_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            v = f.default
        elif f.default_factory is not dataclasses.MISSING:
            v = f.default_factory()
        else:
            continue
        out[f.name] = _plain(v)
    return out


def _schemas() -> dict:
    from .adm import ADMConfig, ADMTrainConfig
    from .amdm import AMDMConfig, AMDMTrainConfig
    from .bodyfit import FitConfig
    from .experiments import ToyConfig
    from .metrics import ExtractorConfig
    from .scene_synth import SceneConfig, TaskConfig

    adm_train = _dc_defaults(ADMTrainConfig)
    adm_train.pop("model")
    amdm_train = _dc_defaults(AMDMTrainConfig)
    amdm_train.pop("model")
    return {
        "data_gen": {"seed": 0, "n_samples": 100, "n_points": 8192,
                     "scene": _dc_defaults(SceneConfig), "task": _dc_defaults(TaskConfig)},
        "train_adm": {"seed": 0, "data": None, "train": adm_train, "model": _dc_defaults(ADMConfig)},
        "train_amdm": {"seed": 0, "data": None, "adm_checkpoint": None, "train": amdm_train,
                       "model": _dc_defaults(AMDMConfig)},
        "sample": {"seed": 0, "data": None, "indices": [0], "prompt": None, "adm_checkpoint": None,
                   "amdm_checkpoint": None, "n": 1, "plots": True},
        "evaluate": {"seed": 0, "data": None, "generated": None, "repeats": 5,
                     "extractor": _dc_defaults(ExtractorConfig), "collisions": True},
        "fit_body": {"seed": 0, "generated": None, "fit": _dc_defaults(FitConfig), "plots": True, "limit": None},
        "ablate": {"seed": 0, "proportions": [0.0, 0.5, 1.0], "repeats": 5, "toy": _dc_defaults(ToyConfig),
                   "extractor": _dc_defaults(ExtractorConfig)},
    }


def _coerce(default, value, key: str):
    """YAML 1.1 reads ``1e-3`` as a string; numeric defaults accept such spellings."""
    if isinstance(value, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
        try:
            return float(value) if isinstance(default, float) or not value.lstrip("+-").isdigit() else int(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}") from exc
    return value


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (update or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = _coerce(base[k], v, where + k)
    return out


def _set_dotted(cfg: dict, key: str, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _coerce(node[parts[-1]], value, key)


def load_config(command: str, path=None, overrides=(), seed=None) -> dict:
    cfg = _schemas()[command]
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"unreadable config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_dotted(cfg, k.strip(), yaml.safe_load(v))
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def resolve_path(p) -> Path:
    if p is None:
        raise ConfigError("a required input path is missing")
    path = Path(os.path.expanduser(str(p)))
    root = os.environ.get(DATA_ENV)
    if not path.is_absolute() and not path.exists() and root:
        path = Path(root) / path
    if not path.exists():
        raise ConfigError(f"input not found: {path}")
    return path


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _digest(path: Path) -> str | None:
    target = path / "manifest.json" if path.is_dir() else path
    if not target.is_file():
        return None
    return hashlib.sha256(target.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs: list, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    manifest = {
        "command": command, "config": cfg, "seed": cfg.get("seed"), "code_version": _code_version(),
        "python": platform.python_version(),
        "inputs": {k: {"path": str(v), "sha256": _digest(Path(v))} for k, v in inputs.items()},
        "outputs": sorted(outputs), "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, default=str))


def _seed_all(seed: int):
    import torch
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _kw(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


# ---------------------------------------------------------------- commands


def cmd_data_gen(cfg, out: Path):
    from .dataset import save_dataset
    from .scene_synth import SceneConfig, TaskConfig, generate_dataset

    samples = generate_dataset(cfg["n_samples"], cfg["seed"], _kw(SceneConfig, cfg["scene"]),
                               _kw(TaskConfig, cfg["task"]), n_points=cfg["n_points"])
    save_dataset(samples, out / "dataset")
    return {}, ["dataset"], {"num_samples": len(samples)}


def _write_losses(path: Path, losses):
    path.write_text("step,loss\n" + "".join(f"{i},{v:.8g}\n" for i, v in enumerate(losses)))


def cmd_train_adm(cfg, out: Path):
    from .adm import ADMConfig, ADMTrainConfig, train_adm
    from .dataset import load_dataset

    data_path = resolve_path(cfg["data"])
    samples = load_dataset(data_path)
    train = dict(cfg["train"], seed=cfg["seed"])
    model = dict(cfg["model"], backbone=train["backbone"])
    ckpt = train_adm(samples, _kw(ADMTrainConfig, train), _kw(ADMConfig, model),
                     progress=lambda s, l: log.info("adm step %d loss %.5f", s, l))
    ckpt.save(out / "adm.pt")
    _write_losses(out / "losses.csv", ckpt.extra["losses"])
    return {"data": data_path}, ["adm.pt", "losses.csv"], {"final_loss": ckpt.extra["losses"][-1]}


def cmd_train_amdm(cfg, out: Path):
    from .amdm import AMDMConfig, AMDMTrainConfig, train_amdm
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset

    data_path = resolve_path(cfg["data"])
    samples = load_dataset(data_path)
    inputs = {"data": data_path}
    adm = None
    if cfg["adm_checkpoint"] is not None:
        inputs["adm_checkpoint"] = resolve_path(cfg["adm_checkpoint"])
        adm = load_checkpoint(inputs["adm_checkpoint"], "adm")
    train = dict(cfg["train"], seed=cfg["seed"])
    model = dict(cfg["model"], variant=train["variant"])
    ckpt = train_amdm(samples, _kw(AMDMTrainConfig, train), adm, _kw(AMDMConfig, model),
                      progress=lambda s, l: log.info("amdm step %d loss %.5f", s, l))
    ckpt.save(out / "amdm.pt")
    _write_losses(out / "losses.csv", ckpt.extra["losses"])
    return inputs, ["amdm.pt", "losses.csv"], {"final_loss": ckpt.extra["losses"][-1],
                                                "adm_calls": ckpt.extra["adm_calls"]}


def cmd_sample(cfg, out: Path):
    from .amdm import generate_motions
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset, save_arrays
    from .plotting import plot_affordance, plot_topdown
    from .text import encode_text

    n = int(cfg["n"])
    if n < 0:
        raise ConfigError("n must be non-negative")
    inputs, outputs = {}, []
    motions_rec, aff_rec = [], []
    if n > 0:
        inputs["data"] = resolve_path(cfg["data"])
        inputs["amdm_checkpoint"] = resolve_path(cfg["amdm_checkpoint"])
        samples = load_dataset(inputs["data"])
        amdm = load_checkpoint(inputs["amdm_checkpoint"], "amdm")
        adm = None
        if cfg["adm_checkpoint"] is not None:
            inputs["adm_checkpoint"] = resolve_path(cfg["adm_checkpoint"])
            adm = load_checkpoint(inputs["adm_checkpoint"], "adm")
        for i in cfg["indices"]:
            if not 0 <= i < len(samples):
                raise ConfigError(f"sample index {i} out of range (dataset has {len(samples)})")
        chosen = [samples[i] for i in cfg["indices"] for _ in range(n)]
        prompts = [encode_text(cfg["prompt"]) if cfg["prompt"] else s.prompt for s in chosen]
        motions, maps = generate_motions(adm, amdm, [s.scene for s in chosen], prompts, seed=cfg["seed"],
                                         return_affordance=True)
        for k, (s, p, m) in enumerate(zip(chosen, prompts, motions)):
            idx = cfg["indices"][k // n]
            motions_rec.append({"index": idx, "draw": k % n, "prompt": p.raw, "joints": m.joints.astype(np.float32)})
            if maps:
                aff_rec.append({"index": idx, "draw": k % n, "values": maps[k].values.astype(np.float32)})
        if cfg["plots"]:
            for j, idx in enumerate(cfg["indices"]):
                s = samples[idx]
                group = motions[j * n:(j + 1) * n]
                name = f"plots/trajectory_{idx}.png"
                plot_topdown(s.scene, group, out / name, s.target.centroid, prompts[j * n].raw)
                outputs.append(name)
                if maps:
                    name = f"plots/affordance_{idx}.png"
                    plot_affordance(s.scene, maps[j * n], out / name, title=prompts[j * n].raw)
                    outputs.append(name)
    if motions_rec:
        save_arrays(out / "motions", motions_rec, "affordmotion-motions")
        outputs.append("motions")
    if aff_rec:
        save_arrays(out / "affordances", aff_rec, "affordmotion-affordances")
        outputs.append("affordances")
    return inputs, outputs, {"num_motions": len(motions_rec)}


def _load_generated(path: Path):
    """Generated motions grouped by draw: a list of {sample index: joints}."""
    from .dataset import load_arrays

    records, _ = load_arrays(path, "affordmotion-motions")
    by_draw = {}
    for r in records:
        by_draw.setdefault(r.get("draw", 0), {})[r["index"]] = r["joints"]
    return [by_draw[d] for d in sorted(by_draw)]


def cmd_evaluate(cfg, out: Path):
    from .dataset import load_dataset
    from .metrics import ExtractorConfig, evaluate_generated, train_feature_extractors

    inputs = {"data": resolve_path(cfg["data"]), "generated": resolve_path(cfg["generated"])}
    samples = load_dataset(inputs["data"])
    rounds = _load_generated(inputs["generated"])
    if not rounds:
        raise ConfigError("no generated motions to evaluate")
    indices = sorted(rounds[0])
    if any(sorted(r) != indices for r in rounds):
        raise ConfigError("every generation round must cover the same samples")
    subset = [samples[i] for i in indices]
    repeats = int(cfg["repeats"])
    motions = [[r[i] for i in indices] for r in rounds]
    if len(motions) == 1:
        motions = motions[0]
    elif len(motions) != repeats:
        raise ConfigError(f"generated data has {len(motions)} draws per sample; expected 1 or {repeats}")
    extractors = None
    if len(subset) >= 2:
        ex_cfg = _kw(ExtractorConfig, dict(cfg["extractor"], seed=cfg["seed"]))
        extractors = train_feature_extractors(samples, ex_cfg)
    report = evaluate_generated(subset, motions, extractors, repeats, cfg["seed"],
                                r_pool=min(16, len(subset)), check_collisions=cfg["collisions"])
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_text())
    print(report.to_csv(), end="")
    return inputs, ["report.txt", "report.json", "report.csv"], {}


def cmd_fit_body(cfg, out: Path):
    from .bodyfit import FitConfig, fit_body, forward_kinematics
    from .dataset import load_arrays, save_arrays
    from .plotting import plot_skeleton_overlay

    inputs = {"generated": resolve_path(cfg["generated"])}
    records, _ = load_arrays(inputs["generated"], "affordmotion-motions")
    if cfg["limit"] is not None:
        records = records[:int(cfg["limit"])]
    fit_cfg = _kw(FitConfig, cfg["fit"])
    params, outputs, rmses = [], [], []
    for k, r in enumerate(records):
        res = fit_body(r["joints"], config=fit_cfg)
        p = res.params
        rmses.append(res.rmse)
        params.append({"index": r.get("index", k), "draw": r.get("draw", 0), "trans": p.trans.astype(np.float32),
                       "root_orient": p.root_orient.astype(np.float32),
                       "joint_rots": p.joint_rots.astype(np.float32), "scale": float(p.scale),
                       "rmse": float(res.rmse), "converged": bool(res.converged)})
        if cfg["plots"]:
            name = f"plots/fit_{k}.png"
            plot_skeleton_overlay(r["joints"], forward_kinematics(p), out / name)
            outputs.append(name)
    save_arrays(out / "body_params", params, "affordmotion-body-params")
    outputs.append("body_params")
    return inputs, outputs, {"mean_rmse": float(np.mean(rmses)) if rmses else None}


def cmd_ablate(cfg, out: Path):
    from .experiments import ToyConfig, run_proportion_ablation
    from .metrics import ExtractorConfig

    toy = _kw(ToyConfig, dict(cfg["toy"], seed=cfg["seed"]))
    result = run_proportion_ablation(toy, tuple(cfg["proportions"]), int(cfg["repeats"]),
                                     extractor_config=_kw(ExtractorConfig, cfg["extractor"]))
    table = result.table()
    (out / "ablation.md").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(result.to_dict(), indent=1))
    print(table)
    return {}, ["ablation.md", "ablation.json"], {}


COMMANDS = {
    "data_gen": (cmd_data_gen, "generate a synthetic scene/motion/text dataset"),
    "train_adm": (cmd_train_adm, "train the affordance diffusion model"),
    "train_amdm": (cmd_train_amdm, "train the affordance-to-motion diffusion model"),
    "sample": (cmd_sample, "generate affordance maps and motions for dataset scenes"),
    "evaluate": (cmd_evaluate, "score generated motions (5-repeat report)"),
    "fit_body": (cmd_fit_body, "fit the articulated body to generated joints"),
    "ablate": (cmd_ablate, "mixed-training proportion ablation on toy data"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affordmotion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.steps=200 (repeatable)")
        p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.command, args.config, args.override, args.seed)
        if args.print_config:
            print(yaml.safe_dump(cfg, sort_keys=True), end="")
            return 0
        _seed_all(int(cfg["seed"]))
        args.out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, extra = fn(cfg, args.out)
        write_manifest(args.out, args.command, cfg, inputs, outputs, extra)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
