import json

import numpy as np
import pytest
import yaml

from affordmotion import cli, metrics
from affordmotion.dataset import load_arrays, load_dataset

DATA_OVERRIDES = ["n_samples=6", "n_points=128", "task.n_frames=16", "task.frame_rate=10",
                  "task.actions=[walk]"]
ADM_OVERRIDES = ["train.steps=300", "train.batch_size=6", "train.T=50", "train.lr=1e-3", "train.backbone=mlp",
                 "model.mlp_hidden=64", "model.step_dim=32", "model.k=8"]
AMDM_OVERRIDES = ["train.steps=300", "train.batch_size=6", "train.T=50", "train.lr=1e-3", "model.d_model=64",
                  "model.heads=4", "model.layers=2", "model.step_dim=32", "model.feat_dim=32",
                  "model.unet_dims=[8,16,16,32]", "model.k=8", "model.max_frames=16"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def overrides(items):
    return [x for item in items for x in ("--override", item)]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus two small checkpoints trained to memorise it, all produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert run("data_gen", "--out", root / "data", "--seed", 2, *overrides(DATA_OVERRIDES)) == 0
    assert run("train_adm", "--out", root / "adm", *overrides(ADM_OVERRIDES + [f"data={root / 'data/dataset'}"])) == 0
    assert run("train_amdm", "--out", root / "amdm",
               *overrides(AMDM_OVERRIDES + [f"data={root / 'data/dataset'}"])) == 0
    return root


def sample_args(root, out, *extra):
    return ("sample", "--out", out, *overrides([f"data={root / 'data/dataset'}", f"adm_checkpoint={root / 'adm/adm.pt'}",
                                                f"amdm_checkpoint={root / 'amdm/amdm.pt'}", *extra]))


def test_manifests_written(workspace):
    for sub, files in (("data", ["dataset"]), ("adm", ["adm.pt", "losses.csv"]), ("amdm", ["amdm.pt", "losses.csv"])):
        man = json.loads((workspace / sub / "run_manifest.json").read_text())
        assert man["outputs"] == sorted(files) and man["seed"] is not None and man["code_version"]
        assert yaml.safe_load((workspace / sub / "config.yaml").read_text()) == man["config"]
    man = json.loads((workspace / "adm/run_manifest.json").read_text())
    assert len(man["inputs"]["data"]["sha256"]) == 64
    assert len(load_dataset(workspace / "data/dataset")) == 6


def test_sample_zero(workspace, tmp_path):
    assert run("sample", "--out", tmp_path, "--override", "n=0") == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["config.yaml", "run_manifest.json"]
    assert json.loads((tmp_path / "run_manifest.json").read_text())["outputs"] == []


def test_sample_bit_identical(workspace, tmp_path):
    for name in ("a", "b"):
        assert run(*sample_args(workspace, tmp_path / name, "indices=[0, 1]", "n=2", "plots=false")) == 0
    for blob in ("motions", "affordances"):
        for f in (tmp_path / "a" / blob).iterdir():
            assert f.read_bytes() == (tmp_path / "b" / blob / f.name).read_bytes()
    recs, _ = load_arrays(tmp_path / "a/motions", "affordmotion-motions")
    assert len(recs) == 4 and recs[0]["joints"].shape == (16, 22, 3)


def test_prompted_sample_makes_contact(workspace, tmp_path):
    samples = load_dataset(workspace / "data/dataset")
    idx = next((i for i, s in enumerate(samples) if s.target.label == "table"), 0)
    label = samples[idx].target.label
    assert run(*sample_args(workspace, tmp_path, f"indices=[{idx}]", "n=3",
                            f"prompt=walk to the {label}")) == 0
    recs, _ = load_arrays(tmp_path / "motions", "affordmotion-motions")
    assert all(r["prompt"] == f"walk to the {label}" for r in recs)
    for r in recs:
        assert metrics.contact_score([r["joints"]], samples[idx].scene) == 100.0
    assert (tmp_path / f"plots/trajectory_{idx}.png").stat().st_size > 0
    assert (tmp_path / f"plots/affordance_{idx}.png").stat().st_size > 0


def test_evaluate_and_fit_body(workspace, tmp_path, capsys):
    gen = tmp_path / "gen"
    assert run(*sample_args(workspace, gen, "indices=[0, 1, 2, 3]", "n=5", "plots=false")) == 0
    capsys.readouterr()
    assert run("evaluate", "--out", tmp_path / "eval", *overrides([f"data={workspace / 'data/dataset'}",
                                                                    f"generated={gen / 'motions'}",
                                                                    "extractor.steps=5"])) == 0
    printed = capsys.readouterr().out
    assert "5 repeats" in printed and "metric,mean,ci95" in printed
    report = json.loads((tmp_path / "eval/report.json").read_text())
    assert report["repeats"] == 5 and "goal_dist" in report["metrics"]
    assert run("fit_body", "--out", tmp_path / "fit", *overrides([f"generated={gen / 'motions'}", "limit=2",
                                                                  "fit.max_iters=20"])) == 0
    params, _ = load_arrays(tmp_path / "fit/body_params", "affordmotion-body-params")
    assert len(params) == 2 and params[0]["joint_rots"].shape == (16, 21, 3)
    assert (tmp_path / "fit/plots/fit_0.png").exists()


def test_env_var_resolves_relative_paths(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_ENV, str(workspace))
    monkeypatch.chdir(tmp_path)
    assert run("sample", "--out", tmp_path / "out", *overrides(["data=data/dataset", "amdm_checkpoint=amdm/amdm.pt",
                                                               "adm_checkpoint=adm/adm.pt", "plots=false"])) == 0


def test_error_exits(workspace, tmp_path, capsys):
    assert run("train_adm", "--out", tmp_path, "--override", "train.bogus=1") == 2
    assert "unknown config key" in capsys.readouterr().err
    assert run("train_adm", "--out", tmp_path, "--override", "data=/nonexistent/x") == 2
    assert run("train_adm", "--out", tmp_path) == 2
    assert run("sample", "--out", tmp_path, "--override", "n=-1") == 2
    assert run("train_adm", "--out", tmp_path, "--override", "steps") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  nope: 3\n")
    assert run("train_adm", "--out", tmp_path, "--config", bad) == 2
    assert run("train_amdm", "--out", tmp_path / "p", *overrides([f"data={workspace / 'data/dataset'}",
                                                                  "train.p_replace=0.5", "train.steps=1"])) == 1
    assert "requires an ADM checkpoint" in capsys.readouterr().err
    assert run(*sample_args(workspace, tmp_path / "s", "indices=[99]")) == 2


def test_config_file_and_print_config(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"steps": 7}, "model": {"d_model": 32}}))
    assert run("train_adm", "--out", tmp_path, "--config", cfg, "--seed", 9, "--override", "train.lr=0.01",
               "--print-config") == 0
    out = yaml.safe_load(capsys.readouterr().out)
    assert out["train"]["steps"] == 7 and out["train"]["lr"] == 0.01 and out["seed"] == 9
    assert out["model"]["d_model"] == 32
    for name in cli.COMMANDS:
        assert run(name, "--out", tmp_path, "--print-config") == 0
