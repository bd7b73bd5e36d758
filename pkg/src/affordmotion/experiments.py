"""Toy end-to-end runs: the "walk to X" experiment and the mixed-training proportion ablation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .adm import ADMConfig, ADMTrainConfig, train_adm
from .amdm import AMDMConfig, AMDMTrainConfig, AffordanceProvider, generate_motions, train_amdm
from .scene_synth import SceneConfig, TaskConfig, generate_dataset

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    n_train: int = 500
    n_test: int = 50
    n_points: int = 256
    n_frames: int = 32
    frame_rate: float = 10.0
    seed: int = 0
    adm_T: int = 500
    amdm_T: int = 500
    adm_steps: int = 3000
    amdm_steps: int = 3000
    batch_size: int = 32
    lr: float = 5e-4
    augment: bool = True
    # the MLP backbone feeds the prompt to every point, which grounds the target far better at this scale
    adm_model: dict = field(default_factory=lambda: {"backbone": "mlp", "mlp_hidden": 128, "step_dim": 64, "k": 8})
    amdm_model: dict = field(default_factory=lambda: {"d_model": 64, "heads": 4, "layers": 3, "step_dim": 64,
                                                      "feat_dim": 64, "unet_dims": (16, 32, 64, 64), "k": 8})

    def amdm_config(self, variant="decoder") -> AMDMConfig:
        return AMDMConfig(variant=variant, max_frames=self.n_frames, **self.amdm_model)


@dataclass
class ToyResult:
    goal_distances: np.ndarray
    contact: float
    goal_success: float
    report: metrics.MetricReport
    adm: object
    amdm: object
    timings: dict

    def summary(self) -> str:
        return (f"goal<=0.5m: {100 * self.goal_success:.1f}%  median goal dist {np.median(self.goal_distances):.3f} m  "
                f"contact {self.contact:.1f}")


def toy_data(cfg: ToyConfig, actions=("walk",)):
    task = TaskConfig(n_frames=cfg.n_frames, frame_rate=cfg.frame_rate, actions=tuple(actions))
    data = generate_dataset(cfg.n_train + cfg.n_test, seed=cfg.seed, scene_config=SceneConfig(),
                            task_config=task, n_points=cfg.n_points)
    return data[:cfg.n_train], data[cfg.n_train:]


def _logger(tag):
    return lambda step, loss: log.info("%s step %d loss %.5f", tag, step, loss)


def fit_adm(train, cfg: ToyConfig):
    return train_adm(train, ADMTrainConfig(T=cfg.adm_T, steps=cfg.adm_steps, batch_size=cfg.batch_size, lr=cfg.lr,
                                           augment=cfg.augment, seed=cfg.seed),
                     ADMConfig(**cfg.adm_model), progress=_logger("adm"))


def fit_amdm(train, cfg: ToyConfig, p_replace=0.0, adm=None, provider=None, variant="decoder"):
    return train_amdm(train, AMDMTrainConfig(variant=variant, T=cfg.amdm_T, steps=cfg.amdm_steps,
                                             batch_size=cfg.batch_size, lr=cfg.lr, augment=cfg.augment,
                                             p_replace=p_replace, seed=cfg.seed),
                      adm, cfg.amdm_config(variant), provider=provider, progress=_logger("amdm"))


def evaluate_pipeline(adm, amdm, test, seed=0, repeats=5, extractors=None):
    """Generate ``repeats`` rounds of motions for the held-out samples and score them."""
    rounds, maps = [], None
    for r in range(repeats):
        motions, aff = generate_motions(adm, amdm, [s.scene for s in test], [s.prompt for s in test],
                                        seed=seed + r, return_affordance=True)
        rounds.append(motions)
        maps = maps or aff
    report = metrics.evaluate_generated(test, rounds, extractors, repeats, seed,
                                        affordances=maps or None, check_collisions=True)
    return report, rounds


def run_toy_experiment(cfg: ToyConfig | None = None, data=None) -> ToyResult:
    """Train ADM + AMDM on synthetic walks and score held-out scenes (first round for the pass/fail rates)."""
    cfg = cfg or ToyConfig()
    timings = {}
    t0 = time.time()
    train, test = data if data is not None else toy_data(cfg)
    timings["data"] = time.time() - t0
    t0 = time.time()
    adm = fit_adm(train, cfg)
    timings["adm"] = time.time() - t0
    t0 = time.time()
    amdm = fit_amdm(train, cfg)
    timings["amdm"] = time.time() - t0
    t0 = time.time()
    motions, maps = generate_motions(adm, amdm, [s.scene for s in test], [s.prompt for s in test], seed=cfg.seed,
                                     return_affordance=True)
    timings["generate"] = time.time() - t0
    gd = np.array([metrics.goal_distance(m, s.target) for m, s in zip(motions, test)])
    contact = float(np.mean([metrics.contact_score([m], s.scene) for m, s in zip(motions, test)]))
    report = metrics.evaluate_generated(test, [motions], repeats=1, affordances=maps)
    return ToyResult(gd, contact, float(np.mean(gd <= 0.5)), report, adm, amdm, timings)


@dataclass
class AblationResult:
    proportions: tuple
    reports: dict       # proportion -> MetricReport
    adm_calls: dict     # proportion -> number of ADM replacements served

    def table(self, digits: int = 3) -> str:
        names = list(next(iter(self.reports.values())).values)
        head = "| proportion | " + " | ".join(names) + " |"
        rule = "|" + "---|" * (len(names) + 1)
        rows = []
        for p in self.proportions:
            rep = self.reports[p]
            cells = [f"{rep.mean(n):.{digits}f} ± {rep.interval(n):.{digits}f}" for n in names]
            rows.append(f"| {100 * p:.0f}% | " + " | ".join(cells) + " |")
        return "\n".join([head, rule] + rows)

    def to_dict(self) -> dict:
        return {"proportions": list(self.proportions),
                "adm_calls": {str(p): c for p, c in self.adm_calls.items()},
                "metrics": {str(p): {k: r.values[k] for k in r.values} for p, r in self.reports.items()}}


def run_proportion_ablation(cfg: ToyConfig | None = None, proportions=(0.0, 0.5, 1.0), repeats: int = 5,
                            data=None, adm=None, extractor_config: metrics.ExtractorConfig | None = None,
                            pool_size: int = 1) -> AblationResult:
    """Train one AMDM per replacement proportion against a shared ADM and compare them.

    All runs share the training data, the ADM, the ADM sample pool and the seeds, so
    the proportion is the only thing that changes.
    """
    cfg = cfg or ToyConfig()
    train, test = data if data is not None else toy_data(cfg)
    adm = adm or fit_adm(train, cfg)
    provider = AffordanceProvider(adm, train, pool_size=pool_size, seed=cfg.seed)
    if any(p > 0 for p in proportions):
        provider.build()
    extractors = metrics.train_feature_extractors(train, extractor_config or metrics.ExtractorConfig(steps=200))
    reports, calls = {}, {}
    for p in proportions:
        provider.calls = 0
        amdm = fit_amdm(train, cfg, p_replace=p, adm=adm, provider=provider if p > 0 else None)
        calls[p] = amdm.extra["adm_calls"]
        reports[p], _ = evaluate_pipeline(adm, amdm, test, seed=cfg.seed, repeats=repeats, extractors=extractors)
        log.info("proportion %.2f\n%s", p, reports[p].to_text())
    return AblationResult(tuple(proportions), reports, calls)


def config_dict(cfg: ToyConfig) -> dict:
    return asdict(cfg)
