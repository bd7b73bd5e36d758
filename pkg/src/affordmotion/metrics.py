"""Evaluation metrics: grounding, physics plausibility, distribution and retrieval scores.

Everything here is a pure function of its inputs (plus an explicit seed where pairs or
pools are drawn). Feature-space metrics take plain arrays so that any extractor can be
plugged in; a small contrastive extractor pair is provided for the synthetic data.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .geometry import AffordanceMap, MotionSequence, PointCloud
from .scene_synth import SceneObject
from .skeleton import DEFAULT_LAYOUT, SkeletonLayout

CONTACT_THRESHOLD = 0.05
PENETRATION_MARGIN = 0.02
FOOT_OFFSET = 0.03
COVER_RADIUS = 0.1
FLOOR_TOL = 1e-6


def _joints(motion) -> np.ndarray:
    return np.asarray(motion.joints if isinstance(motion, MotionSequence) else motion, dtype=np.float64)


def _target_points(scene: PointCloud, target: SceneObject) -> np.ndarray:
    idx = np.asarray(target.point_indices)
    if idx.size == 0:
        raise ValueError("target object has no points")
    return scene.positions[idx].astype(np.float64)


# ---------------------------------------------------------------- grounding


def goal_distance(motion, target: SceneObject, layout: SkeletonLayout = DEFAULT_LAYOUT) -> float:
    """x-y distance from the final-frame pelvis to the target centroid."""
    j = _joints(motion)
    c = np.asarray(target.centroid, dtype=np.float64)
    return float(np.linalg.norm(j[-1, layout.pelvis_index, :2] - c[:2]))


def affordance_grounding(amap: AffordanceMap, scene: PointCloud, target: SceneObject,
                         layout: SkeletonLayout = DEFAULT_LAYOUT):
    """(min_dist, pelvis_dist, all_dist) of the argmax anchor of every affordance joint to the target."""
    values = amap.values if isinstance(amap, AffordanceMap) else np.asarray(amap)
    pts = _target_points(scene, target)
    anchors = scene.positions[np.argmax(values, axis=0)].astype(np.float64)
    d = cKDTree(pts).query(anchors)[0]
    return float(d.min()), float(d[layout.affordance_pelvis_slot]), float(d.mean())


# ---------------------------------------------------------------- diversity / physics


def apd(motions: list) -> float:
    """Mean over unordered pairs of the mean per-frame, per-joint Euclidean distance."""
    if len(motions) < 2:
        raise ValueError("APD needs at least two motions")
    x = np.stack([_joints(m) for m in motions])
    total, count = 0.0, 0
    for i in range(len(x)):
        total += np.linalg.norm(x[i + 1:] - x[i], axis=-1).mean(axis=(1, 2)).sum()
        count += len(x) - i - 1
    return float(total / count)


def _floor_extent(scene: PointCloud):
    """x-y bounding box of background points lying on z = 0, or None if the scene has no floor."""
    on_floor = (scene.object_ids < 0) & (np.abs(scene.positions[:, 2]) <= FLOOR_TOL)
    if not on_floor.any():
        return None
    xy = scene.positions[on_floor, :2].astype(np.float64)
    return xy.min(0), xy.max(0)


def _foot_adjusted(j: np.ndarray, layout: SkeletonLayout, foot_offset: float) -> np.ndarray:
    out = j.copy()
    for name in ("left_foot", "right_foot"):
        if name in layout.joint_names:
            out[..., layout.index(name), 2] -= foot_offset
    return out


def contact_score(motions: list, scene: PointCloud, threshold: float = CONTACT_THRESHOLD,
                  foot_offset: float = FOOT_OFFSET, layout: SkeletonLayout = DEFAULT_LAYOUT) -> float:
    """Percentage of motions in which some joint of some frame touches the scene.

    Contact means within ``threshold`` of a scene point or of the floor plane (inside
    the floor's x-y extent). Foot joints sit above the sole, so they are lowered by
    ``foot_offset`` before measuring.
    """
    if scene is None or len(scene.positions) == 0:
        raise ValueError("empty point cloud")
    if not motions:
        raise ValueError("no motions")
    tree = cKDTree(scene.positions.astype(np.float64))
    floor = _floor_extent(scene)
    hits = 0
    for m in motions:
        q = _foot_adjusted(_joints(m), layout, foot_offset).reshape(-1, 3)
        touch = tree.query(q, distance_upper_bound=threshold)[0] <= threshold
        if floor is not None:
            inside = ((q[:, :2] >= floor[0]) & (q[:, :2] <= floor[1])).all(1)
            touch |= inside & (np.abs(q[:, 2]) <= threshold)
        hits += bool(touch.any())
    return 100.0 * hits / len(motions)


def _inside_object(q: np.ndarray, pts: np.ndarray, margin: float, radius: float) -> np.ndarray:
    """Ray-cover interior test: a query is inside if surface points enclose it along all six axis rays.

    Along each signed axis direction there must be an object point further than
    ``margin`` ahead of the query and within ``radius`` of the ray. Objects resting on
    the floor need no sampled underside: the floor plane closes the downward ray.
    """
    lo, hi = pts.min(0) - 1e-9, pts.max(0) + 1e-9
    grounded = lo[2] <= margin
    inside = np.zeros(len(q), dtype=bool)
    cand = np.flatnonzero(((q > lo + margin) & (q < hi - margin)).all(1))
    if cand.size == 0:
        return inside
    for s in range(0, cand.size, 512):
        sel = cand[s:s + 512]
        diff = pts[None] - q[sel, None]                       # Q x P x 3
        ok = np.ones(len(sel), dtype=bool)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            lateral = np.linalg.norm(diff[..., others], axis=-1) <= radius
            along = diff[..., axis]
            below = (lateral & (along < -margin)).any(1)
            if axis == 2 and grounded:
                below |= q[sel, 2] > margin
            ok &= (lateral & (along > margin)).any(1) & below
        inside[sel] = ok
    return inside


def penetration_mask(motion, scene: PointCloud, margin: float = PENETRATION_MARGIN,
                     radius: float = COVER_RADIUS) -> np.ndarray:
    """Boolean F x J array marking joints below the floor or inside a furniture volume."""
    j = _joints(motion)
    q = j.reshape(-1, 3)
    bad = q[:, 2] < -margin
    ids = scene.object_ids
    for oid in np.unique(ids[ids >= 0]):
        bad |= _inside_object(q, scene.positions[ids == oid].astype(np.float64), margin, radius)
    return bad.reshape(j.shape[:2])


def non_collision_score(motions: list, scene: PointCloud, margin: float = PENETRATION_MARGIN,
                        radius: float = COVER_RADIUS) -> float:
    """Percentage of (motion, frame, joint) entries that do not penetrate the floor or furniture."""
    if scene is None or len(scene.positions) == 0:
        raise ValueError("empty point cloud")
    if not motions:
        raise ValueError("no motions")
    return float(100.0 * np.mean([1.0 - penetration_mask(m, scene, margin, radius).mean() for m in motions]))


# ---------------------------------------------------------------- feature-space metrics


def _features(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if not np.isfinite(x).all():
        raise ValueError("non-finite features")
    return x


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_a, features_b, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a, b = _features(features_a), _features(features_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature widths differ")
    mu_a, mu_b = a.mean(0), b.mean(0)
    eye = ridge * np.eye(a.shape[1])
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eye
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eye
    # tr (S_a S_b)^{1/2} = tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}, the latter symmetric PSD
    ra = _sqrtm_psd(cov_a)
    w = np.linalg.eigvalsh(ra @ cov_b @ ra)
    tr_covmean = np.sqrt(np.clip(w, 0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_covmean)
    return max(value, 0.0)


def r_precision(motion_feats, text_feats, pool_size: int = 16, top_k=(1, 2, 3), seed: int = 0) -> dict:
    """Top-k retrieval rates of the matched text among ``pool_size - 1`` random mismatched texts."""
    m, t = _features(motion_feats), _features(text_feats)
    if len(m) != len(t):
        raise ValueError("motion and text features must be aligned")
    n = len(m)
    if pool_size > n:
        raise ValueError(f"pool of {pool_size} exceeds the {n} available texts")
    rng = np.random.default_rng(seed)
    ks = tuple(sorted(top_k))
    hits = np.zeros(len(ks))
    for i in range(n):
        others = rng.choice(n - 1, pool_size - 1, replace=False)
        others = others + (others >= i)
        pool = np.concatenate([[i], others])
        d = np.linalg.norm(t[pool] - m[i], axis=1)
        rank = int((d[1:] < d[0]).sum())
        hits += np.array([rank < k for k in ks])
    return {k: float(h / n) for k, h in zip(ks, hits)}


def _random_pairs(n: int, count: int, rng) -> np.ndarray:
    total = n * (n - 1) // 2
    if count >= total:
        return np.array(list(combinations(range(n), 2)))
    flat = rng.choice(total, count, replace=False)
    # unrank pair index -> (i, j), i < j, row-major over the upper triangle
    i = (n - 2 - np.floor(np.sqrt(-8 * flat + 4 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(int)
    j = flat + i + 1 - total + (n - i) * ((n - i) - 1) // 2
    return np.column_stack([i, j])


def diversity(features, subset_size: int = 300, seed: int = 0) -> float:
    """Mean distance over ``subset_size`` random distinct pairs (all pairs if fewer exist)."""
    x = _features(features)
    if len(x) < 2:
        raise ValueError("diversity needs at least two samples")
    p = _random_pairs(len(x), subset_size, np.random.default_rng(seed))
    return float(np.linalg.norm(x[p[:, 0]] - x[p[:, 1]], axis=1).mean())


def multimodality(groups: list, subset_size: int = 10, seed: int = 0) -> float:
    """Mean within-prompt pairwise distance, ``subset_size`` pairs per prompt group."""
    if not groups:
        raise ValueError("no prompt groups")
    rng = np.random.default_rng(seed)
    vals = []
    for g in groups:
        x = _features(g)
        if len(x) < 2:
            raise ValueError("every prompt group needs at least two samples")
        p = _random_pairs(len(x), subset_size, rng)
        vals.append(np.linalg.norm(x[p[:, 0]] - x[p[:, 1]], axis=1).mean())
    return float(np.mean(vals))


def multimodal_dist(motion_feats, text_feats) -> float:
    m, t = _features(motion_feats), _features(text_feats)
    if m.shape != t.shape:
        raise ValueError("motion and text features must be aligned")
    return float(np.linalg.norm(m - t, axis=1).mean())


# ---------------------------------------------------------------- reporting


def confidence_interval(values, z: float = 1.96) -> float:
    """Half-width of the normal 95% interval of the mean: z * std / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    return float(z * v.std() / math.sqrt(len(v)))


@dataclass
class MetricReport:
    """Per-metric repeat values with mean and a 95% interval."""
    values: dict = field(default_factory=dict)   # name -> list of floats, one per repeat
    repeats: int = 5
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_repeats(cls, runs: list, meta: dict | None = None) -> "MetricReport":
        if not runs:
            raise ValueError("no evaluation repeats")
        names = list(runs[0])
        values = {k: [float(r[k]) for r in runs] for k in names}
        for k, v in values.items():
            if not np.isfinite(v).all():
                raise ValueError(f"metric {k} is not finite")
        return cls(values, len(runs), dict(meta or {}))

    def mean(self, name) -> float:
        return float(np.mean(self.values[name]))

    def interval(self, name) -> float:
        return confidence_interval(self.values[name])

    def rows(self):
        return [(k, self.mean(k), self.interval(k)) for k in self.values]

    def to_text(self, digits: int = 3) -> str:
        width = max((len(k) for k in self.values), default=0)
        lines = [f"evaluation over {self.repeats} repeats (mean ± 95% interval)"]
        lines += [f"{k:<{width}}  {m:.{digits}f} ± {c:.{digits}f}" for k, m, c in self.rows()]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"repeats": self.repeats, "meta": self.meta,
                           "metrics": {k: {"mean": m, "ci95": c, "values": self.values[k]}
                                       for k, m, c in self.rows()}}, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "mean", "ci95"] + [f"repeat_{i}" for i in range(self.repeats)])
        for k, m, c in self.rows():
            w.writerow([k, f"{m:.6g}", f"{c:.6g}"] + [f"{v:.6g}" for v in self.values[k]])
        return buf.getvalue()


# ---------------------------------------------------------------- feature extractors


def motion_descriptor(joints: np.ndarray | torch.Tensor, pelvis: int = 0) -> torch.Tensor:
    """(B, F, J, 3) -> (B, F, 3J + 3): pelvis-relative pose plus pelvis displacement from frame 0."""
    x = torch.as_tensor(joints, dtype=torch.float32)
    root = x[:, :, pelvis:pelvis + 1]
    local = (x - root).flatten(2)
    disp = (root[:, :, 0] - root[:, :1, 0])
    return torch.cat([local, disp], -1)


class MotionFeatureEncoder(nn.Module):
    def __init__(self, num_joints=22, hidden=128, out_dim=512):
        super().__init__()
        self.inp = nn.Linear(3 * num_joints + 3, hidden)
        self.gru = nn.GRU(hidden, hidden, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, out_dim)

    def forward(self, joints):
        h, _ = self.gru(torch.relu(self.inp(motion_descriptor(joints))))
        return self.out(h.mean(1))


class TextFeatureEncoder(nn.Module):
    def __init__(self, text_dim=512, hidden=256, out_dim=512):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(text_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, emb):
        return self.net(emb)


@dataclass
class FeatureExtractorPair:
    motion: MotionFeatureEncoder
    text: TextFeatureEncoder
    history: list = field(default_factory=list)

    @torch.no_grad()
    def motion_features(self, motions, batch_size: int = 256) -> np.ndarray:
        arr = np.stack([_joints(m) for m in motions]).astype(np.float32)
        self.motion.eval()
        return np.concatenate([self.motion(torch.as_tensor(arr[i:i + batch_size])).numpy()
                               for i in range(0, len(arr), batch_size)]).astype(np.float64)

    @torch.no_grad()
    def text_features(self, prompts) -> np.ndarray:
        emb = np.stack([getattr(p, "embedding", p) for p in prompts]).astype(np.float32)
        self.text.eval()
        return self.text(torch.as_tensor(emb)).numpy().astype(np.float64)

    def state_dict(self) -> dict:
        return {"motion": self.motion.state_dict(), "text": self.text.state_dict()}


@dataclass
class ExtractorConfig:
    out_dim: int = 512
    hidden: int = 128
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    margin: float = 1.0
    seed: int = 0


def triplet_accuracy(pair: FeatureExtractorPair, motions, prompts) -> float:
    """Fraction of (i, j != i) triples where the matched text is closer than the mismatched one."""
    m, t = pair.motion_features(motions), pair.text_features(prompts)
    d = np.linalg.norm(m[:, None] - t[None], axis=-1)
    n = len(m)
    matched = np.diag(d)[:, None]
    off = ~np.eye(n, dtype=bool)
    return float((matched < d)[off].mean())


def train_feature_extractors(dataset: list, config: ExtractorConfig | None = None, num_joints: int = 22,
                             text_dim: int = 512) -> FeatureExtractorPair:
    """Contrastive margin training of a motion/text encoder pair on matched samples.

    Mismatched texts are every other text in the batch whose raw prompt differs.
    """
    config = config or ExtractorConfig()
    if len(dataset) < 2:
        raise ValueError("need at least two samples")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    pair = FeatureExtractorPair(MotionFeatureEncoder(num_joints, config.hidden, config.out_dim),
                                TextFeatureEncoder(text_dim, 2 * config.hidden, config.out_dim))
    joints = torch.as_tensor(np.stack([s.motion.joints for s in dataset]), dtype=torch.float32)
    emb = torch.as_tensor(np.stack([s.prompt.embedding for s in dataset]), dtype=torch.float32)
    raw = np.array([s.prompt.raw for s in dataset])
    params = list(pair.motion.parameters()) + list(pair.text.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    pair.motion.train()
    pair.text.train()
    bs = min(config.batch_size, len(dataset))
    for step in range(config.steps):
        idx = torch.randperm(len(dataset), generator=gen)[:bs]
        m = pair.motion(joints[idx])
        t = pair.text(emb[idx])
        d = torch.cdist(m, t)
        pos = d.diagonal()[:, None]
        r = raw[idx.numpy()]
        neg_mask = torch.as_tensor(r[:, None] != r[None, :])
        hinge = torch.relu(config.margin + pos - d) * neg_mask
        loss = hinge.sum() / neg_mask.sum().clamp_min(1)
        if not torch.isfinite(loss):
            raise RuntimeError(f"feature extractor training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        pair.history.append(loss.item())
    pair.motion.eval()
    pair.text.eval()
    return pair


# ---------------------------------------------------------------- evaluation protocol


def evaluate_generated(samples: list, generated: list, extractors: FeatureExtractorPair | None = None,
                       repeats: int = 5, seed: int = 0, affordances: list | None = None,
                       layout: SkeletonLayout = DEFAULT_LAYOUT, r_pool: int = 16,
                       diversity_size: int = 300, check_collisions: bool = True) -> MetricReport:
    """Score generated motions against their source samples over ``repeats`` evaluation rounds.

    ``generated`` is either a list of motions (one per sample, reused in every round) or a
    list of ``repeats`` such lists. Affordance maps, when given, add the grounding scores.
    """
    rounds = generated if generated and isinstance(generated[0], (list, tuple)) else [generated] * repeats
    if len(rounds) != repeats:
        raise ValueError(f"expected {repeats} generation rounds, got {len(rounds)}")
    text_feats = extractors.text_features([s.prompt for s in samples]) if extractors else None
    real_feats = extractors.motion_features([s.motion for s in samples]) if extractors else None
    runs = []
    for r, motions in enumerate(rounds):
        if len(motions) != len(samples):
            raise ValueError("one generated motion per sample is required")
        row = {
            "goal_dist": float(np.mean([goal_distance(m, s.target, layout) for m, s in zip(motions, samples)])),
            "goal_success_0.5m": 100.0 * float(np.mean([goal_distance(m, s.target, layout) <= 0.5
                                                        for m, s in zip(motions, samples)])),
            "contact": float(np.mean([contact_score([m], s.scene, layout=layout) for m, s in zip(motions, samples)])),
        }
        if check_collisions:
            row["non_collision"] = float(np.mean([non_collision_score([m], s.scene)
                                                  for m, s in zip(motions, samples)]))
        if affordances is not None:
            g = np.array([affordance_grounding(a, s.scene, s.target, layout) for a, s in zip(affordances, samples)])
            row.update({"min_dist": g[:, 0].mean(), "pelvis_dist": g[:, 1].mean(), "all_dist": g[:, 2].mean()})
        if extractors is not None:
            gen_feats = extractors.motion_features(motions)
            rp = r_precision(gen_feats, text_feats, min(r_pool, len(samples)), seed=seed + r)
            row.update({f"r_precision_top{k}": v for k, v in rp.items()})
            row["fid"] = fid(gen_feats, real_feats)
            row["multimodal_dist"] = multimodal_dist(gen_feats, text_feats)
            row["diversity"] = diversity(gen_feats, diversity_size, seed=seed + r)
        runs.append(row)
    return MetricReport.from_repeats(runs, {"samples": len(samples), "seed": seed})
