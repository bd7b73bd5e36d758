"""Static PNG renderings: top-down trajectories, affordance heat maps, skeleton overlays."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import AffordanceMap, PointCloud  # noqa: E402
from .skeleton import DEFAULT_LAYOUT, PARENTS  # noqa: E402


def _scene_axes(ax, scene: PointCloud, alpha=0.35):
    order = np.argsort(scene.positions[:, 2])
    ax.scatter(scene.positions[order, 0], scene.positions[order, 1], c=scene.colors[order], s=3, alpha=alpha,
               linewidths=0)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")


def plot_topdown(scene: PointCloud, motions: list, path, target_xy=None, title: str | None = None,
                 pelvis: int = DEFAULT_LAYOUT.pelvis_index) -> Path:
    """Scene points seen from above with pelvis trajectories (start dot, end cross)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    _scene_axes(ax, scene)
    for m in motions:
        j = np.asarray(getattr(m, "joints", m))
        line, = ax.plot(j[:, pelvis, 0], j[:, pelvis, 1], lw=1.5)
        ax.plot(*j[0, pelvis, :2], "o", color=line.get_color(), ms=4)
        ax.plot(*j[-1, pelvis, :2], "x", color=line.get_color(), ms=7)
    if target_xy is not None:
        ax.plot(*np.asarray(target_xy)[:2], "*", color="k", ms=12)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_affordance(scene: PointCloud, amap: AffordanceMap, path, slot: int = 0, title: str | None = None) -> Path:
    """Top-down heat rendering of one affordance channel."""
    values = amap.values if isinstance(amap, AffordanceMap) else np.asarray(amap)
    fig, ax = plt.subplots(figsize=(5, 5))
    order = np.argsort(values[:, slot])
    sc = ax.scatter(scene.positions[order, 0], scene.positions[order, 1], c=values[order, slot], cmap="inferno",
                    vmin=0, vmax=1, s=6, linewidths=0)
    fig.colorbar(sc, ax=ax, shrink=0.8)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_skeleton_overlay(target: np.ndarray, fitted: np.ndarray, path, frames=None) -> Path:
    """Side view (x-z) of target joints versus fitted skeleton for a few frames."""
    target, fitted = np.asarray(target), np.asarray(fitted)
    frames = frames if frames is not None else np.linspace(0, len(target) - 1, min(4, len(target))).astype(int)
    fig, axes = plt.subplots(1, len(frames), figsize=(3 * len(frames), 4), squeeze=False)
    for ax, f in zip(axes[0], frames):
        for joints, style in ((target[f], "k-"), (fitted[f], "r--")):
            for c, p in enumerate(PARENTS):
                if p >= 0:
                    ax.plot(joints[[p, c], 0], joints[[p, c], 2], style, lw=1)
        ax.set_aspect("equal")
        ax.set_title(f"frame {f}", fontsize=8)
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
