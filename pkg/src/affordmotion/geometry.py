"""Scene/motion containers, distance fields, affordance maps and point-cloud preprocessing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .skeleton import DEFAULT_LAYOUT, SkeletonLayout

DEFAULT_SIGMA = 0.8


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    object_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {self.positions.shape}")
        n = len(self.positions)
        if n < 1:
            raise ValueError("empty point cloud")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite point coordinates")
        if self.colors is None:
            self.colors = np.full((n, 3), 0.5, dtype=self.positions.dtype)
        self.colors = np.asarray(self.colors)
        if self.colors.shape != (n, 3):
            raise ValueError("colors must be N x 3")
        if (self.colors < 0).any() or (self.colors > 1).any():
            raise ValueError("colors must lie in [0, 1]")
        if self.object_ids is None:
            self.object_ids = np.full(n, -1, dtype=np.int32)
        self.object_ids = np.asarray(self.object_ids)
        if self.object_ids.shape != (n,):
            raise ValueError("object_ids must have length N")

    def __len__(self):
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.positions[index], self.colors[index], self.object_ids[index])

    def features(self) -> np.ndarray:
        """N x 6 array of xyz + rgb."""
        return np.concatenate([self.positions, self.colors], axis=1)


@dataclass
class MotionSequence:
    joints: np.ndarray
    frame_rate: float = 20.0

    def __post_init__(self):
        self.joints = np.asarray(self.joints)
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise ValueError(f"joints must be F x J x 3, got {self.joints.shape}")
        if self.joints.shape[0] < 1:
            raise ValueError("motion needs at least one frame")
        if not np.isfinite(self.joints).all():
            raise ValueError("non-finite joint coordinates")

    @property
    def num_frames(self) -> int:
        return self.joints.shape[0]


@dataclass
class DistanceField:
    values: np.ndarray  # N x J_a, meters


@dataclass
class AffordanceMap:
    values: np.ndarray  # N x J_a in (0, 1]
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("affordance map must be N x J_a")
        if not (self.values > 0).all() or not (self.values <= 1).all():
            raise ValueError("affordance values must lie in (0, 1]")


def compute_distance_field(scene: PointCloud, frame: np.ndarray,
                           layout: SkeletonLayout = DEFAULT_LAYOUT) -> DistanceField:
    if scene is None or len(scene.positions) == 0:
        raise ValueError("empty point cloud")
    joints = np.asarray(frame, dtype=np.float64)[list(layout.affordance_joints)]
    if not np.isfinite(joints).all():
        raise ValueError("non-finite affordance joint coordinates")
    diff = scene.positions.astype(np.float64)[:, None, :] - joints[None, :, :]
    return DistanceField(np.sqrt((diff ** 2).sum(-1)))


def normalize_distance(d, sigma: float = DEFAULT_SIGMA, squared: bool = False) -> np.ndarray:
    """Map distances to (0, 1] via exp(-0.5 * d / sigma**2).

    With ``squared=True`` the Gaussian form exp(-0.5 * d**2 / sigma**2) is used instead.
    """
    if not sigma > 0:
        raise ValueError("invalid normalization factor")
    d = d.values if isinstance(d, DistanceField) else np.asarray(d, dtype=np.float64)
    if squared:
        d = d ** 2
    return np.exp(-0.5 * d / sigma ** 2)


def min_distance_over_frames(scene: PointCloud, motion: MotionSequence,
                             layout: SkeletonLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Per (point, affordance joint) minimum over frames of the joint-point distance."""
    pts = scene.positions.astype(np.float64)
    joints = motion.joints.astype(np.float64)[:, list(layout.affordance_joints)]  # F x Ja x 3
    out = np.empty((len(pts), joints.shape[1]))
    for j in range(joints.shape[1]):
        out[:, j] = cKDTree(joints[:, j]).query(pts)[0]
    return out


def compute_affordance_map(scene: PointCloud, motion: MotionSequence,
                           layout: SkeletonLayout = DEFAULT_LAYOUT, sigma: float = DEFAULT_SIGMA,
                           squared: bool = False) -> AffordanceMap:
    """Temporal max-pool of the per-frame normalized distance maps.

    The normalizer is monotone decreasing, so max over frames equals the normalizer
    applied to the per-entry minimum distance; the latter is what gets computed.
    """
    if not sigma > 0:
        raise ValueError("invalid normalization factor")
    dmin = min_distance_over_frames(scene, motion, layout)
    values = normalize_distance(dmin, sigma, squared=squared)
    # exp underflows to 0 only for absurd distances; keep the (0, 1] contract
    values = np.maximum(values, np.finfo(np.float64).tiny)
    return AffordanceMap(values, sigma)


def chunk_scene(scene: PointCloud, motion: MotionSequence, extent: float = 4.0) -> PointCloud:
    """Crop to the extent x extent square (x-y) centred on the motion's x-y bounding box."""
    if not extent > 0:
        raise ValueError("extent must be positive")
    xy = motion.joints[..., :2].reshape(-1, 2)
    center = 0.5 * (xy.min(0) + xy.max(0))
    half = extent / 2
    keep = (np.abs(scene.positions[:, :2] - center) <= half).all(1)
    if not keep.any():
        raise ValueError("motion outside scene")
    return scene.subset(np.flatnonzero(keep))


def farthest_point_indices(positions: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    pts = np.asarray(positions, dtype=np.float64)
    idx = np.empty(n, dtype=np.int64)
    dist = np.full(len(pts), np.inf)
    cur = start
    for i in range(n):
        idx[i] = cur
        dist = np.minimum(dist, ((pts - pts[cur]) ** 2).sum(1))
        cur = int(np.argmax(dist))
    return idx


def downsample(scene: PointCloud, n_points: int = 8192, rng_seed=0, mode: str = "uniform") -> PointCloud:
    """Resample to exactly ``n_points`` points.

    Uniform mode draws without replacement when the cloud is large enough and with
    replacement otherwise. ``mode="fps"`` uses farthest-point sampling from a random start.
    """
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(rng_seed)
    n = len(scene)
    if mode == "fps" and n >= n_points:
        idx = farthest_point_indices(scene.positions, n_points, start=int(rng.integers(n)))
    elif mode in ("uniform", "fps"):
        idx = rng.choice(n, n_points, replace=n < n_points)
    else:
        raise ValueError(f"unknown downsampling mode {mode!r}")
    return scene.subset(idx)


def z_rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_z(scene: PointCloud, motion: MotionSequence, angle: float):
    """Rotate scene and motion together about the vertical axis through the scene centroid."""
    if not np.isfinite(angle):
        raise ValueError("angle must be finite")
    rot = z_rotation_matrix(angle)
    pivot = np.zeros(3)
    pivot[:2] = scene.positions[:, :2].astype(np.float64).mean(0)
    pos = (scene.positions.astype(np.float64) - pivot) @ rot.T + pivot
    joints = (motion.joints.astype(np.float64) - pivot) @ rot.T + pivot
    new_scene = PointCloud(pos.astype(scene.positions.dtype), scene.colors.copy(), scene.object_ids.copy())
    new_motion = MotionSequence(joints.astype(motion.joints.dtype), motion.frame_rate)
    return new_scene, new_motion
