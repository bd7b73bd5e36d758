"""Joint layout of the simplified 22-joint body used throughout the package."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# z up, body facing +y, left side toward -x. Arms hang at the sides.
REST_POSITIONS = np.array([
    [0.00, 0.00, 0.93],
    [-0.09, 0.00, 0.85],
    [0.09, 0.00, 0.85],
    [0.00, 0.00, 1.04],
    [-0.10, 0.00, 0.47],
    [0.10, 0.00, 0.47],
    [0.00, 0.00, 1.17],
    [-0.10, -0.02, 0.08],
    [0.10, -0.02, 0.08],
    [0.00, 0.00, 1.23],
    [-0.10, 0.12, 0.03],
    [0.10, 0.12, 0.03],
    [0.00, 0.00, 1.45],
    [-0.08, 0.00, 1.37],
    [0.08, 0.00, 1.37],
    [0.00, 0.03, 1.60],
    [-0.18, 0.00, 1.38],
    [0.18, 0.00, 1.38],
    [-0.20, 0.00, 1.11],
    [0.20, 0.00, 1.11],
    [-0.21, 0.02, 0.86],
    [0.21, 0.02, 0.86],
])

DEFAULT_AFFORDANCE_JOINTS = ("pelvis", "left_wrist", "right_wrist", "left_foot", "right_foot", "neck")


@dataclass(frozen=True)
class SkeletonLayout:
    joint_names: tuple[str, ...] = JOINT_NAMES
    affordance_joints: tuple[int, ...] = field(
        default_factory=lambda: tuple(JOINT_NAMES.index(n) for n in DEFAULT_AFFORDANCE_JOINTS))
    pelvis_index: int = 0

    def __post_init__(self):
        n = len(self.joint_names)
        if len(set(self.affordance_joints)) != len(self.affordance_joints):
            raise ValueError("affordance joints must be distinct")
        if any(j < 0 or j >= n for j in self.affordance_joints):
            raise ValueError("affordance joint index out of range")
        if not 0 <= self.pelvis_index < n:
            raise ValueError("pelvis index out of range")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_affordance_joints(self) -> int:
        return len(self.affordance_joints)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    @property
    def affordance_pelvis_slot(self) -> int:
        """Column of the pelvis inside an affordance map."""
        return self.affordance_joints.index(self.pelvis_index)


DEFAULT_LAYOUT = SkeletonLayout()
