"""Forward kinematics of the simplified body and fitting it to joint sequences."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .geometry import MotionSequence
from .skeleton import PARENTS, REST_POSITIONS

log = logging.getLogger(__name__)

NUM_INNER = len(PARENTS) - 1


@dataclass
class BodyParams:
    trans: np.ndarray        # F x 3
    root_orient: np.ndarray  # F x 3 axis-angle
    joint_rots: np.ndarray   # F x K x 3 axis-angle, K = J - 1
    scale: float = 1.0

    def __post_init__(self):
        self.trans = np.asarray(self.trans, dtype=np.float64)
        self.root_orient = np.asarray(self.root_orient, dtype=np.float64)
        self.joint_rots = np.asarray(self.joint_rots, dtype=np.float64)
        f = len(self.trans)
        if self.root_orient.shape != (f, 3) or self.joint_rots.ndim != 3 or len(self.joint_rots) != f:
            raise ValueError("inconsistent body parameter shapes")
        if not (np.isfinite(self.root_orient).all() and np.isfinite(self.joint_rots).all()):
            raise ValueError("non-finite rotations")
        if not self.scale > 0:
            raise ValueError("bone scale must be positive")

    @classmethod
    def rest(cls, num_frames: int = 1, num_inner: int = NUM_INNER) -> "BodyParams":
        return cls(np.zeros((num_frames, 3)), np.zeros((num_frames, 3)),
                   np.zeros((num_frames, num_inner, 3)), 1.0)

    @property
    def num_frames(self) -> int:
        return len(self.trans)


@dataclass
class SkeletonTemplate:
    rest_positions: np.ndarray = field(default_factory=lambda: REST_POSITIONS.copy())
    parents: tuple = PARENTS

    @property
    def offsets(self) -> np.ndarray:
        off = self.rest_positions.copy()
        for j, p in enumerate(self.parents):
            if p >= 0:
                off[j] = self.rest_positions[j] - self.rest_positions[p]
        return off


DEFAULT_TEMPLATE = SkeletonTemplate()


def axis_angle_to_matrix(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, smooth through the zero rotation."""
    theta2 = (v * v).sum(-1, keepdim=True)[..., None]
    small = theta2 < 1e-8
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / torch.where(small, torch.ones_like(theta2), theta2))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(*v.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand_as(k)
    return eye + a * k + b * (k @ k)


def fk_torch(trans: torch.Tensor, root_orient: torch.Tensor, joint_rots: torch.Tensor,
             scale: torch.Tensor | float, template: SkeletonTemplate = DEFAULT_TEMPLATE) -> torch.Tensor:
    """Batched FK. trans/root_orient: (..., 3); joint_rots: (..., K, 3). Returns (..., J, 3)."""
    dtype = trans.dtype
    offsets = torch.as_tensor(template.offsets, dtype=dtype, device=trans.device)
    root_pos = torch.as_tensor(template.rest_positions[0], dtype=dtype, device=trans.device)
    glob_rot = [axis_angle_to_matrix(root_orient)]
    local = axis_angle_to_matrix(joint_rots)
    pos = [trans + root_pos]
    for j in range(1, len(template.parents)):
        p = template.parents[j]
        bone = scale * offsets[j]
        pos.append(pos[p] + (glob_rot[p] @ bone[:, None])[..., 0])
        glob_rot.append(glob_rot[p] @ local[..., j - 1, :, :])
    return torch.stack(pos, -2)


def forward_kinematics(params: BodyParams, template: SkeletonTemplate = DEFAULT_TEMPLATE) -> np.ndarray:
    out = fk_torch(torch.from_numpy(params.trans), torch.from_numpy(params.root_orient),
                   torch.from_numpy(params.joint_rots), float(params.scale), template)
    return out.numpy()


def wrap_axis_angle(v: np.ndarray) -> np.ndarray:
    """Equivalent axis-angle vectors with magnitude <= pi."""
    v = np.array(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    ratio = np.divide(wrapped, theta, out=np.ones_like(theta), where=theta > 0)
    return v * ratio


def fit_objective(trans, root_orient, joint_rots, log_scale, target, smooth_weight=1e-3,
                  template: SkeletonTemplate = DEFAULT_TEMPLATE):
    """MSE between FK joints and the target plus a first-difference smoothness penalty."""
    joints = fk_torch(trans, root_orient, joint_rots, torch.exp(log_scale), template)
    loss = ((joints - target) ** 2).mean()
    if smooth_weight and len(trans) > 1:
        pose = torch.cat([trans, root_orient, joint_rots.flatten(1)], 1)
        loss = loss + smooth_weight * ((pose[1:] - pose[:-1]) ** 2).mean()
    return loss


@dataclass
class FitConfig:
    max_iters: int = 300
    smooth_weight: float = 1e-3
    tol: float = 1e-12
    rel_change: float = 1e-9
    history_size: int = 20
    inner_iters: int = 20


@dataclass
class FitResult:
    params: BodyParams
    rmse: float
    per_joint_rmse: np.ndarray
    converged: bool
    iterations: int
    loss_history: list


def initial_params(target: np.ndarray, template: SkeletonTemplate = DEFAULT_TEMPLATE) -> BodyParams:
    """Rest pose with the root moved onto each frame's pelvis and yawed to the hip line."""
    f = len(target)
    rest = BodyParams.rest(f, len(template.parents) - 1)
    rest.trans = target[:, 0] - template.rest_positions[0]
    hips = target[:, 2] - target[:, 1]  # left -> right, rest direction +x
    yaw = np.arctan2(hips[:, 1], hips[:, 0])
    rest.root_orient = np.stack([np.zeros(f), np.zeros(f), yaw], 1)
    return rest


def fit_body(joints: MotionSequence | np.ndarray, init: str = "rest", params: BodyParams | None = None,
             config: FitConfig | None = None, template: SkeletonTemplate = DEFAULT_TEMPLATE,
             initializer: Callable[[np.ndarray], BodyParams] | None = None) -> FitResult:
    """Fit body parameters to a joint sequence with L-BFGS under a strong-Wolfe line search.

    ``init`` is ``"rest"`` (rest pose aligned to the pelvis track), ``"provided"`` (uses
    ``params``) or ``"hook"`` (calls ``initializer`` on the target array).
    """
    config = config or FitConfig()
    target_np = joints.joints if isinstance(joints, MotionSequence) else np.asarray(joints)
    if not np.isfinite(target_np).all():
        raise ValueError("non-finite target joints")
    target = torch.from_numpy(np.asarray(target_np, dtype=np.float64))
    if init == "rest":
        start = initial_params(target_np, template)
    elif init == "provided":
        if params is None:
            raise ValueError("init='provided' needs params")
        start = params
    elif init == "hook":
        if initializer is None:
            raise ValueError("init='hook' needs an initializer")
        start = initializer(target_np)
    else:
        raise ValueError(f"unknown init {init!r}")

    variables = [torch.tensor(start.trans, requires_grad=True),
                 torch.tensor(start.root_orient, requires_grad=True),
                 torch.tensor(start.joint_rots, requires_grad=True),
                 torch.tensor(np.log(start.scale), dtype=torch.float64, requires_grad=True)]
    opt = torch.optim.LBFGS(variables, lr=1.0, max_iter=config.inner_iters, history_size=config.history_size,
                            line_search_fn="strong_wolfe", tolerance_grad=1e-12, tolerance_change=1e-15)

    def closure():
        opt.zero_grad()
        loss = fit_objective(*variables, target, config.smooth_weight, template)
        loss.backward()
        return loss

    with torch.no_grad():
        history = [float(fit_objective(*variables, target, config.smooth_weight, template))]
    converged = history[0] <= config.tol
    iterations = 0
    while not converged and iterations < config.max_iters:
        opt.step(closure)
        iterations = opt.state[opt._params[0]]["n_iter"]
        with torch.no_grad():
            history.append(float(fit_objective(*variables, target, config.smooth_weight, template)))
        stalled = history[-2] - history[-1] <= config.rel_change * history[-2]
        converged = history[-1] <= config.tol or stalled
    if not converged:
        log.warning("body fit did not converge within %d iterations", config.max_iters)

    trans, root, rots, log_scale = (v.detach().numpy() for v in variables)
    fitted = BodyParams(trans, wrap_axis_angle(root), wrap_axis_angle(rots), float(np.exp(log_scale)))
    err = forward_kinematics(fitted, template) - target_np
    per_joint = np.sqrt((err ** 2).sum(-1).mean(0))
    rmse = float(np.sqrt((err ** 2).sum(-1).mean()))
    return FitResult(fitted, rmse, per_joint, bool(converged), int(iterations), history)
