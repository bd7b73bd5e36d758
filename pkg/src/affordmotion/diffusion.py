"""Gaussian diffusion with clean-sample (x0) prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Protocol

import numpy as np
import torch


class DenoiserDiverged(RuntimeError):
    pass


class Denoiser(Protocol):
    def __call__(self, x_t: torch.Tensor, t: torch.Tensor, cond: Any) -> torch.Tensor: ...


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    kind: str = "linear"
    posterior_variance_kind: str = "posterior"  # or "beta"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("betas must be a non-empty vector")
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        if self.posterior_variance_kind == "beta":
            return self.betas.copy()
        return self.betas * (1 - self.alpha_bars_prev) / (1 - self.alpha_bars)

    @property
    def posterior_mean_coefs(self):
        ab, abp = self.alpha_bars, self.alpha_bars_prev
        c0 = self.betas * np.sqrt(abp) / (1 - ab)
        ct = (1 - abp) * np.sqrt(self.alphas) / (1 - ab)
        return c0, ct

    def to_config(self) -> dict:
        return {"T": self.T, "kind": self.kind, "posterior_variance_kind": self.posterior_variance_kind}


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02,
                  posterior_variance_kind: str = "posterior") -> DiffusionSchedule:
    if T <= 0:
        raise ValueError("number of diffusion steps must be positive")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.array([min(1 - f(i + 1) / f(i), 0.999) for i in range(T)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas, kind, posterior_variance_kind)


def schedule_from_config(cfg: dict) -> DiffusionSchedule:
    return make_schedule(int(cfg["T"]), cfg.get("kind", "linear"),
                         posterior_variance_kind=cfg.get("posterior_variance_kind", "posterior"))


def _gather(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t]
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def _as_steps(t, batch: int, device) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long, device=device)
    return t.expand(batch) if t.ndim == 0 else t


def forward_sample(x0: torch.Tensor, t, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; the leading axis of x0 is the batch."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != sample shape {tuple(x0.shape)}")
    t = _as_steps(t, x0.shape[0], x0.device)
    if (t < 0).any() or (t >= schedule.T).any():
        raise ValueError("diffusion step out of range")
    ab = _gather(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def posterior(x_t: torch.Tensor, t, x0_hat: torch.Tensor, schedule: DiffusionSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x0)."""
    t = _as_steps(t, x_t.shape[0], x_t.device)
    c0, ct = schedule.posterior_mean_coefs
    mean = _gather(c0, t, x_t) * x0_hat + _gather(ct, t, x_t) * x_t
    return mean, _gather(schedule.posterior_variance, t, x_t)


def reverse_step(x_t: torch.Tensor, t, x0_hat: torch.Tensor, schedule: DiffusionSchedule,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    if not torch.isfinite(x0_hat).all():
        raise DenoiserDiverged("denoiser diverged")
    t = _as_steps(t, x_t.shape[0], x_t.device)
    mean, var = posterior(x_t, t, x0_hat, schedule)
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=x_t.device)
    nonzero = (t > 0).to(x_t.dtype).reshape(-1, *([1] * (x_t.ndim - 1)))
    return mean + nonzero * var.sqrt() * noise


def training_loss(denoiser: Denoiser, x0: torch.Tensor, cond: Any, schedule: DiffusionSchedule,
                  generator: torch.Generator | None = None, t: torch.Tensor | None = None,
                  noise: torch.Tensor | None = None, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between x0 and the denoiser's estimate from a forward-noised x0."""
    if not torch.isfinite(x0).all():
        raise ValueError("non-finite training sample")
    b = x0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.T, (b,), generator=generator, device=x0.device)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    x_t = forward_sample(x0, t, noise, schedule)
    err = (denoiser(x_t, t, cond) - x0) ** 2
    if mask is None:
        return err.mean()
    m = mask.to(err.dtype).reshape(*mask.shape, *([1] * (err.ndim - mask.ndim))).expand_as(err)
    return (err * m).sum() / m.sum().clamp_min(1)


@torch.no_grad()
def sample_loop(denoiser: Denoiser, cond: Any, shape, schedule: DiffusionSchedule,
                generator: torch.Generator | None = None, clip: Callable | None = None,
                dtype=torch.float32, device="cpu", return_trajectory: bool = False):
    """Ancestral sampling from pure noise at step T-1 down to 0."""
    x = torch.randn(tuple(shape), generator=generator, dtype=dtype, device=device)
    traj = []
    for step in reversed(range(schedule.T)):
        t = torch.full((x.shape[0],), step, dtype=torch.long, device=device)
        x0_hat = denoiser(x, t, cond)
        if x0_hat.shape != x.shape:
            raise ValueError(f"denoiser changed shape {tuple(x.shape)} -> {tuple(x0_hat.shape)}")
        if clip is not None:
            x0_hat = clip(x0_hat)
        x = reverse_step(x, t, x0_hat, schedule, generator)
        if return_trajectory:
            traj.append(x)
    return (x, traj) if return_trajectory else x


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer diffusion steps (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], -1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], -1)
    return emb
