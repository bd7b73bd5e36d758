"""Affordance-to-motion diffusion and the two-stage generation pipeline.

The denoiser sees a sequence ``[language, step, motion_1..F]`` of width-``d_model``
tokens. The decoder variant alternates self-attention with cross-attention into the
per-point affordance features; the encoder variant instead appends a small set of
farthest-point-pooled affordance tokens and runs plain self-attention. The one-stage
baseline has the same shape but reads scene colours instead of an affordance map.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import diffusion as dfn
from .adm import TrainingDiverged, random_z_rotation, sample_affordance
from .checkpoint import Checkpoint
from .geometry import MotionSequence, PointCloud
from .layers import (PointUNet, SinusoidalPositions, StepEmbedding, farthest_point_sample, gather,
                     transformer_decoder, transformer_encoder)
from .text import TEXT_DIM

log = logging.getLogger(__name__)

VARIANTS = ("decoder", "encoder", "one_stage")


@dataclass
class AMDMConfig:
    variant: str = "decoder"
    num_joints: int = 22
    num_affordance_joints: int = 6
    text_dim: int = TEXT_DIM
    d_model: int = 512
    heads: int = 8
    layers: int = 4
    step_dim: int = 128
    feat_dim: int = 512
    unet_dims: tuple = (32, 64, 128, 256)
    k: int = 16
    cond_tokens: int = 16
    max_frames: int = 120
    multi_level: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.unet_dims = tuple(self.unet_dims)

    @property
    def motion_dim(self) -> int:
        return 3 * self.num_joints


@dataclass
class AffordanceFeatureSet:
    levels: list        # finest first, each (B, N_l, D_a)
    coordinates: list   # matching (B, N_l, 3)

    @property
    def finest(self) -> torch.Tensor:
        return self.levels[0]


class AffordanceEncoder(nn.Module):
    """Point U-Net over (coords, per-point channels) projected to ``feat_dim``.

    For the affordance variants the channels are the J_a affordance values; the
    one-stage baseline feeds RGB instead.
    """

    def __init__(self, in_channels: int, cfg: AMDMConfig):
        super().__init__()
        self.in_channels = in_channels
        self.unet = PointUNet(3 + in_channels, cfg.unet_dims, (1, 4, 4, 4), cfg.k)
        dims = cfg.unet_dims if cfg.multi_level else cfg.unet_dims[:1]
        self.heads = nn.ModuleList([nn.Linear(d, cfg.feat_dim) for d in dims])

    def forward(self, xyz, channels, topology=None) -> AffordanceFeatureSet:
        if channels.shape[:2] != xyz.shape[:2] or channels.shape[-1] != self.in_channels:
            raise ValueError(f"affordance of shape {tuple(channels.shape)} does not match "
                             f"{xyz.shape[1]} scene points x {self.in_channels} channels")
        levels, lxyz = self.unet(xyz, torch.cat([xyz, channels], -1), topology=topology)
        feats = [h(x) for h, x in zip(self.heads, levels)]
        return AffordanceFeatureSet(feats, lxyz[:len(feats)])


def affordance_encode(xyz: torch.Tensor, affordance: torch.Tensor, params: AffordanceEncoder,
                      topology=None) -> AffordanceFeatureSet:
    return params(xyz, affordance, topology)


class MotionDenoiser(nn.Module):
    def __init__(self, cfg: AMDMConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.motion_in = nn.Linear(cfg.motion_dim, d)
        self.positions = SinusoidalPositions(d, cfg.max_frames)
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.step = StepEmbedding(cfg.step_dim, d)
        self.cond_proj = nn.Linear(cfg.feat_dim, d)
        if cfg.variant == "encoder":
            self.cond_type = nn.Parameter(torch.zeros(d))
            self.backbone = transformer_encoder(d, cfg.heads, cfg.layers, cfg.dropout)
        else:
            self.backbone = transformer_decoder(d, cfg.heads, cfg.layers, cfg.dropout)
        self.out = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, cfg.motion_dim))

    def condition_tokens(self, feats: AffordanceFeatureSet):
        if self.cfg.variant == "encoder":
            f, xyz = feats.finest, feats.coordinates[0]
            m = min(self.cfg.cond_tokens, f.shape[1])
            return self.cond_proj(gather(f, farthest_point_sample(xyz, m))) + self.cond_type
        return self.cond_proj(torch.cat(feats.levels, 1))

    def forward(self, x_t, t, feats: AffordanceFeatureSet | None, text, frame_mask=None,
                drop_condition: bool = False):
        b, f, _ = x_t.shape
        motion = self.positions(self.motion_in(x_t))
        head = torch.stack([self.text_proj(text), self.step(t, x_t.dtype)], 1)
        seq = torch.cat([head, motion], 1)
        pad = None
        if frame_mask is not None:
            pad = torch.cat([torch.zeros(b, 2, dtype=torch.bool, device=x_t.device), ~frame_mask], 1)
        if self.cfg.variant == "encoder":
            if not drop_condition:
                cond = self.condition_tokens(feats)
                seq = torch.cat([head, cond, motion], 1)
                if pad is not None:
                    pad = torch.cat([pad[:, :2], torch.zeros(b, cond.shape[1], dtype=torch.bool,
                                                             device=x_t.device), pad[:, 2:]], 1)
            h = self.backbone(seq, src_key_padding_mask=pad)
        else:
            memory = self.condition_tokens(feats)
            h = self.backbone(seq, memory, tgt_key_padding_mask=pad)
        return self.out(h[:, -f:])

    def zero_cross_attention(self):
        """Silence every cross-attention output projection (decoder and one-stage variants)."""
        with torch.no_grad():
            for layer in self.backbone.layers:
                layer.multihead_attn.out_proj.weight.zero_()
                layer.multihead_attn.out_proj.bias.zero_()


class AMDM(nn.Module):
    """Condition encoder + motion denoiser operating on normalized motions (B, F, 3J)."""

    def __init__(self, cfg: AMDMConfig):
        super().__init__()
        self.cfg = cfg
        channels = 3 if cfg.variant == "one_stage" else cfg.num_affordance_joints
        self.encoder = AffordanceEncoder(channels, cfg)
        self.denoiser = MotionDenoiser(cfg)
        self.register_buffer("mean", torch.zeros(cfg.motion_dim))
        self.register_buffer("std", torch.ones(cfg.motion_dim))

    def set_normalization(self, motions: torch.Tensor, mask: torch.Tensor | None = None, floor: float = 1e-2):
        flat = motions.reshape(-1, self.cfg.motion_dim)
        if mask is not None:
            flat = flat[mask.reshape(-1)]
        self.mean.copy_(flat.mean(0))
        self.std.copy_(flat.std(0).clamp_min(floor))

    def normalize(self, joints):
        return (joints.reshape(*joints.shape[:2], -1) - self.mean) / self.std

    def denormalize(self, x):
        return (x * self.std + self.mean).reshape(*x.shape[:2], self.cfg.num_joints, 3)

    def topology(self, xyz, chunk: int | None = 64):
        return self.encoder.unet.topology(xyz, chunk)

    def encode_condition(self, xyz, affordance=None, colors=None, text=None, frame_mask=None,
                         topology=None) -> dict:
        channels = colors if self.cfg.variant == "one_stage" else affordance
        return {"feats": self.encoder(xyz, channels, topology), "text": text, "frame_mask": frame_mask}

    def forward(self, x_t, t, cond):
        out = self.denoiser(x_t, t, cond["feats"], cond["text"], cond.get("frame_mask"),
                            cond.get("drop_condition", False))
        if not torch.isfinite(out).all():
            raise dfn.DenoiserDiverged("denoiser diverged")
        return out


def _variant_denoise(model: AMDM, x_t, t, feats, text, frame_mask=None):
    return model.denoiser(x_t, t, feats, text, frame_mask)


def amdm_decoder_denoise(x_t, t, affordance_features, text, params: AMDM, frame_mask=None):
    return _variant_denoise(params, x_t, t, affordance_features, text, frame_mask)


def amdm_encoder_denoise(x_t, t, affordance_features, text, params: AMDM, frame_mask=None):
    return _variant_denoise(params, x_t, t, affordance_features, text, frame_mask)


def one_stage_denoise(x_t, t, scene_features, text, params: AMDM, frame_mask=None):
    return _variant_denoise(params, x_t, t, scene_features, text, frame_mask)


def pad_motions(motions: list, max_frames: int):
    """Stack variable-length (F, J, 3) arrays, repeating the last frame as padding."""
    out = np.zeros((len(motions), max_frames) + motions[0].shape[1:], dtype=np.float32)
    mask = np.zeros((len(motions), max_frames), dtype=bool)
    for i, m in enumerate(motions):
        f = len(m)
        if f > max_frames:
            raise ValueError(f"motion of {f} frames exceeds the configured maximum {max_frames}")
        out[i, :f] = m
        out[i, f:] = m[-1]
        mask[i, :f] = True
    return out, mask


class AffordanceProvider:
    """Serves ADM-sampled affordance maps for training samples, counting every request.

    Maps are drawn once per sample (a pool of ``pool_size`` draws) the first time the
    pool is built; each training-time replacement then picks one pool entry at random.
    """

    def __init__(self, adm_ckpt: Checkpoint, dataset: list, pool_size: int = 1, seed: int = 0,
                 batch_size: int = 64):
        self.adm_ckpt = adm_ckpt
        self.dataset = dataset
        self.pool_size = pool_size
        self.seed = seed
        self.batch_size = batch_size
        self.calls = 0
        self._pool: np.ndarray | None = None

    def build(self):
        gen = torch.Generator().manual_seed(self.seed)
        pool = []
        for _ in range(self.pool_size):
            draws = []
            for s in range(0, len(self.dataset), self.batch_size):
                chunk = self.dataset[s:s + self.batch_size]
                maps = sample_affordance(self.adm_ckpt, [x.scene for x in chunk], [x.prompt for x in chunk],
                                         generator=gen)
                draws.extend(m.values for m in maps)
            pool.append(np.stack(draws))
        self._pool = np.stack(pool, 1).astype(np.float32)  # S x P x N x Ja

    def __call__(self, indices, generator: torch.Generator) -> torch.Tensor:
        if self._pool is None:
            self.build()
        idx = torch.as_tensor(indices)
        self.calls += len(idx)
        pick = torch.randint(0, self.pool_size, (len(idx),), generator=generator)
        return torch.as_tensor(self._pool[idx.numpy(), pick.numpy()])


@dataclass
class AMDMTrainConfig:
    variant: str = "decoder"
    T: int = 1000
    schedule: str = "linear"
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 1000
    augment: bool = True
    p_replace: float = 0.0
    pool_size: int = 1
    seed: int = 0
    log_every: int = 50
    model: dict = field(default_factory=dict)


def _stack(dataset, max_frames):
    xyz = torch.as_tensor(np.stack([s.scene.positions for s in dataset]), dtype=torch.float32)
    rgb = torch.as_tensor(np.stack([s.scene.colors for s in dataset]), dtype=torch.float32)
    aff = torch.as_tensor(np.stack([s.affordance.values for s in dataset]), dtype=torch.float32)
    text = torch.as_tensor(np.stack([s.prompt.embedding for s in dataset]), dtype=torch.float32)
    motions, mask = pad_motions([s.motion.joints for s in dataset], max_frames)
    return xyz, rgb, aff, text, torch.as_tensor(motions), torch.as_tensor(mask)


def train_amdm(dataset: list, config: AMDMTrainConfig | None = None, adm_ckpt: Checkpoint | None = None,
               model_config: AMDMConfig | None = None, provider: AffordanceProvider | None = None,
               progress=None) -> Checkpoint:
    """Fit the motion denoiser; with ``p_replace > 0`` part of the GT maps are swapped for ADM samples."""
    config = config or AMDMTrainConfig()
    if not dataset:
        raise ValueError("empty training set")
    if not 0.0 <= config.p_replace <= 1.0:
        raise ValueError("p_replace must lie in [0, 1]")
    if config.p_replace > 0 and provider is None:
        if adm_ckpt is None:
            raise ValueError("p_replace > 0 requires an ADM checkpoint")
        provider = AffordanceProvider(adm_ckpt, dataset, config.pool_size, config.seed)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model_config = model_config or AMDMConfig(variant=config.variant, **config.model)
    model = AMDM(model_config)
    xyz_all, rgb_all, aff_all, text_all, mot_all, mask_all = _stack(dataset, model_config.max_frames)
    model.set_normalization(mot_all, mask_all)
    topo_all = model.topology(xyz_all)
    schedule = dfn.make_schedule(config.T, config.schedule)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    use_mask = not bool(mask_all.all())
    losses, replaced = [], 0
    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(dataset), (min(config.batch_size, len(dataset)),), generator=gen)
        xyz, joints, aff = xyz_all[idx], mot_all[idx], aff_all[idx]
        if config.p_replace > 0 and model_config.variant != "one_stage":
            swap = torch.rand(len(idx), generator=gen) < config.p_replace
            if swap.any():
                aff = aff.clone()
                aff[swap] = provider(idx[swap], gen)
                replaced += int(swap.sum())
        if config.augment:
            xyz, joints = random_z_rotation(xyz, gen, joints)
        mask = mask_all[idx] if use_mask else None
        cond = model.encode_condition(xyz, aff, rgb_all[idx], text_all[idx], mask, topo_all.select(idx))
        loss = dfn.training_loss(model, model.normalize(joints), cond, schedule, gen, mask=mask)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"AMDM loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if progress is not None and (step % config.log_every == 0 or step == config.steps - 1):
            progress(step, float(np.mean(losses[-config.log_every:])))
    model.eval()
    extra = {"train": asdict(config), "losses": losses, "replaced": replaced,
             "adm_calls": 0 if provider is None else provider.calls}
    ckpt = Checkpoint("amdm", asdict(model_config), schedule, model, extra)
    ckpt.provider = provider
    return ckpt


def load_amdm(ckpt: Checkpoint) -> AMDM:
    model = AMDM(AMDMConfig(**ckpt.model_config))
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def _model(ckpt: Checkpoint) -> AMDM:
    if ckpt.model is None:
        ckpt.model = load_amdm(ckpt)
    ckpt.model.eval()
    return ckpt.model


def sample_motion(amdm_ckpt: Checkpoint, scenes: list, texts: list, affordances: list | None = None,
                  n_frames: int | None = None, generator: torch.Generator | None = None, seed: int = 0):
    """Stage two only: motions (B, F, J, 3) for given scenes, prompts and affordance maps."""
    model = _model(amdm_ckpt)
    cfg = model.cfg
    f = n_frames or cfg.max_frames
    xyz = torch.as_tensor(np.stack([s.positions for s in scenes]), dtype=torch.float32)
    rgb = torch.as_tensor(np.stack([s.colors for s in scenes]), dtype=torch.float32)
    text = torch.as_tensor(np.stack([getattr(t, "embedding", t) for t in texts]), dtype=torch.float32)
    aff = None
    if cfg.variant != "one_stage":
        if affordances is None:
            raise ValueError("affordance maps required for this variant")
        aff = torch.as_tensor(np.stack([getattr(a, "values", a) for a in affordances]), dtype=torch.float32)
    gen = generator or torch.Generator().manual_seed(seed)
    with torch.no_grad():
        cond = model.encode_condition(xyz, aff, rgb, text)
        x = dfn.sample_loop(model, cond, (len(scenes), f, cfg.motion_dim), amdm_ckpt.schedule, gen)
    return model.denormalize(x).numpy()


def generate_motions(adm_ckpt: Checkpoint | None, amdm_ckpt: Checkpoint, scenes: list, texts: list,
                     seed: int = 0, batch_size: int = 64, return_affordance: bool = False):
    """Two-stage pipeline over a batch of scenes: sample affordance maps, then motions."""
    gen = torch.Generator().manual_seed(seed)
    motions, maps = [], []
    one_stage = _model(amdm_ckpt).cfg.variant == "one_stage"
    if not one_stage and adm_ckpt is None:
        raise ValueError("two-stage generation needs an ADM checkpoint")
    for s in range(0, len(scenes), batch_size):
        sc, tx = scenes[s:s + batch_size], texts[s:s + batch_size]
        aff = None if one_stage else sample_affordance(adm_ckpt, sc, tx, generator=gen)
        motions.extend(sample_motion(amdm_ckpt, sc, tx, aff, generator=gen))
        if aff is not None:
            maps.extend(aff)
    out = [MotionSequence(m) for m in motions]
    return (out, maps) if return_affordance else out


def generate_motion(adm_ckpt: Checkpoint | None, amdm_ckpt: Checkpoint, scene: PointCloud, text,
                    seed: int = 0) -> MotionSequence:
    return generate_motions(adm_ckpt, amdm_ckpt, [scene], [text], seed)[0]
