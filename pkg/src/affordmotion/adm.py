"""Affordance diffusion: denoisers that predict clean per-point affordance maps.

Three interchangeable backbones share one condition interface: a Perceiver
(encode / process / decode around two latent tokens), a PointNet-style MLP, and a
point-transformer U-Net with language fusion on its skip connections.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import diffusion as dfn
from .checkpoint import Checkpoint
from .geometry import AffordanceMap, PointCloud
from .layers import (CrossAttentionBlock, PointTransformerBlock, PointUNet, StepEmbedding, Topology,
                     build_topology, knn, mlp, transformer_encoder)
from .text import TEXT_DIM

log = logging.getLogger(__name__)

BACKBONES = ("perceiver", "mlp", "point_transformer")
MAP_FLOOR = 1e-4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ADMConfig:
    backbone: str = "perceiver"
    num_affordance_joints: int = 6
    text_dim: int = TEXT_DIM
    point_feat_dim: int = 32
    d_model: int = 512
    step_dim: int = 128
    heads: int = 8
    process_layers: int = 4
    mlp_hidden: int = 256
    ptv_dims: tuple = (32, 64, 128, 256)
    k: int = 16
    use_colors: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        self.ptv_dims = tuple(self.ptv_dims)


@dataclass
class PointFeatureSet:
    features: np.ndarray     # N x D_p
    coordinates: np.ndarray  # N x 3


class PointFeatureEncoder(nn.Module):
    """Small trainable per-point encoder over xyz + rgb (one local attention block)."""

    def __init__(self, out_dim=32, k=16):
        super().__init__()
        self.k = k
        self.stem = nn.Linear(6, out_dim)
        self.block = PointTransformerBlock(out_dim)

    def forward(self, xyz, colors, nbr=None):
        x = self.stem(torch.cat([xyz, colors], -1))
        return self.block(x, xyz, knn(xyz, xyz, self.k) if nbr is None else nbr)


def extract_point_features(scene: PointCloud, encoder: PointFeatureEncoder) -> PointFeatureSet:
    p = next(encoder.parameters())
    xyz = torch.as_tensor(scene.positions, dtype=p.dtype)[None]
    rgb = torch.as_tensor(scene.colors, dtype=p.dtype)[None]
    with torch.no_grad():
        feats = encoder(xyz, rgb)[0].numpy()
    return PointFeatureSet(feats, np.asarray(scene.positions))


class PerceiverBackbone(nn.Module):
    def __init__(self, cfg: ADMConfig):
        super().__init__()
        d = cfg.d_model
        in_dim = cfg.num_affordance_joints + cfg.point_feat_dim + 3 + (3 if cfg.use_colors else 0)
        self.use_colors = cfg.use_colors
        self.input_proj = nn.Linear(in_dim, d)
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.step = StepEmbedding(cfg.step_dim, d)
        self.encode = CrossAttentionBlock(d, cfg.heads, cfg.dropout)
        self.process = transformer_encoder(d, cfg.heads, cfg.process_layers, cfg.dropout)
        self.decode = CrossAttentionBlock(d, cfg.heads, cfg.dropout)
        self.head = nn.Linear(d, cfg.num_affordance_joints)

    def forward(self, c_t, t, point_features, xyz, text, colors=None):
        parts = [c_t, point_features, xyz] + ([colors] if self.use_colors else [])
        inputs = self.input_proj(torch.cat(parts, -1))
        latents = torch.stack([self.text_proj(text), self.step(t, c_t.dtype)], 1)
        latents = self.encode(latents, inputs)
        latents = self.process(latents)
        return self.head(self.decode(inputs, latents))


class SceneAffordMLPBlock(nn.Module):
    """Shared MLP, max-pooled global feature, concatenation, second shared MLP."""

    def __init__(self, in_dim, hidden):
        super().__init__()
        self.local = mlp(in_dim, hidden, hidden)
        self.mix = mlp(2 * hidden, hidden, hidden)
        self.global_feature = None

    def forward(self, x):
        h = self.local(x)
        g = h.max(1, keepdim=True).values
        self.global_feature = g
        return self.mix(torch.cat([h, g.expand_as(h)], -1))


class MLPBackbone(nn.Module):
    def __init__(self, cfg: ADMConfig):
        super().__init__()
        self.use_colors = cfg.use_colors
        self.step = StepEmbedding(cfg.step_dim, cfg.step_dim)
        in_dim = (cfg.point_feat_dim + cfg.text_dim + cfg.step_dim + cfg.num_affordance_joints + 3
                  + (3 if cfg.use_colors else 0))
        self.blocks = nn.ModuleList([SceneAffordMLPBlock(in_dim, cfg.mlp_hidden),
                                     SceneAffordMLPBlock(cfg.mlp_hidden, cfg.mlp_hidden)])
        self.head = nn.Linear(cfg.mlp_hidden, cfg.num_affordance_joints)

    def forward(self, c_t, t, point_features, xyz, text, colors=None):
        n = c_t.shape[1]
        glob = torch.cat([text, self.step(t, c_t.dtype)], -1)[:, None].expand(-1, n, -1)
        parts = [point_features, glob, c_t, xyz] + ([colors] if self.use_colors else [])
        x = torch.cat(parts, -1)
        for block in self.blocks:
            x = block(x)
        return self.head(x)


class PointTransformerBackbone(nn.Module):
    """U-Net over the raw scene; language and step are fused at every skip connection."""

    def __init__(self, cfg: ADMConfig):
        super().__init__()
        cond = cfg.d_model
        self.text_proj = nn.Linear(cfg.text_dim, cond)
        self.step = StepEmbedding(cfg.step_dim, cond)
        self.unet = PointUNet(cfg.num_affordance_joints + 6, cfg.ptv_dims, (1, 4, 4, 4), cfg.k, cond_dim=cond)
        self.head = nn.Linear(cfg.ptv_dims[0], cfg.num_affordance_joints)

    @property
    def last_cardinalities(self):
        return self.unet.last_cardinalities

    def forward(self, c_t, t, xyz, colors, text, topology=None):
        if xyz.shape[1] % 64:
            raise ValueError(f"point count {xyz.shape[1]} must be divisible by 64")
        cond = self.text_proj(text) + self.step(t, c_t.dtype)
        levels, _ = self.unet(xyz, torch.cat([c_t, xyz, colors], -1), cond, topology)
        return self.head(levels[0])


def adm_perceiver_denoise(c_t, t, point_features, text, params: PerceiverBackbone, xyz=None, colors=None):
    return params(c_t, t, point_features, xyz, text, colors)


def adm_mlp_denoise(c_t, t, point_features, text, params: MLPBackbone, xyz=None, colors=None):
    return params(c_t, t, point_features, xyz, text, colors)


def adm_ptv_denoise(c_t, t, xyz, colors, text, params: PointTransformerBackbone, topology=None):
    return params(c_t, t, xyz, colors, text, topology)


class ADM(nn.Module):
    """Point encoder + backbone, usable as a ``Denoiser`` once a condition is encoded."""

    def __init__(self, cfg: ADMConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "point_transformer":
            self.point_encoder = None
            self.backbone = PointTransformerBackbone(cfg)
        else:
            self.point_encoder = PointFeatureEncoder(cfg.point_feat_dim, cfg.k)
            self.backbone = PerceiverBackbone(cfg) if cfg.backbone == "perceiver" else MLPBackbone(cfg)

    def topology(self, xyz, chunk: int | None = 64) -> Topology:
        """Neighbour structure for ``xyz``; reusable across rotations of the same scenes."""
        if self.point_encoder is None:
            return self.backbone.unet.topology(xyz, chunk)
        return build_topology(xyz, (1,), self.cfg.k, chunk)

    def encode_condition(self, xyz, colors, text, topology: Topology | None = None) -> dict:
        cond = {"xyz": xyz, "colors": colors, "text": text, "topology": topology}
        if self.point_encoder is not None:
            nbr = None if topology is None else topology.self_nbrs[0]
            cond["features"] = self.point_encoder(xyz, colors, nbr)
        return cond

    def forward(self, c_t, t, cond):
        if self.point_encoder is None:
            out = self.backbone(c_t, t, cond["xyz"], cond["colors"], cond["text"], cond.get("topology"))
        else:
            out = self.backbone(c_t, t, cond["features"], cond["xyz"], cond["text"], cond["colors"])
        if not torch.isfinite(out).all():
            raise dfn.DenoiserDiverged("denoiser diverged")
        return out


@dataclass
class ADMTrainConfig:
    backbone: str = "perceiver"
    T: int = 500
    schedule: str = "linear"
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 1000
    augment: bool = True
    seed: int = 0
    log_every: int = 50
    model: dict = field(default_factory=dict)


def _stack_samples(samples, dtype=torch.float32):
    xyz = torch.as_tensor(np.stack([s.scene.positions for s in samples]), dtype=dtype)
    rgb = torch.as_tensor(np.stack([s.scene.colors for s in samples]), dtype=dtype)
    aff = torch.as_tensor(np.stack([s.affordance.values for s in samples]), dtype=dtype)
    text = torch.as_tensor(np.stack([s.prompt.embedding for s in samples]), dtype=dtype)
    return xyz, rgb, aff, text


def random_z_rotation(xyz: torch.Tensor, generator: torch.Generator, extra: torch.Tensor | None = None):
    """Rotate each batch item about the vertical axis through its scene centroid.

    ``extra`` (B, ..., 3) is rotated with the same transform (e.g. motion joints).
    """
    b = xyz.shape[0]
    ang = torch.rand(b, generator=generator, dtype=xyz.dtype) * 2 * np.pi
    c, s = torch.cos(ang), torch.sin(ang)
    zero, one = torch.zeros_like(c), torch.ones_like(c)
    rot = torch.stack([c, -s, zero, s, c, zero, zero, zero, one], -1).reshape(b, 3, 3)
    pivot = xyz.mean(1, keepdim=True) * torch.tensor([1.0, 1.0, 0.0], dtype=xyz.dtype)
    out = (xyz - pivot) @ rot.transpose(1, 2) + pivot
    if extra is None:
        return out
    shape = extra.shape
    e = (extra.reshape(b, -1, 3) - pivot) @ rot.transpose(1, 2) + pivot
    return out, e.reshape(shape)


def train_adm(dataset: list, config: ADMTrainConfig | None = None, model_config: ADMConfig | None = None,
              progress=None) -> Checkpoint:
    """Fit the affordance denoiser with the clean-map MSE objective under AdamW."""
    config = config or ADMTrainConfig()
    if not dataset:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model_config = model_config or ADMConfig(backbone=config.backbone, **config.model)
    model = ADM(model_config)
    schedule = dfn.make_schedule(config.T, config.schedule)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    xyz_all, rgb_all, aff_all, text_all = _stack_samples(dataset)
    topo_all = model.topology(xyz_all)
    losses = []
    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(dataset), (min(config.batch_size, len(dataset)),), generator=gen)
        xyz = xyz_all[idx]
        if config.augment:
            xyz = random_z_rotation(xyz, gen)
        cond = model.encode_condition(xyz, rgb_all[idx], text_all[idx], topo_all.select(idx))
        loss = dfn.training_loss(model, aff_all[idx], cond, schedule, gen)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"ADM loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if progress is not None and (step % config.log_every == 0 or step == config.steps - 1):
            progress(step, float(np.mean(losses[-config.log_every:])))
    model.eval()
    return Checkpoint("adm", asdict(model_config), schedule, model, {"train": asdict(config), "losses": losses})


def load_adm(ckpt: Checkpoint) -> ADM:
    model = ADM(ADMConfig(**ckpt.model_config))
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def sample_affordance(ckpt: Checkpoint, scene: PointCloud | list, text, seed: int = 0,
                      generator: torch.Generator | None = None, clip: bool = True):
    """Draw affordance maps for one scene (returns AffordanceMap) or a list of scenes (returns list)."""
    single = isinstance(scene, PointCloud)
    scenes = [scene] if single else list(scene)
    texts = [text] if single else list(text)
    if len(texts) != len(scenes):
        raise ValueError("need one prompt per scene")
    if ckpt.model is None:
        ckpt.model = load_adm(ckpt)
    model = ckpt.model
    model.eval()
    dtype = next(model.parameters()).dtype
    xyz = torch.as_tensor(np.stack([s.positions for s in scenes]), dtype=dtype)
    rgb = torch.as_tensor(np.stack([s.colors for s in scenes]), dtype=dtype)
    emb = torch.as_tensor(np.stack([getattr(t, "embedding", t) for t in texts]), dtype=dtype)
    gen = generator or torch.Generator().manual_seed(seed)
    with torch.no_grad():
        cond = model.encode_condition(xyz, rgb, emb, model.topology(xyz))
        maps = dfn.sample_loop(model, cond, aff_shape(xyz, model.cfg), ckpt.schedule, gen,
                               clip=(lambda x: x.clamp(0.0, 1.0)) if clip else None, dtype=dtype)
    maps = maps.clamp(MAP_FLOOR, 1.0).numpy()
    out = [AffordanceMap(m) for m in maps]
    return out[0] if single else out


def aff_shape(xyz, cfg: ADMConfig):
    return (xyz.shape[0], xyz.shape[1], cfg.num_affordance_joints)
