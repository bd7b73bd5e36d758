"""Attention blocks and a point-transformer U-Net shared by the diffusion backbones."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import timestep_embedding


def farthest_point_sample(xyz: torch.Tensor, m: int) -> torch.Tensor:
    """(B, N, 3) -> (B, m) indices.

    Starts from the point farthest from the centroid, so the selection does not depend
    on the input point order (barring exact distance ties).
    """
    b, n, _ = xyz.shape
    if m > n:
        raise ValueError(f"cannot pick {m} of {n} points")
    xyz = xyz.detach()
    idx = torch.empty(b, m, dtype=torch.long, device=xyz.device)
    cur = ((xyz - xyz.mean(1, keepdim=True)) ** 2).sum(-1).argmax(1)
    dist = torch.full((b, n), float("inf"), dtype=xyz.dtype, device=xyz.device)
    ar = torch.arange(b, device=xyz.device)
    for i in range(m):
        idx[:, i] = cur
        dist = torch.minimum(dist, ((xyz - xyz[ar, cur][:, None]) ** 2).sum(-1))
        cur = dist.argmax(1)
    return idx


def knn(query: torch.Tensor, ref: torch.Tensor, k: int, chunk: int = 2048) -> torch.Tensor:
    """Indices (B, M, k) of the k nearest ``ref`` points for every ``query`` point."""
    k = min(k, ref.shape[1])
    out = []
    q, r = query.detach(), ref.detach()
    for s in range(0, q.shape[1], chunk):
        d = torch.cdist(q[:, s:s + chunk], r)
        out.append(d.topk(k, dim=-1, largest=False).indices)
    return torch.cat(out, 1)


def gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x (B, N, C), idx (B, ...) -> (B, ..., C)."""
    b = x.shape[0]
    flat = idx.reshape(b, -1)
    out = torch.gather(x, 1, flat[..., None].expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


def mlp(*dims, act=nn.GELU):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class FeedForward(nn.Module):
    def __init__(self, dim, mult=2, dropout=0.0):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Dropout(dropout), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross attention (queries attend to a context set) followed by a feed-forward."""

    def __init__(self, dim, heads=8, dropout=0.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, dropout=dropout)

    def forward(self, queries, context, key_padding_mask=None):
        kv = self.norm_kv(context)
        x = queries + self.attn(self.norm_q(queries), kv, kv, key_padding_mask=key_padding_mask,
                                need_weights=False)[0]
        return x + self.ff(self.norm_ff(x))


def transformer_encoder(dim, heads, layers, dropout=0.0, ff_mult=2):
    layer = nn.TransformerEncoderLayer(dim, heads, dim * ff_mult, dropout, activation="gelu",
                                       batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


def transformer_decoder(dim, heads, layers, dropout=0.0, ff_mult=2):
    layer = nn.TransformerDecoderLayer(dim, heads, dim * ff_mult, dropout, activation="gelu",
                                       batch_first=True, norm_first=True)
    return nn.TransformerDecoder(layer, layers)


class StepEmbedding(nn.Module):
    def __init__(self, step_dim, out_dim):
        super().__init__()
        self.step_dim = step_dim
        self.net = mlp(step_dim, out_dim, out_dim)

    def forward(self, t, dtype):
        return self.net(timestep_embedding(t, self.step_dim).to(dtype))


class SinusoidalPositions(nn.Module):
    def __init__(self, dim, max_len=1024):
        super().__init__()
        pos = torch.arange(max_len, dtype=torch.float32)[:, None]
        div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
        pe = torch.zeros(max_len, dim)
        pe[:, 0::2] = torch.sin(pos * div)
        pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
        self.register_buffer("pe", pe, persistent=False)

    def forward(self, x):
        if x.shape[1] > self.pe.shape[0]:
            raise ValueError("sequence longer than the positional table")
        return x + self.pe[: x.shape[1]].to(x.dtype)


class PointTransformerLayer(nn.Module):
    """Vector self-attention over k-nearest neighbours with a learned relative position encoding."""

    def __init__(self, dim):
        super().__init__()
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.pos = mlp(3, dim, dim)
        self.weight = mlp(dim, dim, dim)

    def forward(self, x, xyz, nbr):
        q = self.to_q(x)
        k = gather(self.to_k(x), nbr)
        v = gather(self.to_v(x), nbr)
        rel = xyz[:, :, None] - gather(xyz, nbr)
        pe = self.pos(rel)
        w = torch.softmax(self.weight(q[:, :, None] - k + pe), dim=2)
        return (w * (v + pe)).sum(2)


class PointTransformerBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = PointTransformerLayer(dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, xyz, nbr):
        x = x + self.attn(self.norm(x), xyz, nbr)
        return x + self.ff(self.norm_ff(x))


class TransitionDown(nn.Module):
    def __init__(self, in_dim, out_dim, ratio=4, k=16):
        super().__init__()
        self.ratio, self.k = ratio, k
        self.mlp = mlp(in_dim + 3, out_dim, out_dim)

    def forward(self, x, xyz, idx=None, nbr=None):
        n = xyz.shape[1]
        if n % self.ratio:
            raise ValueError(f"{n} points not divisible by downsampling rate {self.ratio}")
        if idx is None:
            idx = farthest_point_sample(xyz, n // self.ratio)
        new_xyz = gather(xyz, idx)
        if nbr is None:
            nbr = knn(new_xyz, xyz, self.k)
        grouped = torch.cat([gather(xyz, nbr) - new_xyz[:, :, None], gather(x, nbr)], -1)
        return self.mlp(grouped).max(2).values, new_xyz


def interpolate(fine_xyz, coarse_xyz, coarse_x, k=3, nbr=None):
    """Inverse-distance weighted interpolation from the k nearest coarse points."""
    if nbr is None:
        nbr = knn(fine_xyz, coarse_xyz, k)
    d = (fine_xyz[:, :, None] - gather(coarse_xyz, nbr)).norm(dim=-1)
    w = 1.0 / (d + 1e-8)
    w = w / w.sum(-1, keepdim=True)
    return (w[..., None] * gather(coarse_x, nbr)).sum(2)


@dataclass
class Topology:
    """Index structure of a point U-Net for a batch of clouds.

    It depends on geometry only and is invariant to rigid motions, so it can be built
    once per scene and reused across training steps and rotation augmentation.
    """
    self_nbrs: list   # per level (B, N_l, k)
    down_idx: list    # per transition (B, N_{l+1}) indices into level l
    down_nbrs: list   # per transition (B, N_{l+1}, k) indices into level l
    up_nbrs: list     # per transition (B, N_l, 3) indices into level l+1

    def select(self, index) -> "Topology":
        pick = lambda xs: [x[index] for x in xs]
        return Topology(pick(self.self_nbrs), pick(self.down_idx), pick(self.down_nbrs), pick(self.up_nbrs))

    @staticmethod
    def cat(parts: list) -> "Topology":
        join = lambda name: [torch.cat(xs) for xs in zip(*(getattr(p, name) for p in parts))]
        return Topology(join("self_nbrs"), join("down_idx"), join("down_nbrs"), join("up_nbrs"))


def build_topology(xyz: torch.Tensor, ratios=(1, 4, 4, 4), k: int = 16, chunk: int | None = None) -> Topology:
    if chunk is not None and xyz.shape[0] > chunk:
        return Topology.cat([build_topology(xyz[i:i + chunk], ratios, k) for i in range(0, xyz.shape[0], chunk)])
    xyz = xyz.detach()
    levels, self_nbrs, down_idx, down_nbrs, up_nbrs = [xyz], [knn(xyz, xyz, k)], [], [], []
    for r in ratios[1:]:
        prev = levels[-1]
        if prev.shape[1] % r:
            raise ValueError(f"{prev.shape[1]} points not divisible by downsampling rate {r}")
        idx = farthest_point_sample(prev, prev.shape[1] // r)
        sub = gather(prev, idx)
        down_idx.append(idx)
        down_nbrs.append(knn(sub, prev, k))
        up_nbrs.append(knn(prev, sub, 3))
        self_nbrs.append(knn(sub, sub, k))
        levels.append(sub)
    return Topology(self_nbrs, down_idx, down_nbrs, up_nbrs)


class TransitionUp(nn.Module):
    """Upsample coarse features onto a finer level and merge a skip connection.

    With ``cond_dim > 0`` the skip features are first fused with a global condition
    vector (language + step) by a linear layer.
    """

    def __init__(self, coarse_dim, skip_dim, out_dim, cond_dim=0):
        super().__init__()
        self.up = nn.Sequential(nn.LayerNorm(coarse_dim), nn.Linear(coarse_dim, out_dim))
        self.fuse = nn.Linear(skip_dim + cond_dim, skip_dim) if cond_dim else None
        self.skip = nn.Sequential(nn.LayerNorm(skip_dim), nn.Linear(skip_dim, out_dim))

    def forward(self, coarse_x, coarse_xyz, skip_x, skip_xyz, cond=None, nbr=None):
        if self.fuse is not None:
            skip_x = skip_x + self.fuse(torch.cat([skip_x, cond[:, None].expand(-1, skip_x.shape[1], -1)], -1))
        return interpolate(skip_xyz, coarse_xyz, self.up(coarse_x), nbr=nbr) + self.skip(skip_x)


class PointUNet(nn.Module):
    """Four-stage point-transformer U-Net (downsampling rates 1, 4, 4, 4).

    ``forward`` returns the per-level decoder features, finest first, along with the
    coordinates of each level. The point counts of the last call are kept in
    ``last_cardinalities``.
    """

    def __init__(self, in_dim, dims=(32, 64, 128, 256), ratios=(1, 4, 4, 4), k=16, cond_dim=0):
        super().__init__()
        if ratios[0] != 1:
            raise ValueError("first stage must keep full resolution")
        self.dims, self.ratios, self.k = tuple(dims), tuple(ratios), k
        self.stem = nn.Linear(in_dim, dims[0])
        self.enc = nn.ModuleList([PointTransformerBlock(dims[0])])
        self.down = nn.ModuleList()
        for i in range(1, len(dims)):
            self.down.append(TransitionDown(dims[i - 1], dims[i], ratios[i], k))
            self.enc.append(PointTransformerBlock(dims[i]))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(len(dims) - 1)):
            self.up.append(TransitionUp(dims[i + 1], dims[i], dims[i], cond_dim))
            self.dec.append(PointTransformerBlock(dims[i]))
        self.cond_proj = nn.Linear(cond_dim, dims[0]) if cond_dim else None
        self.last_cardinalities: list[int] = []

    @property
    def total_rate(self) -> int:
        return math.prod(self.ratios)

    def topology(self, xyz, chunk: int | None = 64) -> Topology:
        return build_topology(xyz, self.ratios[:len(self.dims)], self.k, chunk)

    def forward(self, xyz, feats, cond=None, topology: Topology | None = None):
        n = xyz.shape[1]
        if n % self.total_rate:
            raise ValueError(f"point count {n} must be divisible by {self.total_rate}")
        topo = topology if topology is not None else self.topology(xyz)
        x = self.stem(feats)
        if self.cond_proj is not None:
            x = x + self.cond_proj(cond)[:, None]
        levels_xyz = [xyz]
        x = self.enc[0](x, xyz, topo.self_nbrs[0])
        skips = [x]
        for i, (down, block) in enumerate(zip(self.down, self.enc[1:])):
            x, sub = down(x, levels_xyz[-1], topo.down_idx[i], topo.down_nbrs[i])
            levels_xyz.append(sub)
            x = block(x, sub, topo.self_nbrs[i + 1])
            skips.append(x)
        self.last_cardinalities = [p.shape[1] for p in levels_xyz]
        outs = [x]
        for j, (up, block) in enumerate(zip(self.up, self.dec)):
            lvl = len(self.dims) - 2 - j
            x = up(x, levels_xyz[lvl + 1], skips[lvl], levels_xyz[lvl], cond, topo.up_nbrs[lvl])
            x = block(x, levels_xyz[lvl], topo.self_nbrs[lvl])
            outs.append(x)
        return outs[::-1], levels_xyz
