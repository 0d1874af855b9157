"""Query-based conditional mapping.

Timestep, b-vector, b-value and slice index are embedded to a common width,
summed, and refined by a stack of GEGLU feed-forward blocks into a single
guidance vector that modulates every denoiser block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class ConditionBundle:
    t: int
    bvec: tuple
    bval: float
    slice_index: int

    def as_tensors(self, device=None, dtype=torch.float32):
        return (
            torch.tensor([self.t], device=device, dtype=torch.long),
            torch.tensor([list(self.bvec)], device=device, dtype=dtype),
            torch.tensor([self.bval], device=device, dtype=dtype),
            torch.tensor([self.slice_index], device=device, dtype=torch.long),
        )


def real_embed_prefeature(x):
    """``sign(x) * ln(|x| + 1)`` with sign(0) = 0."""
    if isinstance(x, torch.Tensor):
        if torch.isnan(x).any():
            raise ValueError("NaN in real embedding input")
        return torch.sign(x) * torch.log1p(torch.abs(x))
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("NaN in real embedding input")
    out = np.sign(arr) * np.log1p(np.abs(arr))
    return float(out) if out.ndim == 0 else out


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def mlp(in_features, width):
    return nn.Sequential(nn.Linear(in_features, width), nn.SiLU(), nn.Linear(width, width))


class RealEmbedding(nn.Module):
    """f_MLP applied to the signed log pre-feature of a real scalar."""

    def __init__(self, width):
        super().__init__()
        self.mlp = mlp(1, width)

    def forward(self, x):
        return self.mlp(real_embed_prefeature(x)[..., None])


class BvecEmbedding(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.mlp = mlp(3, width)

    def forward(self, bvec):
        if not torch.isfinite(bvec).all():
            raise ValueError("non-finite b-vector")
        return self.mlp(bvec.clamp(-1.0, 1.0))


class TimestepEmbedding(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.width = width
        self.mlp = mlp(width, width)

    def forward(self, t):
        return self.mlp(timestep_features(t, self.width).to(self.mlp[0].weight.dtype))


class RMSNorm(nn.Module):
    def __init__(self, width, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(width))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.scale


class GEGLU(nn.Module):
    def __init__(self, in_features, hidden):
        super().__init__()
        self.proj = nn.Linear(in_features, 2 * hidden)

    def forward(self, x):
        x, gate = self.proj(x).chunk(2, dim=-1)
        return x * F.gelu(gate)


class FeedForward(nn.Module):
    """Pre-norm residual GEGLU block."""

    def __init__(self, width, mult=2):
        super().__init__()
        self.norm = RMSNorm(width)
        self.up = GEGLU(width, width * mult)
        self.down = nn.Linear(width * mult, width)

    def forward(self, x):
        return x + self.down(self.up(self.norm(x)))


class ConditionMapper(nn.Module):
    def __init__(self, width=256, ffn_blocks=2, max_slices=128):
        super().__init__()
        self.width = width
        self.max_slices = max_slices
        self.time = TimestepEmbedding(width)
        self.bvec = BvecEmbedding(width)
        self.bval = RealEmbedding(width)
        self.slice = nn.Embedding(max_slices, width)
        self.blocks = nn.ModuleList(FeedForward(width) for _ in range(ffn_blocks))
        self.out_norm = RMSNorm(width)

    def forward(self, t, bvec, bval, slice_index):
        if slice_index.min() < 0 or slice_index.max() >= self.max_slices:
            raise IndexError(f"slice index outside [0, {self.max_slices})")
        dtype = self.slice.weight.dtype
        h = (
            self.time(t)
            + self.bvec(bvec.to(dtype))
            + self.bval(bval.to(dtype))
            + self.slice(slice_index)
        )
        for block in self.blocks:
            h = block(h)
        return self.out_norm(h)


def real_embed(x, module: RealEmbedding):
    return module(torch.as_tensor(x, dtype=module.mlp[0].weight.dtype).reshape(-1))


def bvec_embed(bvec, module: BvecEmbedding):
    return module(torch.as_tensor(bvec, dtype=module.mlp[0].weight.dtype).reshape(-1, 3))


def fuse_conditions(bundle: ConditionBundle, mapper: ConditionMapper) -> torch.Tensor:
    """Guidance vector (width,) for a single bundle."""
    dtype = mapper.slice.weight.dtype
    t, bvec, bval, s = bundle.as_tensors(dtype=dtype)
    return mapper(t, bvec, bval, s)[0]
