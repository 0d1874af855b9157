"""Tract-atlas adapter: empty-slice enrichment and per-level feature injection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange
from torch import nn
from torch.nn import functional as F

from .denoiser import HDiTConfig, pixel_unshuffle, zero_init
from .errors import ConfigError, ShapeError
from .volume_io import N_TRACTS, minmax_normalize

STEM_FACTOR = 4


@dataclass
class EnrichmentConfig:
    xi: float = 1.0

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("xi must be >= 0")


def empty_slices(atlas: np.ndarray) -> np.ndarray:
    """Boolean (Z,) mask of slices where every tract channel is exactly zero."""
    return np.asarray(atlas).max(axis=(0, 2, 3)) == 0


def enrich_empty_slices(atlas, b0, cfg: EnrichmentConfig | None = None) -> np.ndarray:
    """Replace every channel of an empty slice by ``(sum_k c_k + xi) * f_N(b0)``.

    ``atlas`` is (42, Z, H, W), ``b0`` is (Z, H, W); ``f_N`` is per-slice
    min-max normalization to [0, 1].  Non-empty slices are returned as is.
    """
    cfg = cfg or EnrichmentConfig()
    atlas = np.asarray(atlas)
    b0 = np.asarray(b0)
    if atlas.ndim != 4 or atlas.shape[1:] != b0.shape:
        raise ShapeError(f"atlas {atlas.shape} and b0 {b0.shape} grids differ")
    out = atlas.copy()
    for z in np.flatnonzero(empty_slices(atlas)):
        total = atlas[:, z].sum(axis=0)
        out[:, z] = (total + cfg.xi) * minmax_normalize(b0[z], (0.0, 1.0))
    return out


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Downsample(nn.Module):
    """2x space-to-depth and a 1x1 projection to the next width."""

    def __init__(self, width, next_width):
        super().__init__()
        self.proj = nn.Conv2d(4 * width, next_width, 1)

    def forward(self, x):
        return self.proj(pixel_unshuffle(x, 2))


class TractAdapter(nn.Module):
    """Feature pyramid matching the denoiser's three encoder token grids."""

    def __init__(self, cfg: HDiTConfig, in_channels: int = N_TRACTS):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        widths = cfg.level_widths
        # the stem is pixel_unshuffle(4) + 1x1 conv, so its grid equals the
        # denoiser's token grid only when the patch size is also 4
        if cfg.patch_size != STEM_FACTOR:
            raise ConfigError(f"adapter stem factor {STEM_FACTOR} requires patch_size {STEM_FACTOR}")
        self.stem = nn.Conv2d(in_channels * STEM_FACTOR**2, widths[0], 1)
        self.blocks = nn.ModuleList(ResBlock(w) for w in widths)
        self.downs = nn.ModuleList(Downsample(a, b) for a, b in zip(widths, widths[1:]))
        self.outs = nn.ModuleList(zero_init(nn.Conv2d(w, w, 1)) for w in widths)

    def forward(self, atlas):
        """(B, 42, H, W) -> three token grids (B, h_i, w_i, C_i)."""
        if atlas.ndim != 4 or atlas.shape[1] != self.in_channels or tuple(atlas.shape[2:]) != self.cfg.image_size:
            raise ConfigError(
                f"atlas input {tuple(atlas.shape)} incompatible with image size {self.cfg.image_size}"
            )
        h = self.stem(pixel_unshuffle(atlas, STEM_FACTOR))
        feats = []
        for level, block in enumerate(self.blocks):
            if level:
                h = self.downs[level - 1](h)
            h = block(h)
            feats.append(rearrange(self.outs[level](h), "b c h w -> b h w c"))
        return feats


def adapter_forward(atlas_slice, adapter: TractAdapter):
    """Per-level features for a single (42, H, W) slice, batch dim kept."""
    x = torch.as_tensor(atlas_slice, dtype=adapter.stem.weight.dtype)
    if x.ndim == 3:
        x = x[None]
    return adapter(x)
