"""Hourglass transformer noise predictor with neighborhood attention.

Token grids are channels-last, shape (B, H, W, C).  The encoder runs one
group of neighborhood-attention blocks per level with 2x2 token merging in
between, the bottleneck uses global attention, and the decoder mirrors the
encoder, merging skips by a learned per-channel interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
from einops import rearrange
from torch import nn
from torch.nn import functional as F

from .conditioning import GEGLU, ConditionBundle, ConditionMapper
from .errors import ConfigError, ShapeError


@dataclass
class HDiTConfig:
    image_size: tuple = (64, 64)
    in_channels: int = 1
    context_channels: int = 1
    patch_size: int = 4
    level_widths: tuple = (64, 128, 256)
    blocks_per_level: int = 1
    mid_blocks: int = 2
    na_window: int = 7
    head_dim: int = 32
    ffn_mult: int = 2
    cond_width: int = 256
    cond_ffn_blocks: int = 2
    max_slices: int = 128

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.level_widths = tuple(int(v) for v in self.level_widths)
        self.validate()

    def validate(self):
        h, w = self.image_size
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ConfigError(f"patch size {p} must divide image size {self.image_size}")
        if len(self.level_widths) != 3:
            raise ConfigError("exactly three level widths are required")
        if any(b <= a for a, b in zip(self.level_widths, self.level_widths[1:])):
            raise ConfigError(f"level widths must increase strictly: {self.level_widths}")
        if self.na_window < 3 or self.na_window % 2 == 0:
            raise ConfigError("na_window must be odd and >= 3")
        gh, gw = h // p, w // p
        if gh % 4 or gw % 4:
            raise ConfigError(f"token grid {(gh, gw)} must be divisible by 4 for two merges")

    def grid_shapes(self):
        """Token-grid shapes (H, W, C) of the three levels."""
        gh, gw = self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size
        return [(gh >> i, gw >> i, c) for i, c in enumerate(self.level_widths)]


def zero_init(layer):
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


# -- patch and pixel rearrangements ---------------------------------------


def pixel_unshuffle(x, r: int):
    """Space-to-depth over the last two axes: (..., C, H, W) -> (..., C*r*r, H/r, W/r).

    Channel-major within each r x r cell; works on numpy arrays and tensors.
    """
    h, w = x.shape[-2:]
    if r < 1 or h % r or w % r:
        raise ShapeError(f"factor {r} does not divide {(h, w)}")
    return rearrange(x, "... c (h r1) (w r2) -> ... (c r1 r2) h w", r1=r, r2=r)


def pixel_shuffle(x, r: int):
    c = x.shape[-3]
    if c % (r * r):
        raise ShapeError(f"channels {c} not divisible by {r * r}")
    return rearrange(x, "... (c r1 r2) h w -> ... c (h r1) (w r2)", r1=r, r2=r)


def patchify_raw(img, p: int):
    """(B, C, H, W) -> token grid (B, H/p, W/p, C*p*p) without projection."""
    return rearrange(pixel_unshuffle(img, p), "... c h w -> ... h w c")


def unpatchify_raw(tokens, p: int):
    return pixel_shuffle(rearrange(tokens, "... h w c -> ... c h w"), p)


def space_to_depth_tokens(x):
    h, w = x.shape[-3:-1]
    if h % 2 or w % 2:
        raise ShapeError(f"token grid {(h, w)} has odd dims")
    return rearrange(x, "... (h nh) (w nw) c -> ... h w (c nh nw)", nh=2, nw=2)


def depth_to_space_tokens(x):
    return rearrange(x, "... h w (c nh nw) -> ... (h nh) (w nw) c", nh=2, nw=2)


# -- attention --------------------------------------------------------------


@lru_cache(maxsize=None)
def neighborhood_index(h: int, w: int, window: int) -> torch.Tensor:
    """Flat key indices (h*w, kh*kw) of each query's clamped window.

    Windows shift inward at borders so every query sees min(k,h)*min(k,w) keys.
    """
    kh, kw = min(window, h), min(window, w)
    rows = torch.arange(h)
    cols = torch.arange(w)
    r0 = (rows - kh // 2).clamp(0, h - kh)
    c0 = (cols - kw // 2).clamp(0, w - kw)
    key_r = r0[:, None] + torch.arange(kh)[None]  # (h, kh)
    key_c = c0[:, None] + torch.arange(kw)[None]  # (w, kw)
    idx = key_r[:, None, :, None] * w + key_c[None, :, None, :]  # (h, w, kh, kw)
    return idx.reshape(h * w, kh * kw)


@lru_cache(maxsize=None)
def neighborhood_mask(h: int, w: int, window: int) -> torch.Tensor:
    """Boolean (h*w, h*w) mask, True where the key lies in the query's window."""
    idx = neighborhood_index(h, w, window)
    mask = torch.zeros(h * w, h * w, dtype=torch.bool)
    mask.scatter_(1, idx, True)
    return mask


class AdaNorm(nn.Module):
    """RMS normalization followed by a guidance-driven scale and shift."""

    def __init__(self, width, cond_width, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.mod = zero_init(nn.Linear(cond_width, 2 * width))

    def forward(self, x, cond):
        x = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        scale, shift = self.mod(cond)[:, None, None, :].chunk(2, dim=-1)
        return x * (1 + scale) + shift


class Attention(nn.Module):
    """Multi-head attention over a clamped k x k window, or the full grid.

    Small grids use dense attention with a window mask (masked keys get
    exactly zero weight); grids above ``DENSE_LIMIT`` tokens gather the
    window keys explicitly to bound memory.
    """

    DENSE_LIMIT = 1024

    def __init__(self, width, head_dim, window=None):
        super().__init__()
        self.heads = max(1, width // head_dim)
        self.window = window
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.out = zero_init(nn.Linear(width, width))

    def forward(self, x):
        b, h, w, c = x.shape
        qkv = self.qkv(x).reshape(b, h * w, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # (b, heads, n, d)
        scale = q.shape[-1] ** -0.5
        if self.window is None:
            y = F.scaled_dot_product_attention(q, k, v)
        elif h * w <= self.DENSE_LIMIT:
            mask = neighborhood_mask(h, w, self.window).to(x.device)
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        else:
            idx = neighborhood_index(h, w, self.window).to(x.device)
            kn, vn = k[:, :, idx], v[:, :, idx]  # (b, heads, n, keys, d)
            logits = torch.einsum("bhnd,bhnkd->bhnk", q, kn) * scale
            y = torch.einsum("bhnk,bhnkd->bhnd", torch.softmax(logits, dim=-1), vn)
        y = y.permute(0, 2, 1, 3).reshape(b, h, w, c)
        return self.out(y)


class TransformerBlock(nn.Module):
    def __init__(self, width, cond_width, head_dim, window=None, ffn_mult=2):
        super().__init__()
        self.norm1 = AdaNorm(width, cond_width)
        self.attn = Attention(width, head_dim, window)
        self.norm2 = AdaNorm(width, cond_width)
        self.ff_up = GEGLU(width, width * ffn_mult)
        self.ff_down = zero_init(nn.Linear(width * ffn_mult, width))

    def forward(self, x, cond):
        x = x + self.attn(self.norm1(x, cond))
        return x + self.ff_down(self.ff_up(self.norm2(x, cond)))


def na_block(tokens, guidance, block: TransformerBlock):
    """Apply one guidance-modulated neighborhood-attention block."""
    if guidance.ndim == 1:
        guidance = guidance[None].expand(tokens.shape[0], -1)
    return block(tokens, guidance)


class LevelDown(nn.Module):
    """2x2 token merge followed by a projection to the next width."""

    def __init__(self, width, next_width):
        super().__init__()
        self.proj = nn.Linear(4 * width, next_width, bias=False)

    def forward(self, x):
        return self.proj(space_to_depth_tokens(x))


class LevelUp(nn.Module):
    """Projection and 2x2 token split, then interpolation with the skip."""

    def __init__(self, width, prev_width):
        super().__init__()
        self.proj = nn.Linear(width, 4 * prev_width, bias=False)
        self.mix = nn.Parameter(torch.full((prev_width,), 0.5))

    def forward(self, x, skip):
        up = depth_to_space_tokens(self.proj(x))
        if up.shape != skip.shape:
            raise ShapeError(f"skip {tuple(skip.shape)} vs upsampled {tuple(up.shape)}")
        return self.mix * up + (1 - self.mix) * skip


class HDiT(nn.Module):
    def __init__(self, cfg: HDiTConfig):
        super().__init__()
        self.cfg = cfg
        p, widths, cw = cfg.patch_size, cfg.level_widths, cfg.cond_width
        raw_in = (cfg.in_channels + cfg.context_channels) * p * p
        gh, gw, _ = cfg.grid_shapes()[0]
        self.patch_in = nn.Linear(raw_in, widths[0])
        self.pos = nn.Parameter(torch.randn(gh, gw, widths[0]) * 0.02)

        def group(width, n, window):
            return nn.ModuleList(
                TransformerBlock(width, cw, cfg.head_dim, window, cfg.ffn_mult) for _ in range(n)
            )

        n = cfg.blocks_per_level
        self.down_blocks = nn.ModuleList(group(wd, n, cfg.na_window) for wd in widths)
        self.downs = nn.ModuleList(LevelDown(a, b) for a, b in zip(widths, widths[1:]))
        self.mid_blocks = group(widths[-1], cfg.mid_blocks, None)
        self.up_blocks = nn.ModuleList(group(wd, n, cfg.na_window) for wd in widths)
        self.ups = nn.ModuleList(LevelUp(b, a) for a, b in zip(widths, widths[1:]))
        self.out_norm = AdaNorm(widths[0], cw)
        self.patch_out = zero_init(nn.Linear(widths[0], cfg.in_channels * p * p))

    def forward(self, x_t, context, cond, adapter_feats=None):
        cfg = self.cfg
        expected = (cfg.in_channels, *cfg.image_size)
        if tuple(x_t.shape[1:]) != expected:
            raise ShapeError(f"x_t shape {tuple(x_t.shape[1:])}, expected {expected}")
        if context is None:
            raise ShapeError("context image is required")
        inp = torch.cat([x_t, context], dim=1) if cfg.context_channels else x_t
        h = self.patch_in(patchify_raw(inp, cfg.patch_size)) + self.pos
        if adapter_feats is not None:
            shapes = [tuple(f.shape[1:]) for f in adapter_feats]
            if shapes != cfg.grid_shapes():
                raise ShapeError(f"adapter feature shapes {shapes} vs {cfg.grid_shapes()}")

        skips = []
        for level, blocks in enumerate(self.down_blocks):
            if level:
                h = self.downs[level - 1](h)
            if adapter_feats is not None:
                h = h + adapter_feats[level]
            for block in blocks:
                h = block(h, cond)
            skips.append(h)
        for block in self.mid_blocks:
            h = block(h, cond)
        for level in reversed(range(len(self.up_blocks))):
            if level < len(self.ups):
                h = self.ups[level](h, skips[level])
            for block in self.up_blocks[level]:
                h = block(h, cond)
        h = self.patch_out(self.out_norm(h, cond))
        return unpatchify_raw(h, cfg.patch_size)


class PhyDiffModel(nn.Module):
    """Condition mapper plus hourglass backbone; predicts the added noise."""

    def __init__(self, cfg: HDiTConfig | None = None):
        super().__init__()
        self.cfg = cfg or HDiTConfig()
        self.mapper = ConditionMapper(self.cfg.cond_width, self.cfg.cond_ffn_blocks, self.cfg.max_slices)
        self.backbone = HDiT(self.cfg)

    def forward(self, x_t, context, t, bvec, bval, slice_index, adapter_feats=None):
        cond = self.mapper(t, bvec, bval, slice_index)
        return self.backbone(x_t, context, cond, adapter_feats)


def predict_noise(x_t, context, bundle: ConditionBundle, model: PhyDiffModel, adapter_feats=None):
    """Noise prediction for a single image given as (C, H, W)."""
    dtype = model.backbone.pos.dtype
    t, bvec, bval, s = bundle.as_tensors(dtype=dtype)
    feats = None if adapter_feats is None else [f[None] if f.ndim == 3 else f for f in adapter_feats]
    out = model(x_t[None].to(dtype), context[None].to(dtype), t, bvec, bval, s, feats)
    return out[0]
