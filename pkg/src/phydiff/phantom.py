"""Synthetic multi-shell dMRI phantoms from a single-tensor signal model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError
from .volume_io import N_TRACTS, DWIStack

BACKGROUND_D = 0.8e-3
TRACT_EIGENVALUES = (1.7e-3, 0.2e-3, 0.2e-3)
TRACT_RADIUS = 2.5


@dataclass
class PhantomSpec:
    slices: int = 16
    height: int = 64
    width: int = 64
    n_tracts: int = 3
    shells: tuple = (1000.0, 2000.0)
    dirs_per_shell: int = 16
    n_b0: int = 1
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        if min(self.slices, self.height, self.width) < 1:
            raise SpecError("grid dimensions must be positive")
        if not 0 <= self.n_tracts <= N_TRACTS:
            raise SpecError(f"n_tracts must be in [0, {N_TRACTS}]")
        if self.n_tracts and min(self.height, self.width) < 16:
            raise SpecError("tracts need an in-plane grid of at least 16x16")
        if any(b <= 0 for b in self.shells):
            raise SpecError("shell b-values must be positive")
        if self.dirs_per_shell < 6:
            raise SpecError("need at least 6 directions per shell")
        if self.n_b0 < 1:
            raise SpecError("need at least one b=0 volume")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")


@dataclass
class TensorField:
    tensors: np.ndarray  # (Z, H, W, 3, 3), mm^2/s
    labels: np.ndarray  # (Z, H, W), 0 = background, k = tract k
    tangents: np.ndarray = field(repr=False, default=None)  # (Z, H, W, 3)


@dataclass
class Phantom:
    spec: PhantomSpec
    field: TensorField
    s0: np.ndarray  # (Z, H, W)
    mask: np.ndarray  # (Z, H, W) bool
    atlas: np.ndarray  # (42, Z, H, W)


def sphere_directions(n: int) -> np.ndarray:
    """Deterministic quasi-uniform unit vectors on the upper hemisphere.

    Hemispherical Fibonacci lattice; ``n = 1`` returns ``(0, 0, 1)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    v = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def tract_tensor(tangent) -> np.ndarray:
    """Axially symmetric tensor with its principal axis along ``tangent``."""
    t = np.asarray(tangent, dtype=np.float64)
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    l_par, l_perp, _ = TRACT_EIGENVALUES
    eye = np.eye(3)
    return l_perp * eye + (l_par - l_perp) * t[..., :, None] * t[..., None, :]


def _head_mask(spec: PhantomSpec) -> np.ndarray:
    z = (np.arange(spec.slices) + 0.5) / spec.slices - 0.5
    scale = np.sqrt(np.clip(1.0 - (z / 0.75) ** 2, 0.0, None))
    yy = (np.arange(spec.height) + 0.5) / spec.height - 0.5
    xx = (np.arange(spec.width) + 0.5) / spec.width - 0.5
    ry, rx = 0.44 * scale, 0.38 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        inside = (yy[None, :, None] / ry[:, None, None]) ** 2 + (
            xx[None, None, :] / rx[:, None, None]
        ) ** 2 <= 1.0
    return inside & (scale[:, None, None] > 0)


def _arc_tracts(spec: PhantomSpec, rng: np.random.Generator):
    """Random circular arcs: (center_y, center_x, radius, angle0, angle1, z0, z1)."""
    h, w = spec.height, spec.width
    tracts = []
    for _ in range(spec.n_tracts):
        radius = rng.uniform(0.15, 0.3) * min(h, w)
        cy = h / 2 + rng.uniform(-0.08, 0.08) * h
        cx = w / 2 + rng.uniform(-0.08, 0.08) * w
        start = rng.uniform(0, 2 * np.pi)
        span = rng.uniform(0.6, 1.4) * np.pi
        extent = max(1, int(round(spec.slices * rng.uniform(0.3, 0.6))))
        z0 = int(rng.integers(0, spec.slices - extent + 1))
        if (
            cy - radius - TRACT_RADIUS < 0
            or cy + radius + TRACT_RADIUS > h
            or cx - radius - TRACT_RADIUS < 0
            or cx + radius + TRACT_RADIUS > w
        ):
            raise SpecError("tract exceeds grid")
        tracts.append((cy, cx, radius, start, start + span, z0, z0 + extent))
    return tracts


def make_phantom(spec: PhantomSpec | None = None) -> Phantom:
    spec = spec or PhantomSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = (spec.slices, spec.height, spec.width)
    tensors = np.broadcast_to(BACKGROUND_D * np.eye(3), shape + (3, 3)).copy()
    labels = np.zeros(shape, dtype=np.int32)
    tangents = np.zeros(shape + (3,))
    atlas = np.zeros((N_TRACTS,) + shape, dtype=np.float32)
    mask = _head_mask(spec)

    yy, xx = np.meshgrid(np.arange(spec.height) + 0.5, np.arange(spec.width) + 0.5, indexing="ij")
    for k, (cy, cx, radius, a0, a1, z0, z1) in enumerate(_arc_tracts(spec, rng), start=1):
        dy, dx = yy - cy, xx - cx
        dist = np.hypot(dy, dx)
        angle = np.mod(np.arctan2(dy, dx) - a0, 2 * np.pi)
        on = (np.abs(dist - radius) <= TRACT_RADIUS) & (angle <= a1 - a0)
        # tangent of a circle is perpendicular to the radius; (x, y, z) = (col, row, slice)
        with np.errstate(invalid="ignore", divide="ignore"):
            tx, ty = -dy / dist, dx / dist
        tangent = np.stack([tx, ty, np.zeros_like(tx)], axis=-1)
        for z in range(z0, z1):
            sel = on & mask[z]
            if not sel.any():
                continue
            tensors[z][sel] = tract_tensor(tangent[sel])
            tangents[z][sel] = tangent[sel]
            labels[z][sel] = k
            atlas[k - 1, z][sel] = 1.0

    s0 = mask.astype(np.float64)
    return Phantom(spec, TensorField(tensors, labels, tangents), s0, mask, atlas)


def simulate_signal(field: TensorField, s0, bval: float, bvec, noise_sigma: float = 0.0, rng=None) -> np.ndarray:
    """``S0 * exp(-b g^T D g)`` with optional Rician corruption."""
    g = np.asarray(bvec, dtype=np.float64)
    adc = np.einsum("i,...ij,j->...", g, field.tensors, g)
    signal = np.asarray(s0, dtype=np.float64) * np.exp(-float(bval) * adc)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng()
        n1 = rng.normal(0.0, noise_sigma, signal.shape)
        n2 = rng.normal(0.0, noise_sigma, signal.shape)
        signal = np.sqrt((signal + n1) ** 2 + n2**2)
    return signal


def simulate_dwi(phantom: Phantom, rng=None) -> DWIStack:
    """b=0 volumes followed by every shell sampled on the same direction set."""
    spec = phantom.spec
    rng = rng if rng is not None else np.random.default_rng(spec.seed + 1)
    dirs = sphere_directions(spec.dirs_per_shell)
    bvals = [0.0] * spec.n_b0
    bvecs = [np.zeros(3)] * spec.n_b0
    for b in spec.shells:
        bvals += [float(b)] * len(dirs)
        bvecs += list(dirs)
    volumes = [
        simulate_signal(phantom.field, phantom.s0, b, g, spec.noise_sigma, rng)
        for b, g in zip(bvals, bvecs)
    ]
    return DWIStack(np.stack(volumes), np.array(bvals), np.array(bvecs))
