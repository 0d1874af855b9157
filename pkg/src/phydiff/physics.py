"""Physics-guided noise evolution.

The forward process keeps the DDPM form but lets the cumulative retention
``alpha_bar`` vary per voxel.  Voxels whose diffusion signal decays quickly
(high ADC, small ``exp(-2 b D)``) are noised faster by raising the base
schedule to a per-voxel exponent ``w = 1 + kappa * (1 - x_hat)``, where
``x_hat`` is the min-max scaled retention.  ``kappa = 0`` or an
uninformative atlas reduces exactly to the standard schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError
from .volume_io import DWIStack

SIGNAL_FLOOR = 1e-6


@dataclass
class ADCAtlas:
    values: np.ndarray  # (Z, H, W)
    shell_bval: float
    n_directions: int

    def __post_init__(self):
        if self.shell_bval <= 0:
            raise ValueError("shell_bval must be positive")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("ADC values must be finite and non-negative")


def shell_indices(bvals, shell_bval: float, tol: float = 50.0) -> np.ndarray:
    bvals = np.asarray(bvals, dtype=np.float64)
    return np.flatnonzero(np.abs(bvals - shell_bval) <= tol)


def estimate_adc_atlas(
    stack: DWIStack,
    shell_bval: float,
    mean: bool = False,
    directions=None,
    shell_tol: float = 50.0,
) -> ADCAtlas:
    """Per-voxel ADC atlas ``(N ln S0 - sum_i ln S_i) / b`` for one shell.

    The directional log-decays are summed, not averaged; pass ``mean=True``
    to divide by ``N``.  ``directions`` optionally restricts the volumes
    used (e.g. to a training split).  Intensities are floored at 1e-6 and
    negative results clamped to zero.
    """
    if shell_bval <= 0:
        raise ValueError("shell_bval must be positive")
    idx = shell_indices(stack.bvals, shell_bval, shell_tol)
    if directions is not None:
        idx = np.intersect1d(idx, np.asarray(directions, dtype=int))
    if idx.size == 0:
        raise ValueError(f"no directions at b={shell_bval}")
    data = np.asarray(stack.data, dtype=np.float64)
    s0 = np.maximum(stack.b0_mean(), SIGNAL_FLOOR).astype(np.float64)
    n = idx.size
    log_sum = np.zeros(s0.shape, dtype=np.float64)
    for i in idx:
        log_sum += np.log(np.maximum(data[i], SIGNAL_FLOOR))
    adc = (n * np.log(s0) - log_sum) / shell_bval
    if mean:
        adc = adc / n
    return ADCAtlas(np.maximum(adc, 0.0), float(shell_bval), int(n))


@dataclass
class NoiseScheduleBase:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray  # alpha_bars[t-1] for t = 1..T

    def alpha_bar(self, t: int) -> float:
        """Cumulative retention at step ``t``; ``t = 0`` is the clean image."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def build_base_schedule(T: int = 1000, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseScheduleBase:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta1 <= betaT < 1):
        raise ValueError(f"need 0 < beta1 <= betaT < 1, got {beta1}, {betaT}")
    betas = np.linspace(beta1, betaT, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseScheduleBase(T, betas, alphas, np.cumprod(alphas))


def scaled_beta_range(T: int, beta1: float = 1e-4, betaT: float = 0.02, reference_T: int = 1000):
    """Rescale a beta range tuned for ``reference_T`` steps to ``T`` steps.

    Keeps the total noise injected roughly constant, so short schedules still
    end near pure noise.  Identity when ``T == reference_T``.
    """
    scale = reference_T / T
    return min(beta1 * scale, 0.999), min(betaT * scale, 0.999)


@dataclass
class ScheduleMap:
    """Per-voxel cumulative schedule ``phi[t, v] = alpha_bar_t ** w(v)``.

    ``phi`` is materialized lazily since a full (T, Z, H, W) table gets
    large for full-size volumes; :meth:`phi_at` evaluates one step.
    """

    alpha_bars: np.ndarray  # (T,)
    exponent: np.ndarray  # (Z, H, W)
    kappa: float
    eps_range: float
    shell_bval: float | None = None

    @property
    def T(self) -> int:
        return len(self.alpha_bars)

    def phi_at(self, t: int, slices=slice(None)) -> np.ndarray:
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        w = self.exponent[slices]
        if t == 0:
            return np.ones_like(w)
        ab = self.alpha_bars[t - 1]
        # w == 1 must give alpha_bar bit-exactly
        return np.where(w == 1.0, ab, ab**w)

    @property
    def phi(self) -> np.ndarray:
        return np.stack([self.phi_at(t) for t in range(1, self.T + 1)])

    def table(self, slice_index: int) -> np.ndarray:
        """(T, H, W) schedule for one slice."""
        return np.stack([self.phi_at(t, slice_index) for t in range(1, self.T + 1)])


def retention(atlas: ADCAtlas) -> np.ndarray:
    return np.exp(-2.0 * atlas.shell_bval * atlas.values)


def build_schedule_map(
    atlas: ADCAtlas, base: NoiseScheduleBase, kappa: float = 0.5, eps_range: float = 1e-8
) -> ScheduleMap:
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    x = retention(atlas)
    spread = x.max() - x.min()
    if spread < eps_range:
        x_hat = np.ones_like(x)
    else:
        x_hat = np.clip((x - x.min()) / (spread + eps_range), 0.0, 1.0)
    exponent = 1.0 + kappa * (1.0 - x_hat)
    return ScheduleMap(base.alpha_bars.copy(), exponent, float(kappa), float(eps_range), atlas.shell_bval)


def uniform_schedule_map(base: NoiseScheduleBase, shape) -> ScheduleMap:
    """Schedule map equal to the base schedule everywhere."""
    return ScheduleMap(base.alpha_bars.copy(), np.ones(shape), 0.0, 0.0)


# -- forward process --------------------------------------------------------


def _sqrt(x):
    return torch.sqrt(x) if isinstance(x, torch.Tensor) else np.sqrt(x)


def forward_noise(x0, phi_t, noise):
    """``sqrt(phi) * x0 + sqrt(1 - phi) * noise``, elementwise (numpy or torch)."""
    if tuple(x0.shape) != tuple(noise.shape):
        raise ShapeError(f"x0 {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
    try:
        np.broadcast_shapes(tuple(np.shape(phi_t)), tuple(x0.shape))
    except ValueError:
        raise ShapeError(f"phi {tuple(np.shape(phi_t))} does not broadcast to {tuple(x0.shape)}") from None
    return _sqrt(phi_t) * x0 + _sqrt(1 - phi_t) * noise


def forward_noise_ddpm(x0, alpha_bar_t: float, noise):
    """Standard DDPM forward step with a scalar cumulative schedule."""
    if isinstance(x0, torch.Tensor):
        phi = torch.full_like(x0, float(alpha_bar_t))
    else:
        phi = np.full(np.shape(x0), float(alpha_bar_t), dtype=np.result_type(x0, np.float64))
    return forward_noise(x0, phi, noise)


def expected_moments(x0: float, phi: float) -> tuple[float, float]:
    """Mean and variance of the noised value at one voxel."""
    return math.sqrt(phi) * x0, 1.0 - phi
