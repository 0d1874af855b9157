"""Independent reference computations shared by the tests."""

import math

import numpy as np
import torch


def central_difference_check(loss_fn, params, n_params=50, h=1e-5, seed=0):
    """Compare autograd gradients with central differences on random entries.

    Returns the list of relative errors ``|a - n| / max(|a|, |n|)``; entries
    where both gradients vanish count as exact agreement.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    r = np.random.default_rng(seed)
    picks = r.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, i = params[k], int(flat - offsets[k])
            analytic = float(p.grad.reshape(-1)[i])
            view = p.data.reshape(-1)
            orig = float(view[i])
            view[i] = orig + h
            up = float(loss_fn())
            view[i] = orig - h
            down = float(loss_fn())
            view[i] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric))
            errors.append(0.0 if scale < 1e-10 else abs(analytic - numeric) / scale)
    return errors


def randomize_(module, std=0.2, seed=0):
    """Overwrite every parameter with N(0, std) draws (lifts zero inits)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module


def point_mass_rollout(x0, alpha_bars):
    """Deterministic ancestral rollout for a point-mass data distribution.

    Written with python floats, directly from the Gaussian posterior
    q(x_{t-1} | x_t, x0) mean, independent of the package's sampler.
    """
    x = 0.0
    abars = [1.0] + list(alpha_bars)
    x = math.sqrt(abars[-1]) * x0 + math.sqrt(1 - abars[-1]) * 0.3
    for t in range(len(abars) - 1, 0, -1):
        ab_t, ab_prev = abars[t], abars[t - 1]
        a_t = ab_t / ab_prev
        c0 = math.sqrt(ab_prev) * (1 - a_t) / (1 - ab_t)
        ct = math.sqrt(a_t) * (1 - ab_prev) / (1 - ab_t)
        x = c0 * x0 + ct * x
    return x


def ssim_reference(a, b, sigma=1.5, radius=5, k1=0.01, k2=0.03):
    """Direct windowed SSIM: explicit 2-D Gaussian weights over mirrored borders."""
    x = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    w = np.outer(g, g)
    w /= w.sum()
    pa = np.pad(a, radius, mode="symmetric")
    pb = np.pad(b, radius, mode="symmetric")
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = pa[i : i + 2 * radius + 1, j : j + 2 * radius + 1]
            wb = pb[i : i + 2 * radius + 1, j : j + 2 * radius + 1]
            ma, mb = (w * wa).sum(), (w * wb).sum()
            va = (w * (wa - ma) ** 2).sum()
            vb = (w * (wb - mb) ** 2).sum()
            cov = (w * (wa - ma) * (wb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
