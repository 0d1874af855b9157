"""SSIM/PSNR, error maps and the evaluation report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ShapeError

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
K1, K2 = 0.01, 0.03
PSNR_CAP = 100.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rescale_pair(pred, ref):
    """Map both images with the reference's min/max onto [0, 1], then clip."""
    pred, ref = _check_pair(pred, ref)
    lo, hi = ref.min(), ref.max()
    span = hi - lo if hi > lo else 1.0
    return np.clip((pred - lo) / span, 0, 1), np.clip((ref - lo) / span, 0, 1)


def _blur(x):
    # radius = int(truncate * sigma + 0.5) = 5, i.e. an 11-tap window
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA
    return gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=truncate)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM with an 11-tap Gaussian window (sigma 1.5)."""
    a, b = _check_pair(a, b)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b, max_value: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_value**2 / mse))


def evaluate_pair(pred, ref) -> tuple[float, float]:
    """(SSIM %, PSNR dB) after the reference-anchored [0, 1] rescale."""
    p, r = rescale_pair(pred, ref)
    return 100.0 * ssim(p, r), psnr(p, r)


def error_map(a, b) -> np.ndarray:
    """|a - b| scaled so the largest error is 1 (all zeros when a == b)."""
    a, b = _check_pair(a, b)
    err = np.abs(a - b)
    peak = err.max()
    return err / peak if peak > 0 else err


def write_pgm(path, img) -> None:
    """8-bit binary PGM of an image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("PGM needs a 2-D image")
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, dims, maxval, rest = buf.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    std = v.std(ddof=1) if len(v) > 1 else 0.0
    return float(v.mean()), float(std)


@dataclass
class EvalRow:
    index: int
    slice_index: int
    bval: float
    ssim: float  # percent
    psnr: float  # dB


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def groups(self) -> dict:
        """Aggregates per b-value plus the pooled ``arbitrary`` group."""
        out = {}
        for bval in sorted({r.bval for r in self.rows}):
            sel = [r for r in self.rows if r.bval == bval]
            out[f"b={bval:g}"] = self._aggregate(sel)
        if self.rows:
            out["arbitrary"] = self._aggregate(self.rows)
        return out

    @staticmethod
    def _aggregate(rows):
        s_mean, s_std = _mean_std([r.ssim for r in rows])
        p_mean, p_std = _mean_std([r.psnr for r in rows])
        return {"n": len(rows), "ssim_mean": s_mean, "ssim_std": s_std, "psnr_mean": p_mean, "psnr_std": p_std}

    def rows_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "slice", "bval", "ssim_pct", "psnr_db"])
        for r in self.rows:
            writer.writerow([r.index, r.slice_index, f"{r.bval:g}", f"{r.ssim:.6f}", f"{r.psnr:.6f}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group", "n", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std"])
        for name, agg in self.groups().items():
            writer.writerow(
                [name, agg["n"]] + [f"{agg[k]:.6f}" for k in ("ssim_mean", "ssim_std", "psnr_mean", "psnr_std")]
            )
        return buf.getvalue()


def evaluate_volumes(pred, ref, bvals=None) -> EvalReport:
    """Score every (volume, slice) pair of two (C, Z, H, W) arrays."""
    pred, ref = _check_pair(pred, ref)
    if pred.ndim != 4:
        raise ShapeError("expected (C, Z, H, W) volumes")
    if bvals is None:
        bvals = np.zeros(pred.shape[0])
    if len(bvals) != pred.shape[0]:
        raise ShapeError(f"{len(bvals)} b-values for {pred.shape[0]} volumes")
    report = EvalReport()
    for c in range(pred.shape[0]):
        for z in range(pred.shape[1]):
            s, p = evaluate_pair(pred[c, z], ref[c, z])
            report.rows.append(EvalRow(c, z, float(bvals[c]), s, p))
    return report
