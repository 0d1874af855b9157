"""On-disk formats and intensity helpers for DWI stacks and tract atlases.

Volumes are stored in a small binary container::

    b"DVOL1\\n"                  6-byte magic
    u32 version                  currently 1
    u32 C, u32 Z, u32 H, u32 W   dims, all > 0
    u8  dtype                    0 = little-endian float32
    payload                      C*Z*H*W values, C-order

Gradient tables follow the FSL text layout: ``*.bval`` holds one row of
b-values, ``*.bvec`` holds three rows (x, y, z) with one column per volume.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParseError, ShapeError, TruncationError

DVOL_MAGIC = b"DVOL1\n"
DVOL_VERSION = 1
_HEADER = struct.Struct("<I4IB")
_DTYPES = {0: np.dtype("<f4")}
N_TRACTS = 42


@dataclass(frozen=True)
class VolumeHeader:
    version: int
    dims: tuple[int, int, int, int]
    dtype_tag: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.dims, dtype=object)) * _DTYPES[self.dtype_tag].itemsize


def _parse_header(buf: bytes) -> VolumeHeader:
    if len(buf) < len(DVOL_MAGIC) or buf[: len(DVOL_MAGIC)] != DVOL_MAGIC:
        raise FormatError("missing DVOL magic")
    if len(buf) < len(DVOL_MAGIC) + _HEADER.size:
        raise TruncationError("header truncated")
    version, c, z, h, w, tag = _HEADER.unpack_from(buf, len(DVOL_MAGIC))
    if version != DVOL_VERSION:
        raise FormatError(f"unsupported DVOL version {version}")
    dims = (c, z, h, w)
    if min(dims) <= 0:
        raise FormatError(f"non-positive dims {dims}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    header = VolumeHeader(version, dims, tag)
    # guards against dims whose byte count cannot be addressed
    if header.nbytes > np.iinfo(np.int64).max:
        raise FormatError(f"dims {dims} overflow")
    return header


def write_dvol(path, array) -> None:
    """Write a 4-D array (C, Z, H, W) as little-endian float32."""
    arr = np.asarray(array)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D array, got shape {arr.shape}")
    if min(arr.shape) <= 0:
        raise ShapeError(f"empty dimension in shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DVOL_MAGIC)
        fh.write(_HEADER.pack(DVOL_VERSION, *payload.shape, 0))
        fh.write(payload.tobytes(order="C"))


def read_dvol_header(path) -> VolumeHeader:
    with open(path, "rb") as fh:
        return _parse_header(fh.read(len(DVOL_MAGIC) + _HEADER.size))


def _check_payload(header: VolumeHeader, payload: int) -> None:
    if payload < header.nbytes:
        raise TruncationError(f"payload has {payload} bytes, header declares {header.nbytes}")
    if payload > header.nbytes:
        raise FormatError(f"{payload - header.nbytes} trailing bytes after payload")


def read_dvol(path, mmap: bool = False) -> np.ndarray:
    """Read a DVOL file into a float32 array of shape (C, Z, H, W).

    ``mmap=True`` returns a read-only memory map instead of loading the
    payload, for stacks larger than memory.
    """
    offset = len(DVOL_MAGIC) + _HEADER.size
    if mmap:
        header = read_dvol_header(path)
        _check_payload(header, os.path.getsize(path) - offset)
        return np.memmap(path, dtype=_DTYPES[header.dtype_tag], mode="r", offset=offset, shape=header.dims)
    with open(path, "rb") as fh:
        buf = fh.read()
    header = _parse_header(buf)
    _check_payload(header, len(buf) - offset)
    data = np.frombuffer(buf, dtype=_DTYPES[header.dtype_tag], offset=offset)
    return data.reshape(header.dims).astype(np.float32)


# -- gradient tables --------------------------------------------------------


def _read_matrix(path) -> list[list[float]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                rows.append([float(tok) for tok in tokens])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return rows


@dataclass
class GradientTable:
    bvals: np.ndarray  # (N,)
    bvecs: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if len(self.bvals) != len(self.bvecs):
            raise FormatError(
                f"{len(self.bvals)} b-values but {len(self.bvecs)} b-vectors"
            )

    def __len__(self):
        return len(self.bvals)

    def __iter__(self):
        for b, g in zip(self.bvals, self.bvecs):
            yield float(b), tuple(float(v) for v in g)


def normalize_bvecs(bvals, bvecs) -> np.ndarray:
    """Unit-normalize b-vectors of weighted volumes and zero those of b=0."""
    bvals = np.asarray(bvals, dtype=np.float64)
    out = np.array(bvecs, dtype=np.float64).reshape(-1, 3)
    weighted = bvals > 0
    norms = np.linalg.norm(out[weighted], axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FormatError("zero b-vector for a diffusion-weighted volume")
    out[weighted] /= norms
    out[~weighted] = 0.0
    return out


def read_gradients(bvals_path, bvecs_path) -> GradientTable:
    bval_rows = _read_matrix(bvals_path)
    bvals = np.array([v for row in bval_rows for v in row], dtype=np.float64)
    bvec_rows = _read_matrix(bvecs_path)
    if len(bvec_rows) != 3:
        raise FormatError(f"bvecs must have 3 rows, found {len(bvec_rows)}")
    if len({len(r) for r in bvec_rows}) != 1:
        raise FormatError("bvecs rows have unequal lengths")
    bvecs = np.array(bvec_rows, dtype=np.float64).T
    if len(bvecs) != len(bvals):
        raise FormatError(f"{len(bvals)} b-values but {len(bvecs)} bvec columns")
    if np.any(bvals < 0):
        raise FormatError("negative b-value")
    return GradientTable(bvals, normalize_bvecs(bvals, bvecs))


def write_gradients(bvals_path, bvecs_path, table: GradientTable) -> None:
    with open(bvals_path, "w") as fh:
        fh.write(" ".join(f"{b:g}" for b in table.bvals) + "\n")
    with open(bvecs_path, "w") as fh:
        for axis in range(3):
            fh.write(" ".join(f"{v:.17g}" for v in table.bvecs[:, axis]) + "\n")


# -- containers -------------------------------------------------------------


@dataclass
class DWIStack:
    """Diffusion-weighted slices indexed (direction, slice, row, col)."""

    data: np.ndarray
    bvals: np.ndarray
    bvecs: np.ndarray
    normalized: bool = field(default=False)

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        self.validate()

    @property
    def slice_count(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def gradients(self) -> GradientTable:
        return GradientTable(self.bvals, self.bvecs)

    def validate(self) -> None:
        if self.data.ndim != 4:
            raise ShapeError(f"DWI data must be 4-D, got {self.data.shape}")
        n = self.data.shape[0]
        if len(self.bvals) != n or len(self.bvecs) != n:
            raise ShapeError(
                f"{n} volumes, {len(self.bvals)} b-values, {len(self.bvecs)} b-vectors"
            )
        weighted = self.bvals > 0
        norms = np.linalg.norm(self.bvecs[weighted], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ShapeError("b-vectors of weighted volumes must be unit length")
        if np.any(self.bvecs[~weighted] != 0):
            raise ShapeError("b-vectors of b=0 volumes must be zero")
        if self.normalized and (self.data.min() < -1 or self.data.max() > 1):
            raise ShapeError("normalized data outside [-1, 1]")

    def b0_mean(self, threshold: float = 0.0) -> np.ndarray:
        """Average of all volumes with b <= threshold, shape (Z, H, W)."""
        sel = self.bvals <= threshold
        if not sel.any():
            raise ValueError("stack contains no b=0 volume")
        return self.data[sel].mean(axis=0)

    def save(self, prefix) -> None:
        write_dvol(f"{prefix}.dvol", self.data)
        write_gradients(f"{prefix}.bval", f"{prefix}.bvec", self.gradients)

    @classmethod
    def load(cls, prefix) -> "DWIStack":
        table = read_gradients(f"{prefix}.bval", f"{prefix}.bvec")
        return cls(read_dvol(f"{prefix}.dvol"), table.bvals, table.bvecs)


def validate_tract_atlas(channels: np.ndarray, like: DWIStack | None = None) -> np.ndarray:
    channels = np.asarray(channels)
    if channels.ndim != 4 or channels.shape[0] != N_TRACTS:
        raise ShapeError(f"tract atlas must be ({N_TRACTS}, Z, H, W), got {channels.shape}")
    if not np.all(np.isfinite(channels)) or np.any(channels < 0):
        raise ValueError("tract atlas must be finite and non-negative")
    if like is not None and channels.shape[1:] != like.data.shape[1:]:
        raise ShapeError(
            f"atlas grid {channels.shape[1:]} differs from DWI grid {like.data.shape[1:]}"
        )
    return channels


# -- intensity helpers ------------------------------------------------------


def minmax_normalize(img, target=(-1.0, 1.0)) -> np.ndarray:
    """Affinely map [min(img), max(img)] onto ``target``.

    Constant images map to the midpoint of ``target``.
    """
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("minmax_normalize: non-finite input")
    lo, hi = float(target[0]), float(target[1])
    vmin, vmax = img.min(), img.max()
    if vmax == vmin:
        return np.full_like(img, 0.5 * (lo + hi))
    out = (img - vmin) / (vmax - vmin) * (hi - lo) + lo
    return np.clip(out, lo, hi)


def _pad_widths(h, w, target_h, target_w):
    if target_h < h or target_w < w:
        raise ValueError(f"target {(target_h, target_w)} smaller than input {(h, w)}")
    top = (target_h - h) // 2
    left = (target_w - w) // 2
    return top, target_h - h - top, left, target_w - w - left


def pad_center(img, target_h: int, target_w: int, value: float = -1.0) -> np.ndarray:
    """Center ``img`` on a (target_h, target_w) canvas over its last two axes.

    Odd remainders put the extra row/column at the bottom/right.
    """
    img = np.asarray(img)
    top, bottom, left, right = _pad_widths(*img.shape[-2:], target_h, target_w)
    pad = [(0, 0)] * (img.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(img, pad, mode="constant", constant_values=value)


def center_crop(img, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`pad_center`."""
    img = np.asarray(img)
    top, _, left, _ = _pad_widths(h, w, *img.shape[-2:])
    return img[..., top : top + h, left : left + w]
