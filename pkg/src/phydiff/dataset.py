"""Training/evaluation views over a DWI stack, tract atlas and direction split."""

from __future__ import annotations

import math

import numpy as np
import torch

from .adapter import EnrichmentConfig, enrich_empty_slices
from .volume_io import DWIStack, minmax_normalize, pad_center, validate_tract_atlas

SPLITS = ("train", "val", "test")


def split_directions(bvals, ratio=(7, 1, 1), seed: int = 0, b0_threshold: float = 0.0) -> dict:
    """Partition weighted volumes of each shell into train/val/test index sets.

    Every shell is split separately in the given ratio, so each split
    sees every b-value.  Val and test get at least one direction each when
    a shell has three or more.
    """
    bvals = np.asarray(bvals, dtype=np.float64)
    rng = np.random.default_rng(seed)
    total = float(sum(ratio))
    out = {name: [] for name in SPLITS}
    for shell in np.unique(bvals[bvals > b0_threshold]):
        idx = np.flatnonzero(bvals == shell)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_test = max(1, round(n * ratio[2] / total)) if n >= 3 and ratio[2] else 0
        n_val = max(1, round(n * ratio[1] / total)) if n >= 3 and ratio[1] else 0
        out["test"] += list(idx[:n_test])
        out["val"] += list(idx[n_test : n_test + n_val])
        out["train"] += list(idx[n_test + n_val :])
    return {k: np.array(sorted(v), dtype=int) for k, v in out.items()}


def padded_size(n: int, multiple: int) -> int:
    return int(math.ceil(n / multiple) * multiple)


class DiffusionData:
    """Normalized, padded tensors plus (volume, slice) item lists per split.

    All intensities are min-max normalized jointly over the whole stack to
    [-1, 1], which keeps the relative attenuation between shells.
    """

    def __init__(self, stack: DWIStack, atlas=None, ratio=(7, 1, 1), split_seed=0, multiple=16, xi=1.0):
        self.raw = stack
        self.shells = [float(b) for b in np.unique(stack.bvals[stack.bvals > 0])]
        z, h, w = stack.data.shape[1:]
        self.orig_size = (h, w)
        self.image_size = (padded_size(h, multiple), padded_size(w, multiple))
        norm = minmax_normalize(stack.data).astype(np.float32)
        self.images = pad_center(norm, *self.image_size, value=-1.0)
        b0 = norm[stack.bvals <= 0].mean(axis=0)
        self.context = pad_center(b0, *self.image_size, value=-1.0)
        self.vol_shell = np.array(
            [self.shells.index(float(b)) if b > 0 else -1 for b in stack.bvals], dtype=int
        )
        self.splits = split_directions(stack.bvals, ratio, split_seed)
        self.atlas = None
        if atlas is not None:
            atlas = validate_tract_atlas(atlas, stack)
            enriched = enrich_empty_slices(atlas, stack.b0_mean(), EnrichmentConfig(xi))
            self.atlas = pad_center(
                minmax_normalize(enriched).astype(np.float32), *self.image_size, value=-1.0
            )

    @property
    def slice_count(self) -> int:
        return self.images.shape[1]

    def items(self, split: str) -> list:
        vols = self.splits[split]
        return [(int(v), s) for v in vols for s in range(self.slice_count)]

    def batch(self, items, dtype=torch.float32) -> dict:
        vols = np.array([v for v, _ in items], dtype=int)
        slices = np.array([s for _, s in items], dtype=int)
        out = {
            "x0": torch.as_tensor(self.images[vols, slices][:, None], dtype=dtype),
            "context": torch.as_tensor(self.context[slices][:, None], dtype=dtype),
            "bvec": torch.as_tensor(self.raw.bvecs[vols], dtype=dtype),
            "bval": torch.as_tensor(self.raw.bvals[vols], dtype=dtype),
            "slice": torch.as_tensor(slices, dtype=torch.long),
            "shell": torch.as_tensor(self.vol_shell[vols], dtype=torch.long),
        }
        if self.atlas is not None:
            out["atlas"] = torch.as_tensor(self.atlas[:, slices].transpose(1, 0, 2, 3), dtype=dtype)
        return out
