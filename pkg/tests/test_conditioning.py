import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from _oracles import central_difference_check
from phydiff.conditioning import (
    BvecEmbedding,
    ConditionBundle,
    ConditionMapper,
    GEGLU,
    RealEmbedding,
    RMSNorm,
    bvec_embed,
    fuse_conditions,
    real_embed,
    real_embed_prefeature,
    timestep_features,
)


class TestPrefeature:
    def test_examples(self):
        assert real_embed_prefeature(0.0) == 0.0
        assert real_embed_prefeature(math.e - 1) == pytest.approx(1.0, abs=1e-15)
        assert real_embed_prefeature(-(math.e - 1)) == pytest.approx(-1.0, abs=1e-15)
        assert real_embed_prefeature(1000.0) == pytest.approx(6.90875477931522, abs=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            real_embed_prefeature(float("nan"))
        with pytest.raises(ValueError):
            real_embed_prefeature(torch.tensor([float("nan")]))

    @given(st.floats(-1e300, 1e300, allow_nan=False))
    def test_antisymmetric_and_log(self, x):
        assert real_embed_prefeature(-x) == -real_embed_prefeature(x)
        assert real_embed_prefeature(x) == pytest.approx(math.copysign(math.log(abs(x) + 1), x) if x else 0.0, rel=1e-12)

    def test_growth_bound(self):
        assert abs(real_embed_prefeature(1e6)) < 14

    def test_torch_matches_numpy(self):
        x = np.linspace(-50, 50, 101)
        np.testing.assert_array_equal(real_embed_prefeature(torch.tensor(x)).numpy(), real_embed_prefeature(x))


class TestEmbeddings:
    def test_real_embed_shape_and_determinism(self):
        torch.manual_seed(0)
        mod = RealEmbedding(16)
        a, b = real_embed(1000.0, mod), real_embed(1000.0, mod)
        assert a.shape == (1, 16) and torch.equal(a, b)

    def test_bvec_zero_and_antipodes(self):
        torch.manual_seed(0)
        mod = BvecEmbedding(16)
        zero = bvec_embed([0.0, 0.0, 0.0], mod)
        assert torch.isfinite(zero).all()
        g = torch.tensor([0.6, 0.0, 0.8])
        assert not torch.allclose(bvec_embed(g, mod), bvec_embed(-g, mod))
        assert torch.equal(bvec_embed(g, mod), bvec_embed(g, mod))
        with pytest.raises(ValueError):
            bvec_embed([float("inf"), 0, 0], mod)

    def test_timestep_features_distinct(self):
        f = timestep_features(torch.arange(1, 65), 33)
        assert f.shape == (64, 33)
        assert torch.unique(f, dim=0).shape[0] == 64

    def test_rmsnorm_and_geglu_shapes(self):
        x = torch.randn(5, 8)
        y = RMSNorm(8)(x)
        torch.testing.assert_close(y.pow(2).mean(-1), torch.ones(5), atol=1e-4, rtol=0)
        assert GEGLU(8, 12)(x).shape == (5, 12)


class TestFusion:
    def _bundle(self, **kw):
        base = dict(t=10, bvec=(1.0, 0.0, 0.0), bval=1000.0, slice_index=3)
        base.update(kw)
        return ConditionBundle(**base)

    def test_width_and_determinism(self):
        torch.manual_seed(0)
        mapper = ConditionMapper(width=24, ffn_blocks=2, max_slices=8)
        g = fuse_conditions(self._bundle(), mapper)
        assert g.shape == (24,)
        assert torch.equal(g, fuse_conditions(self._bundle(), mapper))
        assert torch.isfinite(g).all()

    def test_zero_params_give_zero(self):
        mapper = ConditionMapper(width=16, max_slices=8)
        with torch.no_grad():
            for p in mapper.parameters():
                p.zero_()
        assert torch.all(fuse_conditions(self._bundle(), mapper) == 0)

    def test_bval_changes_output(self):
        torch.manual_seed(0)
        mapper = ConditionMapper(width=16, max_slices=8)
        a = fuse_conditions(self._bundle(bval=1000.0), mapper)
        b = fuse_conditions(self._bundle(bval=2000.0), mapper)
        assert not torch.allclose(a, b)

    def test_slice_out_of_range(self):
        mapper = ConditionMapper(width=16, max_slices=8)
        with pytest.raises(IndexError):
            fuse_conditions(self._bundle(slice_index=8), mapper)
        with pytest.raises(IndexError):
            fuse_conditions(self._bundle(slice_index=-1), mapper)


class TestGradients:
    def test_real_embed_params(self, float64):
        torch.manual_seed(0)
        mod = RealEmbedding(8)
        x = torch.tensor([0.0, 3.0, -1000.0, 2000.0])
        errors = central_difference_check(lambda: mod(x).sin().sum(), mod.parameters(), n_params=40)
        assert max(errors) < 1e-3

    def test_mapper_params(self, float64):
        torch.manual_seed(1)
        mapper = ConditionMapper(width=8, ffn_blocks=2, max_slices=4)
        t = torch.tensor([1, 40])
        bvec = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
        bval = torch.tensor([1000.0, 2000.0])
        s = torch.tensor([0, 3])
        # a fixed projection: squared norms are flat under the output RMS norm
        proj = torch.randn(2, 8, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        errors = central_difference_check(lambda: (mapper(t, bvec, bval, s) * proj).sum(), mapper.parameters(), n_params=60)
        assert max(errors) < 1e-3
