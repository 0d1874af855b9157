import math

import numpy as np
import pytest

from phydiff.errors import SpecError
from phydiff.phantom import (
    BACKGROUND_D,
    PhantomSpec,
    TensorField,
    make_phantom,
    simulate_dwi,
    simulate_signal,
    sphere_directions,
    tract_tensor,
)
from phydiff.physics import estimate_adc_atlas
from phydiff.volume_io import DWIStack


def isotropic_field(d, shape=(2, 4, 4)):
    return TensorField(np.broadcast_to(d * np.eye(3), shape + (3, 3)).copy(), np.zeros(shape, int))


class TestDirections:
    def test_single(self):
        np.testing.assert_array_equal(sphere_directions(1), [[0.0, 0.0, 1.0]])

    def test_unit_and_deterministic(self):
        d = sphere_directions(90)
        assert d.shape == (90, 3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(d, sphere_directions(90))

    def test_min_angle(self):
        for n in range(2, 91):
            d = sphere_directions(n)
            # antipodal vectors encode the same gradient axis
            c = np.clip(np.abs(d @ d.T), 0.0, 1.0)
            np.fill_diagonal(c, 0.0)
            assert np.degrees(np.arccos(c.max())) > 10.0, n


class TestSignal:
    def test_isotropic_decay(self):
        field = isotropic_field(1e-3)
        for g in sphere_directions(5):
            np.testing.assert_allclose(simulate_signal(field, 1.0, 1000.0, g), 0.36787944117144233, rtol=1e-14)

    def test_tensor_decay(self):
        field = TensorField(np.diag([1.7e-3, 0.2e-3, 0.2e-3])[None, None, None], np.ones((1, 1, 1), int))
        assert simulate_signal(field, 1.0, 1000.0, [1, 0, 0])[0, 0, 0] == pytest.approx(0.18268352405273466, rel=1e-14)

    def test_b0_identity_and_zero_noise(self, rng):
        field = isotropic_field(1e-3)
        s0 = rng.random((2, 4, 4))
        assert np.array_equal(simulate_signal(field, s0, 0.0, [0, 0, 0]), s0)
        clean = simulate_signal(field, s0, 1000.0, [0, 1, 0])
        assert np.array_equal(simulate_signal(field, s0, 1000.0, [0, 1, 0], noise_sigma=0.0, rng=rng), clean)

    def test_rician_is_positive_and_biased(self):
        field = isotropic_field(1e-3, (1, 64, 64))
        noisy = simulate_signal(field, 0.0, 1000.0, [1, 0, 0], 0.1, np.random.default_rng(0))
        assert np.all(noisy >= 0)
        # magnitude of pure noise follows a Rayleigh law with mean sigma * sqrt(pi / 2)
        assert noisy.mean() == pytest.approx(0.1 * math.sqrt(math.pi / 2), rel=0.03)

    def test_monotone_in_b(self):
        p = make_phantom(PhantomSpec(slices=4, height=32, width=32, n_tracts=2, seed=3))
        g = sphere_directions(7)[3]
        signals = [simulate_signal(p.field, p.s0, b, g) for b in (0, 500, 1000, 2000, 3000)]
        assert all(np.all(a >= b) for a, b in zip(signals, signals[1:]))

    def test_adc_closure(self):
        field = isotropic_field(1e-3)
        dirs = sphere_directions(16)
        vols = [np.ones((2, 4, 4))] + [simulate_signal(field, 1.0, 1000.0, g) for g in dirs]
        stack = DWIStack(np.stack(vols), [0.0] + [1000.0] * 16, np.vstack([np.zeros(3), dirs]))
        np.testing.assert_allclose(estimate_adc_atlas(stack, 1000.0).values, 16e-3, rtol=1e-10)
        np.testing.assert_allclose(estimate_adc_atlas(stack, 1000.0, mean=True).values, 1e-3, rtol=1e-10)


class TestPhantom:
    def test_no_tracts_is_isotropic(self):
        p = make_phantom(PhantomSpec(slices=3, height=16, width=16, n_tracts=0))
        np.testing.assert_array_equal(p.field.tensors, np.broadcast_to(BACKGROUND_D * np.eye(3), p.field.tensors.shape))
        assert not p.atlas.any()

    def test_tract_axis_along_tangent(self):
        evals, evecs = np.linalg.eigh(tract_tensor([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(evals, [0.2e-3, 0.2e-3, 1.7e-3], atol=1e-18)
        np.testing.assert_allclose(np.abs(evecs[:, -1]), [1.0, 0.0, 0.0], atol=1e-12)

    def test_default_phantom_invariants(self):
        p = make_phantom()
        assert p.atlas.shape == (42, 16, 64, 64)
        assert p.atlas[:3].any() and not p.atlas[3:].any()
        d = p.field.tensors
        np.testing.assert_allclose(d, np.swapaxes(d, -1, -2), atol=1e-12)
        evals = np.linalg.eigvalsh(d)
        assert evals.min() >= 0 and evals.max() <= 4e-3
        on = p.field.labels > 0
        # principal eigenvector of every tract voxel equals the stored tangent
        _, vecs = np.linalg.eigh(d[on])
        dots = np.abs(np.einsum("ni,ni->n", vecs[..., -1], p.field.tangents[on]))
        np.testing.assert_allclose(dots, 1.0, atol=1e-10)
        assert set(np.unique(p.s0)) == {0.0, 1.0}
        assert np.array_equal(p.s0 > 0, p.mask)

    def test_deterministic(self):
        a, b = make_phantom(PhantomSpec(seed=5)), make_phantom(PhantomSpec(seed=5))
        assert np.array_equal(a.field.tensors, b.field.tensors) and np.array_equal(a.atlas, b.atlas)
        sa, sb = simulate_dwi(a), simulate_dwi(b)
        assert sa.data.tobytes() == sb.data.tobytes()

    def test_dwi_layout(self):
        stack = simulate_dwi(make_phantom(PhantomSpec(slices=2, height=16, width=16, n_tracts=1, n_b0=2)))
        assert stack.data.shape == (2 + 32, 2, 16, 16)
        np.testing.assert_array_equal(stack.bvals[:2], 0.0)
        np.testing.assert_array_equal(stack.bvecs[2:18], stack.bvecs[18:])

    @pytest.mark.parametrize(
        "kw",
        [dict(n_tracts=43), dict(dirs_per_shell=5), dict(shells=(1000.0, -1.0)), dict(noise_sigma=-0.1), dict(n_b0=0)],
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(SpecError):
            make_phantom(PhantomSpec(**kw))

    def test_tract_outside_grid(self):
        with pytest.raises(SpecError, match="exceeds"):
            make_phantom(PhantomSpec(slices=4, height=16, width=16, n_tracts=42))
