import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from phydiff.errors import FormatError, ParseError, ShapeError, TruncationError
from phydiff.volume_io import (
    DVOL_MAGIC,
    DWIStack,
    center_crop,
    minmax_normalize,
    pad_center,
    read_dvol,
    read_dvol_header,
    read_gradients,
    validate_tract_atlas,
    write_dvol,
    write_gradients,
    GradientTable,
)


def _raw_dvol(path, dims, payload: bytes, version=1, tag=0, magic=DVOL_MAGIC):
    path.write_bytes(magic + struct.pack("<I4IB", version, *dims, tag) + payload)


class TestDvol:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        x = rng.standard_normal((3, 2, 5, 7)).astype(np.float32)
        x[0, 0, 0, :3] = [np.inf, -0.0, np.float32(1e-42)]
        write_dvol(tmp_path / "x.dvol", x)
        y = read_dvol(tmp_path / "x.dvol")
        assert y.dtype == np.float32 and y.shape == x.shape
        assert y.tobytes() == x.tobytes()

    def test_payload_layout_is_little_endian_c_order(self, tmp_path):
        x = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
        write_dvol(tmp_path / "x.dvol", x)
        raw = (tmp_path / "x.dvol").read_bytes()
        assert raw[:6] == b"DVOL1\n"
        assert struct.unpack_from("<I4IB", raw, 6) == (1, 1, 2, 3, 4, 0)
        np.testing.assert_array_equal(np.frombuffer(raw[6 + 21 :], "<f4"), np.arange(24))

    def test_short_payload_is_truncation(self, tmp_path):
        _raw_dvol(tmp_path / "t.dvol", (1, 1, 2, 2), np.zeros(3, "<f4").tobytes())
        with pytest.raises(TruncationError):
            read_dvol(tmp_path / "t.dvol")
        with pytest.raises(TruncationError):
            read_dvol(tmp_path / "t.dvol", mmap=True)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(magic=b"NIFTI\n"),
            dict(version=2),
            dict(tag=7),
            dict(dims=(0, 1, 2, 2)),
        ],
    )
    def test_bad_header_is_format_error(self, tmp_path, kwargs):
        dims = kwargs.pop("dims", (1, 1, 2, 2))
        _raw_dvol(tmp_path / "b.dvol", dims, np.zeros(4, "<f4").tobytes(), **kwargs)
        with pytest.raises(FormatError):
            read_dvol(tmp_path / "b.dvol")

    def test_dims_overflow_is_format_error(self, tmp_path):
        big = 2**32 - 1
        _raw_dvol(tmp_path / "o.dvol", (big, big, big, big), b"")
        with pytest.raises(FormatError, match="overflow"):
            read_dvol(tmp_path / "o.dvol")

    def test_trailing_bytes_rejected(self, tmp_path):
        _raw_dvol(tmp_path / "x.dvol", (1, 1, 1, 1), np.zeros(2, "<f4").tobytes())
        with pytest.raises(FormatError):
            read_dvol(tmp_path / "x.dvol")

    def test_full_scale_stack_shape(self, tmp_path):
        # 90 directions x 110 slices padded to 256x256, as a sparse file
        dims = (90, 110, 256, 256)
        path = tmp_path / "big.dvol"
        with open(path, "wb") as fh:
            fh.write(DVOL_MAGIC + struct.pack("<I4IB", 1, *dims, 0))
            fh.truncate(6 + 21 + int(np.prod(dims)) * 4)
        assert read_dvol_header(path).dims == dims
        vol = read_dvol(path, mmap=True)
        assert vol.shape == dims
        assert vol[89, 109, 255, 255] == 0.0

    def test_write_requires_4d(self, tmp_path):
        with pytest.raises(ShapeError):
            write_dvol(tmp_path / "x.dvol", np.zeros((2, 2)))


class TestGradients:
    def _write(self, tmp_path, bvals, bvecs):
        (tmp_path / "g.bval").write_text(bvals)
        (tmp_path / "g.bvec").write_text(bvecs)
        return read_gradients(tmp_path / "g.bval", tmp_path / "g.bvec")

    def test_basic_pairs(self, tmp_path):
        table = self._write(tmp_path, "0 1000\n", "0 1\n0 0\n0 0\n")
        assert list(table) == [(0.0, (0.0, 0.0, 0.0)), (1000.0, (1.0, 0.0, 0.0))]

    def test_renormalizes_weighted_vectors(self, tmp_path):
        table = self._write(tmp_path, "1000\n", "2\n0\n0\n")
        np.testing.assert_array_equal(table.bvecs, [[1.0, 0.0, 0.0]])

    def test_b0_vectors_zeroed(self, tmp_path):
        table = self._write(tmp_path, "0 0\n", "0.3 0\n0 0\n0.1 0\n")
        assert np.all(table.bvecs == 0.0)

    def test_two_row_bvecs_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            self._write(tmp_path, "0 1000\n", "0 1\n0 0\n")

    def test_column_mismatch_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            self._write(tmp_path, "0 1000 2000\n", "0 1\n0 0\n0 0\n")

    def test_non_numeric_token(self, tmp_path):
        with pytest.raises(ParseError):
            self._write(tmp_path, "0 abc\n", "0 1\n0 0\n0 0\n")

    def test_round_trip(self, tmp_path, rng):
        g = rng.standard_normal((5, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        g[0] = 0
        table = GradientTable([0, 1000, 1000, 2000, 2000], g)
        write_gradients(tmp_path / "a.bval", tmp_path / "a.bvec", table)
        back = read_gradients(tmp_path / "a.bval", tmp_path / "a.bvec")
        np.testing.assert_array_equal(back.bvals, table.bvals)
        np.testing.assert_allclose(back.bvecs, table.bvecs, atol=1e-15)


class TestDWIStack:
    def test_invariants_checked(self):
        data = np.zeros((2, 1, 2, 2), np.float32)
        DWIStack(data, [0, 1000], [[0, 0, 0], [0, 1, 0]])
        with pytest.raises(ShapeError):
            DWIStack(data, [0, 1000], [[0, 0, 0], [0, 0.5, 0]])
        with pytest.raises(ShapeError):
            DWIStack(data, [0, 1000], [[0, 0, 1], [0, 1, 0]])
        with pytest.raises(ShapeError):
            DWIStack(data, [0, 1000, 1000], [[0, 0, 0], [0, 1, 0], [1, 0, 0]])
        with pytest.raises(ShapeError):
            DWIStack(data + 2, [0, 1000], [[0, 0, 0], [0, 1, 0]], normalized=True)

    def test_save_load(self, tmp_path, rng):
        data = rng.random((2, 3, 4, 4)).astype(np.float32)
        stack = DWIStack(data, [0, 1000], [[0, 0, 0], [0, 0, 1]])
        stack.save(tmp_path / "dwi")
        back = DWIStack.load(tmp_path / "dwi")
        assert back.data.tobytes() == data.tobytes()
        assert (back.slice_count, back.height, back.width) == (3, 4, 4)
        np.testing.assert_array_equal(back.b0_mean(), data[0])

    def test_tract_atlas_contract(self):
        with pytest.raises(ShapeError):
            validate_tract_atlas(np.zeros((41, 1, 2, 2)))
        with pytest.raises(ValueError):
            validate_tract_atlas(-np.ones((42, 1, 2, 2)))
        validate_tract_atlas(np.zeros((42, 1, 2, 2)))


class TestNormalizePad:
    def test_examples(self):
        np.testing.assert_array_equal(minmax_normalize([2.0, 4.0], (0, 1)), [0.0, 1.0])
        np.testing.assert_array_equal(minmax_normalize([2.0, 4.0]), [-1.0, 1.0])
        np.testing.assert_array_equal(minmax_normalize(np.full((3, 3), 7.0)), np.zeros((3, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            minmax_normalize([1.0, np.nan])

    @given(hnp.arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e6, 1e6)))
    def test_range_and_idempotence(self, x):
        y = minmax_normalize(x)
        assert y.min() >= -1 and y.max() <= 1
        np.testing.assert_allclose(minmax_normalize(y), y, atol=1e-7)

    def test_pad_examples(self):
        x = np.arange(4.0).reshape(2, 2)
        p = pad_center(x, 4, 4)
        np.testing.assert_array_equal(p[1:3, 1:3], x)
        assert p.sum() - x.sum() == -12
        p = pad_center(np.ones((3, 3)), 4, 4)
        np.testing.assert_array_equal(p[:3, :3], 1)
        assert np.all(p[3] == -1) and np.all(p[:, 3] == -1)
        y = np.random.default_rng(1).random((64, 64))
        np.testing.assert_array_equal(pad_center(y, 64, 64), y)

    def test_pad_smaller_target(self):
        with pytest.raises(ValueError):
            pad_center(np.ones((4, 4)), 3, 4)

    @given(
        st.integers(1, 9), st.integers(1, 9), st.integers(0, 5), st.integers(0, 5)
    )
    def test_pad_crop_inverse(self, h, w, dh, dw):
        x = np.random.default_rng(h * 10 + w).random((2, h, w))
        np.testing.assert_array_equal(center_crop(pad_center(x, h + dh, w + dw), h, w), x)
