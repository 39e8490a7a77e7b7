import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_tube
from oracles import loop_gather, loop_scatter_add, naive_matmul, sequential_mean
from tube_attention.errors import FormatError, ShapeError
from tube_attention.geometry import TubeIndex
from tube_attention.tensor import clip_mean, gather_positions, matmul, read_ft1, scatter_add, write_ft1


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])

    def test_hand_case(self):
        np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])

    def test_matches_triple_loop_exactly(self, rng):
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
            lhs = matmul(matmul(a, b), c)
            rhs = matmul(a, matmul(b, c))
            assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(lhs))


class TestGatherScatter:
    def test_full_tube_is_flattened_grid(self, rng):
        x = rng.normal(size=(1, 1, 2, 2, 3))
        rows = gather_positions(x, TubeIndex.full((1, 1, 2, 2)))
        np.testing.assert_array_equal(rows, x.reshape(4, 3))

    def test_empty_tube(self, rng):
        x = rng.normal(size=(2, 1, 2, 2, 3))
        assert gather_positions(x, TubeIndex.empty((2, 1, 2, 2))).shape == (0, 3)

    def test_gather_matches_loop(self, rng):
        x = rng.normal(size=(2, 3, 4, 5, 3))
        tube = random_tube(rng, (2, 3, 4, 5))
        np.testing.assert_array_equal(gather_positions(x, tube), loop_gather(x, tube.masks))

    def test_scatter_matches_loop(self, rng):
        x = rng.normal(size=(2, 3, 4, 5, 3))
        tube = random_tube(rng, (2, 3, 4, 5))
        rows = rng.normal(size=(tube.total, 3))
        np.testing.assert_array_equal(scatter_add(x, tube, rows), loop_scatter_add(x, tube.masks, rows))

    def test_scatter_then_gather(self, rng):
        x = rng.normal(size=(2, 2, 3, 3, 2))
        tube = random_tube(rng, (2, 2, 3, 3))
        rows = rng.normal(size=(tube.total, 2))
        back = gather_positions(scatter_add(x, tube, rows), tube)
        np.testing.assert_array_equal(back, gather_positions(x, tube) + rows)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_zero_rows_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(rng.integers(1, 4, size=4))
        x = rng.normal(size=(*dims, 3))
        tube = random_tube(rng, dims)
        np.testing.assert_array_equal(scatter_add(x, tube, np.zeros((tube.total, 3))), x)

    def test_shape_errors(self, rng):
        x = rng.normal(size=(1, 1, 2, 2, 3))
        with pytest.raises(ShapeError):
            gather_positions(x, TubeIndex.full((1, 1, 3, 2)))
        with pytest.raises(ShapeError):
            scatter_add(x, TubeIndex.full((1, 1, 2, 2)), np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            gather_positions(np.zeros((2, 2, 3)), TubeIndex.full((1, 1, 2, 2)))


class TestClipMean:
    def test_single_clip_identity(self, rng):
        x = rng.normal(size=(1, 2, 3, 3, 2))
        np.testing.assert_array_equal(clip_mean(x), x)

    def test_constants(self):
        x = np.stack([np.full((1, 2, 2, 3), 2.0), np.full((1, 2, 2, 3), 4.0)])
        np.testing.assert_array_equal(clip_mean(x), np.full((1, 1, 2, 2, 3), 3.0))

    def test_matches_accumulation(self, rng):
        x = rng.normal(size=(10, 2, 3, 3, 4))
        out = clip_mean(x)
        assert out.shape == (1, 2, 3, 3, 4)
        np.testing.assert_allclose(out[0], sequential_mean(x), atol=1e-12, rtol=0)

    def test_permutation_invariant_exactly(self, rng):
        x = rng.normal(size=(7, 2, 2, 2, 3))
        for _ in range(5):
            np.testing.assert_array_equal(clip_mean(x[rng.permutation(7)]), clip_mean(x))


class TestFT1:
    @pytest.mark.parametrize("dtype", ["f32", "f64"])
    def test_round_trip(self, tmp_path, rng, dtype):
        x = rng.normal(size=(2, 3, 4, 5, 6))
        path = tmp_path / "x.ft1"
        write_ft1(path, x, dtype=dtype)
        back = read_ft1(path)
        expected = x.astype(np.float32) if dtype == "f32" else x
        np.testing.assert_array_equal(back, expected)
        assert back.dtype == expected.dtype

    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.ft1"
        write_ft1(path, np.arange(6, dtype=float).reshape(1, 1, 1, 2, 3), dtype="f64")
        raw = path.read_bytes()
        header, blob = raw.split(b"\n", 1)
        assert header == b'{"magic": "FT1", "dims": [1, 1, 1, 2, 3], "dtype": "f64"}'
        assert np.frombuffer(blob, dtype="<f8").tolist() == [0, 1, 2, 3, 4, 5]

    def test_truncated_blob(self, tmp_path, rng):
        path = tmp_path / "x.ft1"
        write_ft1(path, rng.normal(size=(1, 1, 2, 2, 2)), dtype="f32")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="29 bytes, expected 32"):
            read_ft1(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ft1"
        path.write_bytes(b'{"magic": "XX", "dims": [1,1,1,1,1], "dtype": "f32"}\n\x00\x00\x00\x00')
        with pytest.raises(FormatError):
            read_ft1(path)
