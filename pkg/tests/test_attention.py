import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params, random_tube
from oracles import central_diff, naive_attention, rel_err
from tube_attention.attention import (
    AttentionParams,
    init_params,
    load_params,
    masked_nonlocal_reference,
    nonlocal_forward,
    save_params,
    stack_backward,
    stack_forward,
    tsa_backward,
    tsa_forward,
)
from tube_attention.errors import CheckpointError, ConfigError, ShapeError
from tube_attention.geometry import TubeIndex


def _instance(rng, dims=(2, 2, 3, 3), c=4, cr=2):
    x = rng.normal(size=(*dims, c))
    return x, random_tube(rng, dims), random_params(rng, c, cr)


class TestForward:
    def test_zero_output_projection_is_identity(self, rng):
        x, tube, _ = _instance(rng)
        p = init_params(4, 2, rng)
        np.testing.assert_array_equal(tsa_forward(x, tube, p), x)

    def test_empty_tube_is_identity(self, rng):
        x, _, p = _instance(rng)
        np.testing.assert_array_equal(tsa_forward(x, TubeIndex.empty(x.shape[:4]), p), x)

    def test_hand_case(self):
        x = np.array([1.0, 2.0]).reshape(1, 1, 1, 1, 2)
        p = AttentionParams([[1.0], [0.0]], [[0.0], [1.0]], [[1.0], [1.0]], [[1.0, -1.0]])
        out = tsa_forward(x, TubeIndex.full((1, 1, 1, 1)), p)
        np.testing.assert_array_equal(out.reshape(2), [7.0, -4.0])

    def test_matches_masked_reference(self, rng):
        for _ in range(20):
            x, tube, p = _instance(rng, dims=(3, 2, 4, 4), c=6, cr=3)
            assert rel_err(tsa_forward(x, tube, p), masked_nonlocal_reference(x, tube, p)) <= 1e-9

    def test_matches_quadruple_loop(self, rng):
        x, tube, p = _instance(rng, dims=(2, 2, 2, 3))
        expected = naive_attention(x, tube.masks, p.theta, p.phi, p.g, p.w_z)
        np.testing.assert_allclose(tsa_forward(x, tube, p), expected, rtol=1e-10, atol=1e-12)

    def test_full_tube_equals_nonlocal(self, rng):
        x, _, p = _instance(rng)
        full = TubeIndex.full(x.shape[:4])
        np.testing.assert_array_equal(tsa_forward(x, full, p), nonlocal_forward(x, p))
        assert rel_err(masked_nonlocal_reference(x, full, p), nonlocal_forward(x, p)) <= 1e-12

    def test_block_size_does_not_matter(self, rng):
        x, tube, p = _instance(rng, dims=(2, 3, 4, 4))
        ref = tsa_forward(x, tube, p)
        for block in (1, 3, 7, 1024):
            assert rel_err(tsa_forward(x, tube, p, block=block), ref) <= 1e-12

    def test_non_tube_positions_untouched(self, rng):
        x, tube, p = _instance(rng, dims=(2, 3, 4, 4))
        out = tsa_forward(x, tube, p)
        outside = ~tube.masks
        np.testing.assert_array_equal(out[outside], x[outside])

    def test_non_tube_values_do_not_leak(self, rng):
        x, tube, p = _instance(rng, dims=(2, 3, 4, 4))
        y = x.copy()
        y[~tube.masks] = rng.normal(size=(int((~tube.masks).sum()), 4)) * 100
        inside = tube.masks
        np.testing.assert_array_equal(tsa_forward(x, tube, p)[inside], tsa_forward(y, tube, p)[inside])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_clip_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        x, tube, p = _instance(rng, dims=(4, 2, 3, 3))
        perm = rng.permutation(4)
        lhs = tsa_forward(x[perm], TubeIndex(tube.masks[perm]), p)
        rhs = tsa_forward(x, tube, p)[perm]
        assert rel_err(lhs, rhs) <= 1e-12

    def test_float32_input_stays_float32(self, rng):
        x, tube, p = _instance(rng)
        out = tsa_forward(x.astype(np.float32), tube, AttentionParams(*(a.astype(np.float32) for a in p.as_dict().values())))
        assert out.dtype == np.float32

    def test_shape_checks(self, rng):
        x, tube, p = _instance(rng)
        with pytest.raises(ShapeError):
            tsa_forward(x, TubeIndex.full((2, 2, 3, 4)), p)
        with pytest.raises(ShapeError):
            tsa_forward(x[..., :3], tube, p)
        with pytest.raises(ShapeError):
            AttentionParams(np.ones((4, 2)), np.ones((4, 2)), np.ones((4, 3)), np.ones((2, 4)))

    def test_init_params(self, rng):
        p = init_params(8, 2, rng)
        assert p.theta.shape == (8, 4) and p.w_z.shape == (4, 8)
        assert np.all(np.abs(p.theta) <= 1 / np.sqrt(8))
        assert not p.w_z.any()
        with pytest.raises(ConfigError):
            init_params(7, 2)


class TestBackward:
    def test_finite_differences(self, rng):
        for trial in range(20):
            dims = tuple(int(d) for d in rng.integers(1, 3, size=4))
            x, tube, p = _instance(rng, dims=dims, c=3, cr=2)
            if tube.total == 0:
                tube = TubeIndex.full(dims)
            upstream = rng.normal(size=x.shape)
            grads = tsa_backward(x, tube, p, upstream)
            p = AttentionParams(*(a.copy() for a in p.as_dict().values()))

            def loss():
                return float(np.sum(tsa_forward(x, tube, p) * upstream))

            for name, got in [("theta", grads.d_theta), ("phi", grads.d_phi), ("g", grads.d_g), ("w_z", grads.d_wz)]:
                arr = getattr(p, name)
                arr.setflags(write=True)
                assert rel_err(got, central_diff(loss, arr)) <= 1e-4, (trial, name)
            assert rel_err(grads.d_input, central_diff(loss, x)) <= 1e-4, trial

    def test_zero_upstream(self, rng):
        x, tube, p = _instance(rng)
        g = tsa_backward(x, tube, p, np.zeros_like(x))
        for arr in (g.d_theta, g.d_phi, g.d_g, g.d_wz, g.d_input):
            assert not arr.any()

    def test_empty_tube_passes_gradient_through(self, rng):
        x, _, p = _instance(rng)
        up = rng.normal(size=x.shape)
        g = tsa_backward(x, TubeIndex.empty(x.shape[:4]), p, up)
        np.testing.assert_array_equal(g.d_input, up)
        assert not g.d_theta.any()

    def test_blocked_matches_unblocked(self, rng):
        x, tube, p = _instance(rng, dims=(2, 3, 4, 4))
        up = rng.normal(size=x.shape)
        a = tsa_backward(x, tube, p, up, block=3)
        b = tsa_backward(x, tube, p, up)
        assert rel_err(a.d_theta, b.d_theta) <= 1e-12
        assert rel_err(a.d_input, b.d_input) <= 1e-12


class TestStack:
    def test_depth_one_is_single_module(self, rng):
        x, tube, p = _instance(rng)
        np.testing.assert_array_equal(stack_forward(x, tube, [p]), tsa_forward(x, tube, p))

    def test_zero_projection_stack_is_identity(self, rng):
        x, tube, _ = _instance(rng)
        ps = [init_params(4, 2, rng) for _ in range(3)]
        np.testing.assert_array_equal(stack_forward(x, tube, ps), x)

    def test_composition(self, rng):
        x, tube, p1 = _instance(rng)
        p2 = random_params(rng, 4, 2)
        np.testing.assert_array_equal(stack_forward(x, tube, [p1, p2]), tsa_forward(tsa_forward(x, tube, p1), tube, p2))

    def test_depth_limit(self, rng):
        x, tube, p = _instance(rng)
        with pytest.raises(ConfigError):
            stack_forward(x, tube, [p] * 4)
        with pytest.raises(ConfigError):
            stack_forward(x, tube, [])

    def test_stack_gradient(self, rng):
        x, tube, p1 = _instance(rng, dims=(1, 2, 2, 2), c=3, cr=1)
        p2 = random_params(rng, 3, 1)
        up = rng.normal(size=x.shape)
        grads, d_in = stack_backward(x, tube, [p1, p2], up)

        def loss():
            return float(np.sum(stack_forward(x, tube, [p1, p2]) * up))

        assert rel_err(d_in, central_diff(loss, x)) <= 1e-4
        arr = p1.theta
        arr.setflags(write=True)
        assert rel_err(grads[0].d_theta, central_diff(loss, arr)) <= 1e-4


class TestParamsCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        p = random_params(rng, 6, 3)
        save_params(tmp_path / "p", p, seed=7)
        back = load_params(tmp_path / "p")
        for k, v in p.as_dict().items():
            np.testing.assert_array_equal(back.as_dict()[k], v)

    def test_wrong_version(self, tmp_path, rng):
        import json

        save_params(tmp_path / "p", random_params(rng, 2, 1))
        manifest = tmp_path / "p.json"
        doc = json.loads(manifest.read_text())
        doc["version"] = 99
        manifest.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError, match="99"):
            load_params(tmp_path / "p")
