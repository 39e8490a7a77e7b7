import math

import numpy as np
import pytest

from conftest import random_tube
from oracles import central_diff, rel_err
from tube_attention.errors import ConfigError, ShapeError
from tube_attention.model import (
    BackboneConfig,
    HeadConfig,
    NetConfig,
    ScoreDistribution,
    TSANet,
    final_score,
    gt_distribution,
    init_head,
    kl_divergence,
    loss_bce,
    loss_bce_grad,
    loss_kl,
    loss_kl_grad,
    loss_mse,
    loss_mse_grad,
    mlp_backward,
    mlp_forward,
    mlp_head,
    stage1_stub,
    stage2_stub,
    stage2_weights,
)


class TestBackboneStubs:
    cfg = BackboneConfig(clip_frames=8, in_size=(12, 10), in_channels=3, grid=(4, 5), channels=6, stride=4)

    def test_constant_input_gives_constant_grid(self):
        out = stage1_stub(np.full((2, 8, 12, 10, 3), 0.7), self.cfg)
        assert out.shape == (2, 2, 4, 5, 6)
        np.testing.assert_allclose(out, np.broadcast_to(out[0, 0, 0, 0], out.shape), rtol=0, atol=1e-15)

    def test_time_steps(self):
        cfg = BackboneConfig(clip_frames=16)
        assert cfg.time_steps == 4
        assert stage1_stub(np.zeros((1, 16, 56, 56, 3)), cfg).shape == (1, 4, 14, 14, 16)

    def test_deterministic(self, rng):
        clips = rng.normal(size=(1, 8, 12, 10, 3))
        np.testing.assert_array_equal(stage1_stub(clips, self.cfg), stage1_stub(clips, self.cfg))

    def test_pools_each_frame_group(self, rng):
        clips = rng.normal(size=(1, 8, 4, 5, 3))
        cfg = BackboneConfig(clip_frames=8, in_size=(4, 5), in_channels=3, grid=(4, 5), channels=6, stride=4)
        w = np.eye(3, 6)
        out = stage1_stub(clips, cfg, weights=w)
        np.testing.assert_allclose(out[0, 1, :, :, :3], clips[0, 4:8].mean(axis=0), atol=1e-15)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            stage1_stub(np.zeros((1, 8, 3, 3, 3)), self.cfg)
        with pytest.raises(ConfigError):
            stage1_stub(np.zeros((1, 2, 12, 10, 3)), self.cfg)
        with pytest.raises(ShapeError):
            stage1_stub(np.zeros((1, 8, 12, 10, 2)), self.cfg)

    def test_stage2_constant(self):
        w = stage2_weights(4, 3, seed=5)
        out = stage2_stub(np.ones((2, 2, 3, 3, 4)), w)
        assert out.shape == (2, 1, 1, 1, 3)
        np.testing.assert_allclose(out[0, 0, 0, 0], w.sum(axis=0), atol=1e-15)

    def test_stage2_deterministic_weights(self):
        np.testing.assert_array_equal(stage2_weights(4, 3, 9), stage2_weights(4, 3, 9))
        assert not np.array_equal(stage2_weights(4, 3, 9), stage2_weights(4, 3, 10))


class TestHead:
    def test_single_affine_layer(self, rng):
        w, b = rng.normal(size=(4, 1)), rng.normal(size=1)
        x = rng.normal(size=4)
        out = mlp_head(x, [(w, b)], HeadConfig("regression", hidden=(), out_size=1))
        np.testing.assert_allclose(out, x @ w + b, atol=1e-15)

    def test_distribution_sums_to_one(self, rng):
        cfg = HeadConfig("distribution", hidden=(5,), out_size=11)
        out = mlp_head(rng.normal(size=3), init_head(3, cfg, rng), cfg)
        assert abs(out.sum() - 1) <= 1e-12 and np.all(out >= 0)

    def test_classification_in_unit_interval(self, rng):
        cfg = HeadConfig("classification", hidden=(4,), out_size=1)
        out = mlp_head(rng.normal(size=3) * 100, init_head(3, cfg, rng), cfg)
        assert 0 <= out[0] <= 1

    def test_matches_layer_loop(self, rng):
        cfg = HeadConfig("regression", hidden=(6, 5), out_size=1)
        layers = init_head(4, cfg, rng)
        x = rng.normal(size=4)
        a = x
        for k, (w, b) in enumerate(layers):
            z = np.array([sum(a[i] * w[i, j] for i in range(len(a))) + b[j] for j in range(len(b))])
            a = np.tanh(z) if k < len(layers) - 1 else z
        np.testing.assert_allclose(mlp_head(x, layers, cfg), a, rtol=1e-12)

    @pytest.mark.parametrize("task,out_size", [("regression", 1), ("classification", 1), ("distribution", 4)])
    def test_backward_finite_differences(self, rng, task, out_size):
        cfg = HeadConfig(task, hidden=(5,), out_size=out_size)
        layers = init_head(3, cfg, rng)
        x = rng.normal(size=3)
        up = rng.normal(size=out_size)
        out, cache = mlp_forward(x, layers, task)
        grads, dx = mlp_backward(layers, task, cache, up)

        def loss():
            return float(np.dot(mlp_forward(x, layers, task)[0], up))

        assert rel_err(dx, central_diff(loss, x)) <= 1e-4
        for (w, b), (dw, db) in zip(layers, grads):
            assert rel_err(dw, central_diff(loss, w)) <= 1e-4
            assert rel_err(db, central_diff(loss, b)) <= 1e-4

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            HeadConfig("ranking")
        with pytest.raises(ConfigError):
            HeadConfig("regression", out_size=3)
        with pytest.raises(ConfigError):
            HeadConfig("distribution", out_size=1)


class TestLosses:
    def test_mse(self):
        assert loss_mse([3.0], 3.0) == 0.0
        assert loss_mse([2.0], 5.0) == 9.0

    def test_mse_gradient(self, rng):
        pred = rng.normal(size=3)
        gt = rng.normal(size=3)
        assert rel_err(loss_mse_grad(pred, gt), central_diff(lambda: loss_mse(pred, gt), pred)) <= 1e-6

    def test_bce_gradient(self, rng):
        for _ in range(20):
            pred = rng.uniform(0.05, 0.95, size=2)
            gt = rng.integers(0, 2, size=2).astype(float)
            num = central_diff(lambda: loss_bce(pred, gt), pred)
            assert rel_err(loss_bce_grad(pred, gt), num) <= 1e-6

    def test_bce_clamped(self):
        assert np.isfinite(loss_bce([0.0], [1.0]))
        assert np.isfinite(loss_bce([1.0], [0.0]))

    def test_kl_identical(self, rng):
        p = rng.dirichlet(np.ones(6))
        d = ScoreDistribution(np.arange(6), p)
        assert loss_kl(d, d) == 0.0

    def test_kl_point_mass_vs_half(self):
        bins = [0.0, 1.0]
        assert loss_kl(ScoreDistribution(bins, [1.0, 0.0]), ScoreDistribution(bins, [0.5, 0.5])) == math.log(2)

    def test_kl_matches_direct_sum(self, rng):
        for _ in range(20):
            p = rng.dirichlet(np.ones(7))
            p[rng.integers(0, 7)] = 0.0
            p /= p.sum()
            s = rng.dirichlet(np.ones(7))
            direct = sum(a * math.log(a / b) for a, b in zip(p, s) if a > 0)
            assert kl_divergence(p, s) == pytest.approx(direct, rel=1e-12, abs=1e-15)
            assert kl_divergence(p, s) >= 0

    def test_kl_gradient(self, rng):
        p = rng.dirichlet(np.ones(5))
        s = rng.dirichlet(np.ones(5))
        assert rel_err(loss_kl_grad(p, s), central_diff(lambda: kl_divergence(p, s), s)) <= 1e-6

    def test_kl_bins_must_match(self):
        with pytest.raises(ShapeError):
            loss_kl(ScoreDistribution([0, 1], [0.5, 0.5]), ScoreDistribution([0, 2], [0.5, 0.5]))

    def test_distribution_validation(self):
        with pytest.raises(ValueError):
            ScoreDistribution([0, 1], [0.7, 0.7])
        with pytest.raises(ShapeError):
            ScoreDistribution([0], [1.0])


class TestScores:
    def test_gt_distribution_narrow_sigma(self):
        d = gt_distribution(3.0, 1e-3, np.arange(7))
        assert d.probs[3] == 1.0

    def test_gt_distribution_symmetric(self):
        d = gt_distribution(5.0, 1.5, np.arange(11))
        np.testing.assert_allclose(d.probs, d.probs[::-1], atol=1e-15)
        assert abs(d.probs.sum() - 1) <= 1e-12
        assert d.expectation() == pytest.approx(5.0, abs=1e-12)

    def test_gt_distribution_far_from_bins(self):
        d = gt_distribution(1e4, 0.5, np.arange(5))
        assert np.all(np.isfinite(d.probs)) and d.probs[-1] == pytest.approx(1.0)

    def test_final_score_multiplies_difficulty(self):
        assert final_score(25.0, 3.0) == 75.0
        assert final_score(12.5) == 12.5

    def test_point_mass_expectation(self):
        bins = np.linspace(0, 100, 101)
        probs = np.zeros(101)
        probs[40] = 1.0
        assert final_score(ScoreDistribution(bins, probs).expectation(), 2.0) == 80.0


def _net_input(rng, dims=(3, 2, 3, 3), c=4):
    return rng.normal(size=(*dims, c)), random_tube(rng, dims, 0.5)


class TestNetwork:
    def test_zero_projection_matches_plain(self, rng):
        x, tube = _net_input(rng)
        head = HeadConfig("regression", hidden=(5,))
        tsa = TSANet(NetConfig(channels=4, depth=1, stage2_channels=6, head=head), seed=3)
        plain_params = {k: v for k, v in tsa.params.items() if not k.startswith("tsa")}
        plain = TSANet(NetConfig(channels=4, depth=0, stage2_channels=6, head=head), params=plain_params)
        np.testing.assert_array_equal(tsa.predict(x, tube), plain.predict(x, tube))

    def test_seeded_init(self):
        cfg = NetConfig(channels=4, depth=2, stage2_channels=6, head=HeadConfig(hidden=(5,)))
        a, b = TSANet(cfg, seed=1), TSANet(cfg, seed=1)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        assert "stage2.w" not in a.trainable

    @pytest.mark.parametrize(
        "task,out_size,backbone",
        [("regression", 1, False), ("classification", 1, True), ("distribution", 5, False)],
    )
    def test_full_gradient(self, rng, task, out_size, backbone):
        x, tube = _net_input(rng, dims=(2, 2, 2, 2), c=4)
        cfg = NetConfig(channels=4, depth=2, stage2_channels=3, train_backbone=backbone, head=HeadConfig(task, (3,), out_size))
        net = TSANet(cfg, seed=0)
        for k in range(2):
            net.params[f"tsa{k}.w_z"] = rng.normal(scale=0.5, size=(2, 4))
        up = rng.normal(size=out_size)
        out, cache = net.forward(x, tube)
        grads = net.backward(cache, up)
        assert set(grads) == set(net.trainable)

        def loss():
            return float(np.dot(net.predict(x, tube), up))

        for name in net.trainable:
            assert rel_err(grads[name], central_diff(loss, net.params[name])) <= 1e-4, name

    def test_clip_outputs_shape(self, rng):
        x, tube = _net_input(rng)
        net = TSANet(NetConfig(channels=4, depth=1, stage2_channels=6, head=HeadConfig("distribution", (5,), 7)))
        assert net.clip_outputs(x, tube).shape == (3, 7)

    def test_depth_bounds(self):
        with pytest.raises(ConfigError):
            NetConfig(depth=4)
