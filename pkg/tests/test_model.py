import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phaserec.core import PhaseLabel
from phaserec.model import (
    ConstraintViolated, CorruptPayload, DimensionMismatch, EmptyDataset, LinearModelParams, ScalingConfig,
    TrainConfig, VersionMismatch, batch_loss, bce_gradients, bce_loss, compound_scale, load_model, lr_at_step,
    predict_batch, predict_slice, save_model, train, train_arrays,
)


def separable(n_per_class=60, dim=12, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.eye(4, dim) * 3.0
    x = np.concatenate([rng.normal(c, 0.4, size=(n_per_class, dim)) for c in centres])
    y = np.repeat(np.arange(4), n_per_class)
    return x, y


def random_params(dim, seed):
    rng = np.random.default_rng(seed)
    return LinearModelParams(rng.normal(size=(4, dim)), rng.normal(size=4), bins=dim, grid=1)


class TestPredict:
    def test_zero_model_gives_half(self):
        np.testing.assert_array_equal(predict_slice(LinearModelParams.zeros(8), np.ones(8)), [0.5] * 4)

    def test_closed_form_logits(self):
        p = LinearModelParams(np.zeros((4, 3)), [math.log(3), 0, -math.log(3), 0], bins=3, grid=1)
        np.testing.assert_allclose(predict_slice(p, np.zeros(3)), [0.75, 0.5, 0.25, 0.5], rtol=0, atol=1e-15)

    def test_strictly_inside_unit_interval(self):
        p = LinearModelParams(np.full((4, 2), 1e4) * [[1], [-1], [1], [-1]], np.zeros(4), bins=2, grid=1)
        s = predict_slice(p, np.array([1.0, 1.0]))
        assert np.all(s > 0) and np.all(s < 1)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            predict_slice(LinearModelParams.zeros(8), np.ones(7))

    def test_repeatable(self):
        p = random_params(16, 1)
        x = np.random.default_rng(2).random(16)
        assert predict_slice(p, x).tobytes() == predict_slice(p, x).tobytes()

    def test_batch_matches_single(self):
        p = random_params(10, 3)
        x = np.random.default_rng(4).random((5, 10))
        np.testing.assert_array_equal(predict_batch(p, x), np.stack([predict_slice(p, r) for r in x]))


class TestLoss:
    def test_perfect_prediction(self):
        assert bce_loss([1.0, 0.0, 0.0, 0.0], PhaseLabel.NON_CONTRAST) < 1e-5

    def test_all_half(self):
        for t in PhaseLabel:
            assert bce_loss([0.5] * 4, t) == pytest.approx(math.log(2), abs=1e-15)

    def test_hand_value(self):
        assert bce_loss([0.9, 0.1, 0.1, 0.1], PhaseLabel.NON_CONTRAST) == pytest.approx(-math.log(0.9), rel=1e-14)

    def test_clamped_never_infinite(self):
        assert math.isfinite(bce_loss([0.0, 1.0, 1.0, 1.0], PhaseLabel.NON_CONTRAST))


class TestGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        dim = 6
        p = LinearModelParams(rng.normal(0, 0.5, size=(4, dim)), rng.normal(0, 0.5, size=4), bins=dim, grid=1)
        x = rng.normal(size=(9, dim))
        y = rng.integers(0, 4, size=9)
        _, g_w, g_b = bce_gradients(p, x, y)
        h = 1e-5
        num_w = np.zeros_like(g_w)
        for i in range(4):
            for j in range(dim):
                plus, minus = p.weights.copy(), p.weights.copy()
                plus[i, j] += h
                minus[i, j] -= h
                num_w[i, j] = (batch_loss(LinearModelParams(plus, p.biases, dim, 1), x, y)
                               - batch_loss(LinearModelParams(minus, p.biases, dim, 1), x, y)) / (2 * h)
        num_b = np.zeros(4)
        for i in range(4):
            plus, minus = p.biases.copy(), p.biases.copy()
            plus[i] += h
            minus[i] -= h
            num_b[i] = (batch_loss(LinearModelParams(p.weights, plus, dim, 1), x, y)
                        - batch_loss(LinearModelParams(p.weights, minus, dim, 1), x, y)) / (2 * h)
        np.testing.assert_allclose(g_w, num_w, rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(g_b, num_b, rtol=1e-4, atol=1e-9)


class TestSchedule:
    def test_examples(self):
        cfg = TrainConfig(base_lr=0.01, warmup_steps=10)
        assert lr_at_step(cfg, 10, 100) == 0.01
        assert lr_at_step(cfg, 0, 100) == 0.001
        assert lr_at_step(TrainConfig(base_lr=0.01, warmup_steps=0), 1, 2) == pytest.approx(0.005, abs=1e-18)

    def test_closed_form(self):
        cfg = TrainConfig(base_lr=0.02, warmup_steps=7)
        total = 61
        for step in np.linspace(0, total - 1, 20).astype(int):
            if step < 7:
                want = 0.02 * (step + 1) / 7
            else:
                want = 0.01 * (1 + math.cos(math.pi * (step - 7) / (total - 7)))
            assert abs(lr_at_step(cfg, int(step), total) - want) <= 1e-12

    def test_continuous_at_warmup_and_decays(self):
        cfg = TrainConfig(base_lr=1.0, warmup_steps=100)
        assert lr_at_step(cfg, 99, 10**6) == lr_at_step(cfg, 100, 10**6) == 1.0
        assert lr_at_step(cfg, 10**6 - 1, 10**6) <= 1e-6

    def test_bounds(self):
        cfg = TrainConfig(warmup_steps=5)
        with pytest.raises(ValueError):
            lr_at_step(cfg, 10, 10)
        with pytest.raises(ValueError):
            lr_at_step(cfg, 0, 5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 50), st.integers(1, 500), st.data())
    def test_positive_and_capped(self, warmup, extra, data):
        total = warmup + extra
        step = data.draw(st.integers(0, total - 1))
        lr = lr_at_step(TrainConfig(base_lr=0.3, warmup_steps=warmup), step, total)
        assert 0 < lr <= 0.3


class TestTrain:
    def test_loss_halves_on_separable_data(self):
        x, y = separable(n_per_class=200)
        res = train_arrays(x, y, TrainConfig(epochs=15), bins=12, grid=1)
        assert len(res.epoch_losses) == 15
        assert res.epoch_losses[-1] < 0.5 * res.epoch_losses[0]
        assert np.mean(predict_batch(res.params, x).argmax(axis=1) == y) == 1.0

    def test_without_standardization(self):
        x, y = separable(n_per_class=200)
        res = train_arrays(x, y, TrainConfig(epochs=15, standardize=False), bins=12, grid=1)
        assert res.epoch_losses[-1] < 0.5 * res.epoch_losses[0]

    def test_step_count(self):
        x, y = separable(n_per_class=25)  # 100 rows
        res = train_arrays(x, y, TrainConfig(epochs=15, batch_size=32), bins=12, grid=1)
        assert res.n_steps == math.ceil(100 / 32) * 15
        assert res.config.warmup_steps == 4

    def test_deterministic_bytes(self):
        x, y = separable()
        a = train_arrays(x, y, TrainConfig(epochs=3, seed=11), bins=12, grid=1)
        b = train_arrays(x, y, TrainConfig(epochs=3, seed=11), bins=12, grid=1)
        c = train_arrays(x, y, TrainConfig(epochs=3, seed=12), bins=12, grid=1)
        assert save_model(a.params) == save_model(b.params)
        assert save_model(a.params) != save_model(c.params)

    def test_pairs_interface_and_absent_classes(self):
        x, y = separable(n_per_class=10)
        keep = y != 3
        res = train([(f, PhaseLabel(int(t))) for f, t in zip(x[keep], y[keep])], TrainConfig(epochs=2), 12, 1)
        assert res.params.dim == 12 and len(res.epoch_losses) == 2

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            train([], TrainConfig())
        with pytest.raises(EmptyDataset):
            train_arrays(np.zeros((0, 4)), np.zeros(0, dtype=int))

    def test_single_step_run(self):
        x, y = separable(n_per_class=1)
        res = train_arrays(x, y, TrainConfig(epochs=1, batch_size=64), bins=12, grid=1)
        assert res.n_steps == 1 and res.config.warmup_steps == 0

    def test_config_validation(self):
        for bad in [dict(base_lr=0), dict(epochs=0), dict(batch_size=0), dict(warmup_steps=-1), dict(seed=-1)]:
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestModelFile:
    def test_round_trip(self):
        for seed in range(5):
            p = random_params(16 + seed, seed)
            assert load_model(save_model(p)) == p

    def test_layout(self):
        p = random_params(3, 0)
        data = save_model(p)
        assert data[:4] == b"PHSM"
        assert len(data) == 4 + 5 * 4 + 8 * (4 * 3 + 4) + 4

    def test_version_99(self):
        data = bytearray(save_model(random_params(4, 0)))
        data[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(VersionMismatch):
            load_model(bytes(data))

    def test_truncated(self):
        data = save_model(random_params(4, 0))
        with pytest.raises(CorruptPayload):
            load_model(data[: len(data) // 2])

    def test_bit_flip(self):
        data = bytearray(save_model(random_params(4, 0)))
        data[40] ^= 1
        with pytest.raises(CorruptPayload):
            load_model(bytes(data))


class TestCompoundScaling:
    def test_phi_zero(self):
        assert compound_scale(ScalingConfig(1.2, 1.1, 1.15, 0)) == (1, 1, 1)

    def test_depth_only(self):
        cfg = ScalingConfig(2, 1, 1, 3, validate=True)
        assert cfg.flops_factor == 2
        assert compound_scale(cfg) == (8, 1, 1)

    def test_constraint(self):
        with pytest.raises(ConstraintViolated):
            compound_scale(ScalingConfig(1, 1, 1, 1, validate=True))
        assert compound_scale(ScalingConfig(1, 1, 1, 1)) == (1, 1, 1)

    def test_ranges(self):
        with pytest.raises(ValueError):
            ScalingConfig(0.9, 1, 1, 1)
        with pytest.raises(ValueError):
            ScalingConfig(1, 1, 1, -1)
