# -*- coding: utf-8 -*-

"""Testing the primal-dual training."""

from dataclasses import replace

import numpy as np
import pytest

from urllc_allocator import channel, mlp, trainer
from urllc_allocator.errors import (
    DivergenceError,
    InvalidInputError,
    NumericalError,
)
from urllc_allocator.qos import build_qos
from urllc_allocator.symmetric import (
    SearchConfig,
    solve_bandwidth,
    warm_start_bandwidth,
)

QUICK = trainer.TrainConfig(
    batch_size=50, max_frames=2, eval_batch_size=2000, verify_samples=10_000
)


@pytest.fixture(scope="function")
def state3(road3):
    state = trainer.initial_state(
        road3, build_qos(road3), channel.make_rng(2), QUICK
    )
    return replace(state, multipliers=np.array([1.5, 4.0, 2.5]))


class TestInitialState:
    def test_warm_start(self, road3):
        qos = build_qos(road3)
        state = trainer.initial_state(road3, qos, channel.make_rng(0))
        np.testing.assert_allclose(
            state.bandwidth, warm_start_bandwidth(road3, qos)
        )
        assert state.t == 0
        assert state.params.input_scale == pytest.approx(1 / 8)
        np.testing.assert_allclose(
            state.multipliers,
            state.bandwidth_scale / state.reference_bandwidth,
        )

    def test_symmetric_multipliers_are_one(self, symmetric4):
        state = trainer.initial_state(
            symmetric4, build_qos(symmetric4), channel.make_rng(0)
        )
        np.testing.assert_allclose(state.multipliers, 1.0)

    def test_wrong_network(self, road3):
        params = mlp.init(channel.make_rng(0), 4)
        with pytest.raises(InvalidInputError):
            trainer.initial_state(
                road3, build_qos(road3), channel.make_rng(0), params=params
            )

    @pytest.mark.parametrize(
        "kwargs", [{"batch_size": 0}, {"debounce": 0}, {"xi_tolerance": 0.0}]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(InvalidInputError):
            trainer.TrainConfig(**kwargs)


class TestLoss:
    def test_no_multipliers(self, state3, road3, g_small):
        state = replace(state3, multipliers=np.zeros(3))
        result = trainer.batch_loss(state, g_small, build_qos(road3), road3)
        expected = state.total_bandwidth / state.reference_bandwidth
        assert result.loss == pytest.approx(expected)
        np.testing.assert_allclose(
            result.grad_bandwidth, 1.0 / state.reference_bandwidth
        )
        np.testing.assert_array_equal(result.grad_power, 0.0)

    def test_bandwidth_gradient(self, state3, road3, g_small):
        qos = build_qos(road3)
        result = trainer.batch_loss(state3, g_small, qos, road3)
        numeric = np.empty(3)
        for k in range(3):
            h = 1e-5 * state3.bandwidth[k]
            up, down = state3.bandwidth.copy(), state3.bandwidth.copy()
            up[k] += h
            down[k] -= h
            loss_up = trainer.batch_loss(
                replace(state3, bandwidth=up), g_small, qos, road3
            ).loss
            loss_down = trainer.batch_loss(
                replace(state3, bandwidth=down), g_small, qos, road3
            ).loss
            numeric[k] = (loss_up - loss_down) / (2 * h)
        np.testing.assert_allclose(result.grad_bandwidth, numeric, rtol=1e-5)

    def test_parameter_gradient(self, state3, road3, g_small):
        qos = build_qos(road3)
        result = trainer.batch_loss(state3, g_small, qos, road3)
        grads = mlp.backward(
            state3.params, result.trace, result.grad_power, road3.p_max
        ).flatten()
        x = state3.params.flatten()

        def loss(vector):
            state = replace(state3, params=state3.params.unflatten(vector))
            return trainer.batch_loss(state, g_small, qos, road3).loss

        h = 1e-6
        numeric = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            numeric[i] = (loss(x + e) - loss(x - e)) / (2 * h)
        np.testing.assert_allclose(grads, numeric, rtol=1e-5, atol=1e-9)

    def test_multiplier_gradient_is_residual(self, state3, road3, g_small):
        qos = build_qos(road3)
        result = trainer.batch_loss(state3, g_small, qos, road3)
        target = np.array([q.target for q in qos])
        np.testing.assert_allclose(
            result.residuals, result.lhs_mean - target
        )

    def test_gain_shape(self, state3, road3):
        with pytest.raises(InvalidInputError):
            trainer.batch_loss(
                state3, np.ones((2, 4)), build_qos(road3), road3
            )

    def test_non_finite_reported(self):
        values = np.array([[1.0, 2.0], [3.0, np.inf]])
        with pytest.raises(NumericalError) as e:
            trainer._check_finite(values, "constraint term")
        assert (e.value.user, e.value.draw) == (1, 1)


class TestStep:
    def test_pure_bandwidth_shrink(self, state3, road3, g_small):
        state = replace(state3, multipliers=np.zeros(3))
        cfg = trainer.TrainConfig(lr_bandwidth=0.1, lr_multiplier=2.0)
        qos = build_qos(road3)
        residuals = trainer.batch_loss(state, g_small, qos, road3).residuals
        new = trainer.step(state, g_small, qos, road3, cfg)
        np.testing.assert_allclose(
            new.bandwidth, state.bandwidth - 0.1 * state.bandwidth_scale
        )
        relative_scale = state.bandwidth_scale / state.reference_bandwidth
        np.testing.assert_allclose(
            new.multipliers, np.maximum(2.0 * relative_scale * residuals, 0)
        )
        assert new.t == 1

    def test_projections(self, state3, road3, g_small):
        state = replace(state3, multipliers=np.zeros(3))
        cfg = trainer.TrainConfig(lr_bandwidth=10.0, bandwidth_floor=5.0)
        new = trainer.step(state, g_small, build_qos(road3), road3, cfg)
        np.testing.assert_array_equal(new.bandwidth, 5.0)
        assert np.all(new.multipliers >= 0)

    def test_schedule(self):
        cfg = trainer.TrainConfig(decay=0.1)
        assert cfg.schedule(0) == 1.0
        assert cfg.schedule(10) == pytest.approx(0.5)

    def test_does_not_mutate(self, state3, road3, g_small):
        before = state3.bandwidth.copy()
        params = state3.params.flatten()
        trainer.step(state3, g_small, build_qos(road3), road3)
        np.testing.assert_array_equal(state3.bandwidth, before)
        np.testing.assert_array_equal(state3.params.flatten(), params)


class TestConvergenceStats:
    def test_values(self, state3, road3):
        g = channel.sample_gain_batch(channel.make_rng(4), road3, 2000)
        qos = build_qos(road3)
        zeta, xi = trainer.convergence_stats(state3, g, qos, road3)
        assert np.isfinite(zeta) and zeta > 0
        assert xi >= 0

    def test_feasible_xi_is_zero(self, state3, road3):
        g = channel.sample_gain_batch(channel.make_rng(4), road3, 2000)
        rich = replace(state3, bandwidth=10 * state3.bandwidth)
        _, xi = trainer.convergence_stats(rich, g, build_qos(road3), road3)
        assert xi == 0.0

    def test_threshold(self, state3):
        cfg = trainer.TrainConfig()
        normalized = state3.total_bandwidth / state3.reference_bandwidth
        assert trainer.is_converged(state3, 0.001 * normalized, 0.0, cfg)
        assert not trainer.is_converged(state3, 0.02 * normalized, 0.0, cfg)
        assert not trainer.is_converged(state3, 0.0, 0.02, cfg)


class TestTrain:
    def test_history(self, road3):
        state, history = trainer.train(road3, QUICK, channel.make_rng(9))
        assert len(history) == 2
        assert history["frame"].tolist() == [1, 2]
        assert state.frame == 2
        assert state.t == 2 * QUICK.iterations_per_frame
        assert not state.converged
        for column in ("frame", "t", "sumW_hz", "zeta", "xi", "W_3",
                       "lambda_1"):
            assert column in history.columns

    def test_reproducible(self, road3):
        a, _ = trainer.train(road3, QUICK, channel.make_rng(9))
        b, _ = trainer.train(road3, QUICK, channel.make_rng(9))
        np.testing.assert_array_equal(a.bandwidth, b.bandwidth)
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())

    def test_divergence(self, road3):
        cfg = replace(QUICK, divergence_factor=1e-3)
        with pytest.raises(DivergenceError) as e:
            trainer.train(road3, cfg, channel.make_rng(9))
        assert len(e.value.history) == 1

    def test_resume_keeps_counter(self, road3):
        first, _ = trainer.train(road3, QUICK, channel.make_rng(9))
        second, _ = trainer.train(
            road3, QUICK, channel.make_rng(10), init=first
        )
        assert second.t == 2 * first.t

    def test_resume_checks_frame_zero(self, road3):
        first, _ = trainer.train(road3, QUICK, channel.make_rng(9))
        second, history = trainer.train(
            road3, QUICK, channel.make_rng(10), init=first
        )
        assert history["frame"].tolist() == [0, 1, 2]
        assert history["t"].iloc[0] == first.t
        assert second.frame == 2

    def test_converged_at_streak_start(self, road3, monkeypatch):
        checks = iter([False, True, False, True, True])
        monkeypatch.setattr(
            trainer, "is_converged", lambda *args: next(checks)
        )
        monkeypatch.setattr(
            trainer, "_verify", lambda state, *args: np.zeros(3)
        )
        cfg = replace(QUICK, max_frames=10, debounce=2)
        state, history = trainer.train(road3, cfg, channel.make_rng(9))
        assert state.converged
        assert state.converged_at == 4
        assert state.frame == 5
        assert len(history) == 5

    def test_pretrained_converged_at_zero(self, road3, monkeypatch):
        monkeypatch.setattr(trainer, "is_converged", lambda *args: True)
        monkeypatch.setattr(
            trainer, "_verify", lambda state, *args: np.zeros(3)
        )
        cfg = replace(QUICK, max_frames=10)
        first, _ = trainer.train(road3, cfg, channel.make_rng(9))
        assert first.converged_at == 1
        assert first.frame == 3
        second, history = trainer.train(
            road3, cfg, channel.make_rng(10), init=first
        )
        assert second.converged_at == 0
        assert second.frame == cfg.debounce - 1
        assert history["frame"].tolist() == [0, 1, 2]

    def test_failed_verification_restarts_streak(self, road3, monkeypatch):
        monkeypatch.setattr(trainer, "is_converged", lambda *args: True)
        excess = iter([np.full(3, 0.1), np.zeros(3)])
        monkeypatch.setattr(
            trainer, "_verify", lambda state, *args: next(excess)
        )
        cfg = replace(QUICK, max_frames=10, debounce=2)
        state, _ = trainer.train(road3, cfg, channel.make_rng(9))
        assert state.converged_at == 3
        assert state.frame == 4

    def test_resume_wrong_users(self, road3, symmetric4):
        first, _ = trainer.train(road3, QUICK, channel.make_rng(9))
        with pytest.raises(InvalidInputError):
            trainer.train(symmetric4, QUICK, channel.make_rng(9), init=first)

    def test_learned_power(self, state3, road3, g_small):
        power = trainer.learned_power(state3, road3)(g_small)
        np.testing.assert_allclose(power.sum(axis=1), road3.p_max)


class TestRefit:
    @pytest.fixture(scope="class")
    def trained3(self, road3):
        state, _ = trainer.train(road3, QUICK, channel.make_rng(9))
        return state

    def test_moved_drop(self, trained3, road3):
        moved = channel.move_users(road3, 2.0)
        qos = build_qos(moved)
        refit = trainer.refit_state(
            trained3, moved, channel.make_rng(5), QUICK
        )
        # the fitting batch is the first draw of the generator
        g = channel.sample_gain_batch(
            channel.make_rng(5), moved, QUICK.verify_samples
        )
        result = trainer.batch_loss(refit, g, qos, moved)
        np.testing.assert_allclose(
            result.lhs_mean, [q.target for q in qos], rtol=1e-6
        )
        np.testing.assert_allclose(
            result.grad_bandwidth * refit.reference_bandwidth, 0.0,
            atol=1e-9,
        )
        np.testing.assert_array_equal(
            refit.params.flatten(), trained3.params.flatten()
        )
        np.testing.assert_allclose(
            refit.bandwidth_scale, warm_start_bandwidth(moved, qos)
        )
        assert refit.t == trained3.t
        assert np.all(refit.multipliers > 0)

    def test_does_not_mutate(self, trained3, road3):
        bandwidth = trained3.bandwidth.copy()
        trainer.refit_state(trained3, road3, channel.make_rng(5), QUICK)
        np.testing.assert_array_equal(trained3.bandwidth, bandwidth)

    def test_wrong_users(self, trained3, symmetric4):
        with pytest.raises(InvalidInputError):
            trainer.refit_state(
                trained3, symmetric4, channel.make_rng(5), QUICK
            )


class TestCheckpoint:
    def test_round_trip(self, state3, tmp_path):
        path = trainer.save_checkpoint(state3, tmp_path / "ckpt")
        assert path.suffix == ".npz"
        assert path.with_suffix(".yml").exists()
        loaded = trainer.load_checkpoint(path)
        np.testing.assert_allclose(loaded.bandwidth, state3.bandwidth)
        np.testing.assert_allclose(loaded.multipliers, state3.multipliers)
        assert loaded.reference_bandwidth == pytest.approx(
            state3.reference_bandwidth
        )
        assert loaded.t == state3.t

    def test_missing_sidecar(self, state3, tmp_path):
        path = trainer.save_checkpoint(state3, tmp_path / "ckpt")
        path.with_suffix(".yml").unlink()
        with pytest.raises(InvalidInputError):
            trainer.load_checkpoint(path)

    def test_corrupt_sidecar(self, state3, tmp_path):
        path = trainer.save_checkpoint(state3, tmp_path / "ckpt")
        path.with_suffix(".yml").write_text("format_version: 1\nt: 3\n")
        with pytest.raises(InvalidInputError):
            trainer.load_checkpoint(path)


@pytest.mark.integration_test
class TestTrainingConvergence:
    """Full training runs with the default scenario constants."""

    @pytest.fixture(scope="class")
    def symmetric2(self, template):
        return channel.make_symmetric(template, 2)

    @pytest.fixture(scope="class")
    def trained(self, symmetric2):
        return trainer.train(
            symmetric2, trainer.TrainConfig(max_frames=3000),
            channel.make_rng(1),
        )

    def test_close_to_optimal(self, symmetric2, trained):
        state, _ = trained
        assert state.converged
        w_star, _ = solve_bandwidth(
            symmetric2, None, channel.make_rng(2), SearchConfig()
        )
        assert state.total_bandwidth == pytest.approx(
            symmetric2.n_users * w_star, rel=0.02
        )

    def test_resume_converges_quickly(self, symmetric2, trained):
        state, _ = trained
        resumed, _ = trainer.train(
            symmetric2, trainer.TrainConfig(), channel.make_rng(3), init=state
        )
        assert resumed.converged
        assert resumed.converged_at <= 10
        assert resumed.total_bandwidth == pytest.approx(
            state.total_bandwidth, rel=0.01
        )
