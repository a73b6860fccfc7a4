# -*- coding: utf-8 -*-

"""Testing the command controllers."""

import math

import numpy as np
import pandas
import pytest

from urllc_allocator import controller, output, trainer
from urllc_allocator.channel import make_rng
from urllc_allocator.errors import (
    ConfigurationError,
    InfeasiblePowerError,
    NumericalError,
)
from urllc_allocator.qos import build_qos


class TestPercentile:
    @pytest.mark.parametrize(
        "percent, expected", [(50, 5), (99.9, 10), (99.99, 10), (10, 1)]
    )
    def test_nearest_rank(self, percent, expected):
        values = list(range(10, 0, -1))
        assert controller.percentile_nearest_rank(values, percent) == expected

    def test_single_value(self):
        for p in controller.PERCENTILES:
            assert controller.percentile_nearest_rank([7], p) == 7

    def test_empty(self):
        assert math.isnan(controller.percentile_nearest_rank([], 50))

    @pytest.mark.parametrize("percent", [0, -1, 101])
    def test_out_of_range(self, percent):
        with pytest.raises(ValueError):
            controller.percentile_nearest_rank([1, 2], percent)


def _row(trial, pretrained, frames, converged, skipped=False):
    row = controller._study_row(trial, pretrained, frames=frames)
    row.update(converged=converged, skipped=skipped)
    return row


def test_summarize_study():
    table = pandas.DataFrame(
        [
            _row(0, False, 40, True),
            _row(1, False, 60, True),
            _row(2, False, 100, False),
            _row(3, False, 7, False),
            _row(0, True, 4, True),
            _row(1, True, 6, True),
            _row(2, True, 5, True),
            _row(3, True, None, False, skipped=True),
        ]
    )
    summary = controller.summarize_study(table).set_index("pretrained")
    assert list(summary.columns) == [
        "trials", "converged", "skipped", "p50", "p99.9", "p99.99"
    ]
    assert summary.loc[False, "p50"] == 40
    assert summary.loc[False, "p99.9"] == 100
    assert summary.loc[False, "converged"] == 2
    assert summary.loc[False, "skipped"] == 0
    # the skipped run is neither a trial nor a zero in the percentiles
    assert summary.loc[True, "trials"] == 3
    assert summary.loc[True, "skipped"] == 1
    assert summary.loc[True, "p50"] == 5


def test_study_row_of_state(road3):
    state = trainer.initial_state(road3, build_qos(road3), make_rng(0))
    state.frame = 9
    assert controller._study_row(0, False, state)["frames_to_converge"] == 9
    state.converged, state.converged_at = True, 6
    row = controller._study_row(0, True, state)
    assert row["frames_to_converge"] == 6
    assert row["converged"]
    assert not row["skipped"]


def test_unknown_command(cfg_fast_path, output_dir):
    with pytest.raises(ValueError):
        controller.factory.create(
            "solve-asymmetric", configuration=cfg_fast_path,
            out_dir=output_dir,
        )


def test_generators_prefix_stable(cfg_fast_path, output_dir):
    ctrl = controller.factory.create(
        "solve-symmetric", configuration=cfg_fast_path, out_dir=output_dir
    )
    a = [g.random() for g in ctrl.generators(2)]
    b = [g.random() for g in ctrl.generators(5)][:2]
    assert a == b
    assert ctrl.threads == 2


class TestSolveSymmetric:
    def test_run(self, cfg_fast_path, output_dir):
        ctrl = controller.factory.create(
            "solve-symmetric", configuration=cfg_fast_path,
            out_dir=output_dir,
        )
        code = ctrl.run()
        assert code in (controller.EXIT_OK, controller.EXIT_UNCONVERGED)
        trace = output.read_csv(output_dir / "trace.csv")
        assert list(trace.columns) == ["t", "W", "residual"]
        report = output.read_csv(output_dir / "eval_report.csv")
        assert len(report) == 2
        manifest = output.RunManifest.read(output_dir / output.MANIFEST_NAME)
        assert manifest.command == "solve-symmetric"
        assert manifest.seed == 7
        assert set(manifest.outputs) == {"trace.csv", "eval_report.csv"}
        assert manifest.results["W_star_hz"] > 0

    def test_asymmetric_refused(self, cfg_road_path, output_dir):
        ctrl = controller.factory.create(
            "solve-symmetric", configuration=cfg_road_path,
            out_dir=output_dir,
        )
        with pytest.raises(ConfigurationError):
            ctrl.run()
        manifest = output.RunManifest.read(output_dir / output.MANIFEST_NAME)
        assert manifest.status == "error"


class TestBuildPolicy:
    def test_optimal_needs_symmetric(self, road3, rng, cfg_fast):
        with pytest.raises(ConfigurationError):
            controller._build_policy("optimal", road3, rng, cfg_fast)

    def test_unknown(self, road3, rng, cfg_fast):
        with pytest.raises(ConfigurationError):
            controller._build_policy("greedy", road3, rng, cfg_fast)

    def test_checkpoint_users(self, road3, symmetric4, tmp_path, cfg_fast):
        state = trainer.initial_state(road3, build_qos(road3), make_rng(0))
        path = trainer.save_checkpoint(state, tmp_path / "ckpt.npz")
        with pytest.raises(ConfigurationError):
            controller._build_policy(
                "learned", symmetric4, make_rng(1), cfg_fast, checkpoint=path
            )
        handle = controller._build_policy(
            "learned", road3, make_rng(1), cfg_fast, checkpoint=path
        )
        np.testing.assert_allclose(handle.bandwidth, state.bandwidth)


class TestTrials:
    def test_sweep(self, cfg_fast_path, output_dir):
        ctrl = controller.factory.create(
            "sweep", configuration=cfg_fast_path, out_dir=output_dir
        )
        code = ctrl.run()
        assert code in (controller.EXIT_OK, controller.EXIT_UNCONVERGED)
        table = output.read_csv(output_dir / "sweep.csv")
        assert len(table) == 4
        assert set(table["policy"]) == {"optimal", "equal_power"}
        assert table["K"].tolist() == [1, 1, 2, 2]
        assert (table["layout"] == "symmetric").all()

    def test_sweep_skips_optimal_on_road(self, cfg_road_path, output_dir):
        ctrl = controller.factory.create(
            "sweep", configuration=cfg_road_path, out_dir=output_dir,
            overrides={"sweep.policies": ["optimal", "equal_power"]},
        )
        ctrl.run()
        table = output.read_csv(output_dir / "sweep.csv")
        assert set(table["policy"]) == {"equal_power"}
        assert table["K"].tolist() == [2, 3]

    def test_study_trial(self, template):
        cfg = trainer.TrainConfig(
            batch_size=50, max_frames=2, eval_batch_size=2000
        )
        rows = controller.study_trial(
            0, np.random.SeedSequence(1), template, 2, 2.0, cfg
        )
        assert [r["pretrained"] for r in rows] == [False, True]
        assert all(r["frames_to_converge"] <= 2 for r in rows)
        assert not any(r["skipped"] for r in rows)

    def test_study_trial_diverged(self, template):
        cfg = trainer.TrainConfig(
            batch_size=50, max_frames=2, eval_batch_size=2000,
            divergence_factor=1e-3,
        )
        cold, warm = controller.study_trial(
            0, np.random.SeedSequence(1), template, 2, 2.0, cfg
        )
        assert cold["diverged"] and cold["frames_to_converge"] == 1
        assert warm["skipped"] and not warm["converged"]
        assert math.isnan(warm["frames_to_converge"])
        summary = controller.summarize_study(
            pandas.DataFrame([cold, warm])
        ).set_index("pretrained")
        assert summary.loc[True, "trials"] == 0
        assert math.isnan(summary.loc[True, "p50"])

    def test_study(self, cfg_road_path, output_dir):
        ctrl = controller.factory.create(
            "convergence-study", configuration=cfg_road_path,
            out_dir=output_dir,
        )
        code = ctrl.run()
        # two frames are not enough to converge
        assert code == controller.EXIT_UNCONVERGED
        table = output.read_csv(output_dir / "convergence_study.csv")
        assert len(table) == 6
        summary = output.read_csv(output_dir / "convergence_summary.csv")
        assert summary["trials"].tolist() == [3, 3]

    def test_study_reproducible(self, cfg_road_path, tmp_path):
        tables = []
        for threads in (1, 3):
            out = tmp_path / f"threads{threads}"
            controller.factory.create(
                "convergence-study", configuration=cfg_road_path,
                out_dir=out, threads=threads,
            ).run()
            tables.append(output.read_csv(out / "convergence_study.csv"))
        pandas.testing.assert_frame_equal(*tables)

    def test_study_needs_road(self, cfg_fast_path, output_dir):
        ctrl = controller.factory.create(
            "convergence-study", configuration=cfg_fast_path,
            out_dir=output_dir,
        )
        with pytest.raises(ConfigurationError):
            ctrl.run()


class TestNumericalFailures:
    def test_non_finite_training(self, cfg_fast_path, output_dir,
                                 monkeypatch):
        def broken(*args, **kwargs):
            raise NumericalError("Non-finite constraint term", user=1, draw=4)

        monkeypatch.setattr(trainer, "train", broken)
        ctrl = controller.factory.create(
            "train", configuration=cfg_fast_path, out_dir=output_dir
        )
        assert ctrl.run() == controller.EXIT_UNCONVERGED
        manifest = output.RunManifest.read(output_dir / output.MANIFEST_NAME)
        assert manifest.status == "unconverged"
        assert manifest.results["offending"] == {"user": 1, "draw": 4}

    def test_infeasible_power(self, cfg_fast_path, output_dir, monkeypatch):
        def infeasible(*args, **kwargs):
            raise InfeasiblePowerError(
                "Negative power in 2 draw(s)", draws=np.array([3, 8])
            )

        monkeypatch.setattr(controller, "solve_bandwidth", infeasible)
        ctrl = controller.factory.create(
            "solve-symmetric", configuration=cfg_fast_path,
            out_dir=output_dir,
        )
        assert ctrl.run() == controller.EXIT_UNCONVERGED
        manifest = output.RunManifest.read(output_dir / output.MANIFEST_NAME)
        assert manifest.results["offending"] == {"draws": [3, 8]}


@pytest.mark.slow_integration_test
def test_pretraining_speedup(output_dir):
    ctrl = controller.factory.create(
        "convergence-study", configuration=None, out_dir=output_dir,
        overrides={"scenario.layout": "road", "study.trials": 20},
    )
    ctrl.run()
    summary = output.read_csv(
        output_dir / "convergence_summary.csv"
    ).set_index("pretrained")
    assert summary.loc[False, "p50"] > 0
    assert summary.loc[True, "p50"] <= 0.1 * summary.loc[False, "p50"]
