# -*- coding: utf-8 -*-

"""Controllers resolve the configuration of a command, run its pipeline
(directly or through a Processor for independent trials) and write the
outputs and the run manifest. Every controller returns the exit code of the
command."""

import logging
import math
from time import time
from typing import List, Mapping, Optional, Sequence

import numpy as np
import pandas

from urllc_allocator import config, evaluator, output, processor, trainer
from urllc_allocator.channel import (
    ScenarioConfig,
    make_rng,
    make_road,
    make_symmetric,
    move_users,
)
from urllc_allocator.errors import (
    ConfigurationError,
    DivergenceError,
    InfeasiblePowerError,
    NonConvergenceError,
    NumericalError,
)
from urllc_allocator.qos import build_qos
from urllc_allocator.symmetric import SymmetricPolicy, solve_bandwidth

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_UNCONVERGED = 2

PERCENTILES = (50.0, 99.9, 99.99)


def percentile_nearest_rank(values: Sequence[float], percent: float) -> float:
    """Nearest-rank percentile: the smallest value such that at least
    ``percent`` % of the values are less than or equal to it."""
    if not 0 < percent <= 100:
        raise ValueError(f"Percentile out of (0, 100]: {percent}")
    ordered = sorted(values)
    if not ordered:
        return float("nan")
    rank = max(1, math.ceil(percent / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


class ControllerFactory:
    """Registers and instantiates a Controller that runs a command."""

    def __init__(self):
        self._controllers = {}

    def register_controller(self, key, controller):
        """Register a controller for use.

        :param key: Name of the command
        :param controller: Can be a function, a class, or an object that
            implements .__call__()
        """
        self._controllers[key] = controller

    def create(self, key, **kwargs):
        """Instantiate a Controller"""
        controller = self._controllers.get(key)
        if not controller:
            raise ValueError(key)
        return controller(**kwargs)


class Controller:
    """Base of the command controllers.

    :param configuration: Path or text stream of the YAML configuration
    :param overrides: Dotted configuration keys set from the command line
    :param out_dir: Output directory, created if missing
    :param threads: Max. number of parallel trials, ``study.threads`` if
        None
    :param monitor_log: Logger for resource monitoring, or None
    :param checkpoint: Checkpoint to start from or to evaluate
    """

    command = None

    def __init__(
        self,
        configuration,
        overrides: Optional[Mapping] = None,
        out_dir=".",
        threads: Optional[int] = None,
        monitor_log: logging.Logger = None,
        checkpoint=None,
        **kwargs,
    ):
        self.cfg = config.load_configuration(configuration, overrides)
        self.seed = int(self.cfg["seed"])
        if threads is None:
            threads = self.cfg["study"]["threads"]
        self.threads = int(threads)
        self.monitor_log = monitor_log
        self.checkpoint = checkpoint
        self.options = kwargs
        self.out = output.DirOutput(out_dir)
        self.manifest = output.RunManifest(
            command=self.command, config=self.cfg, seed=self.seed
        )
        log.info(f"Configured {self.__class__.__name__}, seed {self.seed}")

    def generators(self, n: int) -> List[np.random.Generator]:
        """Independent generators spawned from the master seed. The i-th
        generator is the same whatever ``n`` is."""
        return [
            make_rng(s) for s in np.random.SeedSequence(self.seed).spawn(n)
        ]

    def write_csv(self, frame: pandas.DataFrame, name: str, schema: str):
        path = output.write_csv(frame, self.out.join_path(name), schema)
        self.manifest.add_output(path)
        return path

    def run(self) -> int:
        """Run the command and write the manifest, also on failure."""
        log.info(f"Running {self.__class__.__name__}")
        start = time()
        code = EXIT_USAGE
        try:
            code = self._run()
        except DivergenceError as e:
            log.error(str(e))
            if e.history is not None:
                self.write_csv(e.history, "history.csv", "training_history")
            self.manifest.results["error"] = str(e)
            code = EXIT_UNCONVERGED
        except NonConvergenceError as e:
            log.error(str(e))
            if e.trace is not None:
                self.write_csv(e.trace, "trace.csv", "symmetric_trace")
            self.manifest.results["error"] = str(e)
            code = EXIT_UNCONVERGED
        except NumericalError as e:
            log.error(f"{e} (user {e.user}, draw {e.draw})")
            self.manifest.results["error"] = str(e)
            self.manifest.results["offending"] = {
                "user": e.user,
                "draw": e.draw,
            }
            code = EXIT_UNCONVERGED
        except InfeasiblePowerError as e:
            log.error(f"{e} (draws {e.draws[:10]})")
            self.manifest.results["error"] = str(e)
            self.manifest.results["offending"] = {"draws": e.draws[:10]}
            code = EXIT_UNCONVERGED
        finally:
            self.manifest.wall_clock_s = time() - start
            self.manifest.status = {
                EXIT_OK: "success",
                EXIT_UNCONVERGED: "unconverged",
            }.get(code, "error")
            self.manifest.write(self.out)
        log.info(
            f"Done {self.__class__.__name__} in "
            f"{self.manifest.wall_clock_s:.1f} s, exit code {code}"
        )
        return code

    def _run(self) -> int:
        raise NotImplementedError

    def evaluate(self, handle, scenario, rng) -> evaluator.EvalReport:
        ev = self.cfg["evaluation"]
        report = evaluator.evaluate(
            handle,
            scenario,
            build_qos(scenario),
            int(ev["samples"]),
            rng,
            float(ev["tolerance"]),
        )
        self.write_csv(report.to_frame(), "eval_report.csv", "eval_report")
        self.manifest.results.update(report.summary())
        return report


class SolveSymmetricController(Controller):
    """Closed-form power with the common bandwidth from the stochastic
    iteration."""

    command = "solve-symmetric"

    def _run(self) -> int:
        drop_rng, solve_rng, eval_rng = self.generators(3)
        scenario = config.scenario_from_config(self.cfg, drop_rng)
        if not scenario.is_symmetric:
            raise ConfigurationError(
                "solve-symmetric needs identical users, use the 'symmetric' "
                "layout or list identical users"
            )
        w_star, trace = solve_bandwidth(
            scenario, None, solve_rng, config.search_config(self.cfg)
        )
        self.write_csv(trace, "trace.csv", "symmetric_trace")
        policy = SymmetricPolicy.from_scenario(scenario, w_star)
        self.manifest.results["W_star_hz"] = w_star
        self.manifest.results["iterations"] = len(trace)
        report = self.evaluate(
            evaluator.symmetric_handle(policy), scenario, eval_rng
        )
        log.info(
            f"W*={w_star:.1f} Hz, K W*={scenario.n_users * w_star:.1f} Hz"
        )
        return EXIT_OK if report.all_passed else EXIT_UNCONVERGED


class TrainController(Controller):
    """Primal-dual training, optionally resumed from a checkpoint."""

    command = "train"

    def _run(self) -> int:
        drop_rng, train_rng, eval_rng = self.generators(3)
        scenario = config.scenario_from_config(self.cfg, drop_rng)
        init = None
        if self.checkpoint is not None:
            init = trainer.load_checkpoint(self.checkpoint)
            log.info(f"Resuming from {self.checkpoint} at t={init.t}")
        state, history = trainer.train(
            scenario, config.train_config(self.cfg), train_rng, init
        )
        self.write_csv(history, "history.csv", "training_history")
        path = trainer.save_checkpoint(
            state, self.out.join_path("checkpoint.npz")
        )
        self.manifest.add_output(path)
        self.manifest.add_output(path.with_suffix(".yml"))
        self.manifest.results["converged"] = state.converged
        self.manifest.results["frames"] = state.frame
        self.manifest.results["converged_at_frame"] = state.converged_at
        handle = evaluator.PolicyHandle(
            "learned", trainer.learned_power(state, scenario), state.bandwidth
        )
        report = self.evaluate(handle, scenario, eval_rng)
        ok = state.converged and report.all_passed
        return EXIT_OK if ok else EXIT_UNCONVERGED


class EvaluateController(Controller):
    """Monte-Carlo check of one policy: ``optimal``, ``equal_power`` or
    ``learned`` (from a checkpoint)."""

    command = "evaluate"

    def _run(self) -> int:
        drop_rng, solve_rng, eval_rng = self.generators(3)
        scenario = config.scenario_from_config(self.cfg, drop_rng)
        name = self.options.get("policy") or "learned"
        self.manifest.results["policy"] = name
        handle = _build_policy(
            name, scenario, solve_rng, self.cfg, checkpoint=self.checkpoint
        )
        report = self.evaluate(handle, scenario, eval_rng)
        return EXIT_OK if report.all_passed else EXIT_UNCONVERGED


def _build_policy(
    name: str,
    scenario: ScenarioConfig,
    rng: np.random.Generator,
    cfg: Mapping,
    checkpoint=None,
) -> evaluator.PolicyHandle:
    if name == "optimal":
        if not scenario.is_symmetric:
            raise ConfigurationError(
                "The optimal policy is only known for symmetric scenarios"
            )
        return evaluator.optimal_policy(
            scenario, rng, config.search_config(cfg)
        )
    if name == "equal_power":
        return evaluator.equal_power_policy(
            scenario, None, rng, config.search_config(cfg)
        )
    if name == "learned":
        if checkpoint is not None:
            state = trainer.load_checkpoint(checkpoint)
            if state.params.layer_sizes[0] != scenario.n_users:
                raise ConfigurationError(
                    "The checkpoint does not match the number of users"
                )
        else:
            state, _ = trainer.train(
                scenario, config.train_config(cfg), rng
            )
            if not state.converged:
                log.warning(
                    f"Training of {scenario.n_users} users did not converge"
                )
        return evaluator.PolicyHandle(
            "learned",
            trainer.learned_power(state, scenario),
            state.bandwidth,
            converged=state.converged,
        )
    raise ConfigurationError(f"Unknown policy {name!r}")


def sweep_point(
    trial: int,
    seed: np.random.SeedSequence,
    layout: str,
    n_users: int,
    cfg: Mapping,
) -> pandas.DataFrame:
    """All policies of the configuration at one ``(layout, K)``."""
    rng = make_rng(seed)
    template = config.scenario_template(cfg)

    def make_scenario(k):
        if layout == "road":
            return make_road(template, k, rng)
        return make_symmetric(template, k)

    names = [
        p for p in cfg["sweep"]["policies"]
        if not (p == "optimal" and layout != "symmetric")
    ]
    converged = {}

    def builder(name):
        def build(scenario, gen):
            handle = _build_policy(name, scenario, gen, cfg)
            converged[name] = handle.converged
            return handle

        return build

    table = evaluator.sweep(
        make_scenario,
        [n_users],
        {name: builder(name) for name in names},
        int(cfg["evaluation"]["samples"]),
        rng,
        float(cfg["evaluation"]["tolerance"]),
    )
    table.insert(0, "layout", layout)
    table["converged"] = [converged[p] for p in table["policy"]]
    return table


class SweepController(Controller):
    """Total bandwidth against the number of users for every policy."""

    command = "sweep"

    def _run(self) -> int:
        sw = self.cfg["sweep"]
        points = [
            (layout, int(k))
            for layout in sw["layouts"]
            for k in sorted(sw["n_users"])
        ]
        for layout, _ in points:
            if layout not in ("symmetric", "road"):
                raise ConfigurationError(
                    f"Sweeps need a generated layout, got {layout!r}"
                )
        results = _run_trials(
            self,
            "sweep",
            points,
            lambda trial, seed, **kw: sweep_point(
                trial, seed, *points[trial], cfg=self.cfg
            ),
        )
        table = pandas.concat(results, ignore_index=True)
        self.write_csv(table, "sweep.csv", "sweep")
        ok = bool(table["all_passed"].all() and table["converged"].all())
        self.manifest.results["rows"] = len(table)
        self.manifest.results["all_passed"] = ok
        return EXIT_OK if ok else EXIT_UNCONVERGED


def study_trial(
    trial: int,
    seed: np.random.SeedSequence,
    template: ScenarioConfig,
    n_users: int,
    displacement: float,
    train_cfg: trainer.TrainConfig,
    refit: bool = True,
) -> List[dict]:
    """One random road drop trained from scratch, then moved by
    ``displacement`` and trained again from the first result.

    :param refit: Refit the bandwidths and multipliers of the first result
        to the moved drop before training, see :func:`trainer.refit_state`
    :return: The rows of both runs. The pre-trained run is skipped when the
        first one diverged.
    """
    rng = make_rng(seed)
    scenario = make_road(template, n_users, rng)
    rows = []
    try:
        cold, _ = trainer.train(scenario, train_cfg, rng)
        rows.append(_study_row(trial, False, cold))
    except DivergenceError as e:
        log.warning(f"Trial {trial} diverged without pre-training: {e}")
        frames = 0 if e.history is None else int(e.history["frame"].iloc[-1])
        rows.append(_study_row(trial, False, frames=frames, diverged=True))
        rows.append(_study_row(trial, True, skipped=True))
        return rows
    moved = move_users(scenario, displacement)
    try:
        start = cold
        if refit:
            start = trainer.refit_state(cold, moved, rng, train_cfg)
        warm, _ = trainer.train(moved, train_cfg, rng, init=start)
        rows.append(_study_row(trial, True, warm))
    except DivergenceError as e:
        log.warning(f"Trial {trial} diverged with pre-training: {e}")
        frames = 0 if e.history is None else int(e.history["frame"].iloc[-1])
        rows.append(_study_row(trial, True, frames=frames, diverged=True))
    return rows


def _study_row(
    trial: int,
    pretrained: bool,
    state: Optional[trainer.TrainState] = None,
    frames: Optional[int] = None,
    diverged: bool = False,
    skipped: bool = False,
) -> dict:
    """A row of the study table. Converged runs count the frames trained
    when their accepted streak of checks began, the others the frames they
    ran."""
    converged = state is not None and state.converged
    if state is not None:
        frames = state.converged_at if converged else state.frame
    return {
        "trial": trial,
        "pretrained": pretrained,
        "frames_to_converge": float("nan") if frames is None else int(frames),
        "converged": converged,
        "diverged": diverged,
        "skipped": skipped,
    }


def summarize_study(table: pandas.DataFrame) -> pandas.DataFrame:
    """Nearest-rank percentiles of the frames to convergence, with and
    without pre-training. Unconverged trials count with the frames they
    ran, skipped ones are left out."""
    rows = []
    for pretrained in (False, True):
        arm = table.loc[table["pretrained"] == pretrained]
        ran = arm.loc[~arm["skipped"].astype(bool)]
        frames = ran["frames_to_converge"].tolist()
        row = {
            "pretrained": pretrained,
            "trials": len(frames),
            "converged": int(ran["converged"].sum()),
            "skipped": int(len(arm) - len(ran)),
        }
        for p in PERCENTILES:
            row[f"p{p:g}"] = percentile_nearest_rank(frames, p)
        rows.append(row)
    return pandas.DataFrame(rows)


class ConvergenceStudyController(Controller):
    """Frames to convergence over random road drops, with and without
    pre-training."""

    command = "convergence-study"

    def _run(self) -> int:
        st = self.cfg["study"]
        if self.cfg["scenario"]["layout"] != "road":
            raise ConfigurationError(
                "The convergence study needs the asymmetric 'road' layout"
            )
        template = config.scenario_template(self.cfg)
        train_cfg = config.train_config(self.cfg)
        trials = list(range(int(st["trials"])))
        results = _run_trials(
            self,
            "convergence-study",
            trials,
            study_trial,
            template=template,
            n_users=int(st["n_users"]),
            displacement=float(st["displacement"]),
            train_cfg=train_cfg,
            refit=bool(st.get("refit", True)),
        )
        table = pandas.DataFrame([row for rows in results for row in rows])
        self.write_csv(table, "convergence_study.csv", "convergence_study")
        summary = summarize_study(table)
        self.write_csv(
            summary, "convergence_summary.csv", "convergence_summary"
        )
        for _, row in summary.iterrows():
            key = "pretrained" if row["pretrained"] else "cold"
            self.manifest.results[f"{key}_median_frames"] = row["p50"]
        ok = bool(table["converged"].all())
        return EXIT_OK if ok else EXIT_UNCONVERGED


def _run_trials(ctrl: Controller, name: str, trials, worker, **kwargs) -> list:
    """Run ``worker`` over the trial indices with a ThreadProcessor."""
    proc = processor.factory.create(
        "threadprocessor", name=name, trials=range(len(trials))
    )
    proc.configure(
        threads=ctrl.threads,
        monitor_log=ctrl.monitor_log,
        worker=worker,
        seed=ctrl.seed,
        config=kwargs,
    )
    return proc.process()


factory = ControllerFactory()
factory.register_controller("solve-symmetric", SolveSymmetricController)
factory.register_controller("train", TrainController)
factory.register_controller("evaluate", EvaluateController)
factory.register_controller("sweep", SweepController)
factory.register_controller("convergence-study", ConvergenceStudyController)
