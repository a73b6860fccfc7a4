# -*- coding: utf-8 -*-

"""Unsupervised primal-dual training of the power allocation network.

The loss is the sampled Lagrangian of the bandwidth minimization::

    L = sum_k W_k / W_ref
        + lambda_k (mean_n exp(-theta_k s_kn) - exp(-theta_k BE_k))

It is minimized over the network parameters and the bandwidths and
maximized over the multipliers with projected SGD. No labels are involved,
the only inputs are channel draws and the scenario constants.

Units: the objective is counted in multiples of the reference bandwidth
``W_ref`` (mean of the warm-start bandwidths). The bandwidth and multiplier
steps of user ``k`` are further scaled by its warm-start bandwidth
``W0_k``, so that near and far users move at the same relative speed.
Every step uses the schedule ``phi(t) = 1 / (1 + decay * t)`` times the
base rate of the variable group.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas
import yaml
from scipy import optimize, special

from urllc_allocator import mlp
from urllc_allocator.channel import ScenarioConfig, sample_gain_batch
from urllc_allocator.errors import (
    DivergenceError,
    InvalidInputError,
    NumericalError,
)
from urllc_allocator.qos import (
    QosArrays,
    UserQoS,
    build_qos,
    finite_blocklength_rate,
    rate_derivatives,
)
from urllc_allocator.symmetric import warm_start_bandwidth

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REFIT_BRACKET = 2.0
REFIT_EXPANSIONS = 20


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of the primal-dual training.

    :param batch_size: Channel draws per batch ``N_b``
    :param iterations_per_frame: SGD iterations on the batch of a frame
    :param max_frames: Frames before giving up (state flagged unconverged)
    :param zeta_tolerance: Converged when
        ``zeta < zeta_tolerance * sum W / W_ref``
    :param xi_tolerance: Converged when ``xi < xi_tolerance``
    :param verify_tolerance: Relative QoS excess allowed per user in the
        final verification of a converged state
    :param lr_params: Base rate of the network parameters
    :param lr_bandwidth: Base rate of the bandwidths (relative to ``W0_k``)
    :param lr_multiplier: Base rate of the multipliers
    :param decay: Schedule ``phi(t) = 1 / (1 + decay * t)``
    :param bandwidth_floor: Lower bound of the bandwidths [Hz]
    :param multiplier_init: Initial multipliers (times ``W0_k / W_ref``)
    :param eval_batch_size: Fresh draws for the convergence statistics
    :param verify_samples: Fresh draws for the final verification
    :param debounce: Consecutive passing frames needed for convergence
    :param divergence_factor: Divergence if ``sum W`` exceeds this multiple
        of the warm-start total
    :param max_multiplier: Divergence if a multiplier exceeds this
    """

    batch_size: int = 100
    iterations_per_frame: int = 10
    max_frames: int = 1000
    zeta_tolerance: float = 0.01
    xi_tolerance: float = 0.01
    verify_tolerance: float = 0.005
    lr_params: float = 5.0
    lr_bandwidth: float = 0.5
    lr_multiplier: float = 5.0
    decay: float = 0.1
    bandwidth_floor: float = 1.0
    multiplier_init: float = 1.0
    eval_batch_size: int = 10_000
    verify_samples: int = 100_000
    debounce: int = 3
    divergence_factor: float = 100.0
    max_multiplier: float = 1e6

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations_per_frame < 1:
            raise InvalidInputError("Batch size and iterations must be >= 1")
        if self.eval_batch_size < 1 or self.verify_samples < 1:
            raise InvalidInputError("Evaluation sizes must be >= 1")
        if not (self.zeta_tolerance > 0 and self.xi_tolerance > 0):
            raise InvalidInputError("Convergence thresholds must be positive")
        if self.debounce < 1 or self.max_frames < 1:
            raise InvalidInputError("debounce and max_frames must be >= 1")

    def schedule(self, t: int) -> float:
        return 1.0 / (1.0 + self.decay * t)


@dataclass
class TrainState:
    """Iterate of the primal-dual training.

    :param params: Network parameters
    :param bandwidth: ``W_k`` [Hz]
    :param multipliers: ``lambda_k`` (objective counted in ``W_ref``)
    :param bandwidth_scale: Warm-start bandwidths ``W0_k`` [Hz]
    :param t: Iteration counter of the step schedule
    :param frame: Frames run by the last :func:`train` call
    :param zeta: Absolute sum of the average gradients
    :param xi: Average relative QoS constraint error
    :param converged_at: Frames trained when the accepted streak of
        passing checks began, None until converged. 0 when a pre-trained
        start already met the criterion.
    """

    params: mlp.MlpParams
    bandwidth: np.ndarray
    multipliers: np.ndarray
    bandwidth_scale: np.ndarray
    t: int = 0
    frame: int = 0
    zeta: float = float("inf")
    xi: float = float("inf")
    converged: bool = False
    converged_at: Optional[int] = None

    def __post_init__(self):
        self.bandwidth = np.asarray(self.bandwidth, dtype=float)
        self.multipliers = np.asarray(self.multipliers, dtype=float)
        self.bandwidth_scale = np.asarray(self.bandwidth_scale, dtype=float)
        k = self.params.layer_sizes[0]
        if not (
            self.bandwidth.shape == self.multipliers.shape
            == self.bandwidth_scale.shape == (k,)
        ):
            raise InvalidInputError(
                "State vectors must have one entry per user"
            )

    @property
    def reference_bandwidth(self) -> float:
        """``W_ref``, the unit of the objective [Hz]"""
        return float(np.mean(self.bandwidth_scale))

    @property
    def total_bandwidth(self) -> float:
        return float(np.sum(self.bandwidth))


@dataclass
class LossResult:
    """Sampled Lagrangian and its gradients on one batch.

    :param loss: ``L``
    :param grad_power: ``dL/dP`` per draw and user [1/W]
    :param grad_bandwidth: ``dL/dW_k`` [1/Hz]
    :param residuals: ``mean_n exp(-theta_k s_kn) - exp(-theta_k BE_k)``,
        also ``dL/dlambda_k``
    :param lhs_mean: ``mean_n exp(-theta_k s_kn)``
    """

    loss: float
    grad_power: np.ndarray
    grad_bandwidth: np.ndarray
    residuals: np.ndarray
    lhs_mean: np.ndarray
    trace: mlp.ForwardTrace = field(repr=False, default=None)


def initial_state(
    scenario: ScenarioConfig,
    qos: Sequence[UserQoS],
    rng: np.random.Generator,
    cfg: TrainConfig = TrainConfig(),
    params: Optional[mlp.MlpParams] = None,
) -> TrainState:
    """Warm-start bandwidths, ``lambda_k = multiplier_init * W0_k / W_ref``
    and random network parameters unless ``params`` is given."""
    scale = warm_start_bandwidth(scenario, qos)
    if params is None:
        params = mlp.init(
            rng, scenario.n_users, input_scale=1.0 / scenario.n_antennas
        )
    elif params.layer_sizes[0] != scenario.n_users:
        raise InvalidInputError(
            f"The network has {params.layer_sizes[0]} inputs, the scenario "
            f"{scenario.n_users} users"
        )
    return TrainState(
        params=params,
        bandwidth=scale.copy(),
        multipliers=cfg.multiplier_init * scale / np.mean(scale),
        bandwidth_scale=scale,
    )


def batch_loss(
    state: TrainState,
    g_batch: np.ndarray,
    qos: Sequence[UserQoS],
    scenario: ScenarioConfig,
) -> LossResult:
    """Sampled Lagrangian of a batch and its gradients.

    :raise NumericalError: a non-finite rate, constraint term or gradient,
        with the first offending user and draw
    """
    g = np.asarray(g_batch, dtype=float)
    if g.ndim != 2 or g.shape[1] != scenario.n_users:
        raise InvalidInputError(f"Expected a (n, K) gain batch, got {g.shape}")
    if np.any(~(state.bandwidth > 0)):
        raise InvalidInputError("Bandwidths must be positive")
    qa = QosArrays.stack(qos)
    alphas = scenario.alphas
    fractions, trace = mlp.forward(state.params, g)
    power = scenario.p_max * fractions
    args = (state.bandwidth, power, alphas, g, qa.qinv_c, scenario)
    rate = finite_blocklength_rate(*args)
    lhs = np.exp(-qa.theta * rate)
    d_power, d_bandwidth = rate_derivatives(*args)
    _check_finite(lhs, "constraint term")
    _check_finite(d_power * lhs, "power gradient")
    _check_finite(d_bandwidth * lhs, "bandwidth gradient")

    n = g.shape[0]
    lam = state.multipliers
    lhs_mean = lhs.mean(axis=0)
    residuals = lhs_mean - qa.target
    w_ref = state.reference_bandwidth
    loss = float(np.sum(state.bandwidth) / w_ref + np.dot(lam, residuals))
    grad_power = -(lam * qa.theta) * d_power * lhs / n
    grad_bandwidth = 1.0 / w_ref - lam * qa.theta * np.mean(
        lhs * d_bandwidth, axis=0
    )
    return LossResult(
        loss, grad_power, grad_bandwidth, residuals, lhs_mean, trace
    )


def _check_finite(values: np.ndarray, what: str):
    bad = ~np.isfinite(values)
    if np.any(bad):
        draw, user = np.argwhere(bad)[0]
        raise NumericalError(
            f"Non-finite {what} for user {user} in draw {draw}",
            user=int(user),
            draw=int(draw),
        )


def step(
    state: TrainState,
    g_batch: np.ndarray,
    qos: Sequence[UserQoS],
    scenario: ScenarioConfig,
    cfg: TrainConfig = TrainConfig(),
) -> TrainState:
    """One projected primal-dual SGD iteration.

    Descent on the parameters and the bandwidths (projected on
    ``[bandwidth_floor, inf)``), ascent on the multipliers (projected on
    ``[0, inf)``).
    """
    result = batch_loss(state, g_batch, qos, scenario)
    grads = mlp.backward(
        state.params, result.trace, result.grad_power, scenario.p_max
    )
    phi = cfg.schedule(state.t)
    w_ref = state.reference_bandwidth
    relative_scale = state.bandwidth_scale / w_ref
    bandwidth = state.bandwidth - phi * cfg.lr_bandwidth * (
        state.bandwidth_scale * w_ref * result.grad_bandwidth
    )
    multipliers = state.multipliers + phi * cfg.lr_multiplier * (
        relative_scale * result.residuals
    )
    return replace(
        state,
        params=state.params.add_scaled(grads, -phi * cfg.lr_params),
        bandwidth=np.maximum(bandwidth, cfg.bandwidth_floor),
        multipliers=np.maximum(multipliers, 0.0),
        t=state.t + 1,
    )


def convergence_stats(
    state: TrainState,
    g_eval: np.ndarray,
    qos: Sequence[UserQoS],
    scenario: ScenarioConfig,
) -> Tuple[float, float]:
    """Convergence statistics on an evaluation batch.

    ``zeta`` is the absolute sum of the average gradients (parameters,
    bandwidths in ``W_ref`` units, multipliers), ``xi`` the average positive
    part of the relative QoS error
    ``mean exp(theta (BE - s)) - 1 = mean exp(-theta s) / exp(-theta BE) - 1``.
    """
    result = batch_loss(state, g_eval, qos, scenario)
    grads = mlp.backward(
        state.params, result.trace, result.grad_power, scenario.p_max
    )
    w_ref = state.reference_bandwidth
    zeta = (
        grads.l1_norm()
        + float(np.sum(np.abs(w_ref * result.grad_bandwidth)))
        + float(np.sum(np.abs(result.residuals)))
    )
    target = QosArrays.stack(qos).target
    xi = float(np.mean(np.maximum(result.lhs_mean / target - 1.0, 0.0)))
    return zeta, xi


def is_converged(
    state: TrainState, zeta: float, xi: float, cfg: TrainConfig
) -> bool:
    normalized = state.total_bandwidth / state.reference_bandwidth
    return zeta < cfg.zeta_tolerance * normalized and xi < cfg.xi_tolerance


def _verify(state, qos, scenario, rng, cfg) -> np.ndarray:
    """Relative QoS excess per user on ``verify_samples`` fresh draws."""
    target = QosArrays.stack(qos).target
    total = np.zeros(scenario.n_users)
    done = 0
    while done < cfg.verify_samples:
        m = min(cfg.eval_batch_size, cfg.verify_samples - done)
        g = sample_gain_batch(rng, scenario, m)
        total += batch_loss(state, g, qos, scenario).lhs_mean * m
        done += m
    return total / cfg.verify_samples / target - 1.0


def _history_row(state: TrainState) -> dict:
    row = {
        "frame": state.frame,
        "t": state.t,
        "sumW_hz": state.total_bandwidth,
        "zeta": state.zeta,
        "xi": state.xi,
    }
    for k, lam in enumerate(state.multipliers):
        row[f"lambda_{k + 1}"] = lam
    for k, w in enumerate(state.bandwidth):
        row[f"W_{k + 1}"] = w
    return row


def refit_state(
    state: TrainState,
    scenario: ScenarioConfig,
    rng: np.random.Generator,
    cfg: TrainConfig = TrainConfig(),
    qos: Optional[Sequence[UserQoS]] = None,
) -> TrainState:
    """Carry a trained state over to another drop with the same number of
    users, for instance after the users moved.

    The network parameters and the step counter are kept. Under the power of
    the network on ``verify_samples`` fresh draws, every bandwidth is solved
    so that the sampled QoS constraint of its user holds with equality, then
    the multipliers are set where the bandwidth gradient of the loss
    vanishes. The search starts from the bandwidth scaled by the ratio of
    the warm starts; a user whose root cannot be bracketed keeps that
    start.

    :raise InvalidInputError: the network does not match the scenario
    """
    if qos is None:
        qos = build_qos(scenario)
    if state.params.layer_sizes[0] != scenario.n_users:
        raise InvalidInputError("The state does not match the scenario")
    scale = warm_start_bandwidth(scenario, qos)
    guess = state.bandwidth * scale / state.bandwidth_scale
    qa = QosArrays.stack(qos)
    alphas = scenario.alphas
    g = sample_gain_batch(rng, scenario, cfg.verify_samples)
    power = scenario.p_max * mlp.forward(state.params, g)[0]
    bandwidth = guess.copy()
    for k in range(scenario.n_users):

        def excess(w, k=k):
            # log of the sampled constraint over its target
            s = finite_blocklength_rate(
                w, power[:, k], alphas[k], g[:, k], qa.qinv_c[k], scenario
            )
            return float(
                special.logsumexp(-qa.theta[k] * s)
                - math.log(s.size)
                + qa.theta[k] * qa.effective_bandwidth[k]
            )

        lo, hi = guess[k] / REFIT_BRACKET, guess[k] * REFIT_BRACKET
        for _ in range(REFIT_EXPANSIONS):
            if excess(lo) > 0:
                break
            lo /= REFIT_BRACKET
        for _ in range(REFIT_EXPANSIONS):
            if excess(hi) < 0:
                break
            hi *= REFIT_BRACKET
        if excess(lo) > 0 > excess(hi):
            bandwidth[k] = optimize.brentq(excess, lo, hi, rtol=1e-12)
        else:
            log.warning(f"No bandwidth root bracketed for user {k}")
    bandwidth = np.maximum(bandwidth, cfg.bandwidth_floor)

    w_ref = float(np.mean(scale))
    args = (bandwidth, power, alphas, g, qa.qinv_c, scenario)
    lhs = np.exp(-qa.theta * finite_blocklength_rate(*args))
    slope = qa.theta * np.mean(lhs * rate_derivatives(*args)[1], axis=0)
    multipliers = state.multipliers.copy()
    ok = slope > 0
    multipliers[ok] = 1.0 / (w_ref * slope[ok])
    log.info(
        f"Refitted the state to {scenario.n_users} users, sum W "
        f"{state.total_bandwidth:.1f} -> {float(np.sum(bandwidth)):.1f} Hz"
    )
    return replace(
        state,
        bandwidth=bandwidth,
        multipliers=multipliers,
        bandwidth_scale=scale,
        frame=0,
        zeta=float("inf"),
        xi=float("inf"),
        converged=False,
        converged_at=None,
    )


def train(
    scenario: ScenarioConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    init: Union[mlp.MlpParams, TrainState, None] = None,
    qos: Optional[Sequence[UserQoS]] = None,
) -> Tuple[TrainState, pandas.DataFrame]:
    """Train until convergence or ``max_frames``.

    Every frame draws a fresh batch of ``batch_size`` channel realizations,
    runs ``iterations_per_frame`` iterations on it and evaluates ``zeta``
    and ``xi`` on ``eval_batch_size`` fresh draws. After ``debounce``
    consecutive passing checks the state is verified on ``verify_samples``
    fresh draws; it is flagged converged only if no user exceeds its QoS
    target by more than ``verify_tolerance``. A pre-trained start is
    checked once before the first frame (frame 0), so a state that already
    fits the scenario converges without training.

    :param init: Pre-trained network parameters, or a full state to resume
        from (keeps its bandwidths, multipliers and step counter)
    :return: ``(state, history)``, one history row per check
    :raise DivergenceError: bandwidth or multiplier caps exceeded
    """
    if qos is None:
        qos = build_qos(scenario)
    if isinstance(init, TrainState):
        if init.params.layer_sizes[0] != scenario.n_users:
            raise InvalidInputError("The state does not match the scenario")
        state = replace(
            init,
            frame=0,
            zeta=float("inf"),
            xi=float("inf"),
            converged=False,
            converged_at=None,
        )
    else:
        state = initial_state(scenario, qos, rng, cfg, params=init)
    cap = cfg.divergence_factor * float(np.sum(state.bandwidth_scale))
    rows = []
    streak = 0
    streak_start = 0
    log.info(
        f"Training {scenario.n_users} users from t={state.t}, "
        f"sum W={state.total_bandwidth:.1f} Hz"
    )
    first = 1 if init is None else 0
    for frame in range(first, cfg.max_frames + 1):
        if frame > 0:
            g = sample_gain_batch(rng, scenario, cfg.batch_size)
            for _ in range(cfg.iterations_per_frame):
                state = step(state, g, qos, scenario, cfg)
        g_eval = sample_gain_batch(rng, scenario, cfg.eval_batch_size)
        state.zeta, state.xi = convergence_stats(state, g_eval, qos, scenario)
        state.frame = frame
        rows.append(_history_row(state))
        if (
            state.total_bandwidth > cap
            or np.max(state.multipliers) > cfg.max_multiplier
        ):
            history = pandas.DataFrame(rows)
            raise DivergenceError(
                f"Training diverged at frame {frame}: "
                f"sum W={state.total_bandwidth:.3g} Hz, "
                f"max lambda={np.max(state.multipliers):.3g}",
                history=history,
            )
        log.debug(
            f"frame {frame}: sum W={state.total_bandwidth:.1f} Hz, "
            f"zeta={state.zeta:.3e}, xi={state.xi:.3e}"
        )
        if not is_converged(state, state.zeta, state.xi, cfg):
            streak = 0
            continue
        if streak == 0:
            streak_start = frame
        streak += 1
        if streak >= cfg.debounce:
            excess = _verify(state, qos, scenario, rng, cfg)
            if np.all(excess < cfg.verify_tolerance):
                state.converged = True
                state.converged_at = streak_start
                log.info(
                    f"Converged at frame {streak_start} "
                    f"(verified at frame {frame}), "
                    f"sum W={state.total_bandwidth:.1f} Hz"
                )
                break
            log.debug(f"Verification failed at frame {frame}: {excess}")
            streak = 0
    else:
        log.warning(
            f"Training did not converge in {cfg.max_frames} frames, "
            f"zeta={state.zeta:.3e}, xi={state.xi:.3e}"
        )
    return state, pandas.DataFrame(rows)


def learned_power(state: TrainState, scenario: ScenarioConfig):
    """Power rule ``g -> Pmax N(g; w)`` of a trained state."""
    params = state.params.copy()

    def rule(g):
        return scenario.p_max * mlp.forward(params, g)[0]

    return rule


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    """Write the parameters to ``<path>.npz`` and the bandwidths,
    multipliers and step counter to the YAML sidecar ``<path>.yml``."""
    path = Path(path).with_suffix(".npz")
    mlp.save(state.params, path)
    sidecar = {
        "format_version": CHECKPOINT_VERSION,
        "t": int(state.t),
        "bandwidth_hz": [float(w) for w in state.bandwidth],
        "multipliers": [float(m) for m in state.multipliers],
        "bandwidth_scale_hz": [float(w) for w in state.bandwidth_scale],
        "converged": bool(state.converged),
    }
    with path.with_suffix(".yml").open("w") as fo:
        yaml.safe_dump(sidecar, fo, sort_keys=False)
    log.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    """Read a checkpoint written by :func:`save_checkpoint`.

    :raise InvalidInputError: missing, corrupt or inconsistent files
    """
    path = Path(path).with_suffix(".npz")
    params = mlp.load(path)
    try:
        with path.with_suffix(".yml").open("r") as fo:
            sidecar = yaml.safe_load(fo)
        if sidecar.get("format_version") != CHECKPOINT_VERSION:
            raise InvalidInputError(
                f"Unsupported checkpoint version "
                f"{sidecar.get('format_version')}"
            )
        return TrainState(
            params=params,
            bandwidth=sidecar["bandwidth_hz"],
            multipliers=sidecar["multipliers"],
            bandwidth_scale=sidecar["bandwidth_scale_hz"],
            t=int(sidecar["t"]),
        )
    except (OSError, KeyError, TypeError, AttributeError, yaml.YAMLError) as e:
        raise InvalidInputError(f"Cannot read checkpoint {path}: {e}")
