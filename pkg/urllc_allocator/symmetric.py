# -*- coding: utf-8 -*-

"""Globally optimal policy in the symmetric scenario.

When every user has the same large-scale gain and arrival process, the
power allocation that satisfies the KKT conditions has a closed form (it
does not depend on the distribution of the small-scale gains) and the
common bandwidth is the root of the QoS constraint, which is found with a
Robbins-Monro iteration::

    W(t+1) = [W(t) + phi(t) (E{exp(-theta s)} - exp(-theta BE))]^+

The same iteration is used for any fixed power rule, see
:func:`stochastic_bandwidth_search`.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas
from scipy import optimize

from urllc_allocator.channel import ScenarioConfig, sample_gain_batch
from urllc_allocator.errors import (
    InfeasiblePowerError,
    InvalidInputError,
    NonConvergenceError,
)
from urllc_allocator.qos import (
    UserQoS,
    build_qos,
    finite_blocklength_rate,
    rate_derivatives,
    rate_scale,
)

log = logging.getLogger(__name__)

INFEASIBLE_TOLERANCE = 1e-9
BANDWIDTH_FLOOR = 1.0


@dataclass(frozen=True)
class SearchConfig:
    """Settings of the stochastic bandwidth search.

    The step size is ``phi(t) = c / (1 + decay * t)``. The gain ``c`` is
    calibrated on the first batch: the inverse slope of the residual
    (common random numbers, relative perturbation ``calibration_delta``),
    capped so that the first step moves ``W`` by at most ``step_fraction``.

    The search is considered converged when the mean relative update over
    the last ``window`` iterations is below ``tolerance`` and a verification
    on ``verify_samples`` fresh draws gives a relative QoS residual below
    ``verify_tolerance``.
    """

    batch_size: int = 1000
    max_iter: int = 1000
    tolerance: float = 1e-3
    window: int = 50
    verify_samples: int = 100_000
    verify_tolerance: float = 0.01
    step_fraction: float = 0.1
    decay: float = 0.1
    calibration_delta: float = 0.05
    chunk_size: int = 50_000

    def __post_init__(self):
        if self.batch_size < 1 or self.max_iter < 1 or self.window < 1:
            raise InvalidInputError(
                "batch_size, max_iter and window must be positive"
            )
        if not (self.tolerance > 0 and self.verify_tolerance > 0):
            raise InvalidInputError("Tolerances must be positive")
        if not (0 < self.step_fraction and self.decay >= 0):
            raise InvalidInputError("Invalid step schedule")


@dataclass(frozen=True)
class SymmetricPolicy:
    """Closed-form power allocation with a common bandwidth.

    :param bandwidth: Bandwidth of each user ``W`` [Hz]
    :param qos: The (common) QoS of the users
    :param scenario: A symmetric scenario
    """

    bandwidth: float
    qos: UserQoS
    scenario: ScenarioConfig

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidInputError(
                f"Bandwidth must be positive, got {self.bandwidth}"
            )
        if not self.scenario.is_symmetric:
            raise InvalidInputError("The scenario is not symmetric")

    @classmethod
    def from_scenario(
        cls, scenario: ScenarioConfig, bandwidth: float
    ) -> "SymmetricPolicy":
        scenario.require_users()
        return cls(bandwidth, build_qos(scenario)[0], scenario)

    @property
    def alpha(self) -> float:
        return float(self.scenario.alphas[0])

    @property
    def p_max(self) -> float:
        return self.scenario.p_max

    @property
    def n_users(self) -> int:
        return self.scenario.n_users

    @property
    def eta(self) -> float:
        """``1 / (1 + theta W tau / (u ln2))``"""
        return 1.0 / (
            1.0 + self.qos.theta * self.bandwidth * rate_scale(self.scenario)
        )


def _check_gains(g, n_users: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim not in (1, 2) or g.shape[-1] != n_users:
        raise InvalidInputError(
            f"Expected gains with {n_users} users, got shape {g.shape}"
        )
    if np.any(~np.isfinite(g)) or np.any(g <= 0):
        raise InvalidInputError("Small-scale gains must be positive")
    return g


def optimal_power(
    policy: SymmetricPolicy, g, strict: bool = False
) -> np.ndarray:
    """Optimal power allocation for one draw or a batch of draws.

    ``P_k = N0 W / alpha * (g_k^(eta-1) (A + S1) / S2 - 1/g_k)`` with
    ``A = alpha Pmax / (N0 W)``, ``S1 = sum 1/g_i`` and
    ``S2 = sum g_i^(eta-1)``. The powers sum to ``Pmax``.

    Negative components (the interior assumption of the KKT conditions
    fails for that draw) are returned as they are. Use
    :func:`power_violations` to count them, or ``strict=True`` to raise
    :class:`~.errors.InfeasiblePowerError`.

    :param g: Gains, shape ``(K,)`` or ``(n, K)``
    """
    g = _check_gains(g, policy.n_users)
    if policy.n_users == 1:
        return np.full(g.shape, policy.p_max)
    scale = policy.scenario.n0 * policy.bandwidth / policy.alpha
    eta = policy.eta
    inv_g = 1.0 / g
    s1 = inv_g.sum(axis=-1, keepdims=True)
    g_pow = g ** (eta - 1.0)
    s2 = g_pow.sum(axis=-1, keepdims=True)
    level = policy.p_max / scale + s1
    power = scale * (g_pow * level / s2 - inv_g)
    if strict:
        bad = power_violations(power, policy.p_max)
        if np.any(bad):
            raise InfeasiblePowerError(
                f"Negative power in {int(np.sum(bad))} draw(s)",
                draws=np.flatnonzero(np.atleast_1d(bad)),
            )
    return power


def power_violations(power, p_max: float) -> np.ndarray:
    """Mask of the draws with a component below ``-1e-9 Pmax``."""
    power = np.asarray(power, dtype=float)
    return np.any(power < -INFEASIBLE_TOLERANCE * p_max, axis=-1)


def constraint_lhs(
    policy: SymmetricPolicy, g
) -> Tuple[np.ndarray, int]:
    """``exp(-theta s_k)`` per draw and user under the optimal power.

    Infeasible draws are counted; their negative components are evaluated
    at zero power.

    :return: ``(lhs, n_infeasible)``, ``lhs`` has the shape of ``g``
    """
    power = optimal_power(policy, g)
    bad = power_violations(power, policy.p_max)
    rate = finite_blocklength_rate(
        policy.bandwidth,
        np.maximum(power, 0.0),
        policy.alpha,
        g,
        policy.qos.qinv_c,
        policy.scenario,
    )
    return np.exp(-policy.qos.theta * rate), int(np.sum(bad))


def kkt_ratio(policy: SymmetricPolicy, g) -> np.ndarray:
    """Stationarity check of the power allocation.

    At the optimum ``ds_k/dP_k exp(-theta s_k)`` is the same for all users
    of a draw. Returns this quantity of every user divided by that of the
    first user, so all entries are 1 at the optimum.
    """
    g = _check_gains(g, policy.n_users)
    power = optimal_power(policy, g)
    args = (
        policy.bandwidth,
        power,
        policy.alpha,
        g,
        policy.qos.qinv_c,
        policy.scenario,
    )
    rate = finite_blocklength_rate(*args)
    d_power, _ = rate_derivatives(*args)
    # work in logs, the exponentials are tiny at high rates
    log_v = np.log(d_power) - policy.qos.theta * rate
    return np.exp(log_v - log_v[..., :1])


def total_bandwidth(policy: SymmetricPolicy) -> float:
    return policy.n_users * policy.bandwidth


def warm_start_bandwidth(
    scenario: ScenarioConfig, qos: Sequence[UserQoS]
) -> np.ndarray:
    """Per-user bandwidth at which the Shannon rate (no dispersion penalty)
    at the mean SNR with equal power equals the effective bandwidth."""
    scenario.require_users()
    c = rate_scale(scenario)
    power = scenario.p_max / scenario.n_users
    out = []
    for alpha, q in zip(scenario.alphas, qos):
        snr_hz = alpha * scenario.n_antennas * power / scenario.n0
        target = q.effective_bandwidth
        if c * snr_hz <= target:
            raise InvalidInputError(
                "The power budget cannot support the effective bandwidth "
                f"{target:.4f} packets/frame"
            )

        def f(w):
            return c * w * math.log1p(snr_hz / w) - target

        hi = 1e3
        while f(hi) <= 0:
            hi *= 10.0
        out.append(optimize.brentq(f, 1e-6, hi, rtol=1e-12))
    return np.array(out)


def _chunked_residual(residual, bandwidth, draw, n, chunk_size):
    """Mean residual over ``n`` draws, evaluated in chunks."""
    total = np.zeros_like(bandwidth)
    done = 0
    while done < n:
        m = min(chunk_size, n - done)
        total += residual(bandwidth, draw(m)) * m
        done += m
    return total / n


def stochastic_bandwidth_search(
    residual: Callable[[np.ndarray, np.ndarray], np.ndarray],
    w0,
    target,
    draw: Callable[[int], np.ndarray],
    search: SearchConfig = SearchConfig(),
) -> Tuple[np.ndarray, pandas.DataFrame]:
    """Robbins-Monro search for the bandwidths that meet the QoS constraint
    with equality.

    :param residual: ``residual(W, g)`` returns the batch mean of
        ``exp(-theta s) - exp(-theta BE)`` for every entry of ``W``
    :param w0: Initial bandwidths [Hz]
    :param target: ``exp(-theta BE)`` for every entry of ``W``, used for the
        relative residual of the verification
    :param draw: ``draw(n)`` returns ``n`` fresh gain draws
    :return: ``(W*, trace)``, the trace has the columns ``t``, ``W``,
        ``residual`` (suffixed ``_k`` for more than one bandwidth)
    :raise NonConvergenceError: out of iterations, carries the trace
    """
    w = np.atleast_1d(np.asarray(w0, dtype=float)).copy()
    target = np.atleast_1d(np.asarray(target, dtype=float))
    g = draw(search.batch_size)
    r0 = residual(w, g)
    delta = search.calibration_delta
    slope = (residual(w * (1.0 + delta), g) - r0) / (delta * w)
    with np.errstate(divide="ignore"):
        newton = np.where(slope < 0, -1.0 / slope, np.inf)
        capped = search.step_fraction * w / np.maximum(
            np.abs(r0), 1e-3 * target
        )
    gain = np.minimum(newton, capped)
    log.debug(f"Step gain {gain}, initial residual {r0}")

    rows = []
    recent = deque(maxlen=search.window)
    for t in range(search.max_iter):
        if t > 0:
            g = draw(search.batch_size)
        r = r0 if t == 0 else residual(w, g)
        update = gain / (1.0 + search.decay * t) * r
        w = np.maximum(w + update, BANDWIDTH_FLOOR)
        rows.append((t, *w, *r))
        recent.append(float(np.max(np.abs(update) / w)))
        if len(recent) == search.window and np.mean(recent) < search.tolerance:
            check = _chunked_residual(
                residual, w, draw, search.verify_samples, search.chunk_size
            )
            relative = np.abs(check) / target
            if np.all(relative < search.verify_tolerance):
                log.info(
                    f"Bandwidth search converged after {t + 1} iterations, "
                    f"relative residual {np.max(relative):.2e}"
                )
                return w, _trace(rows, w.size)
            log.debug(
                f"Verification failed at t={t}, relative residual {relative}"
            )
            recent.clear()
    trace = _trace(rows, w.size)
    raise NonConvergenceError(
        f"Bandwidth search did not converge in {search.max_iter} iterations",
        trace=trace,
    )


def _trace(rows, m: int) -> pandas.DataFrame:
    if m == 1:
        columns = ["t", "W", "residual"]
    else:
        columns = (
            ["t"]
            + [f"W_{k + 1}" for k in range(m)]
            + [f"residual_{k + 1}" for k in range(m)]
        )
    trace = pandas.DataFrame(rows, columns=columns)
    trace["t"] = trace["t"].astype(int)
    return trace


def solve_bandwidth(
    scenario: ScenarioConfig,
    qos: Optional[UserQoS],
    rng: np.random.Generator,
    search: SearchConfig = SearchConfig(),
    w0: Optional[float] = None,
) -> Tuple[float, pandas.DataFrame]:
    """Optimal common bandwidth of the symmetric scenario.

    Every iteration draws a batch of gains, allocates the optimal power and
    averages ``exp(-theta s_k)`` over the users and the batch.

    :param qos: The common QoS, derived from the scenario if None
    :param w0: Initial bandwidth, :func:`warm_start_bandwidth` if None
    :return: ``(W*, trace)``
    """
    if not scenario.is_symmetric:
        raise InvalidInputError("The bandwidth iteration needs a symmetric "
                                "scenario")
    if qos is None:
        qos = build_qos(scenario)[0]
    if w0 is None:
        w0 = float(warm_start_bandwidth(scenario, [qos])[0])
    infeasible = [0]

    def residual(w, g):
        policy = SymmetricPolicy(float(w[0]), qos, scenario)
        lhs, bad = constraint_lhs(policy, g)
        infeasible[0] += bad
        return np.array([lhs.mean() - qos.target])

    def draw(n):
        return sample_gain_batch(rng, scenario, n)

    log.info(
        f"Solving the bandwidth of {scenario.n_users} symmetric users, "
        f"W0={w0:.1f} Hz"
    )
    w, trace = stochastic_bandwidth_search(
        residual, [w0], [qos.target], draw, search
    )
    if infeasible[0]:
        log.warning(
            f"{infeasible[0]} draws violated the interior assumption of the "
            f"closed-form power allocation"
        )
    return float(w[0]), trace
