# -*- coding: utf-8 -*-

"""Monte-Carlo verification and comparison of allocation policies.

A policy is a power rule ``g -> P`` and a bandwidth vector. The evaluator
does not care where the rule comes from (closed form, network, baseline),
it only draws gains, checks the power budget and estimates the QoS
constraint ``E{exp(-theta s)} <= exp(-theta BE)`` per user.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas

from urllc_allocator.channel import ScenarioConfig, sample_gain_batch
from urllc_allocator.errors import InvalidInputError
from urllc_allocator.qos import (
    QosArrays,
    UserQoS,
    build_qos,
    effective_capacity,
    finite_blocklength_rate,
)
from urllc_allocator.symmetric import (
    BANDWIDTH_FLOOR,
    INFEASIBLE_TOLERANCE,
    SearchConfig,
    SymmetricPolicy,
    optimal_power,
    power_violations,
    solve_bandwidth,
    stochastic_bandwidth_search,
    warm_start_bandwidth,
)

log = logging.getLogger(__name__)

MIN_SAMPLES = 10_000
CHUNK_SIZE = 50_000
DEFAULT_TOLERANCE = 0.01

PowerRule = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PolicyHandle:
    """A power rule and the bandwidths it runs with.

    :param name: Label in reports (``optimal``, ``learned``, ``equal_power``)
    :param power_rule: Maps an ``(n, K)`` gain batch to ``(n, K)`` powers [W];
        must be pure, it may be called from several threads
    :param bandwidth: ``W_k`` [Hz]
    :param converged: False for a policy whose training or search stopped
        before convergence
    """

    name: str
    power_rule: PowerRule
    bandwidth: np.ndarray
    converged: bool = True

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.bandwidth, dtype=float))
        if np.any(~(w > 0)) or np.any(~np.isfinite(w)):
            raise InvalidInputError("Bandwidths must be positive and finite")
        object.__setattr__(self, "bandwidth", w)

    @property
    def total_bandwidth(self) -> float:
        return float(math.fsum(self.bandwidth))


@dataclass
class EvalReport:
    """Monte-Carlo estimate of the QoS constraint of a policy.

    ``violations`` counts the draws with a negative power component; these
    are evaluated at zero power for that component, never dropped.
    """

    policy: str
    n_samples: int
    lhs_mean: np.ndarray
    lhs_stderr: np.ndarray
    target: np.ndarray
    effective_capacity: np.ndarray
    effective_bandwidth: np.ndarray
    theta: np.ndarray
    bandwidth: np.ndarray
    violations: int
    tolerance: float = DEFAULT_TOLERANCE
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def xi(self) -> float:
        """Average positive part of the relative QoS error"""
        excess = self.lhs_mean / self.target - 1.0
        return float(np.mean(np.maximum(excess, 0.0)))

    @property
    def total_bandwidth(self) -> float:
        return float(math.fsum(self.bandwidth))

    @property
    def passed(self) -> np.ndarray:
        """Per-user pass flag ``mean <= exp(-theta BE) (1 + tol)``"""
        return self.lhs_mean <= self.target * (1.0 + self.tolerance)

    @property
    def passed_capacity(self) -> np.ndarray:
        """The same flag in the effective capacity form
        ``CE >= BE - ln(1 + tol) / theta``"""
        slack = math.log1p(self.tolerance) / self.theta
        # ulp-level slack so both forms agree at the boundary
        margin = 1e-12 * np.maximum(np.abs(self.effective_bandwidth), 1.0)
        return self.effective_capacity >= (
            self.effective_bandwidth - slack - margin
        )

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    def to_frame(self) -> pandas.DataFrame:
        """One row per user."""
        k = self.lhs_mean.size
        return pandas.DataFrame(
            {
                "policy": [self.policy] * k,
                "user": np.arange(1, k + 1),
                "bandwidth_hz": self.bandwidth,
                "lhs_mean": self.lhs_mean,
                "lhs_stderr": self.lhs_stderr,
                "target": self.target,
                "effective_capacity": self.effective_capacity,
                "effective_bandwidth": self.effective_bandwidth,
                "passed": self.passed,
                "n_samples": [self.n_samples] * k,
                "violations": [self.violations] * k,
            }
        )

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "n_samples": int(self.n_samples),
            "total_bandwidth_hz": self.total_bandwidth,
            "xi": self.xi,
            "all_passed": self.all_passed,
            "violations": int(self.violations),
            **self.extra,
        }


def _checked_power(policy: PolicyHandle, g: np.ndarray, p_max: float):
    power = np.asarray(policy.power_rule(g), dtype=float)
    if power.shape != g.shape:
        raise InvalidInputError(
            f"Policy {policy.name} returned powers of shape {power.shape} "
            f"for gains of shape {g.shape}"
        )
    bad = ~np.isfinite(power)
    bad_rows = np.any(bad, axis=1)
    over = power.sum(axis=1) > p_max * (1.0 + INFEASIBLE_TOLERANCE)
    bad_rows |= over
    if np.any(bad_rows):
        draw = int(np.flatnonzero(bad_rows)[0])
        raise InvalidInputError(
            f"Policy {policy.name} returned invalid powers for draw {draw}: "
            f"{power[draw]} (Pmax={p_max})"
        )
    return power


def evaluate(
    policy: PolicyHandle,
    scenario: ScenarioConfig,
    qos: Optional[Sequence[UserQoS]],
    n_samples: int,
    rng: np.random.Generator,
    tolerance: float = DEFAULT_TOLERANCE,
    chunk_size: int = CHUNK_SIZE,
) -> EvalReport:
    """Estimate ``E{exp(-theta_k s_k)}`` of every user on fresh draws.

    Chunk sums and their total are accumulated with :func:`math.fsum`.

    :param n_samples: At least 1e4
    :raise InvalidInputError: too few samples, or a power rule returning
        non-finite powers or exceeding ``Pmax`` (the message names the draw)
    """
    if n_samples < MIN_SAMPLES:
        raise InvalidInputError(
            f"Need at least {MIN_SAMPLES} samples, got {n_samples}"
        )
    if qos is None:
        qos = build_qos(scenario)
    if policy.bandwidth.size != scenario.n_users:
        raise InvalidInputError(
            f"Policy {policy.name} has {policy.bandwidth.size} bandwidths "
            f"for {scenario.n_users} users"
        )
    qa = QosArrays.stack(qos)
    alphas = scenario.alphas
    sums: List[List[float]] = [[] for _ in range(scenario.n_users)]
    squares: List[List[float]] = [[] for _ in range(scenario.n_users)]
    violations = 0
    done = 0
    while done < n_samples:
        m = min(chunk_size, n_samples - done)
        g = sample_gain_batch(rng, scenario, m)
        power = _checked_power(policy, g, scenario.p_max)
        violations += int(np.sum(power_violations(power, scenario.p_max)))
        rate = finite_blocklength_rate(
            policy.bandwidth,
            np.maximum(power, 0.0),
            alphas,
            g,
            qa.qinv_c,
            scenario,
        )
        lhs = np.exp(-qa.theta * rate)
        for k in range(scenario.n_users):
            sums[k].append(math.fsum(lhs[:, k]))
            squares[k].append(math.fsum(np.square(lhs[:, k])))
        done += m
    mean = np.array([math.fsum(s) / n_samples for s in sums])
    second = np.array([math.fsum(s) / n_samples for s in squares])
    variance = np.maximum(second - mean**2, 0.0) * n_samples / (n_samples - 1)
    stderr = np.sqrt(variance / n_samples)
    if violations:
        log.warning(
            f"{violations} of {n_samples} draws of {policy.name} had a "
            f"negative power component"
        )
    report = EvalReport(
        policy=policy.name,
        n_samples=n_samples,
        lhs_mean=mean,
        lhs_stderr=stderr,
        target=qa.target,
        effective_capacity=effective_capacity(mean, qa.theta),
        effective_bandwidth=qa.effective_bandwidth,
        theta=qa.theta,
        bandwidth=policy.bandwidth.copy(),
        violations=violations,
        tolerance=tolerance,
    )
    log.info(
        f"Evaluated {policy.name} on {n_samples} draws: "
        f"sum W={report.total_bandwidth:.1f} Hz, xi={report.xi:.3e}"
    )
    return report


def optimal_policy(
    scenario: ScenarioConfig,
    rng: np.random.Generator,
    search: SearchConfig = SearchConfig(),
) -> PolicyHandle:
    """The closed-form policy at its solved common bandwidth (symmetric
    scenarios only)."""
    w_star, _ = solve_bandwidth(scenario, None, rng, search)
    return symmetric_handle(SymmetricPolicy.from_scenario(scenario, w_star))


def symmetric_handle(policy: SymmetricPolicy) -> PolicyHandle:
    def rule(g):
        return optimal_power(policy, g)

    return PolicyHandle(
        "optimal", rule, np.full(policy.n_users, policy.bandwidth)
    )


def equal_power_policy(
    scenario: ScenarioConfig,
    qos: Optional[Sequence[UserQoS]],
    rng: np.random.Generator,
    search: SearchConfig = SearchConfig(),
) -> PolicyHandle:
    """Reference baseline: ``P_k = Pmax / K`` for every draw, each ``W_k``
    the root of its own QoS constraint under that power.

    :raise NonConvergenceError: from the bandwidth search
    """
    if qos is None:
        qos = build_qos(scenario)
    qa = QosArrays.stack(qos)
    alphas = scenario.alphas
    power = scenario.p_max / scenario.n_users

    def rule(g):
        return np.full(np.shape(g), power)

    def residual(w, g):
        rate = finite_blocklength_rate(
            w, power, alphas, g, qa.qinv_c, scenario
        )
        return np.exp(-qa.theta * rate).mean(axis=0) - qa.target

    def draw(n):
        return sample_gain_batch(rng, scenario, n)

    w0 = warm_start_bandwidth(scenario, qos)
    w, _ = stochastic_bandwidth_search(residual, w0, qa.target, draw, search)
    log.info(
        f"Equal power baseline for {scenario.n_users} users: "
        f"sum W={np.sum(w):.1f} Hz"
    )
    return PolicyHandle("equal_power", rule, np.maximum(w, BANDWIDTH_FLOOR))


def sweep(
    make_scenario: Callable[[int], ScenarioConfig],
    n_users: Sequence[int],
    policies: Dict[str, Callable[[ScenarioConfig, np.random.Generator],
                                 PolicyHandle]],
    n_samples: int,
    rng: np.random.Generator,
    tolerance: float = DEFAULT_TOLERANCE,
) -> pandas.DataFrame:
    """Total bandwidth of every policy for every number of users.

    :param make_scenario: ``K -> scenario`` (the scenario family)
    :param policies: ``name -> builder(scenario, rng)``
    :return: One row per ``(K, policy)`` with the columns ``K``, ``policy``,
        ``total_bandwidth_hz``, ``xi``, ``all_passed``
    """
    rows = []
    for k in sorted(n_users):
        scenario = make_scenario(k)
        qos = build_qos(scenario)
        for name, builder in policies.items():
            handle = builder(scenario, rng)
            report = evaluate(handle, scenario, qos, n_samples, rng, tolerance)
            rows.append(
                {
                    "K": k,
                    "policy": name,
                    "total_bandwidth_hz": report.total_bandwidth,
                    "xi": report.xi,
                    "all_passed": report.all_passed,
                }
            )
    return pandas.DataFrame(
        rows, columns=["K", "policy", "total_bandwidth_hz", "xi", "all_passed"]
    )
