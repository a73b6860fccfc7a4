# -*- coding: utf-8 -*-

"""QoS quantities and the finite-blocklength achievable rate.

The overall packet loss probability ``eps_max`` is split evenly between the
decoding error probability and the queueing delay violation probability.
The queueing part is controlled through the effective bandwidth of the
Poisson arrivals: with the QoS exponent ``theta`` the violation probability
of the delay bound ``dq_max`` is bounded by ``exp(-theta * BE * dq_max)``.

The rate uses the dispersion ``V = 1`` (a lower bound of the normal
approximation). Rates are in packets/frame.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import special

from urllc_allocator.channel import ScenarioConfig
from urllc_allocator.errors import InvalidInputError

log = logging.getLogger(__name__)

RELIABILITY_SPLIT = 0.5
SERIES_THRESHOLD = 1e-8
SQRT2 = math.sqrt(2.0)


def qos_exponent(
    arrival_rate: float,
    dq_max: float,
    eps_max: float,
    split: float = RELIABILITY_SPLIT,
) -> float:
    """QoS exponent ``theta = ln[1 - ln(eps_q) / (a * dq_max)]`` with the
    queueing share ``eps_q = split * eps_max`` of the overall loss.

    :param arrival_rate: Mean arrival rate ``a`` [packets/frame]
    :param dq_max: Queueing delay bound [frames]
    :param eps_max: Overall packet loss probability
    :param split: Share of ``eps_max`` left to the queueing delay violation
    """
    if not arrival_rate > 0:
        raise InvalidInputError(
            f"Arrival rate must be positive: {arrival_rate}"
        )
    if not dq_max >= 1:
        raise InvalidInputError(
            f"Queueing delay bound below 1 frame: {dq_max}"
        )
    if not 0 < eps_max < 1:
        raise InvalidInputError(f"Probability out of (0, 1): {eps_max}")
    if not 0 < split < 1:
        raise InvalidInputError(f"Split must be in (0, 1): {split}")
    eps_q = split * eps_max
    return math.log1p(-math.log(eps_q) / (arrival_rate * dq_max))


def effective_bandwidth(arrival_rate: float, theta: float) -> float:
    """Effective bandwidth of Poisson arrivals ``a (e^theta - 1) / theta``."""
    if not arrival_rate > 0:
        raise InvalidInputError(
            f"Arrival rate must be positive: {arrival_rate}"
        )
    if not theta > 0:
        raise InvalidInputError(f"QoS exponent must be positive: {theta}")
    if theta < SERIES_THRESHOLD:
        return arrival_rate * (1.0 + theta / 2.0)
    return arrival_rate * math.expm1(theta) / theta


def gaussian_q(z):
    """Gaussian Q-function."""
    return 0.5 * special.erfc(np.asarray(z, dtype=float) / SQRT2)


def gaussian_q_inv(p: float) -> float:
    """Inverse of the Gaussian Q-function on ``(0, 0.5)``.

    Starts from ``sqrt(2) erfcinv(2p)`` and polishes with Newton steps on
    ``erfc`` so that ``Q(z) = p`` to a relative error far below 1e-10.
    """
    if not 0 < p < 0.5:
        raise InvalidInputError(f"Probability out of (0, 0.5): {p}")
    z = SQRT2 * float(special.erfcinv(2.0 * p))
    for _ in range(3):
        err = float(gaussian_q(z)) - p
        pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        if pdf == 0.0 or abs(err) <= 1e-15 * p:
            break
        z += err / pdf
    return z


def channel_dispersion(snr):
    """Channel dispersion ``V = 1 - 1/(1+snr)^2``."""
    snr = np.asarray(snr, dtype=float)
    if np.any(snr < 0):
        raise InvalidInputError("SNR must be non-negative")
    v = 1.0 - 1.0 / np.square(1.0 + snr)
    return float(v) if v.ndim == 0 else v


@dataclass(frozen=True)
class UserQoS:
    """QoS requirement of one user.

    :param arrival_rate: Mean packet arrival rate [packets/frame]
    :param theta: QoS exponent
    :param effective_bandwidth: Effective bandwidth [packets/frame]
    :param eps_c: Decoding error probability
    :param eps_q: Queueing delay violation probability
    :param dq_max: Queueing delay bound [frames]
    :param qinv_c: ``Q^-1(eps_c)``
    """

    arrival_rate: float
    theta: float
    effective_bandwidth: float
    eps_c: float
    eps_q: float
    dq_max: int
    qinv_c: float

    @classmethod
    def from_requirement(
        cls,
        arrival_rate: float,
        dq_max: int,
        eps_max: float,
        split: float = RELIABILITY_SPLIT,
    ) -> "UserQoS":
        """Derive the QoS of a user from its arrival rate and the
        requirement (delay bound, overall loss probability)."""
        eps_q = split * eps_max
        eps_c = eps_max - eps_q
        theta = qos_exponent(arrival_rate, dq_max, eps_max, split)
        return cls(
            arrival_rate=arrival_rate,
            theta=theta,
            effective_bandwidth=effective_bandwidth(arrival_rate, theta),
            eps_c=eps_c,
            eps_q=eps_q,
            dq_max=dq_max,
            qinv_c=gaussian_q_inv(eps_c),
        )

    @property
    def target(self) -> float:
        """Right-hand side of the QoS constraint ``exp(-theta * BE)``"""
        return math.exp(-self.theta * self.effective_bandwidth)


def build_qos(cfg: ScenarioConfig) -> Tuple[UserQoS, ...]:
    """The QoS of every user of a scenario, in user order."""
    cache = {}
    out = []
    for user in cfg.users:
        if user.arrival_rate not in cache:
            cache[user.arrival_rate] = UserQoS.from_requirement(
                user.arrival_rate, cfg.dq_max, cfg.eps_max
            )
        out.append(cache[user.arrival_rate])
    return tuple(out)


@dataclass(frozen=True)
class QosArrays:
    """Per-user QoS quantities stacked into vectors for batch computation."""

    theta: np.ndarray
    effective_bandwidth: np.ndarray
    qinv_c: np.ndarray
    target: np.ndarray

    @classmethod
    def stack(cls, qos: Sequence[UserQoS]) -> "QosArrays":
        return cls(
            theta=np.array([q.theta for q in qos]),
            effective_bandwidth=np.array(
                [q.effective_bandwidth for q in qos]
            ),
            qinv_c=np.array([q.qinv_c for q in qos]),
            target=np.array([q.target for q in qos]),
        )


def rate_scale(cfg: ScenarioConfig) -> float:
    """``tau / (u ln 2)``: nats per Hz of bandwidth to packets per frame."""
    return cfg.tau / (cfg.packet_size * math.log(2.0))


def finite_blocklength_rate(
    bandwidth, power, alpha, gain, qinv_c, cfg: ScenarioConfig,
    exact_dispersion: bool = False,
):
    """Achievable rate in packets/frame, broadcasting over all arguments.

    ``s = tau W / (u ln2) [ln(1 + snr) - sqrt(V / (tau W)) Q^-1(eps_c)]``
    with ``snr = alpha g P / (N0 W)`` and ``V = 1`` unless
    ``exact_dispersion``. The result is negative when the dispersion
    penalty exceeds the capacity term.
    """
    bandwidth = np.asarray(bandwidth, dtype=float)
    if np.any(~(bandwidth > 0)):
        raise InvalidInputError("Bandwidth must be positive")
    snr = alpha * gain * power / (cfg.n0 * bandwidth)
    n_symbols = cfg.tau * bandwidth
    penalty = qinv_c / np.sqrt(n_symbols)
    if exact_dispersion:
        penalty = penalty * np.sqrt(channel_dispersion(snr))
    return rate_scale(cfg) * bandwidth * (np.log1p(snr) - penalty)


def rate_derivatives(
    bandwidth, power, alpha, gain, qinv_c, cfg: ScenarioConfig
):
    """Partial derivatives of the ``V = 1`` rate.

    ``ds/dP = c alpha g / (N0 (1 + snr))`` and
    ``ds/dW = c [ln(1 + snr) - snr/(1 + snr) - Q^-1(eps_c)/(2 sqrt(tau W))]``
    with ``c = tau / (u ln2)``.

    :return: ``(ds/dP, ds/dW)``
    """
    bandwidth = np.asarray(bandwidth, dtype=float)
    c = rate_scale(cfg)
    snr = alpha * gain * power / (cfg.n0 * bandwidth)
    d_power = c * alpha * gain / (cfg.n0 * (1.0 + snr))
    d_bandwidth = c * (
        np.log1p(snr)
        - snr / (1.0 + snr)
        - qinv_c / (2.0 * np.sqrt(cfg.tau * bandwidth))
    )
    return d_power, d_bandwidth


def achievable_rate(
    bandwidth: float,
    power,
    alpha: float,
    gain,
    qos: UserQoS,
    cfg: ScenarioConfig,
    exact_dispersion: bool = False,
):
    """Achievable rate of one user, see :func:`finite_blocklength_rate`.

    :param bandwidth: ``W_k`` [Hz]
    :param power: ``P_k`` [W], scalar or array of draws
    :param alpha: Large-scale gain of the user
    :param gain: Small-scale gain ``g_k``, scalar or array of draws
    """
    if np.any(np.asarray(power) < 0):
        raise InvalidInputError("Power must be non-negative")
    if not alpha > 0 or np.any(~(np.asarray(gain) > 0)):
        raise InvalidInputError("Channel gains must be positive")
    s = finite_blocklength_rate(
        bandwidth, power, alpha, gain, qos.qinv_c, cfg, exact_dispersion
    )
    return float(s) if np.ndim(s) == 0 else s


def qos_lhs_sample(rate, qos: UserQoS):
    """Per-draw integrand ``exp(-theta s)`` of the QoS constraint."""
    out = np.exp(-qos.theta * np.asarray(rate, dtype=float))
    return float(out) if out.ndim == 0 else out


def effective_capacity(mean_lhs, theta):
    """Effective capacity ``-ln(E{exp(-theta s)}) / theta``."""
    return -np.log(mean_lhs) / theta
