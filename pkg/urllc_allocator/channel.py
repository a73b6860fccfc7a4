# -*- coding: utf-8 -*-

"""Scenario and channel model.

A scenario fixes the physical layer constants, the QoS requirement and the
users (distance to the BS and packet arrival rate). The small-scale gains are
drawn per frame and are independent across frames and users (frequency
hopping). The gain of a user is the beamforming gain of ``n_antennas``
Rayleigh branches of unit mean power, i.e. Gamma distributed with shape
``n_antennas`` and unit scale.

All quantities are SI. Decibel values only appear at the configuration
boundary, see :func:`dbm_to_watt`.

Random numbers come from :class:`numpy.random.Generator` with the PCG64 bit
generator, created with :func:`make_rng`.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import special

from urllc_allocator.errors import InvalidInputError

log = logging.getLogger(__name__)

PATH_LOSS_INTERCEPT_DB = 35.3
PATH_LOSS_SLOPE_DB = 37.6


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator. ``seed`` can be an int or a
    :class:`numpy.random.SeedSequence`."""
    return np.random.Generator(np.random.PCG64(seed))


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def large_scale_gain(distance):
    """Large-scale channel gain from the path loss model
    ``PL[dB] = 35.3 + 37.6 lg(d)``.

    :param distance: User-BS distance in meters, scalar or array
    :return: The linear gain ``10^(-PL/10)``
    """
    d = np.asarray(distance, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise InvalidInputError(f"Distance must be positive, got {distance}")
    path_loss_db = PATH_LOSS_INTERCEPT_DB + PATH_LOSS_SLOPE_DB * np.log10(d)
    alpha = 10.0 ** (-path_loss_db / 10.0)
    return float(alpha) if alpha.ndim == 0 else alpha


@dataclass(frozen=True)
class User:
    distance: float
    arrival_rate: float


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical layer constants, QoS requirement and user drop.

    A config without users is a template: it carries the constants and the
    road geometry that :func:`make_symmetric` and :func:`make_road` fill
    with a drop. The samplers and the solvers refuse a template through
    :meth:`require_users`.

    :param n_antennas: Number of BS antennas
    :param p_max: Maximum transmit power of the BS [W]
    :param n0: Single-sided noise spectral density [W/Hz]
    :param frame_duration: Frame duration [s]
    :param tau: Duration of the DL transmission in a frame [s]
    :param packet_size: Packet size [bit]
    :param d_max: DL delay bound [frames]
    :param d_t: Transmission delay [frames]
    :param d_c: Decoding delay [frames]
    :param eps_max: Overall packet loss probability
    :param users: The users of the drop
    :param seed: Seed of the drop, only recorded
    :param arrival_rate: Arrival rate of generated users [packets/frame]
    :param cell_radius: Cell radius [m], distance of cell-edge users
    :param min_distance: Closest user-BS distance on the road [m]
    """

    n_antennas: int = 8
    p_max: float = dbm_to_watt(43.0)
    n0: float = dbm_to_watt(-173.0)
    frame_duration: float = 1e-4
    tau: float = 5e-5
    packet_size: float = 160.0
    d_max: int = 10
    d_t: int = 1
    d_c: int = 1
    eps_max: float = 1e-5
    users: Sequence[User] = field(default_factory=tuple)
    seed: Optional[int] = None
    arrival_rate: float = 0.2
    cell_radius: float = 250.0
    min_distance: float = 50.0

    def __post_init__(self):
        # Freeze the user list so a config can be shared between threads
        object.__setattr__(self, "users", tuple(self.users))
        self.validate()

    def validate(self):
        if self.n_antennas < 1:
            raise InvalidInputError("n_antennas must be at least 1")
        for name in ("p_max", "n0", "tau", "packet_size", "frame_duration"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.tau > self.frame_duration:
            raise InvalidInputError("tau cannot exceed the frame duration")
        if not 0 < self.eps_max < 1:
            raise InvalidInputError("eps_max must be in (0, 1)")
        if self.dq_max < 1:
            raise InvalidInputError(
                f"No queueing budget: d_max - d_t - d_c = {self.dq_max}"
            )
        if not 0 < self.min_distance <= self.cell_radius:
            raise InvalidInputError(
                "Expected 0 < min_distance <= cell_radius"
            )
        for k, user in enumerate(self.users):
            if not (user.distance > 0 and user.arrival_rate > 0):
                raise InvalidInputError(
                    f"User {k} needs a positive distance and arrival rate, "
                    f"got {user}"
                )

    @property
    def n_users(self) -> int:
        return len(self.users)

    def require_users(self) -> "ScenarioConfig":
        """The scenario itself, if it is a drop with at least one user.

        :raise InvalidInputError: the scenario is a template
        """
        if self.n_users < 1:
            raise InvalidInputError("The scenario has no users")
        return self

    @property
    def dq_max(self) -> int:
        """Queueing delay bound [frames]"""
        return self.d_max - self.d_t - self.d_c

    @property
    def distances(self) -> np.ndarray:
        return np.array([u.distance for u in self.users], dtype=float)

    @property
    def arrival_rates(self) -> np.ndarray:
        return np.array([u.arrival_rate for u in self.users], dtype=float)

    @property
    def alphas(self) -> np.ndarray:
        """Large-scale gains of the users"""
        return np.atleast_1d(large_scale_gain(self.distances))

    @property
    def is_symmetric(self) -> bool:
        if self.n_users == 0:
            return False
        first = self.users[0]
        return all(u == first for u in self.users)

    def with_users(self, users: Sequence[User], seed=None) -> "ScenarioConfig":
        """A copy of the scenario with another user drop."""
        return replace(self, users=tuple(users), seed=seed)


@dataclass(frozen=True)
class ChannelSample:
    """One realization of the small-scale gains of all users."""

    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.ndim != 1 or g.size == 0:
            raise InvalidInputError("A channel sample is a non-empty vector")
        if np.any(~np.isfinite(g)) or np.any(g <= 0):
            raise InvalidInputError("Small-scale gains must be positive")
        object.__setattr__(self, "g", g)

    def __len__(self):
        return self.g.size


def sample_gains(
    rng: np.random.Generator, cfg: ScenarioConfig
) -> ChannelSample:
    """Draw the small-scale gains of all users for one frame."""
    cfg.require_users()
    return ChannelSample(
        rng.gamma(shape=cfg.n_antennas, scale=1.0, size=cfg.n_users)
    )


def sample_gain_batch(
    rng: np.random.Generator, cfg: ScenarioConfig, n: int
) -> np.ndarray:
    """Draw ``n`` frames of small-scale gains at once.

    The draws are the same as ``n`` consecutive calls of
    :func:`sample_gains` on the same generator.

    :return: Array of shape ``(n, n_users)``
    """
    cfg.require_users()
    if n < 1:
        raise InvalidInputError(f"Batch size must be positive, got {n}")
    return rng.gamma(shape=cfg.n_antennas, scale=1.0, size=(n, cfg.n_users))


def gamma_tail_probability(n_antennas: int, threshold: float) -> float:
    """Analytic ``Pr{g < threshold}`` for a Gamma(n_antennas, 1) gain."""
    return float(special.gammainc(n_antennas, threshold))


def make_symmetric(template: ScenarioConfig, n_users: int) -> ScenarioConfig:
    """Every user at the cell edge with the template's arrival rate."""
    if n_users < 1:
        raise InvalidInputError(f"n_users must be at least 1, got {n_users}")
    user = User(template.cell_radius, template.arrival_rate)
    return template.with_users([user] * n_users, seed=template.seed)


def make_road(
    template: ScenarioConfig, n_users: int, rng: np.random.Generator
) -> ScenarioConfig:
    """Users uniformly dropped on a road between ``min_distance`` and
    ``cell_radius`` from the BS."""
    if n_users < 1:
        raise InvalidInputError(f"n_users must be at least 1, got {n_users}")
    distances = rng.uniform(
        template.min_distance, template.cell_radius, size=n_users
    )
    users = [User(float(d), template.arrival_rate) for d in distances]
    log.debug(f"Dropped {n_users} users at {np.round(distances, 1)} m")
    return template.with_users(users, seed=template.seed)


def move_users(
    scenario: ScenarioConfig, displacement: float
) -> ScenarioConfig:
    """Move every user along the road by ``displacement`` meters.

    Users that would leave the road segment are reflected back into
    ``[min_distance, cell_radius]``.
    """
    lo, hi = scenario.min_distance, scenario.cell_radius
    span = hi - lo
    users: List[User] = []
    for user in scenario.users:
        if span == 0:
            users.append(user)
            continue
        # reflect on a segment of length span: period is 2*span
        x = (user.distance + displacement - lo) % (2 * span)
        d = lo + (x if x <= span else 2 * span - x)
        users.append(User(float(d), user.arrival_rate))
    return scenario.with_users(users, seed=scenario.seed)
