# -*- coding: utf-8 -*-

"""Experiment configuration.

The packaged ``data/default_config.yml`` is the base, a user YAML file is
deep-merged over it and the command line overrides are applied last. The
functions here return new objects and never mutate their inputs.
"""

import copy
import logging
from io import TextIOBase
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import yaml

from urllc_allocator.channel import (
    ScenarioConfig,
    User,
    dbm_to_watt,
    make_road,
    make_symmetric,
)
from urllc_allocator.errors import ConfigurationError, InvalidInputError
from urllc_allocator.symmetric import SearchConfig
from urllc_allocator.trainer import TrainConfig

log = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).parent / "data" / "default_config.yml"
LAYOUTS = ("symmetric", "road", "explicit")
POLICIES = ("optimal", "learned", "equal_power")
SECTIONS = ("scenario", "solver", "training", "evaluation", "sweep", "study")


def deep_merge(base: Mapping, update: Mapping) -> dict:
    """Recursively merge ``update`` over ``base`` into a new dict."""
    out = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _read_yaml(source: Union[str, Path, TextIOBase, None]) -> dict:
    if source is None:
        return {}
    try:
        if isinstance(source, TextIOBase):
            data = yaml.safe_load(source)
        else:
            with Path(source).open("r") as fo:
                data = yaml.safe_load(fo)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Cannot read the configuration: {e}")
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigurationError("The configuration must be a YAML mapping")
    return dict(data)


def load_configuration(
    source: Union[str, Path, TextIOBase, None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> dict:
    """Resolve the configuration of an experiment.

    :param source: Path or text stream of a YAML file, or None for the
        defaults only
    :param overrides: Dotted keys to values, e.g. ``{"seed": 1,
        "evaluation.samples": 10000}``; None values are ignored
    :raise ConfigurationError: unreadable file, unknown section or layout
    """
    cfg = deep_merge(_read_yaml(DEFAULT_CONFIG), _read_yaml(source))
    unknown = set(cfg) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigurationError(
            f"Unknown configuration keys {sorted(unknown)}"
        )
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    layout = cfg["scenario"].get("layout")
    if layout not in LAYOUTS:
        raise ConfigurationError(
            f"Unknown layout {layout!r}, expected one of {LAYOUTS}"
        )
    for policy in cfg["sweep"].get("policies", []):
        if policy not in POLICIES:
            raise ConfigurationError(f"Unknown policy {policy!r}")
    return cfg


def _build(cls, section: Mapping, name: str):
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigurationError(f"Invalid '{name}' section: {e}")
    except InvalidInputError as e:
        raise ConfigurationError(f"Invalid '{name}' section: {e}")


def scenario_template(cfg: Mapping) -> ScenarioConfig:
    """The physical constants of the ``scenario`` section, without users."""
    s = cfg["scenario"]
    try:
        return ScenarioConfig(
            n_antennas=int(s["n_antennas"]),
            p_max=dbm_to_watt(float(s["p_max_dbm"])),
            n0=dbm_to_watt(float(s["n0_dbm"])),
            frame_duration=float(s["frame_duration"]),
            tau=float(s["tau"]),
            packet_size=float(s["packet_size"]),
            d_max=int(s["d_max"]),
            d_t=int(s["d_t"]),
            d_c=int(s["d_c"]),
            eps_max=float(s["eps_max"]),
            arrival_rate=float(s["arrival_rate"]),
            cell_radius=float(s["cell_radius"]),
            min_distance=float(s["min_distance"]),
            seed=cfg.get("seed"),
        )
    except KeyError as e:
        raise ConfigurationError(f"Missing scenario key {e}")
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid scenario section: {e}")


def scenario_from_config(
    cfg: Mapping,
    rng: Optional[np.random.Generator] = None,
    n_users: Optional[int] = None,
) -> ScenarioConfig:
    """Build the scenario of the configuration.

    :param rng: Needed for the ``road`` layout (random drop)
    :param n_users: Overrides ``scenario.n_users`` (symmetric and road)
    """
    template = scenario_template(cfg)
    s = cfg["scenario"]
    layout = s["layout"]
    k = int(n_users if n_users is not None else s["n_users"])
    try:
        if layout == "symmetric":
            return make_symmetric(template, k)
        if layout == "road":
            if rng is None:
                raise ConfigurationError("The road layout needs a generator")
            return make_road(template, k, rng)
        users = [
            User(float(u["distance"]), float(u["arrival_rate"]))
            for u in s.get("users") or []
        ]
        if not users:
            raise ConfigurationError("The explicit layout lists no users")
        return template.with_users(users, seed=cfg.get("seed"))
    except (KeyError, TypeError) as e:
        raise ConfigurationError(f"Invalid user entry: {e}")
    except ConfigurationError:
        raise
    except InvalidInputError as e:
        raise ConfigurationError(str(e))


def search_config(cfg: Mapping) -> SearchConfig:
    return _build(SearchConfig, cfg.get("solver", {}), "solver")


def train_config(cfg: Mapping) -> TrainConfig:
    return _build(TrainConfig, cfg.get("training", {}), "training")
