# -*- coding: utf-8 -*-

"""Output handling: result directory, versioned CSV files and the run
manifest."""

import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List

import pandas
import yaml

from urllc_allocator import __version__

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yml"

# name -> version of every CSV layout the package writes
CSV_SCHEMAS = {
    "symmetric_trace": 1,
    "training_history": 1,
    "eval_report": 1,
    "sweep": 1,
    "convergence_study": 2,
    "convergence_summary": 2,
}


class DirOutput:
    """Output to a directory. Creates `path` if not exists."""

    def __init__(self, path: Path = None):
        self.path = path

    @property
    def path(self):
        return self.__path

    @path.setter
    def path(self, value):
        abs_p = Path(value).absolute()
        if abs_p.is_dir():
            log.debug(f"Directory already exists, {abs_p}")
        else:
            abs_p.mkdir(parents=True)
            log.info(f"Created directory {abs_p}")
        self.__path = abs_p

    def join_path(self, path: str) -> Path:
        """Join the input with self and return a path."""
        return self.path / path


def write_csv(frame: pandas.DataFrame, path: Path, schema: str) -> Path:
    """Write a table with a ``# schema: <name> v<version>`` first line.

    Read it back with ``pandas.read_csv(path, comment="#")``.
    """
    if schema not in CSV_SCHEMAS:
        raise KeyError(f"Unknown CSV schema {schema}")
    path = Path(path)
    with path.open("w", newline="") as fo:
        fo.write(f"# schema: {schema} v{CSV_SCHEMAS[schema]}\n")
        frame.to_csv(fo, index=False, float_format="%.12g")
    log.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_csv(path: Path) -> pandas.DataFrame:
    return pandas.read_csv(path, comment="#")


@dataclass
class RunManifest:
    """Provenance of a command run, written beside its outputs.

    :param command: Subcommand name
    :param config: The resolved configuration
    :param seed: Master seed
    :param outputs: Output file names relative to the output directory
    :param wall_clock_s: Run time [s]
    """

    command: str
    config: dict
    seed: int
    version: str = __version__
    outputs: List[str] = field(default_factory=list)
    started: str = field(
        default_factory=lambda: datetime.now().isoformat(timespec="seconds")
    )
    wall_clock_s: float = 0.0
    status: str = "running"
    results: Dict[str, object] = field(default_factory=dict)

    def add_output(self, path: Path):
        self.outputs.append(Path(path).name)

    def write(self, out_dir: DirOutput) -> Path:
        path = out_dir.join_path(MANIFEST_NAME)
        with path.open("w") as fo:
            yaml.safe_dump(_plain(asdict(self)), fo, sort_keys=False)
        log.debug(f"Wrote manifest {path}")
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        with Path(path).open("r") as fo:
            return cls(**yaml.safe_load(fo))


def _plain(value):
    """numpy scalars and arrays to built-in types for the YAML dumper"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "tolist"):
        return _plain(value.tolist())
    return value
