# -*- coding: utf-8 -*-

"""Logging and resource monitoring"""

import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from click import echo
import pandas
import psutil

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s\t%(name)-30s\t%(lineno)s\t[%(levelname)-8s]\t%(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
RESOURCE_LOGGER = "urllc_allocator.resources"
USAGE_COLUMNS = [
    "timestamp",
    "trial",
    "pid",
    "cpu_time_user",
    "cpu_time_sys",
    "mem_rss",
]


def _level(name: str) -> int:
    level = getattr(logging, str(name).upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level {name}")
    return level


def configure_logging(log_level_stream, filename: Optional[str] = None,
                      log_level_file=None):
    """Configures the general logging in the application

    :param log_level_stream: Level of the messages on stdout
    :param filename: Optional log file
    :param log_level_file: Level of the messages in the log file, defaults to
        ``log_level_stream``
    """
    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)
    handlers: List[logging.Handler] = []
    if filename:
        handlers.append(
            logging.FileHandler(filename, mode="w", encoding="utf-8")
        )
        handlers[-1].setLevel(_level(log_level_file or log_level_stream))
    handlers.append(logging.StreamHandler(stream=sys.stdout))
    handlers[-1].setLevel(_level(log_level_stream))
    for h in handlers:
        h.setFormatter(formatter)
    logging.getLogger("urllc_allocator").propagate = True
    logging.basicConfig(handlers=handlers, level=_level(log_level_stream))


def configure_ressource_logging(directory: Path = None) -> logging.Logger:
    """Configures a logger for monitoring the resource usage of the trials

    Returns a `Logger
    <https://docs.python.org/3.8/library/logging.html#logger-objects>`_, which
    is then passed to the trials through the Processor.

    :param directory: Where the TSV goes, the working directory if None
    :return: A configured Logger
    """
    tstamp = datetime.now().isoformat(timespec="seconds")
    logname = Path(directory or ".") / f"urllc-resource-usage_{tstamp}.tsv"
    echo(f"Saving resource monitor log to '{logname}'")
    log_res = logging.getLogger(RESOURCE_LOGGER)
    log_res.propagate = False
    log_res.setLevel(logging.DEBUG)
    handler = logging.FileHandler(logname, mode="w", encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter("%(asctime)s\t%(message)s",
                                           DATE_FORMAT))
    log_res.addHandler(handler)
    return log_res


def record_usage(monitor_log: Optional[logging.Logger], trial) -> None:
    """Write the CPU time and resident memory of this process to the
    resource log.

    :param monitor_log: Logger from :func:`configure_ressource_logging`, no-op
        if None
    :param trial: Trial identifier that goes into the first column
    """
    if monitor_log is None:
        return
    proc = psutil.Process()
    cpu = proc.cpu_times()
    monitor_log.info(
        f"{trial}\t{proc.pid}\t{cpu.user}\t{cpu.system}"
        f"\t{proc.memory_info().rss}"
    )


def parse_log(logfile) -> pandas.DataFrame:
    """Reads a TSV resource log into a pandas dataframe

    :param logfile: Path to the logfile
    :return: A pandas dataframe, memory in megabytes and CPU time in minutes
    """
    usage = pandas.read_csv(
        logfile,
        parse_dates=True,
        sep="\t",
        header=None,
        names=USAGE_COLUMNS,
        index_col=0,
    )
    usage["mem_rss"] = usage["mem_rss"] * 1e-6
    usage["cpu_time_total"] = (
        usage["cpu_time_user"] + usage["cpu_time_sys"]
    ) / 60
    return usage
