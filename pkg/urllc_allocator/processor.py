# -*- coding: utf-8 -*-

"""Processors run independent trials in parallel. Processors are responsible
for launching and monitoring the trials and for merging their results in a
deterministic order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Dict, List, Sequence

import numpy as np

from urllc_allocator import recorder

log = logging.getLogger(__name__)


class ParallelProcessorFactory:
    """Registers and instantiates a ParallelProcessor that launches the
    trials."""

    def __init__(self):
        self._processors = {}

    def register_processor(self, key, processor):
        """Register a processor for use.

        :param key: Name of the processor
        :param processor: Can be a function, a class, or an object that
            implements .__call__()
        """
        self._processors[key] = processor

    def create(self, key, **kwargs):
        """Instantiate a Processor"""
        processor = self._processors.get(key)
        if not processor:
            raise ValueError(key)
        return processor(**kwargs)


class ThreadProcessor:
    """For multithreaded processing.

    Every trial gets its own :class:`numpy.random.SeedSequence`, spawned from
    the master seed in trial order, so the results do not depend on the
    number of threads or on the completion order.
    """

    def __init__(self, name: str, trials: Sequence[int]):
        self.name = name
        self.trials = list(trials)
        self.worker_cfg = None
        self.cfg = None
        self.worker = None
        self.seeds = None

    def configure(
        self,
        threads: int,
        monitor_log: logging.Logger,
        worker: Callable,
        seed: int,
        config: dict,
    ):
        """Configure the Processor.

        :param threads: The max. number of trials to run at once
        :param monitor_log: Logger for resource monitoring, or None
        :param worker: Called as ``worker(trial=i, seed=SeedSequence,
            **config)``
        :param seed: Master seed
        :param config: Keyword arguments passed to every trial
        """
        if threads < 1:
            raise ValueError(f"threads must be at least 1, got {threads}")
        children = np.random.SeedSequence(seed).spawn(len(self.trials))
        self.seeds = dict(zip(self.trials, children))
        self.worker_cfg = dict(config)
        self.cfg = {"threads": threads, "monitor_log": monitor_log}
        self.worker = worker
        log.info(
            f"Configured {self.__class__.__name__}:{self.name} with "
            f"{len(self.trials)} trials"
        )

    def process(self) -> List:
        """Run every trial and return the results in trial order."""
        log.info(f"Running {self.__class__.__name__}:{self.name}")
        results: Dict[int, object] = dict(self._process())
        log.info(f"Done {self.__class__.__name__}:{self.name}")
        return [results[trial] for trial in self.trials]

    def _process(self):
        """Runs the trials asynchronously, using a `ThreadPoolExecutor
        <https://docs.python.org/3/library/concurrent.futures.html#threadpoolexecutor>`_.

        :return: Yields ``(trial, result)`` in completion order
        """
        with ThreadPoolExecutor(max_workers=self.cfg["threads"]) as executor:
            future_to_trial = {}
            for trial in self.trials:
                future_to_trial[
                    executor.submit(
                        self.worker,
                        trial=trial,
                        seed=self.seeds[trial],
                        **self.worker_cfg,
                    )
                ] = trial
            for future in as_completed(future_to_trial):
                trial = future_to_trial[future]
                try:
                    yield trial, future.result()
                except Exception as e:
                    log.exception(f"Trial {trial} raised an exception: {e}")
                    raise
                else:
                    recorder.record_usage(self.cfg["monitor_log"], trial)
                    log.debug(f"Done with trial {trial}")


factory = ParallelProcessorFactory()
factory.register_processor("threadprocessor", ThreadProcessor)
