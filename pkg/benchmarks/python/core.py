# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
import functools
import time
from typing import Any, Callable, List, Optional, Sequence

import numpy as np
import pytest_benchmark

from drreg import (
    FineRegNet,
    PhantomSpec,
    RtpiNet,
    StudyContext,
    make_phantom,
    train_finereg,
    train_rtpi,
)
from drreg.config import RunConfig, preset


# These variables can be overwritten through CLI commands
# --benchmark-rounds=rounds --benchmark-warmup-rounds=warmup_rounds
# --n-cases=n --toy-iters=n
BENCHMARK_CONFIG = {"rounds": 10, "warmup_rounds": 1, "n_cases": 50, "toy_iters": None}


class DrregBenchmark:
    """
    A wrapper around the pytest-benchmark fixture that records registration
    metrics next to the timings.
    """

    def __init__(self, benchmark_fixture):
        self.benchmark = benchmark_fixture
        self.started = None

    def __call__(self, function_to_benchmark: Callable, *args, **kwargs):
        return self.benchmark(function_to_benchmark, *args, **kwargs)

    def __getattr__(self, attr):
        if attr not in self.__dict__:
            return getattr(self.benchmark, attr)
        return super().__getattr__(attr)

    def set_metrics(self, **metrics: float) -> None:
        for name, value in metrics.items():
            self.benchmark.extra_info[name] = value


def run_benchmark(
    benchmark: pytest_benchmark.fixture.BenchmarkFixture,
    benchmark_fn: Callable,
    inputs: Sequence[Any],
    disable_benchmarking: bool = False,
    metrics: Optional[Callable[[Any], dict]] = None,
) -> Any:
    """
    Times `benchmark_fn(*inputs)` with benchmark.pedantic, or calls it once
    when benchmarking is disabled. `metrics` maps the output to extra_info
    entries stored with the timing.
    """
    if disable_benchmarking:
        return benchmark_fn(*inputs)

    drreg_benchmark = DrregBenchmark(benchmark)
    outputs = drreg_benchmark.pedantic(
        benchmark_fn,
        args=tuple(inputs),
        rounds=BENCHMARK_CONFIG["rounds"],
        warmup_rounds=BENCHMARK_CONFIG["warmup_rounds"],
    )
    if metrics is not None:
        drreg_benchmark.set_metrics(**metrics(outputs))
    return outputs


def timed(fn: Callable, *args, **kwargs):
    """(result, seconds) of one call."""
    started = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - started


def toy_config() -> RunConfig:
    cfg = preset("toy")
    if BENCHMARK_CONFIG["toy_iters"] is not None:
        iters = BENCHMARK_CONFIG["toy_iters"]
        cfg.rtpi_train.iterations = iters
        cfg.fine_train.iterations = iters
    return cfg


@functools.lru_cache(maxsize=None)
def toy_anatomy(seed: int = 0):
    return make_phantom(PhantomSpec(seed=seed))


@functools.lru_cache(maxsize=None)
def toy_rtpi():
    """The toy-trained initialization network and its loss curve, trained once per session."""
    cfg = toy_config()
    volumes = [make_phantom(PhantomSpec(seed=100 + i))[0] for i in range(4)]
    net = RtpiNet(cfg.rtpi, seed=cfg.rtpi_train.seed)
    return train_rtpi(net, volumes, cfg.rtpi_train, cfg.k, dist=cfg.rtpi_dist)


@functools.lru_cache(maxsize=None)
def toy_fine():
    cfg = toy_config()
    pairs = [make_phantom(PhantomSpec(seed=100 + i)) for i in range(4)]
    nets = FineRegNet(cfg.fine, seed=cfg.fine_train.seed)
    return train_finereg(nets, pairs, cfg.fine_train, cfg.k, dist=cfg.fine_dist)


def toy_context(trained: bool = True) -> StudyContext:
    cfg = toy_config()
    volume, mask = toy_anatomy()
    ctx = StudyContext(volume=volume, mask=mask, k=cfg.k, sched=cfg.sched, opt=cfg.opt)
    if trained:
        ctx.rtpi = toy_rtpi()[0]
        ctx.fine = toy_fine()[0]
    return ctx


def mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


