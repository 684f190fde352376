# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
import platform

import pytest
import torch

from .core import BENCHMARK_CONFIG


def pytest_addoption(parser):
    parser.addoption(
        "--disable-benchmarking",
        action="store_true",
        help="Run the acceptance checks once without timing them.",
    )
    parser.addoption(
        "--n-cases",
        action="store",
        default=50,
        help="Number of seeded cases in the statistical acceptance runs.",
    )
    parser.addoption(
        "--toy-iters",
        action="store",
        default=None,
        help="Overrides the toy training iterations (smoke runs).",
    )

    # pytest-benchmark does not have CLI options to set rounds/warmup_rounds for benchmark.pedantic.
    # The following two options are used to overwrite the default values through CLI.
    parser.addoption(
        "--benchmark-rounds",
        action="store",
        default=10,
        help="Number of rounds for each benchmark.",
    )
    parser.addoption(
        "--benchmark-warmup-rounds",
        action="store",
        default=1,
        help="Number of warmup rounds for each benchmark.",
    )


@pytest.fixture
def disable_benchmarking(request):
    return request.config.getoption("--disable-benchmarking")


@pytest.fixture
def n_cases(request):
    return int(request.config.getoption("--n-cases"))


def pytest_make_parametrize_id(val, argname):
    if isinstance(val, tuple):
        return f'{argname}=[{"_".join(str(v) for v in val)}]'
    return f"{argname}={repr(val)}"


def pytest_benchmark_update_machine_info(config, machine_info):
    machine_info.update(
        {"torch": torch.__version__, "threads": torch.get_num_threads(), "processor": platform.processor()}
    )


def pytest_configure(config):
    BENCHMARK_CONFIG["rounds"] = int(config.getoption("--benchmark-rounds"))
    BENCHMARK_CONFIG["warmup_rounds"] = int(config.getoption("--benchmark-warmup-rounds"))
    BENCHMARK_CONFIG["n_cases"] = int(config.getoption("--n-cases"))
    if config.getoption("--toy-iters"):
        BENCHMARK_CONFIG["toy_iters"] = int(config.getoption("--toy-iters"))
    config.addinivalue_line(
        "markers",
        "acceptance: statistical acceptance run on seeded phantom cases.",
    )
    config.addinivalue_line(
        "markers",
        "trained: needs the toy-trained networks (trained once per session).",
    )
