# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
import csv
import json

import numpy as np
import pytest

from drreg import PoseDistribution, run_study
from drreg.cli import main
from .core import BENCHMARK_CONFIG, run_benchmark, toy_context

METHODS = ["initial", "opt-gc"]


def test_run_study(benchmark, disable_benchmarking):
    ctx = toy_context(trained=False)
    n = min(BENCHMARK_CONFIG["n_cases"], 5)
    report = run_benchmark(
        benchmark,
        run_study,
        [ctx, METHODS, n, PoseDistribution.toy(), 0],
        disable_benchmarking,
        metrics=lambda r: {m: s.failure_rate for m, s in r.summary().items()},
    )
    assert len(report.rows) == n * len(METHODS)


@pytest.mark.acceptance
def test_summary_recomputes_from_csv(tmp_path, n_cases):
    args = ["simulate", "--methods", ",".join(METHODS), "--n", str(n_cases), "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "4"]) == 0
    for name in ("report.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    with open(tmp_path / "a" / "report.csv") as f:
        rows = list(csv.DictReader(f))
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())["methods"]
    for method in METHODS:
        mine = [r for r in rows if r["method"] == method]
        rot = np.array([float(r["rot_err_deg"]) for r in mine])
        trans = np.array([float(r["trans_err_mm"]) for r in mine])
        failures = sum(r["success"] == "0" for r in mine)
        assert summary[method]["n"] == n_cases
        assert summary[method]["rot_err_mean"] == float(rot.mean())
        assert summary[method]["rot_err_std"] == float(rot.std())
        assert summary[method]["trans_err_mean"] == float(trans.mean())
        assert summary[method]["failure_rate"] == 100.0 * failures / len(mine)
