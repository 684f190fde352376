# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
#
# "compare_study.py -h" for help.

import argparse
from dataclasses import dataclass
import json
import matplotlib.pyplot as plt
import numpy as np
import os


# `drreg simulate` writes {"methods": {method: summary}, ...}; `drreg ablate`
# writes {row: {"methods": {row: summary}, ...}}. Both flatten to
# {method: summary}.
def load_summaries(path: str) -> dict[str, dict]:
    with open(path) as f:
        data = json.load(f)
    if "methods" in data:
        return data["methods"]
    summaries = {}
    for row in data.values():
        summaries.update(row["methods"])
    return summaries


@dataclass
class Comparison:
    method: str
    baseline_rot: float
    baseline_rot_std: float
    contender_rot: float
    contender_rot_std: float
    # contender_rot divided by baseline_rot. Smaller is better.
    change: float
    baseline_failure_rate: float
    contender_failure_rate: float

    def __str__(self):
        return (
            f"{self.method}: rotation error {self.baseline_rot:.3f} -> {self.contender_rot:.3f} deg "
            f"({self.change:.2f}x), failure rate {self.baseline_failure_rate:.1f}% -> "
            f"{self.contender_failure_rate:.1f}%"
        )


def compare(baseline: dict[str, dict], contender: dict[str, dict]) -> list[Comparison]:
    comparisons = []
    for method in baseline:
        if method not in contender:
            print(f"{method} is missing from the contender; skipped.")
            continue
        b, c = baseline[method], contender[method]
        comparisons.append(
            Comparison(
                method=method,
                baseline_rot=b["rot_err_mean"],
                baseline_rot_std=b["rot_err_std"],
                contender_rot=c["rot_err_mean"],
                contender_rot_std=c["rot_err_std"],
                change=c["rot_err_mean"] / b["rot_err_mean"] if b["rot_err_mean"] else float("inf"),
                baseline_failure_rate=b["failure_rate"],
                contender_failure_rate=c["failure_rate"],
            )
        )
    return comparisons


def plot(comparisons: list[Comparison], labels: tuple[str, str], out_dir: str) -> str:
    x = np.arange(len(comparisons))
    width = 0.4
    plt.figure(figsize=(max(6, 1.2 * len(comparisons)), 4))
    plt.bar(
        x - width / 2,
        [c.baseline_rot for c in comparisons],
        width,
        yerr=[c.baseline_rot_std for c in comparisons],
        capsize=3,
        label=labels[0],
    )
    plt.bar(
        x + width / 2,
        [c.contender_rot for c in comparisons],
        width,
        yerr=[c.contender_rot_std for c in comparisons],
        capsize=3,
        label=labels[1],
    )
    plt.xticks(x, [c.method for c in comparisons], rotation=30, ha="right")
    plt.ylabel("Rotation error (deg), mean +- std")
    plt.legend()
    plt.tight_layout()
    figure_out = os.path.join(out_dir, "comparison.png")
    plt.savefig(figure_out)
    return figure_out


if __name__ == "__main__":
    parser = argparse.ArgumentParser(
        description="Compares two drreg study summaries (summary.json) method by method."
    )
    parser.add_argument("baseline", type=str, help="The baseline summary.json")
    parser.add_argument("contender", type=str, help="The contender summary.json")
    parser.add_argument("--out-dir", type=str, default=".", help="Where comparison.png goes")
    args = parser.parse_args()

    comparisons = sorted(
        compare(load_summaries(args.baseline), load_summaries(args.contender)), key=lambda c: c.change
    )
    for comparison in comparisons:
        print(f"  {comparison}")

    os.makedirs(args.out_dir, exist_ok=True)
    labels = (os.path.basename(os.path.dirname(os.path.abspath(p))) for p in (args.baseline, args.contender))
    figure_out = plot(comparisons, tuple(labels), args.out_dir)
    print()
    print(f"Saved the error bars to {figure_out}.")
