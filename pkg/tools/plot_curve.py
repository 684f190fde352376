# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
#
# Plots the `iter,loss` CSVs written by `drreg train-rtpi` / `drreg train-fine`
# (and the `iter,...` traces of `drreg register`).

import argparse
import csv
import matplotlib.pyplot as plt
import numpy as np
import os


def read_curve(path: str) -> tuple[np.ndarray, np.ndarray, str]:
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [row for row in reader if row]
    # the value is the last column in both formats
    iters = np.array([int(row[0]) for row in rows])
    values = np.array([float(row[-1]) for row in rows])
    return iters, values, header[-1]


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Plots drreg loss curves.")
    parser.add_argument("curves", type=str, nargs="+", help="iter,loss CSV files")
    parser.add_argument("--window", type=int, default=100, help="Moving-average window")
    parser.add_argument("--log", action="store_true", help="Logarithmic y axis")
    parser.add_argument("--out", type=str, default="curve.png")
    args = parser.parse_args()

    plt.figure(figsize=(7, 4))
    for path in args.curves:
        iters, values, name = read_curve(path)
        label = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        smooth = moving_average(values, args.window)
        plt.plot(iters, values, alpha=0.25)
        plt.plot(iters[len(iters) - len(smooth) :], smooth, label=f"{label} ({name})")
    plt.xlabel("Iteration")
    plt.ylabel("Loss")
    if args.log:
        plt.yscale("log")
    plt.legend()
    plt.tight_layout()
    plt.savefig(args.out)
    print(f"Saved {args.out}.")
