# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
import itertools
import os
from typing import List, Tuple

# BENCHMARK_MODE = weekly/nightly.
BENCHMARK_MODE = os.getenv("BENCHMARK_MODE")
if not BENCHMARK_MODE:
    BENCHMARK_MODE = "nightly"

WORKER_COUNTS = [1, 2, 8]

# metrics timed by the intensity-based baseline
OPT_METRICS = ["ncc", "nccl:8", "ngi", "gc", "gd"]


def generate_projector_sizes() -> List[Tuple[int, int]]:
    """
    (volume side, detector side) pairs for projector timing.
    Nightly: the toy sizes. Weekly: additionally the published 128^3 / 256^2.
    """
    volume_range = [16, 32]
    detector_range = [32, 64]
    if BENCHMARK_MODE == "weekly":
        volume_range.append(128)
        detector_range.append(256)
    return list(itertools.product(volume_range, detector_range))
