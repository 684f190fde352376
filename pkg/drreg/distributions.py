# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .pose_math import Pose


__all__ = ["PoseDistribution", "sample_pose_pair"]


@dataclass(frozen=True)
class PoseDistribution:
    """Zero-mean normal pose distribution; sigmas are standard deviations."""

    rot_sigma_deg: Tuple[float, float, float] = (10.0, 10.0, 10.0)
    trans_sigma_mm: Tuple[float, float, float] = (10.0, 10.0, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "rot_sigma_deg", tuple(float(s) for s in self.rot_sigma_deg))
        object.__setattr__(self, "trans_sigma_mm", tuple(float(s) for s in self.trans_sigma_mm))
        sigmas = self.rot_sigma_deg + self.trans_sigma_mm
        if len(sigmas) != 6 or min(sigmas) < 0:
            raise ValueError(f"need three non-negative sigmas per part, got {sigmas}")

    @classmethod
    def toy(cls) -> "PoseDistribution":
        return cls((10.0,) * 3, (10.0,) * 3)

    @classmethod
    def rtpi_full(cls) -> "PoseDistribution":
        return cls((20.0,) * 3, (100.0, 30.0, 15.0))

    @classmethod
    def fine_full(cls) -> "PoseDistribution":
        return cls((20.0,) * 3, (20.0,) * 3)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array(self.rot_sigma_deg + self.trans_sigma_mm)

    def sample(self, rng: np.random.Generator) -> Pose:
        return Pose.from_array(rng.standard_normal(6) * self.sigmas)


def sample_pose_pair(dist: PoseDistribution, rng: np.random.Generator) -> Tuple[Pose, Pose]:
    """(theta, theta_t): a start pose and a target pose, drawn independently."""
    theta = dist.sample(rng)
    return theta, dist.sample(rng)
