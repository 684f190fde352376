# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Accept-only-improving gradient descent over the six pose parameters.

Each iteration takes a step of fixed length along the normalized negative
gradient, separately for the rotation part (degrees) and the translation
part (mm). A step is kept only if the objective strictly decreases; a
rejected step halves both step lengths. Step lengths also decay by a
constant factor every iteration, and the loop ends once the attempted step
is shorter than `convergence_eps` or after `max_iters` iterations. The
recorded values are therefore monotone non-increasing.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateInput
from .pose_math import GradVec, Pose
from .projector import DEFAULT_FD_STEP, fd_pose_grad


__all__ = ["DescentSchedule", "TrajectoryRow", "Trajectory", "pose_descent"]


logger = logging.getLogger(__name__)


@dataclass
class DescentSchedule:
    max_iters: int = 100
    step_rot: float = 0.5
    step_trans: float = 0.5
    decay: float = 0.95
    convergence_eps: float = 1e-3
    fd_step: Tuple[float, float] = DEFAULT_FD_STEP
    # rotation stops updating from this iteration on; None never freezes
    rot_freeze_iter: Optional[int] = None

    def validate(self) -> None:
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.step_rot <= 0 or self.step_trans <= 0:
            raise ValueError(f"steps must be positive, got {self.step_rot}, {self.step_trans}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.convergence_eps < 0:
            raise ValueError(f"convergence_eps must be >= 0, got {self.convergence_eps}")


@dataclass
class TrajectoryRow:
    iteration: int
    pose: Pose
    value: float


@dataclass
class Trajectory:
    rows: List[TrajectoryRow] = field(default_factory=list)

    @property
    def final_pose(self) -> Pose:
        return self.rows[-1].pose

    @property
    def iterations(self) -> int:
        return len(self.rows) - 1

    @property
    def values(self) -> List[float]:
        return [row.value for row in self.rows]

    def trace(self) -> List[Tuple[int, float]]:
        return [(row.iteration, row.value) for row in self.rows]

    def to_csv(self, path, value_name: str = "LN") -> None:
        with open(path, "w") as f:
            f.write(f"iter,rx,ry,rz,tx,ty,tz,{value_name}\n")
            for row in self.rows:
                values = ",".join(repr(v) for v in row.pose.as_tuple())
                f.write(f"{row.iteration},{values},{row.value!r}\n")


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else np.zeros_like(v)


def pose_descent(
    objective: Callable[[Pose], float],
    theta0: Pose,
    sched: DescentSchedule,
    grad_fn: Optional[Callable[[Pose], GradVec]] = None,
    workers: Optional[int] = None,
    start_value: Optional[float] = None,
) -> Trajectory:
    """Minimizes `objective` from theta0.

    `grad_fn` defaults to central finite differences of the objective.
    Candidates on which the objective is degenerate count as rejected.
    """
    sched.validate()
    if grad_fn is None:

        def grad_fn(p: Pose) -> GradVec:
            return fd_pose_grad(objective, p, sched.fd_step, workers=workers)

    theta = theta0
    value = float(objective(theta0)) if start_value is None else start_value
    trajectory = Trajectory([TrajectoryRow(0, theta, value)])
    step_rot, step_trans = sched.step_rot, sched.step_trans

    for iteration in range(1, sched.max_iters + 1):
        if max(step_rot, step_trans) < sched.convergence_eps:
            break
        grad = grad_fn(theta)
        frozen = sched.rot_freeze_iter is not None and iteration > sched.rot_freeze_iter
        d_r = np.zeros(3) if frozen else _unit(grad.v_r)
        d_t = _unit(grad.v_t)
        if not (d_r.any() or d_t.any()):
            logger.debug("zero gradient at iteration %d, stopping", iteration)
            break

        candidate = Pose.from_array(
            np.concatenate([theta.rotation - step_rot * d_r, theta.translation - step_trans * d_t])
        )
        if frozen:
            # keep the frozen rotation bit-exact
            candidate = Pose(theta.rx, theta.ry, theta.rz, candidate.tx, candidate.ty, candidate.tz)
        try:
            candidate_value = float(objective(candidate))
        except DegenerateInput as err:
            logger.debug("candidate %s rejected: %s", candidate.as_tuple(), err)
            candidate_value = float("inf")

        if candidate_value < value:
            theta, value = candidate, candidate_value
        else:
            step_rot, step_trans = step_rot / 2, step_trans / 2
        step_rot *= sched.decay
        step_trans *= sched.decay
        trajectory.rows.append(TrajectoryRow(iteration, theta, value))
    return trajectory


def jittered(theta: Pose, rng: np.random.Generator, sigmas: Sequence[float]) -> Pose:
    return Pose.from_array(theta.as_array() + rng.standard_normal(6) * np.asarray(sigmas))
