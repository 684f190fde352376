# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""End-to-end registration strategies.

All strategies minimize an internal loss (similarities are negated) with
accept-only-improving steps, so every metric trace is monotone
non-increasing and starts at the loss of the pose its optimizing stage
starts from: `init_pose` for single-stage strategies, `stage_pose` for
sopi+opt. A pose on which the metric is degenerate has infinite loss.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import torch
from dataclasses_json import dataclass_json

from .descent import DescentSchedule, Trajectory, TrajectoryRow, jittered, pose_descent
from .errors import DegenerateInput
from .fine_reg import FineRegNet, InferenceSchedule, register_iterative
from .pose_math import Pose
from .projector import DEFAULT_FD_STEP, Intrinsics, project
from .rtpi import RtpiNet, rtpi_forward
from .similarity import Metric, MetricKind
from .volume_store import Volume, VoxelMask


__all__ = [
    "RegistrationResult",
    "OptConfig",
    "register_opt",
    "register_sopi",
    "register_sopi_plus_opt",
]


logger = logging.getLogger(__name__)


@dataclass_json
@dataclass
class RegistrationResult:
    final_pose: Pose
    init_pose: Pose
    iterations: int
    wall_time_s: float
    metric_trace: List[Tuple[int, float]] = field(default_factory=list)
    # pose handed to the fine stage; equals init_pose for single-stage strategies
    stage_pose: Optional[Pose] = None

    def __post_init__(self):
        assert self.wall_time_s >= 0, f"negative wall time {self.wall_time_s}"
        assert len(self.metric_trace) == self.iterations + 1, (
            f"trace of {len(self.metric_trace)} values for {self.iterations} iterations"
        )

    @classmethod
    def from_trajectory(
        cls, trajectory: Trajectory, init_pose: Pose, started: float, stage_pose: Optional[Pose] = None
    ) -> "RegistrationResult":
        return cls(
            final_pose=trajectory.final_pose,
            init_pose=init_pose,
            iterations=trajectory.iterations,
            wall_time_s=max(time.perf_counter() - started, 0.0),
            metric_trace=trajectory.trace(),
            stage_pose=stage_pose,
        )

    def trace_csv(self, path, value_name: str = "loss") -> None:
        with open(path, "w") as f:
            f.write(f"iter,{value_name}\n")
            for iteration, value in self.metric_trace:
                f.write(f"{iteration},{value!r}\n")


@dataclass
class OptConfig:
    metric: str = "gc"
    step_rot: float = 1.0
    step_trans: float = 1.0
    decay: float = 0.95
    max_iters: int = 100
    convergence_eps: float = 1e-3
    fd_step: Tuple[float, float] = DEFAULT_FD_STEP
    multi_start: int = 1
    jitter_deg: float = 2.0
    jitter_mm: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.step_rot <= 0 or self.step_trans <= 0:
            raise ValueError(f"steps must be positive, got {self.step_rot}, {self.step_trans}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.multi_start < 1:
            raise ValueError(f"multi_start must be >= 1, got {self.multi_start}")
        Metric.parse(self.metric)

    @property
    def parsed_metric(self) -> Metric:
        return Metric.parse(self.metric)

    def descent(self) -> DescentSchedule:
        return DescentSchedule(
            max_iters=self.max_iters,
            step_rot=self.step_rot,
            step_trans=self.step_trans,
            decay=self.decay,
            convergence_eps=self.convergence_eps,
            fd_step=self.fd_step,
        )


def _anchored(trajectory: Trajectory, theta0: Pose, start_value: float) -> Trajectory:
    """A jittered restart as seen from theta0: its rows join the trace from
    the first one with a loss below theta0's."""
    rows = [TrajectoryRow(0, theta0, start_value)]
    for row in trajectory.rows:
        if row.value < start_value:
            rows.append(TrajectoryRow(len(rows), row.pose, row.value))
    return Trajectory(rows)


def register_opt(
    volume: Volume,
    fixed: torch.Tensor,
    theta0: Pose,
    cfg: OptConfig,
    k: Intrinsics,
    workers: Optional[int] = None,
) -> RegistrationResult:
    """FD gradient descent on the chosen similarity from theta0.

    Restart 0 starts at theta0; further restarts start at jittered copies of
    it. A restart that hits a degenerate metric is retried from a new
    jittered pose. The lowest final loss wins, ties going to the earlier
    restart. The trace always starts at the loss of theta0 (infinite when the
    metric is degenerate there) and a jittered restart only enters it
    through poses that improve on theta0.
    """
    cfg.validate()
    metric = cfg.parsed_metric
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    sigmas = [cfg.jitter_deg] * 3 + [cfg.jitter_mm] * 3

    def objective(pose: Pose) -> float:
        return metric.loss(fixed, project(volume, pose, k, workers=workers))

    try:
        start_value = float(objective(theta0))
    except DegenerateInput:
        start_value = math.inf

    best: Optional[Trajectory] = None
    attempts = 0
    start = theta0
    while attempts < 2 * cfg.multi_start and (best is None or attempts < cfg.multi_start):
        attempts += 1
        try:
            trajectory = pose_descent(objective, start, cfg.descent(), workers=workers)
        except DegenerateInput as err:
            logger.warning(
                "opt-%s restart %d from %s degenerate, jittering: %s",
                metric.kind.value,
                attempts,
                start.as_tuple(),
                err,
            )
            start = jittered(theta0, rng, sigmas)
            continue
        if start is not theta0:
            trajectory = _anchored(trajectory, theta0, start_value)
        if best is None or trajectory.values[-1] < best.values[-1]:
            best = trajectory
        start = jittered(theta0, rng, sigmas)

    if best is None:
        logger.error(
            "opt-%s: every restart degenerate. theta0=%s cfg=%s", metric.kind.value, theta0.as_tuple(), cfg
        )
        raise DegenerateInput(f"opt-{metric.kind.value}: metric degenerate on all restarts")
    return RegistrationResult.from_trajectory(best, theta0, started)


def register_sopi(
    rtpi: RtpiNet,
    finenets: FineRegNet,
    volume: Volume,
    mask: VoxelMask,
    fixed: torch.Tensor,
    sched: InferenceSchedule,
    k: Intrinsics,
    theta0: Optional[Pose] = None,
    objective=None,
) -> RegistrationResult:
    """RTPI prediction followed by iterative fine registration.

    Without `rtpi` the fine stage starts from `theta0` (ablation).
    """
    started = time.perf_counter()
    if rtpi is not None:
        theta_ini = rtpi_forward(rtpi, volume, fixed).pose
    else:
        assert theta0 is not None, "need theta0 when the initialization network is off"
        theta_ini = theta0
    _, trajectory = register_iterative(
        finenets, volume, mask, fixed, theta_ini, sched, k, objective=objective
    )
    return RegistrationResult.from_trajectory(trajectory, theta_ini, started, stage_pose=theta_ini)


def register_sopi_plus_opt(
    rtpi: RtpiNet,
    finenets: FineRegNet,
    volume: Volume,
    mask: VoxelMask,
    fixed: torch.Tensor,
    sched: InferenceSchedule,
    k: Intrinsics,
    opt_cfg: Optional[OptConfig] = None,
    theta0: Optional[Pose] = None,
) -> RegistrationResult:
    """register_sopi, then gradient-correlation optimization from its result.

    `opt_cfg.metric` is ignored: the refinement always runs on GC. The trace
    is the refinement's GC loss trace, so it starts at the GC loss of
    `stage_pose` (the fine stage's result) while `init_pose` stays the
    initialization network's prediction.
    """
    started = time.perf_counter()
    opt_cfg = opt_cfg or OptConfig()
    if opt_cfg.parsed_metric.kind is not MetricKind.GRAD_CORR:
        logger.debug("sopi+opt: replacing metric %s with gc", opt_cfg.metric)
        opt_cfg = replace(opt_cfg, metric="gc")
    sopi = register_sopi(rtpi, finenets, volume, mask, fixed, sched, k, theta0=theta0)
    if opt_cfg.max_iters == 0:
        return sopi
    refined = register_opt(volume, fixed, sopi.final_pose, opt_cfg, k)
    return RegistrationResult(
        final_pose=refined.final_pose,
        init_pose=sopi.init_pose,
        iterations=refined.iterations,
        wall_time_s=max(time.perf_counter() - started, 0.0),
        metric_trace=refined.metric_trace,
        stage_pose=sopi.final_pose,
    )
