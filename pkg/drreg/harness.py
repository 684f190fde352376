# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Simulation studies: case generation, per-case evaluation, aggregation and
ablations.

A case is a (truth, init) pose pair drawn from a per-case random stream
seeded by (seed, case index); the fixed image is the DRR at the truth pose.
Every method starts from the same init. A case succeeds when the residual
rotation is below 3 degrees AND the residual translation below 3 mm.
"""
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from dataclasses_json import dataclass_json

from .distributions import PoseDistribution, sample_pose_pair
from .errors import ConfigError, DegenerateInput, DrregError, OffDetector
from .fine_reg import (
    EncoderConfig,
    FineRegConfig,
    FineRegNet,
    ImageObjective,
    InferenceSchedule,
    register_iterative,
)
from .pipeline import OptConfig, RegistrationResult, register_opt, register_sopi, register_sopi_plus_opt
from .pose_math import Pose, geodesic_distance, rotation_matrix, wrap_degrees
from .projector import Intrinsics, project
from .rtpi import RtpiNet, rtpi_forward
from .similarity import Metric, MetricKind, ncc
from .volume_store import Volume, VoxelMask


__all__ = [
    "SUCCESS_ROT_DEG",
    "SUCCESS_TRANS_MM",
    "CaseMetrics",
    "MethodSummary",
    "StudyReport",
    "StudyContext",
    "AblationSpec",
    "Case",
    "make_cases",
    "evaluate_case",
    "dist_err",
    "run_study",
    "run_ablation",
    "METHODS",
]


logger = logging.getLogger(__name__)

SUCCESS_ROT_DEG = 3.0
SUCCESS_TRANS_MM = 3.0

CSV_COLUMNS = (
    "method",
    "case",
    "rot_err_deg",
    "trans_err_mm",
    "rx",
    "ry",
    "rz",
    "tx",
    "ty",
    "tz",
    "dist_err_mm",
    "img_sim",
    "success",
    "time_s",
)


@dataclass_json
@dataclass
class CaseMetrics:
    method: str
    case: int
    rot_err_deg: float
    trans_err_mm: float
    # signed residuals pred - truth, rotations wrapped into (-180, 180]
    rx: float
    ry: float
    rz: float
    tx: float
    ty: float
    tz: float
    success: bool
    dist_err_mm: float = math.nan
    img_sim: float = math.nan
    time_s: float = 0.0
    iterations: int = 0
    error: Optional[str] = None

    def csv_row(self) -> str:
        values = [self.method, str(self.case)]
        for name in CSV_COLUMNS[2:]:
            value = getattr(self, name)
            values.append(str(int(value)) if isinstance(value, bool) else repr(float(value)))
        return ",".join(values)


def evaluate_case(truth: Pose, result: RegistrationResult, method: str = "", case: int = 0) -> CaseMetrics:
    pred = result.final_pose
    rot, trans = geodesic_distance(pred, truth)
    residual = pred.as_array() - truth.as_array()
    residual[:3] = [wrap_degrees(r) for r in residual[:3]]
    return CaseMetrics(
        method,
        case,
        rot,
        trans,
        *[float(r) for r in residual],
        success=rot < SUCCESS_ROT_DEG and trans < SUCCESS_TRANS_MM,
        time_s=result.wall_time_s,
        iterations=result.iterations,
    )


def _corners(volume: Volume) -> np.ndarray:
    half = np.asarray(volume.extent) / 2
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    return signs * half


def _project_corners(pose: Pose, volume: Volume, k: Intrinsics) -> np.ndarray:
    world = _corners(volume) @ rotation_matrix(pose).T + pose.translation
    points = k.project_points(world)
    limit = np.array([k.width, k.height]) * k.px_spacing_mm / 2
    if not np.all(np.isfinite(points)) or np.any(np.abs(points) > limit):
        raise OffDetector(f"volume corners leave the detector at pose {pose.as_tuple()}")
    return points


def dist_err(truth: Pose, pred: Pose, volume: Volume, k: Intrinsics) -> float:
    """Mean detector-plane distance (mm) between the 8 projected volume
    corners under the true and the predicted pose."""
    a = _project_corners(truth, volume, k)
    b = _project_corners(pred, volume, k)
    return float(np.linalg.norm(a - b, axis=-1).mean())


@dataclass_json
@dataclass
class MethodSummary:
    method: str
    n: int
    rot_err_mean: float
    rot_err_std: float
    trans_err_mean: float
    trans_err_std: float
    failure_rate: float
    time_mean_s: float
    dist_err_mean: float

    @classmethod
    def from_rows(cls, method: str, rows: Sequence[CaseMetrics]) -> "MethodSummary":
        rot = np.array([r.rot_err_deg for r in rows])
        trans = np.array([r.trans_err_mm for r in rows])
        dist = np.array([r.dist_err_mm for r in rows])
        finite_dist = dist[np.isfinite(dist)]
        failures = sum(1 for r in rows if not r.success)
        return cls(
            method=method,
            n=len(rows),
            rot_err_mean=float(rot.mean()),
            rot_err_std=float(rot.std()),
            trans_err_mean=float(trans.mean()),
            trans_err_std=float(trans.std()),
            failure_rate=100.0 * failures / len(rows),
            time_mean_s=float(np.mean([r.time_s for r in rows])),
            dist_err_mean=float(finite_dist.mean()) if finite_dist.size else math.nan,
        )


@dataclass
class StudyReport:
    rows: List[CaseMetrics] = field(default_factory=list)
    case_digest: str = ""

    @property
    def methods(self) -> List[str]:
        seen: List[str] = []
        for row in self.rows:
            if row.method not in seen:
                seen.append(row.method)
        return seen

    def summary(self) -> Dict[str, MethodSummary]:
        return {
            m: MethodSummary.from_rows(m, [r for r in self.rows if r.method == m]) for m in self.methods
        }

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(",".join(CSV_COLUMNS) + "\n")
            for row in self.rows:
                f.write(row.csv_row() + "\n")

    def summary_dict(self, extra: Optional[dict] = None) -> dict:
        out = dict(extra or {})
        out["case_digest"] = self.case_digest
        out["methods"] = {m: s.to_dict() for m, s in self.summary().items()}
        return out

    def write_summary(self, path, extra: Optional[dict] = None) -> None:
        with open(path, "w") as f:
            json.dump(self.summary_dict(extra), f, indent=2, sort_keys=True)
            f.write("\n")


@dataclass(frozen=True)
class Case:
    index: int
    truth: Pose
    init: Pose


def make_cases(
    n_cases: int,
    dist: PoseDistribution,
    seed: int,
    offset: Optional[PoseDistribution] = None,
) -> List[Case]:
    """Per-case streams come from default_rng([seed, index]).

    Without `offset`, (init, truth) is a pose pair drawn from `dist`;
    with it, truth comes from `dist` and init = truth + a draw from `offset`.
    """
    cases = []
    for index in range(n_cases):
        rng = np.random.default_rng([seed, index])
        if offset is None:
            init, truth = sample_pose_pair(dist, rng)
        else:
            truth = dist.sample(rng)
            init = Pose.from_array(truth.as_array() + offset.sample(rng).as_array())
        cases.append(Case(index, truth, init))
    return cases


def case_digest(cases: Sequence[Case]) -> str:
    h = hashlib.sha256()
    for case in cases:
        h.update(repr((case.index, case.truth.as_tuple(), case.init.as_tuple())).encode())
    return h.hexdigest()


@dataclass
class StudyContext:
    """Everything the methods need: the anatomy, the geometry and the
    trained networks. A method that needs a missing network raises ConfigError."""

    volume: Volume
    mask: VoxelMask
    k: Intrinsics
    rtpi: Optional[RtpiNet] = None
    fine: Optional[FineRegNet] = None
    stem: Optional[FineRegNet] = None
    sched: InferenceSchedule = field(default_factory=InferenceSchedule)
    opt: OptConfig = field(default_factory=OptConfig)
    _identity: Optional[FineRegNet] = None

    def identity_nets(self) -> FineRegNet:
        if self._identity is None:
            encoder = EncoderConfig(image_size=self.k.width, kind="identity")
            self._identity = FineRegNet(FineRegConfig(encoder=encoder, share_weights=True))
        return self._identity

    def stem_nets(self) -> FineRegNet:
        return self.require("stem-only encoder", self.stem)

    def require(self, what: str, value):
        if value is None:
            raise ConfigError(f"method needs a trained {what} network")
        return value


Method = Callable[[StudyContext, Case, torch.Tensor], RegistrationResult]


def _start_trace(ctx: StudyContext, fixed: torch.Tensor, pose: Pose) -> List[Tuple[int, float]]:
    """A one-entry trace: the GC loss at `pose`, infinite where GC is degenerate."""
    try:
        value = Metric(MetricKind.GRAD_CORR).loss(fixed, project(ctx.volume, pose, ctx.k))
    except DegenerateInput:
        value = math.inf
    return [(0, value)]


def _initial(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
    return RegistrationResult(case.init, case.init, 0, 0.0, _start_trace(ctx, fixed, case.init))


def _opt(metric: str) -> Method:
    def run(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
        return register_opt(ctx.volume, fixed, case.init, replace(ctx.opt, metric=metric), ctx.k)

    return run


def _deep_reg(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
    started = time.perf_counter()
    _, trajectory = register_iterative(
        ctx.stem_nets(), ctx.volume, ctx.mask, fixed, case.init, ctx.sched, ctx.k
    )
    return RegistrationResult.from_trajectory(trajectory, case.init, started)


def _fine(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
    started = time.perf_counter()
    _, trajectory = register_iterative(
        ctx.require("fine registration", ctx.fine), ctx.volume, ctx.mask, fixed, case.init, ctx.sched, ctx.k
    )
    return RegistrationResult.from_trajectory(trajectory, case.init, started)


def _rtpi(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
    started = time.perf_counter()
    pose = rtpi_forward(ctx.require("rtpi", ctx.rtpi), ctx.volume, fixed).pose
    trace = _start_trace(ctx, fixed, case.init)
    return RegistrationResult(pose, case.init, 0, time.perf_counter() - started, trace)


def _sopi(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
    return register_sopi(
        ctx.require("rtpi", ctx.rtpi),
        ctx.require("fine registration", ctx.fine),
        ctx.volume,
        ctx.mask,
        fixed,
        ctx.sched,
        ctx.k,
    )


def _sopi_opt(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
    return register_sopi_plus_opt(
        ctx.require("rtpi", ctx.rtpi),
        ctx.require("fine registration", ctx.fine),
        ctx.volume,
        ctx.mask,
        fixed,
        ctx.sched,
        ctx.k,
        opt_cfg=replace(ctx.opt, metric="gc"),
    )


METHODS: Dict[str, Method] = {
    "initial": _initial,
    "identity": _initial,
    "opt-ncc": _opt("ncc"),
    "opt-nccl": _opt("nccl"),
    "opt-ngi": _opt("ngi"),
    "opt-gc": _opt("gc"),
    "opt-gd": _opt("gd"),
    "deep-reg": _deep_reg,
    "fine": _fine,
    "rtpi": _rtpi,
    "sopi": _sopi,
    "sopi+opt": _sopi_opt,
}


def _check_methods(methods: Sequence[str]) -> None:
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; known: {sorted(METHODS)}")


def _score_case(
    ctx: StudyContext,
    case: Case,
    fixed: torch.Tensor,
    name: str,
    method: Method,
    timing: bool,
) -> CaseMetrics:
    try:
        result = method(ctx, case, fixed)
        error = None
    except (DrregError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        logger.warning(
            "case %d method %s failed: %s (truth=%s init=%s)",
            case.index,
            name,
            err,
            case.truth.as_tuple(),
            case.init.as_tuple(),
        )
        result = RegistrationResult(case.init, case.init, 0, 0.0, [(0, math.nan)])
        error = f"{type(err).__name__}: {err}"
    metrics = evaluate_case(case.truth, result, name, case.index)
    metrics.error = error
    if not timing:
        metrics.time_s = 0.0
    try:
        metrics.dist_err_mm = dist_err(case.truth, result.final_pose, ctx.volume, ctx.k)
    except OffDetector:
        metrics.dist_err_mm = math.nan
    try:
        metrics.img_sim = ncc(fixed, project(ctx.volume, result.final_pose, ctx.k))
    except DegenerateInput:
        metrics.img_sim = math.nan
    return metrics


def _run_cases(
    ctx: StudyContext,
    cases: Sequence[Case],
    methods: Sequence[Tuple[str, Method]],
    workers: int,
    timing: bool,
) -> List[CaseMetrics]:
    def run_case(case: Case) -> List[CaseMetrics]:
        fixed = project(ctx.volume, case.truth, ctx.k)
        return [_score_case(ctx, case, fixed, name, method, timing) for name, method in methods]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_case = list(pool.map(run_case, cases))
    else:
        per_case = [run_case(c) for c in cases]
    # rows grouped by method, then case
    return [per_case[c][m] for m in range(len(methods)) for c in range(len(cases))]


def run_study(
    ctx: StudyContext,
    methods: Sequence[str],
    n_cases: int,
    dist: PoseDistribution,
    seed: int,
    offset: Optional[PoseDistribution] = None,
    workers: int = 1,
    timing: bool = True,
) -> StudyReport:
    """Runs every method on the same n_cases cases. Per-case failures are
    recorded as unregistered rows and never abort the study."""
    if n_cases < 1:
        raise ConfigError(f"n_cases must be >= 1, got {n_cases}")
    _check_methods(methods)
    cases = make_cases(n_cases, dist, seed, offset)
    rows = _run_cases(ctx, cases, [(m, METHODS[m]) for m in methods], workers, timing)
    return StudyReport(rows, case_digest(cases))


@dataclass(frozen=True)
class AblationSpec:
    name: str
    use_rtpi: bool = True
    use_composite_encoder: bool = True
    use_embedded_loss: bool = True

    def __post_init__(self):
        if not (self.use_rtpi or self.use_composite_encoder or self.use_embedded_loss):
            raise ValueError(f"ablation row {self.name!r} switches everything off")

    @classmethod
    def parse(cls, text: str) -> "AblationSpec":
        """'rtpi+ce+el', 'ce+el', 'rtpi' ... naming the components kept on."""
        parts = set(text.lower().split("+"))
        unknown = parts - {"rtpi", "ce", "el"}
        if unknown:
            raise ConfigError(f"unknown ablation components {sorted(unknown)} in {text!r}")
        return cls(text, "rtpi" in parts, "ce" in parts, "el" in parts)


DEFAULT_ABLATION = ("rtpi", "ce+el", "rtpi+el", "rtpi+ce+el")


def _ablation_method(spec: AblationSpec) -> Method:
    def run(ctx: StudyContext, case: Case, fixed: torch.Tensor) -> RegistrationResult:
        nets = ctx.require("fine registration", ctx.fine) if spec.use_composite_encoder else ctx.stem_nets()
        objective = None if spec.use_embedded_loss else ImageObjective(ctx.volume, fixed, ctx.k)
        rtpi = ctx.require("rtpi", ctx.rtpi) if spec.use_rtpi else None
        return register_sopi(
            rtpi, nets, ctx.volume, ctx.mask, fixed, ctx.sched, ctx.k, theta0=case.init, objective=objective
        )

    return run


def run_ablation(
    ctx: StudyContext,
    specs: Sequence[AblationSpec],
    n_cases: int,
    dist: PoseDistribution,
    seed: int,
    offset: Optional[PoseDistribution] = None,
    workers: int = 1,
    timing: bool = True,
) -> Dict[str, StudyReport]:
    """One report per row; every row runs on the same cases."""
    cases = make_cases(n_cases, dist, seed, offset)
    digest = case_digest(cases)
    methods = [(spec.name, _ablation_method(spec)) for spec in specs]
    rows = _run_cases(ctx, cases, methods, workers, timing)
    return {
        spec.name: StudyReport([r for r in rows if r.method == spec.name], digest) for spec in specs
    }


def theta_ini_errors(ctx: StudyContext, cases: Sequence[Case]) -> List[Tuple[float, float]]:
    """Geodesic errors of the initialization network alone, per case."""
    net = ctx.require("rtpi", ctx.rtpi)
    return [
        geodesic_distance(rtpi_forward(net, ctx.volume, project(ctx.volume, c.truth, ctx.k)).pose, c.truth)
        for c in cases
    ]
