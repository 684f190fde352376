# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Image and pose-parameter similarity measures.

All image metrics work on float64 copies of (h, w) tensors. Image gradients
are central differences over the interior pixels:

    dx a[i, j] = (a[i, j+1] - a[i, j-1]) / 2
    dy a[i, j] = (a[i+1, j] - a[i-1, j]) / 2

Formulas:

    ncc        Pearson correlation over all pixels.
    local_ncc  mean Pearson correlation over a non-overlapping patch grid;
               patches flat in either image are skipped.
    grad_corr  (ncc(dx a, dx b) + ncc(dy a, dy b)) / 2.
    ngi        GI(a, b) / GI(b, b) with
               GI(a, b) = sum min(|grad a|, |grad b|) * (cos(phi) + 1) / 2,
               phi the angle between grad a and grad b.
    grad_diff  1 - GD / (2 N) with
               GD = sum_o sum_px s2_o / (s2_o + (d_o a - d_o b)^2),
               s2_o the variance of the fixed image's gradient along o and
               N the number of interior pixels; 0 iff the gradients agree.
    mse        mean squared intensity difference.

`mse_params` is the batch mean of 6-vector L2 norms of pose differences
(unsquared unless asked), with degrees and millimeters mixed as raw numbers.
"""
import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch

from .errors import DegenerateInput, DimMismatch
from .pose_math import Pose


__all__ = [
    "MetricKind",
    "Metric",
    "ncc",
    "local_ncc",
    "grad_corr",
    "ngi",
    "grad_diff",
    "mse",
    "image_gradients",
    "mse_params",
    "poses_to_tensor",
]


# Relative size below which a variance counts as zero.
FLAT_EPS = 1e-12


def _pair(a, b) -> Tuple[torch.Tensor, torch.Tensor]:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"images differ in size: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def _is_flat(variance: torch.Tensor, x: torch.Tensor, n: int) -> torch.Tensor:
    scale = x.abs().amax(dim=-1) if x.dim() > 1 else x.abs().max()
    return variance <= n * (FLAT_EPS * scale) ** 2


def _pearson(a: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Row-wise Pearson correlation of (..., n) tensors and a validity mask."""
    n = a.shape[-1]
    a0 = a - a.mean(dim=-1, keepdim=True)
    b0 = b - b.mean(dim=-1, keepdim=True)
    va = (a0 * a0).sum(dim=-1)
    vb = (b0 * b0).sum(dim=-1)
    valid = ~(_is_flat(va, a, n) | _is_flat(vb, b, n))
    denom = torch.sqrt(torch.where(valid, va * vb, torch.ones_like(va)))
    return (a0 * b0).sum(dim=-1) / denom, valid


def ncc(a, b) -> float:
    a, b = _pair(a, b)
    score, valid = _pearson(a.reshape(-1), b.reshape(-1))
    if not bool(valid):
        raise DegenerateInput("ncc of an image without variance")
    return float(score.clamp(-1.0, 1.0))


def local_ncc(a, b, patch: int) -> float:
    a, b = _pair(a, b)
    h, w = a.shape
    if patch < 2 or h % patch or w % patch:
        raise DimMismatch(f"patch {patch} must be >= 2 and divide the image dims {h}x{w}")

    def patches(x: torch.Tensor) -> torch.Tensor:
        x = x.reshape(h // patch, patch, w // patch, patch).permute(0, 2, 1, 3)
        return x.reshape(-1, patch * patch)

    scores, valid = _pearson(patches(a), patches(b))
    if not bool(valid.any()):
        raise DegenerateInput("local ncc: every patch is flat")
    return float(scores[valid].clamp(-1.0, 1.0).mean())


def image_gradients(a: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if a.dim() != 2 or min(a.shape) < 3:
        raise DimMismatch(f"gradients need an image of at least 3x3, got {tuple(a.shape)}")
    gx = (a[1:-1, 2:] - a[1:-1, :-2]) / 2
    gy = (a[2:, 1:-1] - a[:-2, 1:-1]) / 2
    return gx, gy


def grad_corr(a, b) -> float:
    a, b = _pair(a, b)
    (ax, ay), (bx, by) = image_gradients(a), image_gradients(b)
    try:
        return 0.5 * (ncc(ax, bx) + ncc(ay, by))
    except DegenerateInput as err:
        raise DegenerateInput(f"gradient correlation: {err}") from err


def _gradient_information(ga, gb) -> torch.Tensor:
    (ax, ay), (bx, by) = ga, gb
    mag_a = torch.sqrt(ax * ax + ay * ay)
    mag_b = torch.sqrt(bx * bx + by * by)
    both = (mag_a > 0) & (mag_b > 0)
    cos = torch.where(
        both,
        (ax * bx + ay * by) / torch.where(both, mag_a * mag_b, torch.ones_like(mag_a)),
        torch.zeros_like(mag_a),
    )
    weight = (cos.clamp(-1.0, 1.0) + 1) / 2
    return (torch.minimum(mag_a, mag_b) * weight).sum()


def ngi(a, b) -> float:
    a, b = _pair(a, b)
    ga, gb = image_gradients(a), image_gradients(b)
    norm = _gradient_information(gb, gb)
    if float(norm) == 0.0:
        raise DegenerateInput("normalized gradient information: reference has no gradient")
    return float(_gradient_information(ga, gb) / norm)


def grad_diff(a, b) -> float:
    """Gradient difference loss; `a` is the fixed image that sets the scale."""
    a, b = _pair(a, b)
    total = torch.zeros((), dtype=torch.float64)
    count = 0
    for da, db in zip(image_gradients(a), image_gradients(b)):
        var = da.var(unbiased=False)
        if float(var) == 0.0:
            raise DegenerateInput("gradient difference: fixed image gradient has no variance")
        diff = da - db
        total = total + (var / (var + diff * diff)).sum()
        count += da.numel()
    return float(1.0 - total / count)


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(((a - b) ** 2).mean())


class MetricKind(enum.Enum):
    NCC = "ncc"
    LOCAL_NCC = "nccl"
    GRAD_CORR = "gc"
    NGI = "ngi"
    GRAD_DIFF = "gd"
    MSE = "mse"

    @property
    def maximize(self) -> bool:
        return self not in (MetricKind.GRAD_DIFF, MetricKind.MSE)


@dataclass(frozen=True)
class Metric:
    """A metric kind plus its parameters; `score(fixed, moving)`."""

    kind: MetricKind
    patch: int = 8

    def __post_init__(self):
        if self.kind is MetricKind.LOCAL_NCC and self.patch < 2:
            raise ValueError(f"local ncc patch must be >= 2, got {self.patch}")

    @classmethod
    def parse(cls, name: str) -> "Metric":
        """'ncc', 'gc', 'nccl' or 'nccl:16' (patch size)."""
        kind, _, patch = name.strip().lower().partition(":")
        metric_kind = MetricKind(kind)
        return cls(metric_kind, int(patch)) if patch else cls(metric_kind)

    @property
    def maximize(self) -> bool:
        return self.kind.maximize

    def score(self, fixed, moving) -> float:
        if self.kind is MetricKind.NCC:
            return ncc(fixed, moving)
        if self.kind is MetricKind.LOCAL_NCC:
            return local_ncc(fixed, moving, self.patch)
        if self.kind is MetricKind.GRAD_CORR:
            return grad_corr(fixed, moving)
        if self.kind is MetricKind.NGI:
            # normalized by the fixed image so the scale does not move with the pose
            return ngi(moving, fixed)
        if self.kind is MetricKind.GRAD_DIFF:
            return grad_diff(fixed, moving)
        return mse(fixed, moving)

    def loss(self, fixed, moving) -> float:
        """Lower is better for every kind."""
        value = self.score(fixed, moving)
        return -value if self.maximize else value


PoseBatch = Union[Pose, Sequence[Pose], torch.Tensor]


def poses_to_tensor(poses: PoseBatch, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    if isinstance(poses, torch.Tensor):
        return poses if poses.dim() == 2 else poses.reshape(1, 6)
    if isinstance(poses, Pose):
        poses = [poses]
    return torch.tensor([p.as_tuple() for p in poses], dtype=dtype)


def mse_params(
    target: PoseBatch,
    pred: PoseBatch,
    squared: bool = False,
    weights: Optional[Sequence[float]] = None,
) -> torch.Tensor:
    """(1/N) sum_i ||target_i - pred_i||_2; differentiable in tensor inputs."""
    pred_t = poses_to_tensor(pred)
    target_t = poses_to_tensor(target, dtype=pred_t.dtype).to(pred_t.device)
    if target_t.shape[0] == 1 and pred_t.shape[0] > 1:
        target_t = target_t.expand_as(pred_t)
    if target_t.shape != pred_t.shape:
        raise DimMismatch(f"pose batches differ: {tuple(target_t.shape)} vs {tuple(pred_t.shape)}")
    diff = target_t - pred_t
    if weights is not None:
        diff = diff * torch.as_tensor(weights, dtype=diff.dtype, device=diff.device)
    if squared:
        return (diff * diff).sum(dim=-1).mean()
    return torch.linalg.vector_norm(diff, dim=-1).mean()
