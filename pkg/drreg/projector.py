# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Ray-casting DRR projector under C-arm pinhole geometry.

Imaging frame: the isocenter is the world origin, the source sits at
(0, 0, -siso_mm) and the detector plane at z = sdd_mm - siso_mm. Detector
column u runs along +x and row v along +y; pixel centers are at
((u - (w-1)/2) * pitch, (v - (h-1)/2) * pitch). Images are tensors indexed
(row, column).

A posed volume maps a point p (mm, relative to the volume center) to
R p + t, so with the identity pose the volume center sits at the isocenter.
Each pixel value is the midpoint-rule line integral of the trilinearly
interpolated volume along the source-to-pixel ray. The sample distances are
shared by all rays of a projection, so every ray does the same work.

Pose gradients of any scalar functional of the projection are taken by
central finite differences (12 evaluations); the renderer itself is not
differentiated.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimMismatch
from .pose_math import GradVec, Pose, rotation_matrix
from .volume_store import Volume, VoxelMask


__all__ = [
    "Intrinsics",
    "project",
    "project_mask",
    "fd_stencil",
    "fd_combine",
    "fd_pose_grad",
    "overlay",
    "default_workers",
    "DEFAULT_FD_STEP",
]


logger = logging.getLogger(__name__)

# Rows handed to one task. Fixed so the reduction shapes never depend on the
# number of workers.
ROW_BLOCK = 8

DEFAULT_FD_STEP = (0.05, 0.05)


def default_workers() -> int:
    return int(os.getenv("DRREG_WORKERS", "1"))


@dataclass(frozen=True)
class Intrinsics:
    sdd_mm: float = 1011.7
    siso_mm: float = 600.0
    det_px: Tuple[int, int] = (256, 256)
    px_spacing_mm: float = 0.79836
    # None means half of the smallest voxel spacing of the projected volume
    step_mm: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "det_px", tuple(int(n) for n in self.det_px))
        if not 0 < self.siso_mm < self.sdd_mm:
            raise ValueError(
                f"need 0 < siso_mm < sdd_mm, got siso={self.siso_mm} sdd={self.sdd_mm}"
            )
        if len(self.det_px) != 2 or min(self.det_px) < 1:
            raise ValueError(f"det_px must be two positive sizes, got {self.det_px}")
        if self.px_spacing_mm <= 0:
            raise ValueError(f"px_spacing_mm must be positive, got {self.px_spacing_mm}")
        if self.step_mm is not None and self.step_mm <= 0:
            raise ValueError(f"step_mm must be positive, got {self.step_mm}")

    @classmethod
    def toy(cls, det: int = 64) -> "Intrinsics":
        """A coarser detector covering the same field of view per pixel block."""
        return cls(det_px=(det, det), px_spacing_mm=0.79836 * 256 / det)

    @property
    def width(self) -> int:
        return self.det_px[0]

    @property
    def height(self) -> int:
        return self.det_px[1]

    @property
    def source(self) -> np.ndarray:
        return np.array((0.0, 0.0, -self.siso_mm))

    def ray_step(self, volume: Volume) -> float:
        return self.step_mm if self.step_mm is not None else min(volume.spacing) / 2

    def pixel_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Detector-plane x (per column) and y (per row) in mm."""
        w, h = self.det_px
        us = (np.arange(w) - (w - 1) / 2) * self.px_spacing_mm
        vs = (np.arange(h) - (h - 1) / 2) * self.px_spacing_mm
        return us, vs

    def project_points(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of world points (..., 3) to detector mm (..., 2).

        Points at or behind the source plane give non-finite coordinates.
        """
        depth = points[..., 2] + self.siso_mm
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(depth > 0, self.sdd_mm / depth, np.nan)
        return points[..., :2] * scale[..., None]


def _sample_distances(volume: Volume, pose: Pose, k: Intrinsics) -> np.ndarray:
    step = k.ray_step(volume)
    center_distance = float(np.linalg.norm(pose.translation - k.source))
    # half diagonal plus one voxel for the interpolation ramp outside the grid
    radius = 0.5 * math.sqrt(sum(e * e for e in volume.extent)) + max(volume.spacing)
    near = max(center_distance - radius, 0.0)
    n_steps = max(int(math.ceil((center_distance + radius - near) / step)), 1)
    return near + (np.arange(n_steps) + 0.5) * step


def _render_rows(
    grid_volume: torch.Tensor,
    rows: np.ndarray,
    us: np.ndarray,
    distances: np.ndarray,
    to_grid: Callable[[np.ndarray], np.ndarray],
    k: Intrinsics,
    step: float,
) -> np.ndarray:
    vv, uu = np.meshgrid(rows, us, indexing="ij")
    pixels = np.stack(
        [uu, vv, np.full_like(uu, k.sdd_mm - k.siso_mm)], axis=-1
    ).reshape(-1, 3)
    directions = pixels - k.source
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    points = k.source + distances[None, :, None] * directions[:, None, :]
    grid = torch.from_numpy(to_grid(points))[None, None]
    samples = F.grid_sample(
        grid_volume, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    line = samples[0, 0, 0].numpy().sum(axis=-1) * step
    return line.reshape(len(rows), len(us))


def project(
    volume: Volume, pose: Pose, k: Intrinsics, workers: Optional[int] = None
) -> torch.Tensor:
    """Renders the DRR of `volume` at `pose`; returns a float64 (h, w) tensor.

    Rows are rendered in fixed-size blocks on a thread pool; the output is
    bit-identical for any number of workers.
    """
    workers = default_workers() if workers is None else workers
    rotation = rotation_matrix(pose)
    translation = pose.translation
    dims = np.array(volume.dims, dtype=np.float64)
    spacing = np.array(volume.spacing, dtype=np.float64)
    step = k.ray_step(volume)
    distances = _sample_distances(volume, pose, k)

    def to_grid(points: np.ndarray) -> np.ndarray:
        # world -> volume frame (row vectors: (w - t) R == R^T (w - t))
        local = (points - translation) @ rotation
        index = local / spacing + (dims - 1) / 2
        return (2 * index + 1) / dims - 1

    grid_volume = volume.data.to(torch.float64)[None, None]
    us, vs = k.pixel_centers()
    blocks = [vs[i : i + ROW_BLOCK] for i in range(0, len(vs), ROW_BLOCK)]

    def render(rows: np.ndarray) -> np.ndarray:
        return _render_rows(grid_volume, rows, us, distances, to_grid, k, step)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(render, blocks))
    else:
        parts = [render(rows) for rows in blocks]
    return torch.from_numpy(np.concatenate(parts, axis=0))


def project_mask(
    mask: VoxelMask,
    pose: Pose,
    k: Intrinsics,
    tau: float = 0.0,
    workers: Optional[int] = None,
) -> torch.Tensor:
    """Projects the mask at theta: a pixel is set when its integrated mask value exceeds tau."""
    return project(mask.as_volume(), pose, k, workers=workers) > tau


def fd_stencil(theta: Pose, h: Sequence[float] = DEFAULT_FD_STEP) -> List[Pose]:
    """Poses theta +/- h e_i in the order (+0, -0, +1, -1, ..., +5, -5)."""
    h_rot, h_trans = h
    if h_rot <= 0 or h_trans <= 0:
        raise ValueError(f"finite-difference steps must be positive, got {h}")
    poses = []
    for i in range(6):
        delta = h_rot if i < 3 else h_trans
        poses.append(theta.perturbed(i, delta))
        poses.append(theta.perturbed(i, -delta))
    return poses


def fd_combine(values, h: Sequence[float] = DEFAULT_FD_STEP):
    """Central differences from the 12 stencil values. Works on floats or tensors."""
    steps = [h[0]] * 3 + [h[1]] * 3
    return [(values[2 * i] - values[2 * i + 1]) / (2 * steps[i]) for i in range(6)]


def fd_pose_grad(
    f: Callable[[Pose], float],
    theta: Pose,
    h: Sequence[float] = DEFAULT_FD_STEP,
    workers: Optional[int] = None,
) -> GradVec:
    stencil = fd_stencil(theta, h)
    workers = 1 if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(lambda p: float(f(p)), stencil))
    else:
        values = [float(f(p)) for p in stencil]
    return GradVec.from_array(fd_combine(values, h))


def _min_max(image: torch.Tensor) -> torch.Tensor:
    image = image.to(torch.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return torch.zeros_like(image)
    return (image - lo) / (hi - lo)


def overlay(fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
    """Fusion image (h, w, 3) in [0, 1]: fixed in red and blue, moving in green.

    Identical inputs give equal channels (gray); a flat moving image leaves
    only the fixed (magenta) channels populated.
    """
    if fixed.shape != moving.shape:
        raise DimMismatch(
            f"overlay needs equal image dims, got {tuple(fixed.shape)} and {tuple(moving.shape)}"
        )
    a, b = _min_max(fixed), _min_max(moving)
    return torch.stack([a, b, a], dim=-1)
