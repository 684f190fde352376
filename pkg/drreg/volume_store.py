# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Volumes, voxel masks, the phantom generator and the .vh/.vraw file pair.

Grids are stored as torch tensors indexed (z, y, x), so the x index runs
fastest in memory, which is also the payload order on disk. Every grid
carries its physical spacing; world coordinates are always computed from
spacing, never from raw indices.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    DimMismatch,
    GeometryOverflow,
    IndivisibleDims,
    MalformedHeader,
    SizeMismatch,
)


__all__ = [
    "Volume",
    "VoxelMask",
    "PhantomSpec",
    "make_phantom",
    "save_volume",
    "load_volume",
    "save_mask",
    "load_mask",
    "threshold_mask",
    "downsample_volume",
    "downsample_mask",
]


logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]
PathLike = Union[str, Path]

HEADER_SUFFIX = ".vh"
PAYLOAD_SUFFIX = ".vraw"
PAYLOAD_DTYPE = "f32le"


def _as_triple(values, cast=float) -> tuple:
    values = tuple(cast(v) for v in values)
    assert len(values) == 3, f"expected three values, got {values}"
    return values


@dataclass(frozen=True)
class Volume:
    """Scalar attenuation grid. `data` has shape (nz, ny, nx)."""

    data: torch.Tensor
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))
        if self.data.dim() != 3 or min(self.data.shape) < 1:
            raise DimMismatch(f"volume data must be a non-empty 3D grid, got {tuple(self.data.shape)}")
        if not self.data.is_floating_point():
            raise DimMismatch(f"volume data must be floating point, got {self.data.dtype}")
        if not all(s > 0 and math.isfinite(s) for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not bool(torch.isfinite(self.data).all()) or bool((self.data < 0).any()):
            raise ValueError("volume intensities must be finite and non-negative")

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def extent(self) -> Triple:
        """Physical size in mm along x, y, z (voxel edge to voxel edge)."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    @property
    def center(self) -> Triple:
        """World position of the grid center in mm."""
        return tuple(o + (n - 1) * s / 2 for o, n, s in zip(self.origin, self.dims, self.spacing))

    def same_grid(self, other: Union["Volume", "VoxelMask"]) -> bool:
        return (
            tuple(self.data.shape) == tuple(other.data.shape)
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


@dataclass(frozen=True)
class VoxelMask:
    """Binary companion of a Volume. `data` is a bool tensor (nz, ny, nx)."""

    data: torch.Tensor
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))
        if self.data.dtype != torch.bool:
            values = self.data
            if bool(((values != 0) & (values != 1)).any()):
                raise ValueError("mask values must be 0 or 1")
            object.__setattr__(self, "data", values != 0)

    @classmethod
    def like(cls, volume: Volume, data: torch.Tensor) -> "VoxelMask":
        return cls(data, volume.spacing, volume.origin)

    def as_volume(self, dtype: torch.dtype = torch.float64) -> Volume:
        return Volume(self.data.to(dtype), self.spacing, self.origin)

    def count(self) -> int:
        return int(self.data.sum())


def check_pair(volume: Volume, mask: VoxelMask) -> None:
    if not volume.same_grid(mask):
        raise DimMismatch(
            f"mask grid {tuple(mask.data.shape)} @ {mask.spacing} does not match "
            f"volume grid {tuple(volume.data.shape)} @ {volume.spacing}"
        )


@dataclass
class PhantomSpec:
    """Procedural lumbar-like phantom: vertebrae stacked along +y.

    Each vertebra is a cylindrical body (axis along y) with a posterior
    process box (+z) and two transverse processes of unequal length (+x and
    -x), embedded in an elliptic soft-tissue cylinder. Projection rays run
    along z, so the default geometry is an AP view.
    """

    n_vertebrae: int = 3
    body_radius_mm: float = 9.0
    body_height_mm: float = 10.0
    gap_mm: float = 4.0
    process_size_mm: float = 6.0
    noise_sigma: float = 0.0
    seed: int = 0
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing_mm: Triple = (2.0, 2.0, 2.0)
    bone: float = 1.0
    soft_tissue: float = 0.2

    def validate(self) -> None:
        if self.n_vertebrae < 1:
            raise ValueError(f"n_vertebrae must be >= 1, got {self.n_vertebrae}")
        geometric = (
            self.body_radius_mm,
            self.body_height_mm,
            self.gap_mm,
            self.process_size_mm,
        )
        if not all(g > 0 for g in geometric):
            raise ValueError(f"phantom geometry must be positive, got {geometric}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.soft_tissue < self.bone:
            raise ValueError("bone must be brighter than soft tissue")


def make_phantom(spec: PhantomSpec) -> Tuple[Volume, VoxelMask]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = _as_triple(spec.dims, int)
    sx, sy, sz = _as_triple(spec.spacing_mm)
    half = (nx * sx / 2, ny * sy / 2, nz * sz / 2)

    # voxel-center coordinates relative to the grid center, in mm
    z, y, x = np.meshgrid(
        (np.arange(nz) - (nz - 1) / 2) * sz,
        (np.arange(ny) - (ny - 1) / 2) * sy,
        (np.arange(nx) - (nx - 1) / 2) * sx,
        indexing="ij",
    )

    p = spec.process_size_mm
    h = spec.body_height_mm
    column = spec.n_vertebrae * (h + spec.gap_mm) - spec.gap_mm
    if column / 2 > half[1]:
        raise GeometryOverflow(
            f"{spec.n_vertebrae} vertebrae need {column:.1f} mm along y, grid has {2 * half[1]:.1f} mm"
        )

    bone = np.zeros((nz, ny, nx), dtype=bool)
    z_shift = -p / 2
    for k in range(spec.n_vertebrae):
        radius = spec.body_radius_mm * (1.0 + 0.08 * rng.uniform(-1.0, 1.0))
        left = p * (1.0 + 0.4 * rng.uniform())
        right = p * (0.5 + 0.3 * rng.uniform())
        lateral = max(0.7 * radius + left, 0.7 * radius + right)
        posterior = z_shift + 0.8 * radius + p
        anterior = z_shift - radius
        if lateral > half[0] or radius > half[0] or posterior > half[2] or -anterior > half[2]:
            raise GeometryOverflow(
                f"vertebra {k} (radius {radius:.1f} mm, processes {p:.1f} mm) "
                f"does not fit a {2 * half[0]:.1f} x {2 * half[2]:.1f} mm cross-section"
            )

        yc = -column / 2 + h / 2 + k * (h + spec.gap_mm)
        in_slab = np.abs(y - yc) <= h / 2
        in_arch = np.abs(y - yc) <= 0.35 * h
        body = in_slab & (x**2 + (z - z_shift) ** 2 <= radius**2)
        spinous = (
            in_arch
            & (np.abs(x) <= p / 2)
            & (z >= z_shift + 0.8 * radius)
            & (z <= posterior)
        )
        thick = np.abs(z - z_shift - 0.5 * radius) <= p / 4
        transverse = in_arch & thick & (
            ((x >= 0.7 * radius) & (x <= 0.7 * radius + left))
            | ((x <= -0.7 * radius) & (x >= -0.7 * radius - right))
        )
        bone |= body | spinous | transverse

    outline = (x / (0.45 * 2 * half[0])) ** 2 + (z / (0.4 * 2 * half[2])) ** 2 <= 1.0
    data = np.where(outline, spec.soft_tissue, 0.0)
    data = np.where(bone, spec.bone, data)
    if spec.noise_sigma > 0:
        data = np.clip(data + rng.normal(0.0, spec.noise_sigma, data.shape), 0.0, None)

    origin = tuple(-(n - 1) * s / 2 for n, s in zip((nx, ny, nz), (sx, sy, sz)))
    volume = Volume(torch.from_numpy(data.astype(np.float32)), (sx, sy, sz), origin)
    mask = VoxelMask.like(volume, torch.from_numpy(bone))
    logger.debug(
        "phantom seed=%d: %d vertebrae, %d bone voxels", spec.seed, spec.n_vertebrae, int(bone.sum())
    )
    return volume, mask


def _pair_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        path = path.with_suffix("")
    return path.with_suffix(HEADER_SUFFIX), path.with_suffix(PAYLOAD_SUFFIX)


def _format_triple(values) -> str:
    return " ".join(repr(v) for v in values)


def save_volume(volume: Volume, path: PathLike) -> Path:
    """Writes `<path>.vh` and `<path>.vraw`; returns the header path."""
    header, payload = _pair_paths(path)
    header.parent.mkdir(parents=True, exist_ok=True)
    with open(header, "w") as f:
        f.write(f"dims={' '.join(str(n) for n in volume.dims)}\n")
        f.write(f"spacing={_format_triple(volume.spacing)}\n")
        f.write(f"origin={_format_triple(volume.origin)}\n")
        f.write(f"dtype={PAYLOAD_DTYPE}\n")
    volume.data.detach().cpu().numpy().astype("<f4").tofile(payload)
    return header


def _parse_header(header: Path) -> dict:
    fields = {}
    with open(header, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MalformedHeader(f"{header}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    missing = {"dims", "spacing", "origin", "dtype"} - fields.keys()
    if missing:
        raise MalformedHeader(f"{header}: missing keys {sorted(missing)}")
    try:
        dims = _as_triple(fields["dims"].split(), int)
        spacing = _as_triple(fields["spacing"].split())
        origin = _as_triple(fields["origin"].split())
    except (ValueError, AssertionError) as err:
        raise MalformedHeader(f"{header}: {err}") from err
    if min(dims) < 1:
        raise MalformedHeader(f"{header}: dims must be >= 1, got {dims}")
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise MalformedHeader(f"{header}: spacing must be positive, got {spacing}")
    if not all(math.isfinite(o) for o in origin):
        raise MalformedHeader(f"{header}: origin must be finite, got {origin}")
    if fields["dtype"] != PAYLOAD_DTYPE:
        raise MalformedHeader(f"{header}: unsupported dtype {fields['dtype']!r}")
    return {"dims": dims, "spacing": spacing, "origin": origin}


def load_volume(path: PathLike) -> Volume:
    header, payload = _pair_paths(path)
    fields = _parse_header(header)
    nx, ny, nz = fields["dims"]
    values = np.fromfile(payload, dtype="<f4")
    if payload.stat().st_size % 4 != 0 or values.size != nx * ny * nz:
        raise SizeMismatch(
            f"{payload}: header declares {nx}x{ny}x{nz} = {nx * ny * nz} scalars, "
            f"payload holds {payload.stat().st_size / 4:g}"
        )
    data = torch.from_numpy(values.astype(np.float32).reshape(nz, ny, nx))
    return Volume(data, fields["spacing"], fields["origin"])


def save_mask(mask: VoxelMask, path: PathLike) -> Path:
    return save_volume(mask.as_volume(torch.float32), path)


def load_mask(path: PathLike) -> VoxelMask:
    volume = load_volume(path)
    return VoxelMask(volume.data, volume.spacing, volume.origin)


def threshold_mask(volume: Volume, tau: float) -> VoxelMask:
    if not math.isfinite(tau):
        raise ValueError(f"threshold must be finite, got {tau}")
    return VoxelMask.like(volume, volume.data >= tau)


def _check_factor(dims, factor: int) -> None:
    if factor < 1 or any(n % factor for n in dims):
        raise IndivisibleDims(f"factor {factor} does not divide dims {dims}")


def _pooled_origin(origin, spacing, factor: int) -> Triple:
    return tuple(o + (factor - 1) * s / 2 for o, s in zip(origin, spacing))


def downsample_volume(volume: Volume, factor: int) -> Volume:
    """Block-mean pooling into a float64 grid; the intensity integral is preserved."""
    _check_factor(volume.dims, factor)
    if factor == 1:
        return volume
    pooled = F.avg_pool3d(volume.data.to(torch.float64)[None, None], factor)[0, 0]
    return Volume(
        pooled,
        tuple(s * factor for s in volume.spacing),
        _pooled_origin(volume.origin, volume.spacing, factor),
    )


def downsample_mask(mask: VoxelMask, factor: int) -> VoxelMask:
    """A pooled voxel is set when any voxel of its block is set."""
    _check_factor(tuple(reversed(mask.data.shape)), factor)
    if factor == 1:
        return mask
    pooled = F.max_pool3d(mask.data.to(torch.float32)[None, None], factor)[0, 0]
    return VoxelMask(
        pooled > 0,
        tuple(s * factor for s in mask.spacing),
        _pooled_origin(mask.origin, mask.spacing, factor),
    )
