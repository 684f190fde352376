# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
# Shared fixtures-free helpers and independent reference implementations.
# The oracles below deliberately avoid the package's own vectorized code:
# metrics are literal per-pixel loops and projection goes through
# scipy.ndimage instead of torch.grid_sample.

import math
from typing import Tuple

import numpy as np
import torch
from scipy import ndimage

from drreg import Intrinsics, Pose, Volume, rotation_matrix


def seeded_image(seed: int, shape: Tuple[int, int] = (16, 16)) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(0.0, 1.0, size=shape))


def random_volume(seed: int, n: int = 16, spacing: float = 2.0, smooth: float = 0.0) -> Volume:
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.0, 1.0, size=(n, n, n))
    if smooth:
        values = ndimage.gaussian_filter(values, smooth)
    data = torch.from_numpy(values.astype(np.float32))
    origin = tuple(-(n - 1) * spacing / 2 for _ in range(3))
    return Volume(data, (spacing, spacing, spacing), origin)


def constant_volume(value: float, n: int = 32, spacing: float = 2.0) -> Volume:
    data = torch.full((n, n, n), value, dtype=torch.float32)
    origin = tuple(-(n - 1) * spacing / 2 for _ in range(3))
    return Volume(data, (spacing, spacing, spacing), origin)


def small_intrinsics(det: int = 32) -> Intrinsics:
    """A detector covering about 50 mm at the isocenter."""
    return Intrinsics(det_px=(det, det), px_spacing_mm=84.0 / det)


def reference_project(volume: Volume, pose: Pose, k: Intrinsics, step: float) -> np.ndarray:
    """Dense-step line integrals with scipy's trilinear interpolation."""
    rotation = rotation_matrix(pose)
    t = pose.translation
    nx, ny, nz = volume.dims
    spacing = np.array(volume.spacing)
    data = volume.data.to(torch.float64).numpy()
    source = np.array((0.0, 0.0, -k.siso_mm))
    half_diag = 0.5 * math.sqrt(sum(e * e for e in volume.extent)) + 2 * max(volume.spacing)
    center = float(np.linalg.norm(t - source))
    distances = np.arange(max(center - half_diag, 0.0), center + half_diag, step) + step / 2

    w, h = k.det_px
    image = np.zeros((h, w))
    for row in range(h):
        for col in range(w):
            pixel = np.array(
                (
                    (col - (w - 1) / 2) * k.px_spacing_mm,
                    (row - (h - 1) / 2) * k.px_spacing_mm,
                    k.sdd_mm - k.siso_mm,
                )
            )
            direction = (pixel - source) / np.linalg.norm(pixel - source)
            points = source + distances[:, None] * direction
            local = (points - t) @ rotation
            index = local / spacing + (np.array((nx, ny, nz)) - 1) / 2
            coords = np.stack([index[:, 2], index[:, 1], index[:, 0]])
            samples = ndimage.map_coordinates(data, coords, order=1, mode="grid-constant", cval=0.0)
            image[row, col] = samples.sum() * step
    return image


def naive_pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sa = sb = 0.0
    for x, y in zip(a, b):
        num += (x - ma) * (y - mb)
        sa += (x - ma) ** 2
        sb += (y - mb) ** 2
    return num / math.sqrt(sa * sb)


def naive_gradients(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    h, w = a.shape
    gx = np.zeros((h - 2, w - 2))
    gy = np.zeros((h - 2, w - 2))
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            gx[i - 1, j - 1] = (a[i, j + 1] - a[i, j - 1]) / 2
            gy[i - 1, j - 1] = (a[i + 1, j] - a[i - 1, j]) / 2
    return gx, gy


def naive_local_ncc(a: np.ndarray, b: np.ndarray, patch: int) -> float:
    h, w = a.shape
    scores = []
    for i in range(0, h, patch):
        for j in range(0, w, patch):
            pa = a[i : i + patch, j : j + patch]
            pb = b[i : i + patch, j : j + patch]
            if pa.std() == 0 or pb.std() == 0:
                continue
            scores.append(naive_pearson(pa, pb))
    return sum(scores) / len(scores)


def naive_grad_corr(a: np.ndarray, b: np.ndarray) -> float:
    ax, ay = naive_gradients(a)
    bx, by = naive_gradients(b)
    return 0.5 * (naive_pearson(ax, bx) + naive_pearson(ay, by))


def _gi(ax, ay, bx, by) -> float:
    total = 0.0
    for i in range(ax.shape[0]):
        for j in range(ax.shape[1]):
            ga = math.hypot(ax[i, j], ay[i, j])
            gb = math.hypot(bx[i, j], by[i, j])
            if ga == 0 or gb == 0:
                continue
            cos = (ax[i, j] * bx[i, j] + ay[i, j] * by[i, j]) / (ga * gb)
            total += min(ga, gb) * (max(-1.0, min(1.0, cos)) + 1) / 2
    return total


def naive_ngi(a: np.ndarray, b: np.ndarray) -> float:
    ga = naive_gradients(a)
    gb = naive_gradients(b)
    return _gi(*ga, *gb) / _gi(*gb, *gb)


def naive_grad_diff(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    count = 0
    for da, db in zip(naive_gradients(a), naive_gradients(b)):
        var = float(np.mean((da - da.mean()) ** 2))
        for i in range(da.shape[0]):
            for j in range(da.shape[1]):
                diff = da[i, j] - db[i, j]
                total += var / (var + diff * diff)
                count += 1
    return 1.0 - total / count
