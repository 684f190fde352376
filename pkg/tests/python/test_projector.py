# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause

import numpy as np
import pytest
import torch

from drreg import (
    DimMismatch,
    Intrinsics,
    PhantomSpec,
    Pose,
    Volume,
    VoxelMask,
    fd_combine,
    fd_pose_grad,
    fd_stencil,
    geodesic_gradient,
    make_phantom,
    ncc,
    overlay,
    project,
    project_mask,
)
from utils import constant_volume, random_volume, reference_project, small_intrinsics


def test_zero_volume_projects_to_zero():
    image = project(constant_volume(0.0, n=8), Pose(10, 20, 30, 1, 2, 3), small_intrinsics(16))
    assert image.dtype == torch.float64
    assert image.shape == (16, 16)
    assert bool((image == 0).all())


def test_uniform_cube_central_path_length():
    # 64 mm cube of density 1 centered on the isocenter
    k = Intrinsics.toy(64)
    image = project(constant_volume(1.0, n=32, spacing=2.0), Pose.identity(), k)
    center = image[31:33, 31:33].mean().item()
    assert center == pytest.approx(64.0, rel=0.01)


def test_image_layout_rows_follow_y():
    # bright slab in the +y half of the volume lands in the last rows
    data = torch.zeros(16, 16, 16)
    data[:, 12:, :] = 1.0
    volume = Volume(data, (2.0, 2.0, 2.0))
    image = project(volume, Pose.identity(), small_intrinsics(16))
    assert image[-4:].sum() > 0
    assert image[:4].sum() == 0


@pytest.mark.parametrize(
    "seed,pose",
    [
        (0, Pose.identity()),
        (1, Pose(12, -8, 25, 3, -2, 5)),
    ],
)
def test_matches_dense_reference(seed, pose):
    volume = random_volume(seed, smooth=1.0)
    k = small_intrinsics(24)
    image = project(volume, pose, k).numpy()
    reference = reference_project(volume, pose, k, step=k.ray_step(volume) / 8)
    relative = np.linalg.norm(image - reference) / np.linalg.norm(reference)
    assert relative < 1e-2


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_output_independent_of_workers(workers):
    volume = random_volume(4)
    pose = Pose(5, 10, -15, 2, 0, -3)
    k = small_intrinsics(40)
    torch.testing.assert_close(project(volume, pose, k, workers=1), project(volume, pose, k, workers=workers), rtol=0, atol=0)


def _float64(volume: Volume) -> Volume:
    return Volume(volume.data.to(torch.float64), volume.spacing, volume.origin)


@pytest.mark.parametrize("a,b", [(1.0, 1.0), (2.5, 0.3), (0.0, 7.0)])
def test_projection_is_linear_in_intensity(a, b):
    v1, v2 = _float64(random_volume(7)), _float64(random_volume(8))
    mixed = Volume(a * v1.data + b * v2.data, v1.spacing)
    pose = Pose(15, -20, 35, 3, -4, 6)
    k = small_intrinsics(24)
    expected = a * project(v1, pose, k) + b * project(v2, pose, k)
    actual = project(mixed, pose, k)
    relative = float(torch.linalg.norm(actual - expected) / torch.linalg.norm(expected))
    assert relative < 1e-9


@pytest.mark.parametrize("shift", [1, 2, -3])
def test_voxel_shift_compensated_by_translation(shift):
    volume = random_volume(9, smooth=1.0)
    data = volume.data.clone()
    # empty border so the shifted content stays inside the grid
    data[..., :3] = 0
    data[..., -3:] = 0
    base = Volume(data, volume.spacing)
    moved = Volume(torch.roll(data, shift, dims=2), volume.spacing)
    k = small_intrinsics(24)
    reference = project(base, Pose.identity(), k)
    compensated = project(moved, Pose(0, 0, 0, -shift * volume.spacing[0], 0, 0), k)
    relative = float(torch.linalg.norm(compensated - reference) / torch.linalg.norm(reference))
    assert relative < 1e-3


def test_project_mask_empty():
    mask = VoxelMask(torch.zeros(8, 8, 8, dtype=torch.bool), (2.0, 2.0, 2.0))
    assert not bool(project_mask(mask, Pose.identity(), small_intrinsics(16)).any())


def test_full_mask_covers_volume_footprint():
    volume = random_volume(6)
    full = VoxelMask.like(volume, torch.ones(16, 16, 16, dtype=torch.bool))
    pose = Pose(20, -10, 5, 1, 1, 0)
    k = small_intrinsics(24)
    footprint = project_mask(full, pose, k)
    assert bool(footprint[project(volume, pose, k) > 0].all())


def test_phantom_mask_pixel_count_close_to_reference():
    volume, mask = make_phantom(PhantomSpec())
    k = small_intrinsics(24)
    count = int(project_mask(mask, Pose.identity(), k).sum())
    reference = reference_project(mask.as_volume(), Pose.identity(), k, step=k.ray_step(volume) / 8)
    expected = int((reference > 0).sum())
    assert abs(count - expected) <= 0.1 * expected


def test_stencil_order():
    theta = Pose(1, 2, 3, 4, 5, 6)
    stencil = fd_stencil(theta, (0.5, 0.25))
    assert len(stencil) == 12
    assert stencil[0].rx == 1.5 and stencil[1].rx == 0.5
    assert stencil[10].tz == 6.25 and stencil[11].tz == 5.75


def test_stencil_rejects_non_positive_steps():
    with pytest.raises(ValueError):
        fd_stencil(Pose.identity(), (0.0, 0.1))


def test_combine_on_tensors():
    values = torch.arange(12, dtype=torch.float64)
    out = fd_combine(values, (0.5, 0.5))
    torch.testing.assert_close(torch.stack(out), torch.full((6,), -1.0, dtype=torch.float64))


def test_fd_grad_of_constant_is_zero():
    assert fd_pose_grad(lambda p: 4.2, Pose(1, 2, 3, 4, 5, 6)).is_zero()


def test_fd_grad_exact_on_quadratic():
    g = fd_pose_grad(lambda p: p.tx**2, Pose(0, 0, 0, 3, 0, 0), (0.01, 0.01))
    np.testing.assert_allclose(g.v_t, (6, 0, 0), atol=1e-6)
    np.testing.assert_allclose(g.v_r, (0, 0, 0), atol=1e-12)


def test_fd_grad_workers_agree():
    f = lambda p: p.rx * p.ty + p.tz**3
    theta = Pose(1, 2, 3, 4, 5, 6)
    np.testing.assert_array_equal(
        fd_pose_grad(f, theta, workers=1).as_array(), fd_pose_grad(f, theta, workers=4).as_array()
    )


def test_ncc_gradient_points_toward_truth():
    volume, _ = make_phantom(PhantomSpec())
    k = Intrinsics.toy(32)
    rng = np.random.default_rng(0)
    agree = 0
    n = 12
    for _ in range(n):
        truth = Pose.from_array(np.concatenate([rng.normal(0, 5, 3), rng.normal(0, 5, 3)]))
        theta = Pose.from_array(truth.as_array() + np.concatenate([rng.normal(0, 5, 3), rng.normal(0, 5, 3)]))
        fixed = project(volume, truth, k)
        g = fd_pose_grad(lambda p: -ncc(fixed, project(volume, p, k)), theta, (0.5, 0.5))
        toward = geodesic_gradient(theta, truth)
        if float(np.dot(g.as_array(), toward.as_array())) > 0:
            agree += 1
    assert agree >= 0.75 * n


def test_overlay_identical_is_gray():
    x = torch.rand(8, 8, dtype=torch.float64)
    rgb = overlay(x, x)
    assert rgb.shape == (8, 8, 3)
    torch.testing.assert_close(rgb[..., 0], rgb[..., 1])
    torch.testing.assert_close(rgb[..., 1], rgb[..., 2])


def test_overlay_flat_moving_keeps_fixed_only():
    x = torch.rand(8, 8, dtype=torch.float64)
    rgb = overlay(x, torch.zeros(8, 8, dtype=torch.float64))
    assert bool((rgb[..., 1] == 0).all())
    assert rgb[..., 0].max() == 1.0


def test_overlay_dim_mismatch():
    with pytest.raises(DimMismatch):
        overlay(torch.zeros(8, 8), torch.zeros(16, 16))
