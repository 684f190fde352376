# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Rigid pose parameterization and SE(3) geodesics.

A pose is six numbers: three Euler angles in degrees and three translations
in millimeters. The rigid matrix is composed as

    A = M_t · M_rx · M_ry · M_rz

and acts on column vectors. The projector applies A about the volume center,
so rotation does not move the center (the C-arm convention). That center is
an assumption; no rotation center is published for the projector this
package replaces.

Geodesic quantities use the product metric SO(3) x R^3: the rotation part is
the angle of R_a R_b^T (degrees), the translation part is the Euclidean
distance (mm). The weights of the two parts default to 1.
"""
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Tuple

import numpy as np
from dataclasses_json import config, dataclass_json
from scipy.spatial.transform import Rotation

from .errors import GimbalLock, NonRigidMatrix


__all__ = [
    "Pose",
    "GradVec",
    "wrap_degrees",
    "rotation_matrix",
    "euler_to_matrix",
    "matrix_to_pose",
    "matrix_to_json",
    "matrix_from_json",
    "geodesic_distance",
    "geodesic_loss",
    "geodesic_gradient",
    "ROTATION_FIELDS",
    "TRANSLATION_FIELDS",
]


ROTATION_FIELDS = ("rx", "ry", "rz")
TRANSLATION_FIELDS = ("tx", "ty", "tz")

# |cos(r_y)| below this is treated as gimbal lock by matrix_to_pose.
GIMBAL_EPS = 1e-8
# Orthonormality tolerance accepted by matrix_to_pose.
RIGID_EPS = 1e-6


def wrap_degrees(angle: float) -> float:
    """Maps an angle in degrees into (-180, 180]."""
    wrapped = math.fmod(angle, 360.0)
    if wrapped <= -180.0:
        wrapped += 360.0
    elif wrapped > 180.0:
        wrapped -= 360.0
    return wrapped


def _json_name(name: str):
    return field(metadata=config(field_name=name))


@dataclass_json
@dataclass(frozen=True)
class Pose:
    rx: float = _json_name("rx_deg")
    ry: float = _json_name("ry_deg")
    rz: float = _json_name("rz_deg")
    tx: float = _json_name("tx_mm")
    ty: float = _json_name("ty_mm")
    tz: float = _json_name("tz_mm")

    def __post_init__(self):
        for name, value in zip(ROTATION_FIELDS + TRANSLATION_FIELDS, self.as_tuple()):
            if not math.isfinite(value):
                raise ValueError(f"pose field {name} must be finite, got {value}")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values: Iterable[float], wrap: bool = True) -> "Pose":
        values = [float(v) for v in values]
        assert len(values) == 6, f"a pose has six parameters, got {len(values)}"
        if wrap:
            values[:3] = [wrap_degrees(v) for v in values[:3]]
        return cls(*values)

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.rx, self.ry, self.rz, self.tx, self.ty, self.tz)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def rotation(self) -> np.ndarray:
        return np.array((self.rx, self.ry, self.rz), dtype=np.float64)

    @property
    def translation(self) -> np.ndarray:
        return np.array((self.tx, self.ty, self.tz), dtype=np.float64)

    def normalized(self) -> "Pose":
        return Pose.from_array(self.as_tuple(), wrap=True)

    def perturbed(self, index: int, delta: float) -> "Pose":
        """Returns a copy with parameter `index` shifted by `delta`, unwrapped."""
        values = list(self.as_tuple())
        values[index] += delta
        return Pose.from_array(values, wrap=False)

    def same_rotation(self, other: "Pose") -> bool:
        return all(
            wrap_degrees(a - b) == 0.0 for a, b in zip(self.rotation, other.rotation)
        )


@dataclass
class GradVec:
    """Pose gradient split into a rotation part (per degree) and a
    translation part (per millimeter)."""

    v_r: np.ndarray
    v_t: np.ndarray

    def __post_init__(self):
        self.v_r = np.asarray(self.v_r, dtype=np.float64).reshape(3)
        self.v_t = np.asarray(self.v_t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.v_r)) and np.all(np.isfinite(self.v_t))):
            raise ValueError("gradient components must be finite")

    @classmethod
    def zeros(cls) -> "GradVec":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "GradVec":
        values = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(values[:3], values[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.v_r, self.v_t])

    def is_zero(self) -> bool:
        return not (np.any(self.v_r) or np.any(self.v_t))


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array(((1.0, 0.0, 0.0), (0.0, c, -s), (0.0, s, c)))


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array(((c, 0.0, s), (0.0, 1.0, 0.0), (-s, 0.0, c)))


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array(((c, -s, 0.0), (s, c, 0.0), (0.0, 0.0, 1.0)))


def rotation_matrix(pose: Pose) -> np.ndarray:
    """3x3 block M_rx · M_ry · M_rz of the pose."""
    rx, ry, rz = (math.radians(a) for a in (pose.rx, pose.ry, pose.rz))
    return _rot_x(rx) @ _rot_y(ry) @ _rot_z(rz)


def euler_to_matrix(pose: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation_matrix(pose)
    m[:3, 3] = pose.translation
    return m


def matrix_to_pose(m: np.ndarray) -> Pose:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise NonRigidMatrix(f"expected a 4x4 matrix, got shape {m.shape}")
    if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), rtol=0.0, atol=RIGID_EPS):
        raise NonRigidMatrix(f"bottom row must be (0, 0, 0, 1), got {m[3]}")
    r = m[:3, :3]
    orthogonality = np.max(np.abs(r.T @ r - np.eye(3)))
    if orthogonality > RIGID_EPS or abs(np.linalg.det(r) - 1.0) > RIGID_EPS:
        raise NonRigidMatrix(
            f"rotation block is not orthonormal (|R^T R - I| = {orthogonality:.3e})"
        )

    cos_ry = math.hypot(r[0, 0], r[0, 1])
    if cos_ry < GIMBAL_EPS:
        raise GimbalLock(f"|cos(r_y)| = {cos_ry:.3e} is too close to gimbal lock")
    ry = math.atan2(r[0, 2], cos_ry)
    rz = math.atan2(-r[0, 1], r[0, 0])
    rx = math.atan2(-r[1, 2], r[2, 2])
    angles = [wrap_degrees(math.degrees(a)) for a in (rx, ry, rz)]
    return Pose(*angles, *m[:3, 3])


def matrix_to_json(m: np.ndarray) -> list:
    return [float(v) for v in np.asarray(m, dtype=np.float64).reshape(16)]


def matrix_from_json(values: Sequence[float]) -> np.ndarray:
    if len(values) != 16:
        raise NonRigidMatrix(f"a 4x4 matrix has 16 entries, got {len(values)}")
    return np.asarray(values, dtype=np.float64).reshape(4, 4)


def _relative_rotvec(a: Pose, b: Pose) -> np.ndarray:
    # Rotation vector (radians) of R_a R_b^T.
    if a.same_rotation(b):
        return np.zeros(3)
    return Rotation.from_matrix(rotation_matrix(a) @ rotation_matrix(b).T).as_rotvec()


def geodesic_distance(a: Pose, b: Pose) -> Tuple[float, float]:
    """Returns (rotation angle in degrees, translation distance in mm)."""
    rot = math.degrees(float(np.linalg.norm(_relative_rotvec(a, b))))
    trans = float(np.linalg.norm(a.translation - b.translation))
    return rot, trans


def geodesic_loss(
    theta: Pose, target: Pose, w_rot: float = 1.0, w_trans: float = 1.0
) -> float:
    """w_rot/2 * angle^2 + w_trans/2 * distance^2 (degrees^2, mm^2)."""
    rot, trans = geodesic_distance(theta, target)
    return 0.5 * w_rot * rot * rot + 0.5 * w_trans * trans * trans


def _angular_velocities(theta: Pose) -> np.ndarray:
    # Row i is the spatial angular velocity of Euler parameter i: dR/dq_i R^T = [xi_i]x.
    rx, ry = math.radians(theta.rx), math.radians(theta.ry)
    mx = _rot_x(rx)
    return np.stack(
        [
            np.array((1.0, 0.0, 0.0)),
            mx @ np.array((0.0, 1.0, 0.0)),
            mx @ _rot_y(ry) @ np.array((0.0, 0.0, 1.0)),
        ]
    )


def geodesic_gradient(
    theta: Pose, target: Pose, w_rot: float = 1.0, w_trans: float = 1.0
) -> GradVec:
    """Gradient of geodesic_loss with respect to theta's six parameters.

    For a left perturbation the gradient of half the squared SO(3) angle is
    the log vector phi of R_theta R_target^T, so the Euler-parameter
    gradient is phi . xi_i with xi_i the angular velocity of parameter i.
    A plain descent step theta - s * gradient decreases the loss for
    0 < s < 1 / max(w_rot, w_trans) while the rotation offset stays below
    180 degrees.
    """
    phi_deg = np.degrees(_relative_rotvec(theta, target))
    v_r = w_rot * (_angular_velocities(theta) @ phi_deg)
    v_t = w_trans * (theta.translation - target.translation)
    return GradVec(v_r, v_t)
