# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
from typing import Optional


__all__ = [
    "DrregError",
    "NonRigidMatrix",
    "GimbalLock",
    "GeometryOverflow",
    "MalformedHeader",
    "SizeMismatch",
    "IndivisibleDims",
    "DimMismatch",
    "DegenerateInput",
    "ShapeMismatch",
    "NonFiniteFault",
    "EmptyMask",
    "ZeroGradient",
    "OffDetector",
    "ConfigError",
]


class DrregError(RuntimeError):
    """Root of every error raised by drreg."""


class NonRigidMatrix(DrregError, ValueError):
    pass


class GimbalLock(DrregError, ValueError):
    pass


class GeometryOverflow(DrregError, ValueError):
    pass


class MalformedHeader(DrregError, ValueError):
    pass


class SizeMismatch(DrregError, ValueError):
    pass


class IndivisibleDims(DrregError, ValueError):
    pass


class DimMismatch(DrregError, ValueError):
    pass


class DegenerateInput(DrregError, ValueError):
    """A metric was asked to score an image without variance."""


class ShapeMismatch(DrregError, ValueError):
    pass


class NonFiniteFault(DrregError):
    """NaN or Inf showed up in a tensor. `iteration` is set by training loops."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class EmptyMask(DrregError):
    pass


class ZeroGradient(DrregError):
    pass


class OffDetector(DrregError):
    pass


class ConfigError(DrregError, ValueError):
    """Unknown key or uncoercible value in a key=value configuration."""
