# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Detector image files: 16-bit PGM, raw f32 with a `.ih` header, 8-bit PPM."""
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .errors import MalformedHeader, SizeMismatch


__all__ = [
    "write_pgm16",
    "write_ppm",
    "save_image",
    "load_image",
]


PathLike = Union[str, Path]

IMAGE_HEADER_SUFFIX = ".ih"
IMAGE_PAYLOAD_SUFFIX = ".iraw"


def _normalized(image: torch.Tensor, levels: int) -> np.ndarray:
    data = image.detach().cpu().to(torch.float64).numpy()
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return np.zeros(data.shape, dtype=np.int64)
    return np.rint((data - lo) / (hi - lo) * levels).astype(np.int64)


def write_pgm16(image: torch.Tensor, path: PathLike) -> Path:
    """Min-max normalizes to 0..65535; a flat image is written as zeros."""
    path = Path(path)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(_normalized(image, 65535).astype(">u2").tobytes())
    return path


def write_ppm(rgb: torch.Tensor, path: PathLike) -> Path:
    """Writes an (h, w, 3) image with values in [0, 1] as 8-bit PPM."""
    path = Path(path)
    h, w, channels = rgb.shape
    assert channels == 3, f"expected an RGB image, got {channels} channels"
    data = np.rint(rgb.detach().cpu().to(torch.float64).clamp(0, 1).numpy() * 255)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.astype(np.uint8).tobytes())
    return path


def _pair_paths(path: PathLike):
    path = Path(path)
    if path.suffix in (IMAGE_HEADER_SUFFIX, IMAGE_PAYLOAD_SUFFIX):
        path = path.with_suffix("")
    return path.with_suffix(IMAGE_HEADER_SUFFIX), path.with_suffix(IMAGE_PAYLOAD_SUFFIX)


def save_image(image: torch.Tensor, path: PathLike) -> Path:
    header, payload = _pair_paths(path)
    h, w = image.shape
    with open(header, "w") as f:
        f.write(f"dims={w} {h}\n")
    image.detach().cpu().numpy().astype("<f4").tofile(payload)
    return header


def load_image(path: PathLike) -> torch.Tensor:
    header, payload = _pair_paths(path)
    dims = None
    with open(header, "r") as f:
        for line in f:
            key, _, value = line.strip().partition("=")
            if key == "dims":
                try:
                    dims = tuple(int(v) for v in value.split())
                except ValueError as err:
                    raise MalformedHeader(f"{header}: {err}") from err
    if dims is None or len(dims) != 2 or min(dims) < 1:
        raise MalformedHeader(f"{header}: expected 'dims=w h', got {dims}")
    w, h = dims
    values = np.fromfile(payload, dtype="<f4")
    if values.size != w * h:
        raise SizeMismatch(f"{payload}: expected {w * h} scalars, got {values.size}")
    return torch.from_numpy(values.astype(np.float64).reshape(h, w))
