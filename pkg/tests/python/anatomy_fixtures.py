# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause

import pytest
import torch

from drreg import (
    EncoderConfig,
    FineRegConfig,
    FineRegNet,
    Intrinsics,
    PhantomSpec,
    Pose,
    make_phantom,
    project,
)


class Anatomy:
    """One procedural phantom on a toy detector, shared by a whole session."""

    def __init__(self, det: int):
        self._volume, self._mask = make_phantom(PhantomSpec())
        self._k = Intrinsics.toy(det)

        # Networks built by tests start from the same global state.
        torch.manual_seed(0)

    @property
    def volume(self):
        return self._volume

    @property
    def mask(self):
        return self._mask

    @property
    def k(self) -> Intrinsics:
        return self._k

    def fixed(self, pose: Pose) -> torch.Tensor:
        return project(self._volume, pose, self._k)

    def identity_nets(self) -> FineRegNet:
        encoder = EncoderConfig(image_size=self._k.width, kind="identity")
        return FineRegNet(FineRegConfig(encoder=encoder, share_weights=True))


@pytest.fixture(scope="session")
def anatomy():
    return Anatomy(32)


@pytest.fixture(scope="session")
def anatomy64():
    return Anatomy(64)
