# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Rigid transformation parameter initialization (RTPI).

An asymmetric dual-branch regressor: a 3D branch over the volume and a 2D
branch over the fixed image meet at equal spatial size, are concatenated
along channels, pass a localization net of residual blocks and end in six
independent linear heads, one per pose parameter.

The loss combines three terms:

    alpha * grad_diff(fixed, project(volume, pred))
  + beta  * mse_params(target, pred)
  + lambda * R

with R the squared norm of the predicted pose vector (or of the network
weights with `regularize="weights"`). The image term is differentiated with
respect to the predicted pose by central finite differences of the
projector.
"""
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .distributions import PoseDistribution
from .errors import DegenerateInput, NonFiniteFault, ShapeMismatch
from .nn import (
    Concat,
    Graph,
    LayerKind,
    LayerSpec,
    TrainConfig,
    check_finite,
    init_weights,
    make_optimizer,
)
from .pose_math import Pose
from .projector import DEFAULT_FD_STEP, Intrinsics, fd_pose_grad, project
from .similarity import grad_diff, mse_params, poses_to_tensor
from .volume_store import Volume


__all__ = [
    "RtpiConfig",
    "PosePrediction",
    "RtpiNet",
    "rtpi_forward",
    "rtpi_loss",
    "train_rtpi",
    "standardize",
]


logger = logging.getLogger(__name__)


@dataclass
class RtpiConfig:
    volume_size: int = 32
    image_size: int = 64
    vol_channels: Tuple[int, ...] = (4, 8)
    img_channels: Tuple[int, ...] = (8, 16, 32)
    trunk_channels: int = 64
    n_res_blocks: int = 4
    # each head's output is scaled by the matching sigma (deg, deg, deg, mm, mm, mm)
    head_scale: Tuple[float, ...] = (10.0, 10.0, 10.0, 10.0, 10.0, 10.0)
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.01
    regularize: str = "pose"
    norm: str = "batch"
    fd_step: Tuple[float, float] = DEFAULT_FD_STEP

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError(
                f"loss weights must be non-negative, got {self.alpha}, {self.beta}, {self.lam}"
            )
        if len(self.head_scale) != 6:
            raise ValueError(f"exactly six heads, got {len(self.head_scale)} scales")
        if self.n_res_blocks < 1:
            raise ValueError(f"need at least one residual block, got {self.n_res_blocks}")
        if self.regularize not in ("pose", "weights"):
            raise ValueError(f"regularize must be 'pose' or 'weights', got {self.regularize!r}")
        if len(self.vol_channels) != 2:
            raise ValueError("the 3D branch has exactly two conv blocks")
        side = self.volume_size // 4
        if self.volume_size % 4 or self.image_size != side * 2 ** len(self.img_channels):
            raise ShapeMismatch(
                f"a {self.image_size}px image after {len(self.img_channels)} stride-2 blocks "
                f"does not match the {side}^3 output of the 3D branch"
            )

    @property
    def feature_side(self) -> int:
        return self.volume_size // 4

    @property
    def flat_channels(self) -> int:
        return self.vol_channels[-1] * self.feature_side


def _conv_block(prefix: str, in_ch: int, out_ch: int, dims: int, norm: str) -> List[Any]:
    """conv(stride 2)-norm-relu-conv-norm-relu as graph nodes chained after `prefix`_in."""
    kind = LayerKind.CONV3D if dims == 3 else LayerKind.CONV2D
    return [
        (f"{prefix}_conv1", LayerSpec(kind, in_ch, out_ch, stride=2)),
        (f"{prefix}_norm1", LayerSpec(LayerKind.NORM, out_ch, dims=dims, norm=norm)),
        (f"{prefix}_relu1", LayerSpec(LayerKind.RELU)),
        (f"{prefix}_conv2", LayerSpec(kind, out_ch, out_ch)),
        (f"{prefix}_norm2", LayerSpec(LayerKind.NORM, out_ch, dims=dims, norm=norm)),
        (f"{prefix}_relu2", LayerSpec(LayerKind.RELU)),
    ]


def _chain(specs: Sequence[Tuple[str, LayerSpec]]):
    previous = Graph.INPUT
    for name, spec in specs:
        yield name, spec, (previous,)
        previous = name


class RtpiNet(nn.Module):
    def __init__(self, cfg: RtpiConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg

        vol_nodes = []
        in_ch = 1
        for i, ch in enumerate(cfg.vol_channels):
            vol_nodes += _conv_block(f"v{i}", in_ch, ch, 3, cfg.norm)
            in_ch = ch
        vol_nodes.append(
            ("flatten", LayerSpec(LayerKind.FLATTEN_3D_TO_2D, depth=cfg.feature_side))
        )
        self.volume_branch = Graph(1, _chain(vol_nodes))

        img_nodes = []
        in_ch = 1
        for i, ch in enumerate(cfg.img_channels):
            img_nodes += _conv_block(f"i{i}", in_ch, ch, 2, cfg.norm)
            in_ch = ch
        self.image_branch = Graph(1, _chain(img_nodes))
        self.concat = Concat()

        fused = cfg.flat_channels + cfg.img_channels[-1]
        trunk = [
            ("fuse", LayerSpec(LayerKind.CONV2D, fused, cfg.trunk_channels, kernel=1)),
            ("fuse_norm", LayerSpec(LayerKind.NORM, cfg.trunk_channels, norm=cfg.norm)),
            ("fuse_relu", LayerSpec(LayerKind.RELU)),
        ]
        for i in range(cfg.n_res_blocks):
            trunk.append(
                (
                    f"res{i}",
                    LayerSpec(
                        LayerKind.RESIDUAL_BLOCK, cfg.trunk_channels, cfg.trunk_channels, norm=cfg.norm
                    ),
                )
            )
        self.localization = Graph(fused, _chain(trunk))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.heads = nn.ModuleList(nn.Linear(cfg.trunk_channels, 1) for _ in range(6))
        self.register_buffer(
            "head_scale", torch.tensor(cfg.head_scale, dtype=torch.float32), persistent=False
        )
        init_weights(self, seed)

    def forward(self, volumes: torch.Tensor, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, 1, D, H, W) volumes and (B, 1, h, w) images -> (pose, raw), both (B, 6).

        Inputs are expected standardized (see `standardize`).
        """
        cfg = self.cfg
        side = cfg.volume_size
        if volumes.dim() != 5 or tuple(volumes.shape[1:]) != (1, side, side, side):
            raise ShapeMismatch(f"expected (B, 1, {side}, {side}, {side}) volumes, got {tuple(volumes.shape)}")
        if images.dim() != 4 or tuple(images.shape[1:]) != (1, cfg.image_size, cfg.image_size):
            raise ShapeMismatch(
                f"expected (B, 1, {cfg.image_size}, {cfg.image_size}) images, got {tuple(images.shape)}"
            )
        features = self.concat(self.volume_branch(volumes), self.image_branch(images))
        pooled = self.pool(self.localization(features)).flatten(1)
        raw = torch.cat([head(pooled) for head in self.heads], dim=1)
        return raw * self.head_scale.to(raw.dtype), raw


def standardize(x: torch.Tensor) -> torch.Tensor:
    """Zero mean, unit variance per sample; flat samples are only centered."""
    dims = tuple(range(1, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    std = x.std(dim=dims, keepdim=True, unbiased=False)
    return (x - mean) / torch.where(std > 0, std, torch.ones_like(std))


@dataclass
class PosePrediction:
    """Predicted poses in pose units (B, 6) and the unscaled head outputs."""

    pose_tensor: torch.Tensor
    head_outputs: torch.Tensor

    @property
    def poses(self) -> List[Pose]:
        values = self.pose_tensor.detach().to(torch.float64).cpu().numpy()
        return [Pose.from_array(row) for row in values]

    @property
    def pose(self) -> Pose:
        return self.poses[0]


@contextmanager
def _eval_mode(net: nn.Module) -> Iterator[nn.Module]:
    was_training = net.training
    net.eval()
    try:
        yield net
    finally:
        net.train(was_training)


def _batch_inputs(volumes: Sequence[Volume], images: Sequence[torch.Tensor]):
    vol = torch.stack([v.data.to(torch.float32) for v in volumes])[:, None]
    img = torch.stack([torch.as_tensor(i, dtype=torch.float32) for i in images])[:, None]
    return standardize(vol), standardize(img)


def rtpi_forward(net: RtpiNet, volume: Volume, fixed: torch.Tensor) -> PosePrediction:
    """theta_ini for one (volume, image) pair; norm layers use frozen statistics."""
    vol, img = _batch_inputs([volume], [fixed])
    with _eval_mode(net), torch.no_grad():
        pose, raw = net(vol, img)
    check_finite(pose, "rtpi prediction")
    return PosePrediction(pose, raw)


class _ImageTerm(torch.autograd.Function):
    """grad_diff(fixed, project(volume, pose)) as a function of a (6,) pose
    tensor; the backward pass is the projector's finite-difference gradient."""

    @staticmethod
    def forward(ctx, pose_t, fixed, volume, k, h, workers):
        pose = Pose.from_array(pose_t.detach().to(torch.float64).cpu().tolist(), wrap=False)
        ctx.args = (pose, fixed, volume, k, h, workers)
        value = grad_diff(fixed, project(volume, pose, k, workers=workers))
        return pose_t.new_tensor(value)

    @staticmethod
    def backward(ctx, grad_output):
        pose, fixed, volume, k, h, workers = ctx.args

        def f(p: Pose) -> float:
            return grad_diff(fixed, project(volume, p, k))

        grad = fd_pose_grad(f, pose, h, workers=workers).as_array()
        grad_pose = grad_output * torch.as_tensor(grad, dtype=grad_output.dtype)
        return grad_pose, None, None, None, None, None


def rtpi_loss(
    pred: PosePrediction,
    target,
    fixed,
    volume,
    k: Intrinsics,
    cfg: RtpiConfig,
    net: Optional[nn.Module] = None,
    workers: Optional[int] = None,
) -> torch.Tensor:
    """Batch mean of the three-term loss.

    `fixed` and `volume` are one image/volume or sequences matching the
    prediction batch; `target` is a Pose, a sequence of poses or a (B, 6)
    tensor.
    """
    poses = pred.pose_tensor
    batch = poses.shape[0]
    fixed_list = list(fixed) if isinstance(fixed, (list, tuple)) else [fixed] * batch
    volume_list = list(volume) if isinstance(volume, (list, tuple)) else [volume] * batch
    if len(fixed_list) != batch or len(volume_list) != batch:
        raise ShapeMismatch(
            f"{batch} predictions for {len(fixed_list)} images and {len(volume_list)} volumes"
        )

    loss = poses.new_zeros(())
    if cfg.alpha:
        image_terms = [
            _ImageTerm.apply(poses[i], fixed_list[i], volume_list[i], k, cfg.fd_step, workers)
            for i in range(batch)
        ]
        loss = loss + cfg.alpha * torch.stack(image_terms).mean()
    if cfg.beta:
        loss = loss + cfg.beta * mse_params(poses_to_tensor(target), poses)
    if cfg.lam:
        if cfg.regularize == "pose":
            loss = loss + cfg.lam * (poses * poses).sum(dim=-1).mean()
        else:
            assert net is not None, "weight regularization needs the network"
            penalty = sum((p * p).sum() for n, p in net.named_parameters() if n.endswith("weight"))
            loss = loss + cfg.lam * penalty
    return loss


PhantomSource = Callable[[np.random.Generator], Volume]


def _phantom_source(volumes: Sequence[Volume]) -> PhantomSource:
    pool = list(volumes)
    assert pool, "need at least one training volume"
    return lambda rng: pool[int(rng.integers(len(pool)))]


@dataclass
class TrainingCurve:
    losses: List[float] = field(default_factory=list)

    def append(self, value: float) -> None:
        self.losses.append(value)

    def window_mean(self, start: int, stop: int) -> float:
        window = self.losses[start:stop]
        return float(np.mean(window)) if window else math.nan

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("iter,loss\n")
            for i, value in enumerate(self.losses):
                f.write(f"{i},{value!r}\n")


def train_rtpi(
    net: RtpiNet,
    volumes,
    train_cfg: TrainConfig,
    k: Intrinsics,
    dist: Optional[PoseDistribution] = None,
    workers: Optional[int] = None,
    max_resamples: int = 8,
) -> Tuple[RtpiNet, TrainingCurve]:
    """SGD with a cyclic learning rate on online-rendered samples.

    `volumes` is a sequence of training volumes or a callable drawing one
    from a numpy Generator. Targets whose rendering is flat (the anatomy left
    the detector) are redrawn, at most `max_resamples` times per batch slot.
    """
    cfg = net.cfg
    train_cfg.validate()
    dist = dist or PoseDistribution.toy()
    source = volumes if callable(volumes) else _phantom_source(volumes)
    rng = np.random.default_rng(train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    optimizer, scheduler = make_optimizer(net.parameters(), train_cfg)
    curve = TrainingCurve()
    net.train()

    for iteration in range(train_cfg.iterations):
        batch_volumes, images, targets = [], [], []
        skipped = 0
        while len(targets) < train_cfg.batch_size:
            volume = source(rng)
            target = dist.sample(rng)
            image = project(volume, target, k, workers=workers)
            try:
                # the image term is undefined for a fixed image without gradient variance
                grad_diff(image, image)
            except DegenerateInput as err:
                skipped += 1
                logger.warning(
                    "iteration %d: redrawing target %s: %s", iteration, target.as_tuple(), err
                )
                if skipped > max_resamples * train_cfg.batch_size:
                    raise
                continue
            batch_volumes.append(volume)
            images.append(image)
            targets.append(target)
        try:
            vol, img = _batch_inputs(batch_volumes, images)
            pose, raw = net(vol, img)
            pred = PosePrediction(pose, raw)
            loss = rtpi_loss(pred, targets, images, batch_volumes, k, cfg, net=net, workers=workers)
            check_finite(loss, "rtpi loss", iteration=iteration)
            optimizer.zero_grad()
            loss.backward()
            for name, p in net.named_parameters():
                if p.grad is not None:
                    check_finite(p.grad, f"gradient of {name}", iteration=iteration)
        except NonFiniteFault as err:
            err.iteration = iteration
            logger.exception(
                "rtpi training diverged: iteration=%d seed=%d targets=%s",
                iteration,
                train_cfg.seed,
                [t.as_tuple() for t in targets],
            )
            raise
        optimizer.step()
        scheduler.step()
        curve.append(float(loss.detach()))
        if train_cfg.log_every and iteration % train_cfg.log_every == 0:
            logger.info(
                "rtpi iter %d loss %.6f lr %.2e", iteration, curve.losses[-1], scheduler.get_last_lr()[0]
            )
    return net, curve
