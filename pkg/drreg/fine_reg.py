# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Iterative fine registration in a learned feature space.

Two encoders of the same structure embed the moving DRR and the fixed
image. The embedded error is the mean absolute feature difference over
the projected bone mask, downsampled to the feature grid and replicated
across channels. Pose gradients of the embedded error come from the 12-pose
central difference stencil, so training only needs first-order backprop through the
encoder forward passes: the loss compares the direction of that gradient
with the direction of the geodesic gradient towards the target pose.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .descent import DescentSchedule, Trajectory, pose_descent
from .distributions import PoseDistribution, sample_pose_pair
from .errors import EmptyMask, NonFiniteFault, ShapeMismatch, ZeroGradient
from .nn import TrainConfig, check_finite, init_weights, make_norm, make_optimizer
from .pose_math import GradVec, Pose, geodesic_gradient
from .projector import DEFAULT_FD_STEP, Intrinsics, fd_combine, fd_stencil, project, project_mask
from .rtpi import TrainingCurve, standardize
from .similarity import grad_diff
from .volume_store import Volume, VoxelMask, check_pair


__all__ = [
    "EncoderConfig",
    "FineRegConfig",
    "FeatureMap",
    "CompositeEncoder",
    "StemEncoder",
    "IdentityEncoder",
    "FineRegNet",
    "InferenceSchedule",
    "embed",
    "error_fn",
    "mask_to_features",
    "pose_grad",
    "training_loss",
    "train_finereg",
    "register_iterative",
    "EmbeddedObjective",
    "ImageObjective",
]


logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12


@dataclass
class EncoderConfig:
    image_size: int = 64
    stem_channels: Tuple[int, int, int] = (8, 8, 16)
    down_channels: Tuple[int, int] = (24, 32)
    assistant_channels: Tuple[int, int] = (32, 48)
    ccu_channels: int = 16
    out_channels: int = 16
    bottlenecks: int = 1
    norm: str = "batch"
    use_composite: bool = True
    # "composite", "stem" or "identity"
    kind: str = "composite"

    def validate(self) -> None:
        if self.kind not in ("composite", "stem", "identity"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind != "identity" and self.image_size % 8:
            raise ShapeMismatch(f"image size {self.image_size} must be divisible by 8")

    @property
    def feature_dims(self) -> Tuple[int, int, int]:
        """(H, W, C) of the embedded features."""
        if self.kind == "identity":
            return (self.image_size, self.image_size, 1)
        side = self.image_size // 4
        return (side, side, self.out_channels)


@dataclass
class FineRegConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    share_weights: bool = False
    # squared feature differences instead of absolute ones
    squared: bool = False
    fd_step: Tuple[float, float] = DEFAULT_FD_STEP
    mask_tau: float = 0.0
    # 12 stencil renders of one sample run on this many threads
    workers: int = 1


@dataclass
class FeatureMap:
    """Embedded features, stored channel-first as (C, H, W)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ShapeMismatch(f"feature maps are (C, H, W), got {tuple(self.data.shape)}")
        check_finite(self.data, "feature map")

    @property
    def dims(self) -> Tuple[int, int, int]:
        c, h, w = self.data.shape
        return (h, w, c)


def _conv_norm_relu(in_ch: int, out_ch: int, stride: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        make_norm(norm, out_ch, 2),
        nn.ReLU(),
    )


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand, identity skip."""

    def __init__(self, channels: int, norm: str):
        super().__init__()
        inner = max(channels // 4, 4)
        self.body = nn.Sequential(
            nn.Conv2d(channels, inner, 1),
            make_norm(norm, inner, 2),
            nn.ReLU(),
            nn.Conv2d(inner, inner, 3, padding=1),
            make_norm(norm, inner, 2),
            nn.ReLU(),
            nn.Conv2d(inner, channels, 1),
            make_norm(norm, channels, 2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(x + self.body(x))


class CFBlock(nn.Module):
    """Cascaded fusion block: a transition conv and residual bottlenecks."""

    def __init__(self, in_ch: int, out_ch: int, norm: str, bottlenecks: int = 1, stride: int = 1):
        super().__init__()
        self.transition = _conv_norm_relu(in_ch, out_ch, stride, norm)
        self.bottlenecks = nn.Sequential(*[Bottleneck(out_ch, norm) for _ in range(bottlenecks)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bottlenecks(self.transition(x))


class CompositeConnection(nn.Module):
    """1x1 conv + norm to reduce channels, then nearest upsampling."""

    def __init__(self, in_ch: int, out_ch: int, scale: int, norm: str):
        super().__init__()
        self.reduce = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1), make_norm(norm, out_ch, 2))
        self.upsample = nn.Upsample(scale_factor=scale, mode="nearest") if scale > 1 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.upsample(self.reduce(x))


def _stem(cfg: EncoderConfig) -> nn.Sequential:
    c1, c2, c3 = cfg.stem_channels
    d1, d2 = cfg.down_channels
    return nn.Sequential(
        _conv_norm_relu(1, c1, 1, cfg.norm),
        _conv_norm_relu(c1, c2, 1, cfg.norm),
        _conv_norm_relu(c2, c3, 1, cfg.norm),
        _conv_norm_relu(c3, d1, 2, cfg.norm),
        _conv_norm_relu(d1, d2, 2, cfg.norm),
    )


class _Encoder(nn.Module):
    # learned encoders run in float32, the identity encoder keeps float64
    dtype = torch.float32

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg

    def _prepare(self, images: torch.Tensor) -> torch.Tensor:
        size = self.cfg.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (1, size, size):
            raise ShapeMismatch(f"expected (B, 1, {size}, {size}) images, got {tuple(images.shape)}")
        return images.to(self.dtype)


class CompositeEncoder(_Encoder):
    """Stem and downsampling, then an assistant branch whose features are
    fused into the leader branch through composite connections."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__(cfg)
        d2 = cfg.down_channels[1]
        a1, a2 = cfg.assistant_channels
        self.stem = _stem(cfg)
        self.down_cf = CFBlock(d2, d2, cfg.norm, cfg.bottlenecks)
        self.assistant = nn.ModuleList(
            [
                CFBlock(d2, a1, cfg.norm, cfg.bottlenecks),
                CFBlock(a1, a2, cfg.norm, cfg.bottlenecks, stride=2),
            ]
        )
        self.connections = nn.ModuleList(
            [
                CompositeConnection(a1, cfg.ccu_channels, 1, cfg.norm),
                CompositeConnection(a2, cfg.ccu_channels, 2, cfg.norm),
            ]
        )
        self.leader = nn.ModuleList(
            [
                CFBlock(d2 + cfg.ccu_channels, d2, cfg.norm, cfg.bottlenecks),
                CFBlock(d2 + cfg.ccu_channels, cfg.out_channels, cfg.norm, cfg.bottlenecks),
            ]
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.down_cf(self.stem(standardize(self._prepare(images))))
        assistant, leader = x, x
        for assist_block, connection, lead_block in zip(self.assistant, self.connections, self.leader):
            assistant = assist_block(assistant)
            fused = connection(assistant)
            if not self.cfg.use_composite:
                fused = torch.zeros_like(fused)
            leader = lead_block(torch.cat([leader, fused], dim=1))
        return leader


class StemEncoder(_Encoder):
    """Stem and downsampling only, projected to the output channels."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__(cfg)
        self.stem = _stem(cfg)
        self.project = nn.Conv2d(cfg.down_channels[1], cfg.out_channels, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.project(self.stem(standardize(self._prepare(images))))


class IdentityEncoder(_Encoder):
    """Features are the raw image; the embedded error becomes a masked image difference."""

    dtype = torch.float64

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self._prepare(images)


def make_encoder(cfg: EncoderConfig) -> _Encoder:
    if cfg.kind == "identity":
        return IdentityEncoder(cfg)
    if cfg.kind == "stem":
        return StemEncoder(cfg)
    return CompositeEncoder(cfg)


class FineRegNet(nn.Module):
    """The moving-image and fixed-image encoders."""

    def __init__(self, cfg: Optional[FineRegConfig] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or FineRegConfig()
        self.moving = make_encoder(self.cfg.encoder)
        self.fixed = self.moving if self.cfg.share_weights else make_encoder(self.cfg.encoder)
        init_weights(self, seed)

    def encode_moving(self, images: torch.Tensor) -> torch.Tensor:
        return self.moving(images)

    def encode_fixed(self, images: torch.Tensor) -> torch.Tensor:
        return self.fixed(images)


def _as_batch(images: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack([torch.as_tensor(i, dtype=torch.float64) for i in images])[:, None]


def embed(encoder: nn.Module, image: torch.Tensor) -> FeatureMap:
    """Inference-mode features of one image; norm layers use frozen statistics."""
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            out = encoder(_as_batch([image]))
    finally:
        encoder.train(was_training)
    return FeatureMap(out[0])


def mask_to_features(mask: torch.Tensor, hw: Tuple[int, int]) -> torch.Tensor:
    """Max-pools an (h, w) or (B, h, w) detector mask down to the feature grid."""
    m = mask.to(torch.float32)
    squeeze = m.dim() == 2
    if squeeze:
        m = m[None]
    if tuple(m.shape[-2:]) != tuple(hw):
        m = F.adaptive_max_pool2d(m[:, None], hw)[:, 0]
    return m[0] if squeeze else m


def _features(e) -> torch.Tensor:
    return e.data if isinstance(e, FeatureMap) else e


def error_fn(
    e_m: Union[FeatureMap, torch.Tensor],
    e_f: Union[FeatureMap, torch.Tensor],
    m: torch.Tensor,
    squared: bool = False,
) -> Union[float, torch.Tensor]:
    """Mask-weighted mean (absolute or squared) feature difference.

    Takes (C, H, W) features with an (H, W) mask and returns a float, or
    (B, C, H, W) features with a (B, H, W) mask and returns a (B,) tensor.
    The mask is resampled to (H, W) and replicated across channels, so the
    denominator counts C entries per masked pixel.
    """
    a, b = _features(e_m), _features(e_f)
    batched = a.dim() == 4
    if not batched:
        a, b, m = a[None], b[None], m[None]
    if b.shape[0] == 1 and a.shape[0] > 1:
        b = b.expand_as(a)
    if a.shape != b.shape:
        raise ShapeMismatch(f"feature maps differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    weights = mask_to_features(m, a.shape[-2:]).to(a.dtype)
    if weights.shape[0] == 1 and a.shape[0] > 1:
        weights = weights.expand(a.shape[0], -1, -1)
    weights = weights[:, None].expand_as(a)
    total = weights.sum(dim=(1, 2, 3))
    if bool((total == 0).any()):
        raise EmptyMask("the projected mask has no pixel on the feature grid")
    diff = a - b
    diff = diff * diff if squared else diff.abs()
    values = (weights * diff).sum(dim=(1, 2, 3)) / total
    return values if batched else float(values[0])


def _render(volume: Volume, mask: VoxelMask, poses: Sequence[Pose], k: Intrinsics, tau: float, workers: int):
    def one(pose: Pose):
        return project(volume, pose, k), project_mask(mask, pose, k, tau)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, poses))
    else:
        pairs = [one(p) for p in poses]
    images = _as_batch([p[0] for p in pairs])
    masks = torch.stack([p[1] for p in pairs])
    return images, masks


class EmbeddedObjective:
    """theta -> embedded error, with the fixed-image features computed once."""

    def __init__(self, nets: FineRegNet, volume: Volume, mask: VoxelMask, fixed: torch.Tensor, k: Intrinsics):
        check_pair(volume, mask)
        self.nets = nets
        self.volume = volume
        self.mask = mask
        self.k = k
        self.cfg = nets.cfg
        self.fixed_features = embed(nets.fixed, fixed)

    def _values(self, poses: Sequence[Pose]) -> torch.Tensor:
        images, masks = _render(self.volume, self.mask, poses, self.k, self.cfg.mask_tau, self.cfg.workers)
        was_training = self.nets.training
        self.nets.eval()
        try:
            with torch.no_grad():
                e_m = self.nets.encode_moving(images)
        finally:
            self.nets.train(was_training)
        e_f = self.fixed_features.data[None]
        return error_fn(e_m, e_f, masks, squared=self.cfg.squared)

    def __call__(self, pose: Pose) -> float:
        return float(self._values([pose])[0])

    def grad(self, pose: Pose, h: Sequence[float]) -> GradVec:
        values = self._values(fd_stencil(pose, h)).to(torch.float64)
        return GradVec.from_array([float(v) for v in fd_combine(values, h)])


class ImageObjective:
    """theta -> grad_diff(fixed, project(volume, theta)) in image space."""

    def __init__(self, volume: Volume, fixed: torch.Tensor, k: Intrinsics):
        self.volume = volume
        self.fixed = fixed
        self.k = k

    def __call__(self, pose: Pose) -> float:
        return grad_diff(self.fixed, project(self.volume, pose, self.k))


def pose_grad(
    nets: FineRegNet,
    volume: Volume,
    mask: VoxelMask,
    pose: Pose,
    fixed: torch.Tensor,
    k: Intrinsics,
    h: Sequence[float] = DEFAULT_FD_STEP,
    objective: Optional[EmbeddedObjective] = None,
) -> GradVec:
    """Central-difference gradient of the embedded error at `pose`.

    Pass `objective` to reuse its cached fixed-image features.
    """
    objective = objective or EmbeddedObjective(nets, volume, mask, fixed, k)
    return objective.grad(pose, h)


def _direction_loss(v_r, v_t, s_r, s_t) -> torch.Tensor:
    norms = [torch.linalg.vector_norm(v) for v in (v_r, v_t, s_r, s_t)]
    if min(float(n) for n in norms) < ZERO_NORM:
        raise ZeroGradient(f"gradient part with norm below {ZERO_NORM}: {[float(n) for n in norms]}")
    return torch.linalg.vector_norm(s_r / norms[2] - v_r / norms[0]) + torch.linalg.vector_norm(
        s_t / norms[3] - v_t / norms[1]
    )


def training_loss(v: GradVec, v_star: GradVec) -> float:
    """Distance between the unit rotation and unit translation directions; in [0, 4]."""
    parts = [torch.from_numpy(x) for x in (v.v_r, v.v_t, v_star.v_r, v_star.v_t)]
    return float(_direction_loss(*parts))


@dataclass
class InferenceSchedule:
    max_iters: int = 100
    rot_freeze_iter: int = 30
    step_rot: float = 0.5
    step_trans: float = 0.5
    decay: float = 0.95
    convergence_eps: float = 1e-3
    fd_step: Tuple[float, float] = DEFAULT_FD_STEP

    def validate(self) -> None:
        if self.max_iters > 0 and not 0 < self.rot_freeze_iter <= self.max_iters:
            raise ValueError(
                f"need 0 < rot_freeze_iter <= max_iters, got {self.rot_freeze_iter}, {self.max_iters}"
            )
        if self.step_rot <= 0 or self.step_trans <= 0:
            raise ValueError(f"steps must be positive, got {self.step_rot}, {self.step_trans}")

    def descent(self) -> DescentSchedule:
        return DescentSchedule(
            max_iters=self.max_iters,
            step_rot=self.step_rot,
            step_trans=self.step_trans,
            decay=self.decay,
            convergence_eps=self.convergence_eps,
            fd_step=self.fd_step,
            rot_freeze_iter=self.rot_freeze_iter,
        )


def register_iterative(
    nets: FineRegNet,
    volume: Volume,
    mask: VoxelMask,
    fixed: torch.Tensor,
    theta0: Pose,
    sched: InferenceSchedule,
    k: Intrinsics,
    objective: Optional[Callable[[Pose], float]] = None,
) -> Tuple[Pose, Trajectory]:
    """Descends the embedded error (or another objective, e.g. ImageObjective) from theta0.

    Rotation is frozen after `sched.rot_freeze_iter` iterations.
    """
    sched.validate()
    try:
        objective = objective or EmbeddedObjective(nets, volume, mask, fixed, k)
        grad_fn = None
        if isinstance(objective, EmbeddedObjective):
            grad_fn = lambda p: objective.grad(p, sched.fd_step)  # noqa: E731
        trajectory = pose_descent(objective, theta0, sched.descent(), grad_fn=grad_fn)
    except EmptyMask:
        logger.exception(
            "fine registration aborted: the mask projects off the detector. theta0=%s intrinsics=%s",
            theta0.as_tuple(),
            k,
        )
        raise
    return trajectory.final_pose, trajectory


VolumeSource = Callable[[np.random.Generator], Tuple[Volume, VoxelMask]]


def _pair_source(pairs: Sequence[Tuple[Volume, VoxelMask]]) -> VolumeSource:
    pool = list(pairs)
    assert pool, "need at least one (volume, mask) pair"
    return lambda rng: pool[int(rng.integers(len(pool)))]


def _sample_loss(
    nets: FineRegNet,
    volume: Volume,
    mask: VoxelMask,
    theta: Pose,
    target: Pose,
    k: Intrinsics,
) -> torch.Tensor:
    cfg = nets.cfg
    h = cfg.fd_step
    fixed = project(volume, target, k)
    images, masks = _render(volume, mask, fd_stencil(theta, h), k, cfg.mask_tau, cfg.workers)
    e_m = nets.encode_moving(images)
    e_f = nets.encode_fixed(_as_batch([fixed]))
    values = error_fn(e_m, e_f, masks, squared=cfg.squared)
    v = torch.stack(fd_combine(values, h))
    v_star = geodesic_gradient(theta, target)
    s_r = torch.as_tensor(v_star.v_r, dtype=v.dtype)
    s_t = torch.as_tensor(v_star.v_t, dtype=v.dtype)
    return _direction_loss(v[:3], v[3:], s_r, s_t)


def train_finereg(
    nets: FineRegNet,
    pairs,
    train_cfg: TrainConfig,
    k: Intrinsics,
    dist: Optional[PoseDistribution] = None,
    max_resamples: int = 8,
) -> Tuple[FineRegNet, TrainingCurve]:
    """Trains both encoders on the gradient-direction loss.

    `pairs` is a sequence of (volume, mask) pairs or a callable drawing one
    from a numpy Generator. Samples whose gradients vanish are skipped and
    redrawn.
    """
    train_cfg.validate()
    dist = dist or PoseDistribution.toy()
    source = pairs if callable(pairs) else _pair_source(pairs)
    rng = np.random.default_rng(train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    optimizer, scheduler = make_optimizer(nets.parameters(), train_cfg)
    curve = TrainingCurve()
    nets.train()

    for iteration in range(train_cfg.iterations):
        losses: List[torch.Tensor] = []
        skipped = 0
        while len(losses) < train_cfg.batch_size:
            volume, mask = source(rng)
            theta, target = sample_pose_pair(dist, rng)
            try:
                losses.append(_sample_loss(nets, volume, mask, theta, target, k))
            except (ZeroGradient, EmptyMask) as err:
                skipped += 1
                logger.warning(
                    "iteration %d: skipping sample theta=%s target=%s: %s",
                    iteration,
                    theta.as_tuple(),
                    target.as_tuple(),
                    err,
                )
                if skipped > max_resamples * train_cfg.batch_size:
                    raise
        loss = torch.stack(losses).mean()
        try:
            check_finite(loss, "fine registration loss", iteration=iteration)
        except NonFiniteFault:
            logger.exception("fine registration training diverged: seed=%d", train_cfg.seed)
            raise
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        curve.append(float(loss.detach()))
        if train_cfg.log_every and iteration % train_cfg.log_every == 0:
            logger.info(
                "fine iter %d loss %.6f lr %.2e", iteration, curve.losses[-1], scheduler.get_last_lr()[0]
            )
    return nets, curve
