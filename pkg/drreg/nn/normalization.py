# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
import enum
from typing import Any, List, Optional, Tuple

import torch


__all__ = [
    "NamedAxis",
    "NormFunction",
    "BatchNorm2d",
    "BatchNorm3d",
    "InstanceNorm2d",
    "GroupNorm",
    "make_norm",
]


NamedAxis = enum.Enum("NamedAxis", ["BATCH", "CHANNEL"])


def _reduction_axes(x: torch.Tensor, stat_axes: List[NamedAxis]) -> List[int]:
    axes = list(range(x.dim()))
    if NamedAxis.BATCH in stat_axes:
        axes.remove(0)
    if NamedAxis.CHANNEL in stat_axes:
        axes.remove(1)
    return axes


def _channel_view(t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    # (C,) -> (1, C, 1, ...) for broadcasting against x
    return t.reshape([1, -1] + [1] * (x.dim() - 2))


def _stat_view(t: torch.Tensor, x: torch.Tensor, stat_axes: List[NamedAxis]) -> torch.Tensor:
    # statistics of shape (N, C), (C,) or (N,) broadcast against x
    shape = [1] * x.dim()
    if NamedAxis.BATCH in stat_axes:
        shape[0] = x.shape[0]
    if NamedAxis.CHANNEL in stat_axes:
        shape[1] = x.shape[1]
    return t.reshape(shape)


def norm_forward(
    x: torch.Tensor,
    weight: Optional[torch.Tensor],
    bias: Optional[torch.Tensor],
    running_mean: Optional[torch.Tensor],
    running_var: Optional[torch.Tensor],
    use_input_stats: bool,
    momentum: float,
    eps: float,
    *,
    stat_axes: List[NamedAxis],
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Generic normalization forward.

    This can be used to construct a BatchNorm, InstanceNorm, or LayerNorm by
    indicating which axes keep their own statistics:

    BatchNorm: `stat_axes = [NamedAxis.CHANNEL]`
    LayerNorm: `stat_axes = [NamedAxis.BATCH]`
    InstanceNorm: `stat_axes = [NamedAxis.BATCH, NamedAxis.CHANNEL]`

    Running statistics are updated in place when given and
    `use_input_stats` is set; they always hold the unbiased variance.

    Returns:
        The normalized output, the mean and 1/std, both broadcastable to x.
    """
    assert (running_var is None) == (
        running_mean is None
    ), "Iff running mean or var is given, the other should be"

    if use_input_stats or running_mean is None:
        axes = _reduction_axes(x, stat_axes)
        var, mean = torch.var_mean(x, dim=axes, unbiased=False, keepdim=True)
        if running_mean is not None:
            num_features = x.numel() // var.numel()
            unbiased_var = var * num_features / max(num_features - 1, 1)
            batch_mean = mean
            if NamedAxis.BATCH in stat_axes:
                # per-instance statistics are averaged before they enter the running stats
                batch_mean = mean.mean(dim=0, keepdim=True)
                unbiased_var = unbiased_var.mean(dim=0, keepdim=True)
            running_mean.mul_(1 - momentum).add_(batch_mean.reshape(-1), alpha=momentum)
            running_var.mul_(1 - momentum).add_(unbiased_var.reshape(-1), alpha=momentum)
    else:  # This is inference mode with running stats
        mean = _stat_view(running_mean, x, [NamedAxis.CHANNEL])
        var = _stat_view(running_var, x, [NamedAxis.CHANNEL])

    invstd = torch.rsqrt(var + eps)
    out = (x - mean) * invstd
    if weight is not None:
        out = out * _channel_view(weight, x)
    if bias is not None:
        out = out + _channel_view(bias, x)
    return out, mean, invstd


def norm_backward(
    grad_output: torch.Tensor,
    x: torch.Tensor,
    weight: Optional[torch.Tensor],
    mean: torch.Tensor,
    invstd: torch.Tensor,
    use_input_stats: bool,
    *,
    stat_axes: List[NamedAxis],
) -> Tuple[torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor]]:
    x_hat = (x - mean) * invstd
    grad_x_hat = grad_output
    if weight is not None:
        grad_x_hat = grad_output * _channel_view(weight, x)

    if use_input_stats:
        axes = _reduction_axes(x, stat_axes)
        n = x.numel() // mean.numel()
        sum_grad = grad_x_hat.sum(dim=axes, keepdim=True)
        sum_grad_x_hat = (grad_x_hat * x_hat).sum(dim=axes, keepdim=True)
        grad_input = invstd / n * (n * grad_x_hat - sum_grad - x_hat * sum_grad_x_hat)
    else:
        grad_input = grad_x_hat * invstd

    channel_axes = [ax for ax in range(x.dim()) if ax != 1]
    grad_weight = (grad_output * x_hat).sum(dim=channel_axes) if weight is not None else None
    grad_bias = grad_output.sum(dim=channel_axes)
    return grad_input, grad_weight, grad_bias


class NormFunction(torch.autograd.Function):
    @staticmethod
    def forward(
        ctx: Any,
        x: torch.Tensor,
        weight: Optional[torch.Tensor],
        bias: Optional[torch.Tensor],
        running_mean: Optional[torch.Tensor],
        running_var: Optional[torch.Tensor],
        use_input_stats: bool,
        momentum: float,
        eps: float,
        stat_axes: List[NamedAxis],
    ) -> torch.Tensor:
        out, mean, invstd = norm_forward(
            x,
            weight,
            bias,
            running_mean,
            running_var,
            use_input_stats,
            momentum,
            eps,
            stat_axes=stat_axes,
        )
        ctx.stat_axes = stat_axes
        ctx.use_input_stats = use_input_stats or running_mean is None
        ctx.has_bias = bias is not None
        ctx.save_for_backward(x, weight, mean, invstd)
        return out

    @staticmethod
    def backward(ctx: Any, grad_output: torch.Tensor):
        x, weight, mean, invstd = ctx.saved_tensors
        grad_input, grad_weight, grad_bias = norm_backward(
            grad_output,
            x,
            weight,
            mean,
            invstd,
            ctx.use_input_stats,
            stat_axes=ctx.stat_axes,
        )
        if not ctx.has_bias:
            grad_bias = None
        return (
            grad_input,
            grad_weight,
            grad_bias,
            None,
            None,
            None,
            None,
            None,
            None,
        )


class _NormBase(torch.nn.modules.batchnorm._NormBase):
    stat_axes: Optional[List[NamedAxis]] = None
    expected_dim: Optional[int] = None

    def __init__(
        self,
        num_features: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        affine: bool = True,
        track_running_stats: bool = True,
        device: torch.device = None,
        dtype: torch.dtype = None,
    ) -> None:
        factory_kwargs = {"device": device, "dtype": dtype}
        super().__init__(
            num_features, eps, momentum, affine, track_running_stats, **factory_kwargs
        )

    def _check_input_dim(self, input: torch.Tensor) -> None:
        if input.dim() != self.expected_dim:
            raise ValueError(
                "expected {}D input (got {}D input)".format(self.expected_dim, input.dim())
            )

    def forward(self, input: torch.Tensor) -> torch.Tensor:
        self._check_input_dim(input)
        use_input_stats = self.training or not self.track_running_stats
        if self.training and self.track_running_stats:
            self.num_batches_tracked.add_(1)
        return NormFunction.apply(
            input,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            use_input_stats,
            self.momentum,
            self.eps,
            self.stat_axes,
        )


class _BatchNorm(_NormBase):
    stat_axes = [NamedAxis.CHANNEL]


class BatchNorm2d(_BatchNorm):
    expected_dim = 4


class BatchNorm3d(_BatchNorm):
    expected_dim = 5


class InstanceNorm2d(_NormBase):
    stat_axes = [NamedAxis.BATCH, NamedAxis.CHANNEL]
    expected_dim = 4

    def __init__(self, num_features: int, **kwargs) -> None:
        kwargs.setdefault("affine", False)
        kwargs.setdefault("track_running_stats", False)
        super().__init__(num_features, **kwargs)


class GroupNorm(torch.nn.Module):
    """Per-sample statistics over channel groups; independent of batch size."""

    def __init__(self, num_groups: int, num_channels: int, eps: float = 1e-5) -> None:
        super().__init__()
        if num_channels % num_groups:
            raise ValueError(f"{num_channels} channels do not split into {num_groups} groups")
        self.num_groups = num_groups
        self.eps = eps
        self.weight = torch.nn.Parameter(torch.ones(num_channels))
        self.bias = torch.nn.Parameter(torch.zeros(num_channels))

    def forward(self, input: torch.Tensor) -> torch.Tensor:
        n, c = input.shape[:2]
        grouped = input.reshape(n, self.num_groups, -1)
        out = NormFunction.apply(
            grouped,
            None,
            None,
            None,
            None,
            True,
            0.0,
            self.eps,
            [NamedAxis.BATCH, NamedAxis.CHANNEL],
        )
        out = out.reshape(input.shape)
        return out * _channel_view(self.weight, input) + _channel_view(self.bias, input)


def make_norm(kind: str, channels: int, dims: int) -> torch.nn.Module:
    """`kind` is "batch" or "group"; `dims` is the number of spatial axes."""
    if kind == "batch":
        return BatchNorm3d(channels) if dims == 3 else BatchNorm2d(channels)
    if kind == "group":
        groups = max(g for g in (1, 2, 4, 8) if channels % g == 0)
        return GroupNorm(groups, channels)
    raise ValueError(f"unknown normalization {kind!r}")
