# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Layer vocabulary, layer graphs, SGD with a triangular cyclic learning rate,
and the text + raw f32 checkpoint format shared by both networks."""
import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from ..drreg_version import DrregVersion, __version__, release_of
from ..errors import MalformedHeader, NonFiniteFault, ShapeMismatch, SizeMismatch
from .normalization import make_norm


__all__ = [
    "LayerKind",
    "LayerSpec",
    "build_layer",
    "Flatten3DTo2D",
    "flatten_3d_to_2d",
    "Concat",
    "ResidualBlock",
    "Graph",
    "forward",
    "backward",
    "check_finite",
    "init_weights",
    "TrainConfig",
    "cyclic_lr",
    "sgd_step",
    "make_optimizer",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_meta",
]


logger = logging.getLogger(__name__)


class LayerKind(enum.Enum):
    CONV2D = "conv2d"
    CONV3D = "conv3d"
    LINEAR = "linear"
    RELU = "relu"
    NORM = "norm"
    DOWNSAMPLE = "downsample"
    UPSAMPLE_NEAREST = "upsample_nearest"
    CONCAT = "concat"
    RESIDUAL_BLOCK = "residual_block"
    FLATTEN_3D_TO_2D = "flatten_3d_to_2d"


@dataclass(frozen=True)
class LayerSpec:
    """One node of a layer graph.

    `dims` is the number of spatial axes for norm, downsample and residual
    layers. `depth` is the folded depth of a flatten node, needed to track
    channel counts before any tensor is seen.
    """

    kind: LayerKind
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None
    dims: int = 2
    norm: str = "batch"
    scale: int = 2
    depth: int = 1

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    def out_channels(self, in_channels: Sequence[int]) -> int:
        """Channel arithmetic; raises ShapeMismatch on inconsistent wiring."""
        if self.kind is LayerKind.CONCAT:
            return sum(in_channels)
        if len(in_channels) != 1:
            raise ShapeMismatch(f"{self.kind.value} takes one input, got {len(in_channels)}")
        (c,) = in_channels
        if self.kind in (LayerKind.RELU, LayerKind.UPSAMPLE_NEAREST):
            return c
        if self.kind is LayerKind.FLATTEN_3D_TO_2D:
            return c * self.depth
        if c != self.in_ch:
            raise ShapeMismatch(
                f"{self.kind.value} expects {self.in_ch} input channels, wired to {c}"
            )
        return self.in_ch if self.kind is LayerKind.NORM else self.out_ch


def flatten_3d_to_2d(x: torch.Tensor) -> torch.Tensor:
    """(b, c, d, h, w) -> (b, c*d, h, w); channel k*d + j holds depth slice j of k."""
    if x.dim() != 5:
        raise ShapeMismatch(f"flatten_3d_to_2d needs a 5-axis input, got {tuple(x.shape)}")
    b, c, d, h, w = x.shape
    return x.reshape(b, c * d, h, w)


class Flatten3DTo2D(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return flatten_3d_to_2d(x)


class Concat(nn.Module):
    def forward(self, *xs: torch.Tensor) -> torch.Tensor:
        spatial = {tuple(x.shape[2:]) for x in xs}
        batch = {x.shape[0] for x in xs}
        if len(spatial) != 1 or len(batch) != 1:
            raise ShapeMismatch(
                f"concat needs equal batch and spatial sizes, got {[tuple(x.shape) for x in xs]}"
            )
        return torch.cat(xs, dim=1)


def _conv(dims: int, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int) -> nn.Module:
    cls = nn.Conv3d if dims == 3 else nn.Conv2d
    return cls(in_ch, out_ch, kernel, stride=stride, padding=padding)


class ResidualBlock(nn.Module):
    """conv-norm-relu-conv-norm plus a (projected) skip, then relu."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dims: int = 2, norm: str = "batch"):
        super().__init__()
        self.body = nn.Sequential(
            _conv(dims, in_ch, out_ch, 3, stride, 1),
            make_norm(norm, out_ch, dims),
            nn.ReLU(),
            _conv(dims, out_ch, out_ch, 3, 1, 1),
            make_norm(norm, out_ch, dims),
        )
        self.skip: nn.Module = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                _conv(dims, in_ch, out_ch, 1, stride, 0), make_norm(norm, out_ch, dims)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.body(x) + self.skip(x))


def build_layer(spec: LayerSpec) -> nn.Module:
    kind = spec.kind
    if kind is LayerKind.CONV2D:
        return nn.Conv2d(spec.in_ch, spec.out_ch, spec.kernel, stride=spec.stride, padding=spec.pad)
    if kind is LayerKind.CONV3D:
        return nn.Conv3d(spec.in_ch, spec.out_ch, spec.kernel, stride=spec.stride, padding=spec.pad)
    if kind is LayerKind.DOWNSAMPLE:
        return _conv(spec.dims, spec.in_ch, spec.out_ch, spec.kernel, 2, spec.pad)
    if kind is LayerKind.LINEAR:
        return nn.Linear(spec.in_ch, spec.out_ch)
    if kind is LayerKind.RELU:
        return nn.ReLU()
    if kind is LayerKind.NORM:
        return make_norm(spec.norm, spec.in_ch, spec.dims)
    if kind is LayerKind.UPSAMPLE_NEAREST:
        return nn.Upsample(scale_factor=spec.scale, mode="nearest")
    if kind is LayerKind.CONCAT:
        return Concat()
    if kind is LayerKind.RESIDUAL_BLOCK:
        return ResidualBlock(spec.in_ch, spec.out_ch, spec.stride, spec.dims, spec.norm)
    if kind is LayerKind.FLATTEN_3D_TO_2D:
        return Flatten3DTo2D()
    raise ValueError(f"unknown layer kind {kind}")


def check_finite(t: torch.Tensor, what: str, iteration: Optional[int] = None) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteFault(f"non-finite values in {what}", iteration=iteration)
    return t


# (name, spec, input names); "input" names the graph input
Node = Tuple[str, LayerSpec, Sequence[str]]


class Graph(nn.Module):
    """An acyclic layer graph in topological order.

    Channel counts are checked when the graph is built; tensors are checked
    for NaN/Inf after every node.
    """

    INPUT = "input"

    def __init__(self, in_channels: int, nodes: Iterable[Node]):
        super().__init__()
        self.in_channels = in_channels
        self.order: List[Tuple[str, Tuple[str, ...]]] = []
        self.layers = nn.ModuleDict()
        self.specs: Dict[str, LayerSpec] = {}
        channels = {self.INPUT: in_channels}
        for name, spec, inputs in nodes:
            if name in channels:
                raise ValueError(f"duplicate graph node {name!r}")
            missing = [i for i in inputs if i not in channels]
            if missing:
                raise ValueError(f"node {name!r} reads undefined inputs {missing}")
            channels[name] = spec.out_channels([channels[i] for i in inputs])
            self.layers[name] = build_layer(spec)
            self.specs[name] = spec
            self.order.append((name, tuple(inputs)))
        assert self.order, "a graph needs at least one node"
        self.out_channels = channels[self.order[-1][0]]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        values = {self.INPUT: x}
        for name, inputs in self.order:
            try:
                out = self.layers[name](*[values[i] for i in inputs])
            except RuntimeError as err:
                if isinstance(err, (ShapeMismatch, NonFiniteFault)):
                    raise
                raise ShapeMismatch(f"node {name!r}: {err}") from err
            values[name] = check_finite(out, f"output of node {name!r}")
        return values[self.order[-1][0]]


def forward(graph: Graph, inputs: torch.Tensor) -> torch.Tensor:
    return graph(inputs)


def backward(
    graph: nn.Module,
    output: torch.Tensor,
    seed_grad: Optional[torch.Tensor] = None,
    inputs: Sequence[torch.Tensor] = (),
) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of <output, seed_grad> for every parameter.

    Gradients with respect to `inputs` are returned under "input.<i>".
    """
    if seed_grad is None:
        seed_grad = torch.ones_like(output)
    names = [n for n, p in graph.named_parameters() if p.requires_grad]
    params = [p for _, p in graph.named_parameters() if p.requires_grad]
    targets = params + list(inputs)
    grads = torch.autograd.grad(output, targets, grad_outputs=seed_grad, allow_unused=True)
    result = {}
    for i, g in enumerate(grads):
        key = names[i] if i < len(names) else f"input.{i - len(names)}"
        g = torch.zeros_like(targets[i]) if g is None else g
        result[key] = check_finite(g, f"gradient of {key}")
    return result


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """He-uniform fan-in initialization of conv and linear weights, zero biases."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, a=0.0, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
    return module


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 2000
    lr_min: float = 1e-3
    lr_max: float = 1e-2
    cycle_half_steps: int = 100
    momentum: float = 0.9
    seed: int = 0
    log_every: int = 100
    weight_decay: float = 0.0

    def validate(self) -> None:
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.cycle_half_steps < 1:
            raise ValueError(f"cycle_half_steps must be >= 1, got {self.cycle_half_steps}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError(
                f"need batch_size >= 1 and iterations >= 0, got {self.batch_size}, {self.iterations}"
            )


def cyclic_lr(cfg: TrainConfig, step: int) -> float:
    """Triangular wave: lr_min at step 0, lr_max at cycle_half_steps."""
    half = cfg.cycle_half_steps
    phase = (step % (2 * half)) / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - abs(phase - 1.0))


def sgd_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: Dict[int, torch.Tensor],
    cfg: TrainConfig,
    step_index: int,
) -> Sequence[torch.Tensor]:
    """Heavy-ball momentum in place: buf = m*buf + g (buf = g on the first
    step), p -= lr * buf. Same update as torch.optim.SGD."""
    lr = cyclic_lr(cfg, step_index)
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeMismatch(f"parameter {i}: shape {tuple(p.shape)} vs grad {tuple(g.shape)}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            buf = state.get(i)
            if buf is None or cfg.momentum == 0:
                buf = g.clone()
            else:
                buf.mul_(cfg.momentum).add_(g)
            state[i] = buf
            p.sub_(lr * buf)
    return params


def make_optimizer(
    params: Iterable[torch.Tensor], cfg: TrainConfig
) -> Tuple[torch.optim.SGD, torch.optim.lr_scheduler.CyclicLR]:
    """SGD + triangular CyclicLR; stepping both matches sgd_step exactly."""
    cfg.validate()
    optimizer = torch.optim.SGD(
        params, lr=cfg.lr_min, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CyclicLR(
        optimizer,
        base_lr=cfg.lr_min,
        max_lr=cfg.lr_max,
        step_size_up=cfg.cycle_half_steps,
        mode="triangular",
        cycle_momentum=False,
    )
    return optimizer, scheduler


CHECKPOINT_MAGIC = "# drreg checkpoint v1"
CHECKPOINT_SUFFIX = ".ckpt"
CHECKPOINT_PAYLOAD_SUFFIX = ".ckraw"


def _checkpoint_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (CHECKPOINT_SUFFIX, CHECKPOINT_PAYLOAD_SUFFIX):
        path = path.with_suffix("")
    return path.with_suffix(CHECKPOINT_SUFFIX), path.with_suffix(CHECKPOINT_PAYLOAD_SUFFIX)


def save_checkpoint(module: nn.Module, path: Union[str, Path], meta: Optional[dict] = None) -> Path:
    """Text manifest (meta JSON + one line per tensor) and a raw f32le payload.

    Integer buffers are stored as f32 and cast back on load.
    """
    manifest, payload = _checkpoint_paths(path)
    lines = [
        CHECKPOINT_MAGIC,
        f"version {__version__.base}",
        "meta " + json.dumps(meta or {}, sort_keys=True),
    ]
    chunks = []
    offset = 0
    for name, tensor in module.state_dict().items():
        data = tensor.detach().cpu()
        count = data.numel()
        shape = ",".join(str(s) for s in data.shape) or "-"
        lines.append(f"tensor {name} {str(data.dtype).replace('torch.', '')} {shape} {offset} {count}")
        chunks.append(data.to(torch.float32).reshape(-1).numpy().astype("<f4"))
        offset += count
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    flat.tofile(payload)
    logger.debug("checkpoint %s: %d tensors, %d scalars", manifest, len(chunks), offset)
    return manifest


def _read_manifest(manifest: Path) -> Tuple[dict, list, Optional[str]]:
    with open(manifest, "r") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise MalformedHeader(f"{manifest}: not a drreg checkpoint")
    meta: dict = {}
    entries = []
    written_by = None
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "version":
            written_by = rest.strip()
            try:
                release_of(written_by)
            except ValueError as err:
                raise MalformedHeader(f"{manifest}: bad version {written_by!r}") from err
        elif key == "meta":
            try:
                meta = json.loads(rest)
            except ValueError as err:
                raise MalformedHeader(f"{manifest}: bad meta line") from err
        elif key == "tensor":
            try:
                name, dtype, shape, offset, count = rest.split(" ")
                dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
                entries.append((name, getattr(torch, dtype), dims, int(offset), int(count)))
            except (ValueError, AttributeError) as err:
                raise MalformedHeader(f"{manifest}: bad tensor line {line!r}") from err
        else:
            raise MalformedHeader(f"{manifest}: unknown entry {key!r}")
    return meta, entries, written_by


def checkpoint_meta(path: Union[str, Path]) -> dict:
    """The meta dict alone, so callers can size a module before loading it."""
    manifest, _ = _checkpoint_paths(path)
    return _read_manifest(manifest)[0]


def load_checkpoint(module: nn.Module, path: Union[str, Path]) -> dict:
    """Loads tensors into `module` (strict) and returns the meta dict."""
    manifest, payload = _checkpoint_paths(path)
    meta, entries, written_by = _read_manifest(manifest)
    if written_by is not None and DrregVersion(written_by) > __version__:
        logger.warning(
            "%s was written by drreg %s, newer than the running %s; loading anyway",
            manifest,
            written_by,
            __version__.base,
        )
    flat = np.fromfile(payload, dtype="<f4")
    expected = sum(e[4] for e in entries)
    if flat.size != expected:
        raise SizeMismatch(f"{payload}: expected {expected} scalars, got {flat.size}")
    state = {}
    for name, dtype, dims, offset, count in entries:
        if math.prod(dims) != count:
            raise MalformedHeader(f"{manifest}: {name} shape {dims} does not hold {count} values")
        values = torch.from_numpy(flat[offset : offset + count].copy()).reshape(dims)
        state[name] = values.to(dtype)
    module.load_state_dict(state, strict=True)
    return meta
