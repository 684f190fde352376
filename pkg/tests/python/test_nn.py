# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause

import logging
import operator

import numpy as np
import pytest
import torch
import torch.nn as nn

from drreg import MalformedHeader, NonFiniteFault, ShapeMismatch, SizeMismatch, __version__
from drreg.drreg_version import DrregVersion
from drreg.nn import (
    BatchNorm2d,
    BatchNorm3d,
    Graph,
    GroupNorm,
    InstanceNorm2d,
    LayerKind,
    LayerSpec,
    NamedAxis,
    NormFunction,
    ResidualBlock,
    TrainConfig,
    backward,
    check_finite,
    checkpoint_meta,
    cyclic_lr,
    flatten_3d_to_2d,
    forward,
    init_weights,
    load_checkpoint,
    make_norm,
    make_optimizer,
    save_checkpoint,
    sgd_step,
)


def _copy_affine(ours: nn.Module, ref: nn.Module) -> None:
    with torch.no_grad():
        ref.weight.copy_(torch.linspace(0.5, 1.5, ref.weight.numel()))
        ref.bias.copy_(torch.linspace(-0.2, 0.2, ref.bias.numel()))
        ours.weight.copy_(ref.weight)
        ours.bias.copy_(ref.bias)


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize(
    "ours_cls,ref_cls,shape",
    [
        (BatchNorm2d, nn.BatchNorm2d, (4, 3, 5, 6)),
        (BatchNorm3d, nn.BatchNorm3d, (2, 3, 4, 5, 3)),
    ],
)
def test_batch_norm_matches_torch(ours_cls, ref_cls, shape, training):
    torch.manual_seed(0)
    ours = ours_cls(shape[1]).double()
    ref = ref_cls(shape[1]).double()
    _copy_affine(ours, ref)
    # populate running statistics first
    for _ in range(3):
        x = torch.randn(shape, dtype=torch.float64) * 2 + 1
        ours(x)
        ref(x)
    torch.testing.assert_close(ours.running_mean, ref.running_mean)
    torch.testing.assert_close(ours.running_var, ref.running_var)

    ours.train(training)
    ref.train(training)
    x = torch.randn(shape, dtype=torch.float64, requires_grad=True)
    x_ref = x.detach().clone().requires_grad_()
    out, out_ref = ours(x), ref(x_ref)
    torch.testing.assert_close(out, out_ref)
    grad = torch.randn_like(out)
    out.backward(grad)
    out_ref.backward(grad)
    torch.testing.assert_close(x.grad, x_ref.grad)
    torch.testing.assert_close(ours.weight.grad, ref.weight.grad)
    torch.testing.assert_close(ours.bias.grad, ref.bias.grad)


def test_instance_norm_matches_torch():
    torch.manual_seed(1)
    x = torch.randn(3, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    x_ref = x.detach().clone().requires_grad_()
    out = InstanceNorm2d(4)(x)
    out_ref = nn.InstanceNorm2d(4)(x_ref)
    torch.testing.assert_close(out, out_ref)
    grad = torch.randn_like(out)
    out.backward(grad)
    out_ref.backward(grad)
    torch.testing.assert_close(x.grad, x_ref.grad)


@pytest.mark.parametrize("groups,channels", [(1, 4), (2, 4), (4, 8)])
def test_group_norm_matches_torch(groups, channels):
    torch.manual_seed(2)
    ours = GroupNorm(groups, channels).double()
    ref = nn.GroupNorm(groups, channels).double()
    _copy_affine(ours, ref)
    x = torch.randn(3, channels, 4, 4, dtype=torch.float64)
    torch.testing.assert_close(ours(x), ref(x))


def test_group_norm_is_batch_independent():
    torch.manual_seed(3)
    norm = GroupNorm(2, 4).double()
    x = torch.randn(5, 4, 3, 3, dtype=torch.float64)
    torch.testing.assert_close(norm(x)[:1], norm(x[:1]))


@pytest.mark.parametrize(
    "stat_axes",
    [[NamedAxis.CHANNEL], [NamedAxis.BATCH, NamedAxis.CHANNEL], [NamedAxis.BATCH]],
)
def test_norm_function_gradcheck(stat_axes):
    torch.manual_seed(4)
    x = torch.randn(3, 2, 4, dtype=torch.float64, requires_grad=True)
    weight = torch.rand(2, dtype=torch.float64, requires_grad=True)
    bias = torch.rand(2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda x, w, b: NormFunction.apply(x, w, b, None, None, True, 0.1, 1e-5, stat_axes),
        (x, weight, bias),
    )


def test_norm_function_gradcheck_with_running_stats():
    x = torch.randn(4, 3, 5, dtype=torch.float64, requires_grad=True)
    mean = torch.rand(3, dtype=torch.float64)
    var = torch.rand(3, dtype=torch.float64) + 0.5
    assert torch.autograd.gradcheck(
        lambda x: NormFunction.apply(x, None, None, mean, var, False, 0.1, 1e-5, [NamedAxis.CHANNEL]),
        (x,),
    )


def test_eval_mode_uses_frozen_statistics():
    norm = BatchNorm2d(2).double()
    with torch.no_grad():
        norm.running_mean.copy_(torch.tensor([1.0, -1.0]))
        norm.running_var.copy_(torch.tensor([4.0, 1.0]))
    norm.eval()
    x = torch.ones(1, 2, 2, 2, dtype=torch.float64)
    out = norm(x)
    torch.testing.assert_close(out[0, 0], torch.full((2, 2), 0.0, dtype=torch.float64))
    expected = 2.0 / np.sqrt(1.0 + 1e-5)
    torch.testing.assert_close(out[0, 1], torch.full((2, 2), expected, dtype=torch.float64))
    torch.testing.assert_close(norm.running_mean, torch.tensor([1.0, -1.0], dtype=torch.float64))


def test_wrong_input_rank():
    with pytest.raises(ValueError):
        BatchNorm2d(3)(torch.zeros(2, 3, 4))


def test_make_norm():
    assert isinstance(make_norm("batch", 4, 3), BatchNorm3d)
    group = make_norm("group", 12, 2)
    assert isinstance(group, GroupNorm) and group.num_groups == 4
    with pytest.raises(ValueError):
        make_norm("layer", 4, 2)


def _small_graph() -> Graph:
    return Graph(
        1,
        [
            ("conv", LayerSpec(LayerKind.CONV2D, 1, 4), ["input"]),
            ("norm", LayerSpec(LayerKind.NORM, 4, 4), ["conv"]),
            ("relu", LayerSpec(LayerKind.RELU), ["norm"]),
            ("down", LayerSpec(LayerKind.DOWNSAMPLE, 4, 6, dims=2), ["relu"]),
            ("up", LayerSpec(LayerKind.UPSAMPLE_NEAREST), ["down"]),
            ("cat", LayerSpec(LayerKind.CONCAT), ["up", "input"]),
        ],
    )


def test_graph_channels_and_shape():
    graph = _small_graph()
    assert graph.out_channels == 7
    out = forward(graph, torch.randn(2, 1, 8, 8))
    assert out.shape == (2, 7, 8, 8)


def test_graph_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        Graph(1, [("conv", LayerSpec(LayerKind.CONV2D, 3, 4), ["input"])])


def test_graph_rejects_undefined_input():
    with pytest.raises(ValueError):
        Graph(1, [("conv", LayerSpec(LayerKind.CONV2D, 1, 4), ["missing"])])


def test_graph_concat_spatial_mismatch():
    graph = Graph(
        1,
        [
            ("down", LayerSpec(LayerKind.DOWNSAMPLE, 1, 2), ["input"]),
            ("cat", LayerSpec(LayerKind.CONCAT), ["down", "input"]),
        ],
    )
    with pytest.raises(ShapeMismatch):
        graph(torch.randn(1, 1, 8, 8))


def test_graph_reports_non_finite():
    graph = Graph(1, [("relu", LayerSpec(LayerKind.RELU), ["input"])])
    with pytest.raises(NonFiniteFault):
        graph(torch.tensor([[[[float("nan")]]]]))


def test_check_finite_carries_iteration():
    with pytest.raises(NonFiniteFault) as info:
        check_finite(torch.tensor([1.0, float("inf")]), "loss", iteration=17)
    assert info.value.iteration == 17


def test_flatten_layout():
    x = torch.arange(2 * 3 * 4 * 5, dtype=torch.float32).reshape(1, 2, 3, 4, 5)
    out = flatten_3d_to_2d(x)
    assert out.shape == (1, 6, 4, 5)
    for k in range(2):
        for j in range(3):
            torch.testing.assert_close(out[0, k * 3 + j], x[0, k, j])
    with pytest.raises(ShapeMismatch):
        flatten_3d_to_2d(torch.zeros(1, 2, 3, 4))


def test_flatten_spec_tracks_depth():
    spec = LayerSpec(LayerKind.FLATTEN_3D_TO_2D, depth=8)
    assert spec.out_channels([4]) == 32


def test_backward_matches_autograd():
    torch.manual_seed(5)
    graph = _small_graph().double()
    x = torch.randn(2, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    seed = torch.randn(2, 7, 8, 8, dtype=torch.float64)
    grads = backward(graph, graph(x), seed, inputs=[x])
    expected = torch.autograd.grad((graph(x) * seed).sum(), [p for p in graph.parameters()] + [x])
    names = [n for n, _ in graph.named_parameters()]
    for name, g in zip(names + ["input.0"], expected):
        torch.testing.assert_close(grads[name], g)


@pytest.mark.parametrize("stride,in_ch,out_ch", [(1, 4, 4), (2, 4, 8)])
def test_residual_block_shapes(stride, in_ch, out_ch):
    block = ResidualBlock(in_ch, out_ch, stride=stride)
    out = block(torch.randn(2, in_ch, 8, 8))
    assert out.shape == (2, out_ch, 8 // stride, 8 // stride)
    assert bool((out >= 0).all())


def test_init_weights_is_seeded_and_isolated():
    a = init_weights(_small_graph(), seed=3)
    b = _small_graph()
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    init_weights(b, seed=3)
    after = torch.rand(1)
    torch.testing.assert_close(before, after)
    for pa, pb in zip(a.parameters(), b.parameters()):
        torch.testing.assert_close(pa, pb, rtol=0, atol=0)
    assert all(float(m.bias.abs().sum()) == 0 for m in a.modules() if isinstance(m, nn.Conv2d))


def test_cyclic_lr_waveform():
    cfg = TrainConfig(lr_min=1e-3, lr_max=1e-2, cycle_half_steps=100)
    assert cyclic_lr(cfg, 0) == pytest.approx(1e-3)
    assert cyclic_lr(cfg, 50) == pytest.approx(5.5e-3)
    assert cyclic_lr(cfg, 100) == pytest.approx(1e-2)
    assert cyclic_lr(cfg, 150) == pytest.approx(5.5e-3)
    assert cyclic_lr(cfg, 200) == pytest.approx(1e-3)


@pytest.mark.parametrize("weight_decay", [0.0, 0.01])
def test_sgd_step_matches_torch(weight_decay):
    cfg = TrainConfig(lr_min=1e-3, lr_max=1e-2, cycle_half_steps=3, momentum=0.9, weight_decay=weight_decay)
    torch.manual_seed(6)
    ours = [torch.randn(3, 2, dtype=torch.float64), torch.randn(4, dtype=torch.float64)]
    ref = [p.clone().requires_grad_() for p in ours]
    optimizer, scheduler = make_optimizer(ref, cfg)
    state = {}
    for step in range(10):
        grads = [torch.randn_like(p) for p in ours]
        sgd_step(ours, grads, state, cfg, step)
        for p, g in zip(ref, grads):
            p.grad = g.clone()
        optimizer.step()
        scheduler.step()
    for p, q in zip(ours, ref):
        torch.testing.assert_close(p, q.detach())


def test_sgd_step_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        sgd_step([torch.zeros(3)], [torch.zeros(4)], {}, TrainConfig(), 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_min=1e-2, lr_max=1e-3).validate()
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0).validate()


def test_checkpoint_round_trip(tmp_path):
    graph = init_weights(_small_graph(), seed=7)
    graph(torch.randn(2, 1, 8, 8))
    path = save_checkpoint(graph, tmp_path / "net", {"config": {"rtpi.norm": "batch"}})
    assert path.suffix == ".ckpt"
    assert checkpoint_meta(path) == {"config": {"rtpi.norm": "batch"}}
    other = init_weights(_small_graph(), seed=8)
    meta = load_checkpoint(other, tmp_path / "net")
    assert meta["config"]["rtpi.norm"] == "batch"
    for (name, a), (_, b) in zip(graph.state_dict().items(), other.state_dict().items()):
        assert a.dtype == b.dtype, name
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_checkpoint_truncated_payload(tmp_path):
    graph = _small_graph()
    save_checkpoint(graph, tmp_path / "net")
    payload = tmp_path / "net.ckraw"
    data = np.fromfile(payload, dtype="<f4")
    data[:-1].tofile(payload)
    with pytest.raises(SizeMismatch):
        load_checkpoint(_small_graph(), tmp_path / "net")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "net.ckpt").write_text("not a checkpoint\n")
    (tmp_path / "net.ckraw").write_bytes(b"")
    with pytest.raises(MalformedHeader):
        load_checkpoint(_small_graph(), tmp_path / "net.ckpt")


def _rewrite_version(path, version: str) -> None:
    lines = path.read_text().splitlines()
    assert lines[1].startswith("version ")
    lines[1] = f"version {version}"
    path.write_text("\n".join(lines) + "\n")


def test_checkpoint_records_writer_version(tmp_path):
    path = save_checkpoint(_small_graph(), tmp_path / "net")
    assert path.read_text().splitlines()[1] == f"version {__version__.base}"


def test_checkpoint_from_newer_release_warns(tmp_path, caplog):
    path = save_checkpoint(_small_graph(), tmp_path / "net")
    _rewrite_version(path, "999.0.0")
    with caplog.at_level(logging.WARNING, logger="drreg.nn.core"):
        load_checkpoint(_small_graph(), path)
    assert "newer than the running" in caplog.text

    caplog.clear()
    _rewrite_version(path, "0.0.0")
    with caplog.at_level(logging.WARNING, logger="drreg.nn.core"):
        load_checkpoint(_small_graph(), path)
    assert "newer than the running" not in caplog.text


def test_checkpoint_bad_version(tmp_path):
    path = save_checkpoint(_small_graph(), tmp_path / "net")
    _rewrite_version(path, "not-a-version")
    with pytest.raises(MalformedHeader):
        load_checkpoint(_small_graph(), path)


@pytest.mark.parametrize(
    "a,b,op",
    [
        ("0.1.0+gitabc", "0.1.0", "eq"),
        ("0.1.0+gitabc", "0.1.0+gitdef", "eq"),
        ("0.1.0", "0.2.0", "lt"),
        ("0.10.0", "0.9.0", "gt"),
    ],
)
def test_version_compares_by_release(a, b, op):
    version = DrregVersion(a)
    assert getattr(operator, op)(version, b)
    assert version.base == a.split("+")[0]
