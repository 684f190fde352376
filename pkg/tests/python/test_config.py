# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause

import pytest

from drreg import ConfigError, Intrinsics
from drreg.config import (
    RunConfig,
    apply_pairs,
    as_mapping,
    config_hash,
    load_kv_file,
    parse_kv_lines,
    preset,
    render_pairs,
)


def test_parse_lines():
    lines = [
        "# a comment",
        "",
        "k.det_px = 32 32",
        "opt.metric=nccl:16   # trailing comment",
    ]
    assert parse_kv_lines(lines) == [("k.det_px", "32 32"), ("opt.metric", "nccl:16")]


def test_parse_reports_line_number():
    with pytest.raises(ConfigError, match="cfg:2"):
        parse_kv_lines(["opt.metric=gc", "no separator here"], source="cfg")


def test_apply_pairs_coerces_by_field_type():
    cfg = apply_pairs(
        RunConfig(),
        [
            ("k.det_px", "32,32"),
            ("k.step_mm", "0.5"),
            ("fine.encoder.kind", "stem"),
            ("fine.share_weights", "yes"),
            ("study.methods", "initial, opt-gc"),
            ("rtpi.head_scale", "1 2 3 4 5 6"),
            ("study_dist.rot_sigma_deg", "3 3 3"),
            ("rtpi_train.iterations", "10"),
        ],
    )
    assert cfg.k.det_px == (32, 32)
    assert cfg.k.step_mm == 0.5
    assert cfg.fine.encoder.kind == "stem"
    assert cfg.fine.share_weights is True
    assert cfg.study.methods == ("initial", "opt-gc")
    assert cfg.rtpi.head_scale == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    assert cfg.study_dist.rot_sigma_deg == (3.0, 3.0, 3.0)
    assert cfg.rtpi_train.iterations == 10
    assert apply_pairs(cfg, [("k.step_mm", "none")]).k.step_mm is None


def test_apply_pairs_does_not_mutate():
    base = RunConfig()
    apply_pairs(base, [("opt.max_iters", "3")])
    assert base.opt.max_iters == RunConfig().opt.max_iters


@pytest.mark.parametrize(
    "pair",
    [
        ("nothing.here", "1"),
        ("opt.nothing", "1"),
        ("opt.max_iters.deeper", "1"),
        ("opt.max_iters", "ten"),
        ("k.det_px", "32"),
        ("study.timing", "maybe"),
        # rejected by the dataclass itself
        ("k.siso_mm", "5000"),
        ("study_dist.trans_sigma_mm", "1 -1 1"),
    ],
)
def test_apply_pairs_rejects(pair):
    with pytest.raises(ConfigError):
        apply_pairs(RunConfig(), [pair])


@pytest.mark.parametrize("name", ["toy", "full"])
def test_render_round_trip(name):
    target = preset(name)
    pairs = parse_kv_lines(render_pairs(target).splitlines())
    assert apply_pairs(preset("toy"), pairs) == target
    assert config_hash(apply_pairs(preset("full"), pairs)) == config_hash(target)


def test_load_kv_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy study\nstudy.n_cases=7\nk.det_px=48 48\n")
    cfg = apply_pairs(RunConfig(), load_kv_file(path))
    assert cfg.study.n_cases == 7
    assert cfg.k == Intrinsics(det_px=(48, 48), px_spacing_mm=RunConfig().k.px_spacing_mm)


def test_config_hash():
    assert config_hash(RunConfig()) == config_hash(RunConfig())
    changed = apply_pairs(RunConfig(), [("study.seed", "1")])
    assert config_hash(changed) != config_hash(RunConfig())
    assert len(config_hash(RunConfig())) == 64


def test_presets(monkeypatch):
    full = preset("full")
    assert full.k.det_px == (256, 256)
    assert full.rtpi_train.batch_size == 16
    assert full.fine_train.batch_size == 4
    assert (full.fine_train.lr_min, full.fine_train.lr_max) == (1e-4, 1e-3)
    assert full.rtpi_dist.trans_sigma_mm == (100.0, 30.0, 15.0)
    full.rtpi.validate()
    full.fine.encoder.validate()

    monkeypatch.setenv("DRREG_PRESET", "full")
    assert preset() == full
    monkeypatch.setenv("DRREG_PRESET", "huge")
    with pytest.raises(ConfigError):
        preset()
    with pytest.raises(ConfigError):
        preset("huge")


def test_toy_preset_is_consistent():
    toy = preset("toy")
    toy.rtpi.validate()
    toy.fine.encoder.validate()
    assert toy.k.width == toy.rtpi.image_size == toy.fine.encoder.image_size
    assert toy.phantom.dims[0] == toy.rtpi.volume_size


def test_as_mapping_prefix():
    mapping = as_mapping(RunConfig().opt, prefix="opt.")
    assert mapping["opt.metric"] == "gc"
    assert mapping["opt.fd_step"] == "0.05 0.05"
    assert apply_pairs(RunConfig(), mapping.items()) == RunConfig()
