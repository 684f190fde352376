# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause

import json

import pytest

from drreg import Pose, load_image
from drreg.cli import main

SMALL = ["--set", "k.det_px=32 32", "--set", "opt.max_iters=2"]

TINY_PHANTOM = [
    "--set", "phantom.dims=16 16 16",
    "--set", "phantom.spacing_mm=4 4 4",
    "--set", "k.det_px=32 32",
]

TINY_RTPI = [
    "--set", "rtpi.volume_size=16",
    "--set", "rtpi.image_size=32",
    "--set", "rtpi.vol_channels=2 4",
    "--set", "rtpi.img_channels=2 4 4",
    "--set", "rtpi.trunk_channels=8",
    "--set", "rtpi.n_res_blocks=1",
    "--set", "rtpi_train.iterations=2",
    "--set", "rtpi_train.batch_size=1",
]

TINY_FINE = [
    "--set", "fine.encoder.image_size=32",
    "--set", "fine.encoder.stem_channels=2 2 2",
    "--set", "fine.encoder.down_channels=4 4",
    "--set", "fine.encoder.assistant_channels=4 4",
    "--set", "fine.encoder.ccu_channels=2",
    "--set", "fine.encoder.out_channels=2",
    "--set", "fine_train.iterations=1",
    "--set", "fine_train.batch_size=1",
]


def _pose_file(path, pose: Pose):
    path.write_text(pose.to_json())
    return str(path)


def _manifest(directory):
    return json.loads((directory / "manifest.json").read_text())


@pytest.fixture(scope="module")
def rendered(tmp_path_factory):
    root = tmp_path_factory.mktemp("render")
    pose = _pose_file(root / "truth.json", Pose(2.0, -1.0, 3.0, 1.0, 2.0, 0.0))
    assert main(["render", "--pose", pose, "--out", str(root / "drr"), *SMALL]) == 0
    return root


def test_usage_errors(capsys):
    assert main(["render", "--no-such-flag"]) == 2
    assert "usage:" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["teleport"]) == 2


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("drreg ")


def test_phantom(tmp_path):
    out = tmp_path / "phantom"
    assert main(["phantom", "--out", str(out)]) == 0
    manifest = _manifest(out)
    assert manifest["command"] == "phantom"
    assert manifest["outputs"] == ["mask.vh", "mask.vraw", "phantom.vh", "phantom.vraw"]
    assert manifest["bone_voxels"] > 0
    assert set(manifest["versions"]) == {"drreg", "torch", "numpy"}
    assert len(manifest["config_hash"]) == 64


def test_render_outputs(rendered):
    out = rendered / "drr"
    manifest = _manifest(out)
    assert manifest["outputs"] == ["drr.ih", "drr.iraw", "drr.pgm"]
    assert Pose.from_dict(manifest["pose"]) == Pose(2.0, -1.0, 3.0, 1.0, 2.0, 0.0)
    assert load_image(out / "drr.ih").shape == (32, 32)
    assert (out / "drr.pgm").read_bytes().startswith(b"P5\n32 32\n65535\n")


def test_render_overlay(rendered, tmp_path):
    pose = _pose_file(tmp_path / "pose.json", Pose.identity())
    fixed = str(rendered / "drr" / "drr.ih")
    assert main(["render", "--pose", pose, "--fixed", fixed, "--out", str(tmp_path / "o"), *SMALL]) == 0
    assert (tmp_path / "o" / "overlay.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")


def test_render_from_saved_volume(tmp_path):
    assert main(["phantom", "--out", str(tmp_path / "p"), *TINY_PHANTOM]) == 0
    pose = _pose_file(tmp_path / "pose.json", Pose.identity())
    args = ["render", "--pose", pose, "--volume", str(tmp_path / "p" / "phantom.vh"), "--out", str(tmp_path / "r")]
    assert main(args + TINY_PHANTOM) == 0
    assert main(args + ["--mask", str(tmp_path / "p" / "mask.vh")] + TINY_PHANTOM) == 0


def test_runtime_and_config_errors(tmp_path):
    assert main(["render", "--pose", str(tmp_path / "missing.json"), "--out", str(tmp_path / "a")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["render", "--pose", str(bad), "--out", str(tmp_path / "b")]) == 2
    pose = _pose_file(tmp_path / "pose.json", Pose.identity())
    assert main(["render", "--pose", pose, "--set", "k.nothing=1", "--out", str(tmp_path / "c")]) == 2
    assert main(["render", "--pose", pose, "--set", "missing-separator", "--out", str(tmp_path / "d")]) == 2
    cfg = tmp_path / "run.cfg"
    cfg.write_text("k.det_px=32\n")
    assert main(["render", "--pose", pose, "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2


def test_register(rendered, tmp_path):
    init = _pose_file(tmp_path / "init.json", Pose(3.0, -1.0, 3.0, 2.0, 2.0, 0.0))
    args = [
        "register",
        "--fixed", str(rendered / "drr" / "drr.ih"),
        "--init", init,
        "--truth", str(rendered / "truth.json"),
        "--method", "opt-gc",
        "--out", str(tmp_path / "reg"),
        *SMALL,
    ]
    assert main(args) == 0
    out = tmp_path / "reg"
    manifest = _manifest(out)
    assert manifest["method"] == "opt-gc"
    assert {"result.json", "pose.json", "trace.csv", "overlay.ppm"} <= set(manifest["outputs"])
    result = json.loads((out / "result.json").read_text())
    assert result["wall_time_s"] == 0.0
    assert len(result["metric_trace"]) == result["iterations"] + 1
    assert manifest["metrics"]["method"] == "opt-gc"
    final = Pose.from_json((out / "pose.json").read_text())
    assert final == Pose.from_dict(result["final_pose"])


def test_register_errors(rendered, tmp_path):
    fixed = str(rendered / "drr" / "drr.ih")
    assert main(["register", "--fixed", fixed, "--method", "magic", "--out", str(tmp_path / "a"), *SMALL]) == 2
    # sopi needs trained networks
    assert main(["register", "--fixed", fixed, "--method", "sopi", "--out", str(tmp_path / "b"), *SMALL]) == 2


def test_simulate_is_reproducible(tmp_path):
    args = ["simulate", "--methods", "initial,opt-gc", "--n", "2", "--seed", "7", *SMALL]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    for name in ("report.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["seed"] == 7 and summary["n_cases"] == 2
    assert set(summary["methods"]) == {"initial", "opt-gc"}
    lines = (tmp_path / "a" / "report.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2


def test_simulate_argument_errors(tmp_path):
    assert main(["simulate", "--n", "0", "--out", str(tmp_path / "a")]) == 2
    assert main(["simulate", "--methods", "nothing", "--out", str(tmp_path / "b"), *SMALL]) == 2
    assert main(["simulate", "--set", "study.sampling=grid", "--out", str(tmp_path / "c")]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    assert main(["train-rtpi", "--phantoms", "1", "--out", str(root / "rtpi"), *TINY_PHANTOM, *TINY_RTPI]) == 0
    assert main(["train-fine", "--phantoms", "1", "--out", str(root / "fine"), *TINY_PHANTOM, *TINY_FINE]) == 0
    return root


def test_training_outputs(trained):
    for name in ("rtpi", "fine"):
        manifest = _manifest(trained / name)
        assert {"loss.csv", f"{name}.ckpt", f"{name}.ckraw"} <= set(manifest["outputs"])
        assert manifest["final_loss"] is not None
        lines = (trained / name / "loss.csv").read_text().splitlines()
        assert lines[0] == "iter,loss"


def test_checkpoints_carry_architecture(trained, tmp_path):
    # only the anatomy is configured; network sizes come from the checkpoints
    args = [
        "simulate",
        "--methods", "rtpi,fine",
        "--n", "1",
        "--rtpi", str(trained / "rtpi" / "rtpi.ckpt"),
        "--fine", str(trained / "fine" / "fine.ckpt"),
        "--set", "sched.max_iters=2",
        "--set", "sched.rot_freeze_iter=1",
        "--out", str(tmp_path / "sim"),
        *TINY_PHANTOM,
    ]
    assert main(args) == 0
    summary = json.loads((tmp_path / "sim" / "summary.json").read_text())
    assert set(summary["methods"]) == {"rtpi", "fine"}


def test_ablate(trained, tmp_path):
    args = [
        "ablate",
        "--rows", "ce+el,rtpi+ce+el",
        "--n", "1",
        "--rtpi", str(trained / "rtpi" / "rtpi.ckpt"),
        "--fine", str(trained / "fine" / "fine.ckpt"),
        "--set", "sched.max_iters=2",
        "--set", "sched.rot_freeze_iter=1",
        "--out", str(tmp_path / "abl"),
        *TINY_PHANTOM,
    ]
    assert main(args) == 0
    out = tmp_path / "abl"
    assert (out / "ablation_ce_el.csv").exists()
    assert (out / "ablation_rtpi_ce_el.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["ce+el"]["case_digest"] == summary["rtpi+ce+el"]["case_digest"]
    assert _manifest(out)["rows"] == ["ce+el", "rtpi+ce+el"]


def test_ablate_without_stem_encoder(trained, tmp_path):
    args = [
        "ablate",
        "--rows", "rtpi+el",
        "--n", "1",
        "--rtpi", str(trained / "rtpi" / "rtpi.ckpt"),
        "--fine", str(trained / "fine" / "fine.ckpt"),
        "--out", str(tmp_path / "abl"),
        *TINY_PHANTOM,
    ]
    assert main(args) == 2
