# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Command-line entry point.

Every subcommand takes the same configuration flags (`--preset`,
`--config FILE`, repeated `--set key=value`) and writes its outputs plus a
`manifest.json` into `--out`. Exit status: 0 on success, 2 on usage or
configuration errors, 1 on runtime failures.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import config as cfglib
from .config import RunConfig
from .drreg_version import __version__
from .errors import ConfigError, DrregError
from .fine_reg import FineRegNet, train_finereg
from .harness import (
    DEFAULT_ABLATION,
    METHODS,
    AblationSpec,
    Case,
    StudyContext,
    evaluate_case,
    run_ablation,
    run_study,
)
from .image_io import load_image, save_image, write_pgm16, write_ppm
from .nn import checkpoint_meta, load_checkpoint, save_checkpoint
from .pose_math import Pose
from .projector import overlay, project
from .rtpi import RtpiNet, train_rtpi
from .volume_store import (
    Volume,
    VoxelMask,
    load_mask,
    load_volume,
    make_phantom,
    save_mask,
    save_volume,
    threshold_mask,
)


logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class RunDir:
    """An output directory that remembers what was written into it."""

    def __init__(self, path: str, command: str, cfg: RunConfig, seed: int):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.outputs: List[str] = []

    def __truediv__(self, name: str) -> Path:
        self.outputs.append(name)
        return self.path / name

    def add(self, written: Path) -> None:
        """Records a file whose name was chosen by a writer (e.g. a header)."""
        self.outputs.append(Path(written).relative_to(self.path).as_posix())

    def write_manifest(self, extra: Optional[dict] = None) -> Path:
        manifest = {
            "command": self.command,
            "config_hash": cfglib.config_hash(self.cfg),
            "seed": self.seed,
            "versions": {
                "drreg": str(__version__),
                "torch": torch.__version__,
                "numpy": np.__version__,
            },
            "outputs": sorted(set(self.outputs)),
        }
        manifest.update(extra or {})
        path = self.path / MANIFEST
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def _read_pose(path: str) -> Pose:
    with open(path, "r") as f:
        try:
            return Pose.from_json(f.read())
        except (ValueError, KeyError, TypeError) as err:
            raise ConfigError(f"{path}: not a pose file: {err}") from err


def _write_pose(pose: Pose, path: Path) -> None:
    with open(path, "w") as f:
        f.write(pose.to_json(indent=2, sort_keys=True) + "\n")


def _split_pair(text: str) -> Tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"--set expects key=value, got {text!r}")
    return key.strip(), value.strip()


def _load_config(args) -> RunConfig:
    cfg = cfglib.preset(args.preset)
    if args.config:
        cfg = cfglib.apply_pairs(cfg, cfglib.load_kv_file(args.config))
    return cfglib.apply_pairs(cfg, [_split_pair(s) for s in args.set])


def _anatomy(args, cfg: RunConfig) -> Tuple[Volume, VoxelMask]:
    """The volume from --volume, or the configured phantom."""
    if not args.volume:
        return make_phantom(cfg.phantom)
    volume = load_volume(args.volume)
    if args.mask:
        return volume, load_mask(args.mask)
    return volume, threshold_mask(volume, args.mask_threshold)


def _config_meta(cfg: RunConfig, *sections: str) -> dict:
    pairs: Dict[str, str] = {}
    for section in sections:
        pairs.update(cfglib.as_mapping(getattr(cfg, section), prefix=section + "."))
    return {"config": pairs}


def _with_checkpoint_config(cfg: RunConfig, path: str) -> RunConfig:
    """Architecture settings travel with the checkpoint and win over flags."""
    return cfglib.apply_pairs(cfg, checkpoint_meta(path).get("config", {}).items())


def _load_rtpi(path: Optional[str], cfg: RunConfig) -> Optional[RtpiNet]:
    if not path:
        return None
    net = RtpiNet(_with_checkpoint_config(cfg, path).rtpi)
    load_checkpoint(net, path)
    return net


def _load_fine(path: Optional[str], cfg: RunConfig) -> Optional[FineRegNet]:
    if not path:
        return None
    nets = FineRegNet(_with_checkpoint_config(cfg, path).fine)
    load_checkpoint(nets, path)
    return nets


def _context(args, cfg: RunConfig, volume: Volume, mask: VoxelMask) -> StudyContext:
    return StudyContext(
        volume=volume,
        mask=mask,
        k=cfg.k,
        rtpi=_load_rtpi(args.rtpi, cfg),
        fine=_load_fine(args.fine, cfg),
        stem=_load_fine(getattr(args, "stem", None), cfg),
        sched=cfg.sched,
        opt=cfg.opt,
    )


def _phantom_pool(cfg: RunConfig, n: int) -> List[Tuple[Volume, VoxelMask]]:
    seed = cfg.phantom.seed
    return [make_phantom(dataclasses.replace(cfg.phantom, seed=seed + i)) for i in range(n)]


def cmd_phantom(args, cfg: RunConfig) -> None:
    out = RunDir(args.out, "phantom", cfg, cfg.phantom.seed)
    volume, mask = make_phantom(cfg.phantom)
    out.add(save_volume(volume, out.path / "phantom"))
    out.add(out.path / "phantom.vraw")
    out.add(save_mask(mask, out.path / "mask"))
    out.add(out.path / "mask.vraw")
    out.write_manifest({"bone_voxels": mask.count()})


def cmd_render(args, cfg: RunConfig) -> None:
    pose = _read_pose(args.pose)
    out = RunDir(args.out, "render", cfg, cfg.phantom.seed)
    volume, _ = _anatomy(args, cfg)
    drr = project(volume, pose, cfg.k)
    out.add(save_image(drr, out.path / "drr"))
    out.add(out.path / "drr.iraw")
    write_pgm16(drr, out / "drr.pgm")
    if args.fixed:
        write_ppm(overlay(load_image(args.fixed), drr), out / "overlay.ppm")
    out.write_manifest({"pose": pose.to_dict()})


def cmd_register(args, cfg: RunConfig) -> None:
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; known: {sorted(METHODS)}")
    out = RunDir(args.out, "register", cfg, cfg.opt.seed)
    volume, mask = _anatomy(args, cfg)
    fixed = load_image(args.fixed)
    init = _read_pose(args.init) if args.init else Pose.identity()
    truth = _read_pose(args.truth) if args.truth else init
    ctx = _context(args, cfg, volume, mask)

    result = METHODS[args.method](ctx, Case(0, truth, init), fixed)
    if not cfg.study.timing:
        result.wall_time_s = 0.0
    with open(out / "result.json", "w") as f:
        f.write(result.to_json(indent=2, sort_keys=True) + "\n")
    _write_pose(result.final_pose, out / "pose.json")
    result.trace_csv(out / "trace.csv")
    write_ppm(overlay(fixed, project(volume, result.final_pose, cfg.k)), out / "overlay.ppm")
    extra = {"method": args.method}
    if args.truth:
        metrics = evaluate_case(truth, result, args.method)
        extra["metrics"] = metrics.to_dict()
    out.write_manifest(extra)


def cmd_train_rtpi(args, cfg: RunConfig) -> None:
    out = RunDir(args.out, "train-rtpi", cfg, cfg.rtpi_train.seed)
    volumes = [v for v, _ in _phantom_pool(cfg, args.phantoms)]
    net = RtpiNet(cfg.rtpi, seed=cfg.rtpi_train.seed)
    net, curve = train_rtpi(net, volumes, cfg.rtpi_train, cfg.k, dist=cfg.rtpi_dist)
    curve.to_csv(out / "loss.csv")
    out.add(save_checkpoint(net, out.path / "rtpi", _config_meta(cfg, "rtpi")))
    out.add(out.path / "rtpi.ckraw")
    out.write_manifest({"final_loss": curve.losses[-1] if curve.losses else None})


def cmd_train_fine(args, cfg: RunConfig) -> None:
    out = RunDir(args.out, "train-fine", cfg, cfg.fine_train.seed)
    nets = FineRegNet(cfg.fine, seed=cfg.fine_train.seed)
    nets, curve = train_finereg(
        nets, _phantom_pool(cfg, args.phantoms), cfg.fine_train, cfg.k, dist=cfg.fine_dist
    )
    curve.to_csv(out / "loss.csv")
    out.add(save_checkpoint(nets, out.path / "fine", _config_meta(cfg, "fine")))
    out.add(out.path / "fine.ckraw")
    out.write_manifest({"final_loss": curve.losses[-1] if curve.losses else None})


def _methods(text: Optional[str], default: Sequence[str]) -> List[str]:
    if not text:
        return list(default)
    return [m.strip() for m in text.split(",") if m.strip()]


def _study_args(args, cfg: RunConfig) -> RunConfig:
    study = cfg.study
    if args.n is not None:
        study = dataclasses.replace(study, n_cases=args.n)
    if args.seed is not None:
        study = dataclasses.replace(study, seed=args.seed)
    if args.workers is not None:
        study = dataclasses.replace(study, workers=args.workers)
    try:
        study.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return dataclasses.replace(cfg, study=study)


def _offset(cfg: RunConfig):
    return cfg.fine_dist if cfg.study.sampling == "offset" else None


def cmd_simulate(args, cfg: RunConfig) -> None:
    cfg = _study_args(args, cfg)
    study = cfg.study
    methods = _methods(args.methods, study.methods)
    out = RunDir(args.out, "simulate", cfg, study.seed)
    volume, mask = _anatomy(args, cfg)
    report = run_study(
        _context(args, cfg, volume, mask),
        methods,
        study.n_cases,
        cfg.study_dist,
        study.seed,
        offset=_offset(cfg),
        workers=study.workers,
        timing=study.timing,
    )
    report.to_csv(out / "report.csv")
    report.write_summary(out / "summary.json", {"n_cases": study.n_cases, "seed": study.seed})
    out.write_manifest({"methods": methods})


def cmd_ablate(args, cfg: RunConfig) -> None:
    cfg = _study_args(args, cfg)
    study = cfg.study
    specs = [AblationSpec.parse(row) for row in _methods(args.rows, DEFAULT_ABLATION)]
    out = RunDir(args.out, "ablate", cfg, study.seed)
    volume, mask = _anatomy(args, cfg)
    reports = run_ablation(
        _context(args, cfg, volume, mask),
        specs,
        study.n_cases,
        cfg.study_dist,
        study.seed,
        offset=_offset(cfg),
        workers=study.workers,
        timing=study.timing,
    )
    summary = {}
    for name, report in reports.items():
        stem = "ablation_" + name.replace("+", "_")
        report.to_csv(out / f"{stem}.csv")
        summary[name] = report.summary_dict()
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    out.write_manifest({"rows": [s.name for s in specs]})


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=cfglib.PRESETS, default=None, help="defaults to $DRREG_PRESET or toy")
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key"
    )
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--out", default="drreg_run", help="run directory")
    return common


def _anatomy_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--volume", help="volume header (.vh); defaults to the configured phantom")
    parser.add_argument("--mask", help="bone mask header (.vh)")
    parser.add_argument(
        "--mask-threshold", type=float, default=0.5, help="bone threshold when --volume comes without --mask"
    )


def _network_args(parser: argparse.ArgumentParser, stem: bool = False) -> None:
    parser.add_argument("--rtpi", help="initialization network checkpoint")
    parser.add_argument("--fine", help="fine registration network checkpoint")
    if stem:
        parser.add_argument("--stem", help="stem-only encoder checkpoint")


def _study_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n", type=int, default=None, help="number of cases")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)


def make_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="drreg",
        description="Two-stage 2D/3D rigid registration of X-ray images to CT volumes.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"drreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="write the configured phantom and its bone mask")

    p = sub.add_parser("render", parents=[common], help="render a DRR at a pose")
    _anatomy_args(p)
    p.add_argument("--pose", required=True, help="pose JSON")
    p.add_argument("--fixed", help="fixed image header (.ih) for an overlay")

    p = sub.add_parser("register", parents=[common], help="register one fixed image")
    _anatomy_args(p)
    _network_args(p, stem=True)
    p.add_argument("--fixed", required=True, help="fixed image header (.ih)")
    p.add_argument("--method", default="sopi", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--init", help="initial pose JSON (identity if omitted)")
    p.add_argument("--truth", help="ground-truth pose JSON; adds error metrics to the manifest")

    for name, helptext in (("train-rtpi", "train the initialization network"), ("train-fine", "train the encoders")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--phantoms", type=int, default=4, help="phantoms in the training pool")

    p = sub.add_parser("simulate", parents=[common], help="run a simulation study")
    _anatomy_args(p)
    _network_args(p, stem=True)
    _study_flags(p)
    p.add_argument("--methods", help="comma-separated methods (default: study.methods)")

    p = sub.add_parser("ablate", parents=[common], help="run the ablation rows")
    _anatomy_args(p)
    _network_args(p, stem=True)
    _study_flags(p)
    p.add_argument("--rows", help=f"comma-separated rows (default: {','.join(DEFAULT_ABLATION)})")
    return parser


COMMANDS = {
    "phantom": cmd_phantom,
    "render": cmd_render,
    "register": cmd_register,
    "train-rtpi": cmd_train_rtpi,
    "train-fine": cmd_train_fine,
    "simulate": cmd_simulate,
    "ablate": cmd_ablate,
}


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        # argparse exits 0 for --help/--version and 2 for usage errors
        return int(exit_.code or 0)
    _configure_logging(args.verbose)
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        parser.print_usage(sys.stderr)
        print(f"drreg {args.command}: error: {err}", file=sys.stderr)
        return 2
    except (DrregError, OSError) as err:
        logger.debug("drreg %s failed: argv=%s", args.command, list(argv or sys.argv[1:]), exc_info=True)
        print(f"drreg {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        # dataclass validation of a configured value
        parser.print_usage(sys.stderr)
        print(f"drreg {args.command}: error: {err}", file=sys.stderr)
        return 2
    return 0
