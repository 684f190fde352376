# SPDX-FileCopyrightText: Copyright (c) 2025-present drreg developers.
# All rights reserved.
# SPDX-License-Identifier: BSD-3-Clause
"""Line-oriented key=value configuration and the toy / full presets.

A configuration file holds one `section.field=value` per line; `#` starts a
comment and blank lines are ignored. Values are coerced by the dataclass
field type: tuples are space- or comma-separated lists, booleans accept
true/false/1/0/yes/no. Unknown sections or fields raise ConfigError.
"""
import dataclasses
import enum
import hashlib
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Tuple, Union

from .distributions import PoseDistribution
from .errors import ConfigError
from .fine_reg import EncoderConfig, FineRegConfig, InferenceSchedule
from .nn import TrainConfig
from .pipeline import OptConfig
from .projector import Intrinsics
from .rtpi import RtpiConfig
from .volume_store import PhantomSpec


__all__ = [
    "RunConfig",
    "StudyConfig",
    "preset",
    "preset_name",
    "parse_kv_lines",
    "load_kv_file",
    "apply_pairs",
    "config_hash",
    "render_pairs",
    "as_mapping",
]


PRESETS = ("toy", "full")


@dataclass
class StudyConfig:
    n_cases: int = 50
    seed: int = 0
    methods: Tuple[str, ...] = ("initial", "opt-gc", "sopi")
    # "pair": init and truth drawn independently; "offset": init = truth + draw
    sampling: str = "pair"
    workers: int = 1
    # False writes time_s=0 so repeated runs are byte-identical
    timing: bool = False

    def validate(self) -> None:
        if self.n_cases < 1:
            raise ValueError(f"n_cases must be >= 1, got {self.n_cases}")
        if self.sampling not in ("pair", "offset"):
            raise ValueError(f"sampling must be 'pair' or 'offset', got {self.sampling!r}")


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    k: Intrinsics = field(default_factory=lambda: Intrinsics.toy(64))
    rtpi: RtpiConfig = field(default_factory=RtpiConfig)
    rtpi_train: TrainConfig = field(default_factory=TrainConfig)
    rtpi_dist: PoseDistribution = field(default_factory=PoseDistribution.toy)
    fine: FineRegConfig = field(default_factory=FineRegConfig)
    fine_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(batch_size=4, iterations=1000, lr_min=1e-4, lr_max=1e-3)
    )
    fine_dist: PoseDistribution = field(default_factory=PoseDistribution.toy)
    sched: InferenceSchedule = field(default_factory=InferenceSchedule)
    opt: OptConfig = field(default_factory=OptConfig)
    study_dist: PoseDistribution = field(default_factory=PoseDistribution.toy)
    study: StudyConfig = field(default_factory=StudyConfig)


def preset_name() -> str:
    name = os.getenv("DRREG_PRESET", "toy").strip().lower()
    if name not in PRESETS:
        raise ConfigError(f"DRREG_PRESET must be one of {PRESETS}, got {name!r}")
    return name


def preset(name: str = None) -> RunConfig:
    """`toy` runs on a desk in minutes; `full` carries the full-resolution training settings."""
    name = name or preset_name()
    if name == "toy":
        return RunConfig()
    if name != "full":
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")
    return RunConfig(
        phantom=PhantomSpec(
            body_radius_mm=20.0,
            body_height_mm=25.0,
            gap_mm=8.0,
            process_size_mm=15.0,
            dims=(128, 128, 128),
            spacing_mm=(1.0, 1.0, 1.0),
        ),
        k=Intrinsics(),
        rtpi=RtpiConfig(
            volume_size=128,
            image_size=256,
            vol_channels=(8, 16),
            img_channels=(16, 32, 64),
            trunk_channels=128,
            head_scale=(20.0, 20.0, 20.0, 100.0, 30.0, 15.0),
        ),
        rtpi_train=TrainConfig(batch_size=16, iterations=200_000),
        rtpi_dist=PoseDistribution.rtpi_full(),
        fine=FineRegConfig(
            encoder=EncoderConfig(
                image_size=256,
                stem_channels=(16, 16, 32),
                down_channels=(48, 64),
                assistant_channels=(64, 96),
                ccu_channels=32,
                out_channels=32,
                bottlenecks=2,
            )
        ),
        fine_train=TrainConfig(batch_size=4, iterations=200_000, lr_min=1e-4, lr_max=1e-3),
        fine_dist=PoseDistribution.fine_full(),
        study_dist=PoseDistribution.rtpi_full(),
    )


def parse_kv_lines(lines: Iterable[str], source: str = "<config>") -> List[Tuple[str, str]]:
    pairs = []
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{number}: expected key=value, got {raw.strip()!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_kv_file(path: Union[str, Path]) -> List[Tuple[str, str]]:
    with open(path, "r") as f:
        return parse_kv_lines(f, source=str(path))


_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _coerce(text: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is Union:
            inner = [a for a in args if a is not type(None)]
            if text.lower() in ("none", ""):
                return None
            return _coerce(text, inner[0], key)
        if origin in (tuple, Tuple):
            items = [t for t in text.replace(",", " ").split() if t]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(t, args[0], key) for t in items)
            if len(items) != len(args):
                raise ConfigError(f"{key}: expected {len(args)} values, got {len(items)}")
            return tuple(_coerce(t, a, key) for t, a in zip(items, args))
        if hint is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(hint, type) and issubclass(hint, enum.Enum):
            return hint(text)
        if hint in (int, float, str):
            return hint(text)
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot read {text!r} as {hint}: {err}") from err
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _set_path(obj: Any, path: List[str], text: str, key: str) -> Any:
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"{key}: {type(obj).__name__} has no fields")
    hints = typing.get_type_hints(type(obj))
    name = path[0]
    if name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown key {key!r}")
    if len(path) == 1:
        value = _coerce(text, hints[name], key)
    else:
        value = _set_path(getattr(obj, name), path[1:], text, key)
    try:
        return dataclasses.replace(obj, **{name: value})
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"{key}={text}: {err}") from err


def apply_pairs(cfg: RunConfig, pairs: Iterable[Tuple[str, str]]) -> RunConfig:
    """Returns a copy of `cfg` with dotted keys (e.g. `fine.encoder.kind`) set."""
    for key, text in pairs:
        cfg = _set_path(cfg, key.split("."), text, key)
    return cfg


def _flatten(obj: Any, prefix: str = "") -> Dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, name + "."))
        elif isinstance(value, tuple):
            out[name] = " ".join(v if isinstance(v, str) else repr(v) for v in value)
        elif isinstance(value, enum.Enum):
            out[name] = str(value.value)
        elif isinstance(value, str):
            out[name] = value
        else:
            out[name] = repr(value)
    return out


def render_pairs(cfg: Any) -> str:
    """The sorted key=value rendering; load_kv_file reads it back."""
    return "".join(f"{k}={v}\n" for k, v in sorted(_flatten(cfg).items()))


def config_hash(cfg: Any) -> str:
    return hashlib.sha256(render_pairs(cfg).encode("utf-8")).hexdigest()


def as_mapping(cfg: Any, prefix: str = "") -> Mapping[str, str]:
    """Flat `{dotted key: text}`; `apply_pairs(..., mapping.items())` restores it."""
    return dict(sorted(_flatten(cfg, prefix).items()))
