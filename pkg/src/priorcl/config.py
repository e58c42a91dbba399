"""Flat ``section.key = value`` run configuration.

Values are JSON literals (numbers, ``true``/``false``, quoted strings,
lists); a bare word is read as a string.  Lines starting with ``#`` are
comments.  Unknown keys are rejected, and every validation problem is
reported at once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .mining import TempSchedule
from .models import EncoderConfig
from .prior_features import BandTable
from .signal_data import AugmentConfig
from .training import TrainConfig


class ConfigValidationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | cache | edf
    per_class: int = 100
    subjects: int = 10
    sample_rate_hz: float = 100.0
    seed: int = 0
    noise_scale: float = 1.0
    amplitude_jitter: float = 0.3
    cache_path: str = ""
    edf_paths: tuple[str, ...] = ()
    label_paths: tuple[str, ...] = ()
    subject_ids: tuple[int, ...] = ()
    channel: str = "EEG Fpz-Cz"
    label_map: str = ""
    trim_wake: bool = False


@dataclass(frozen=True)
class RunConfig:
    profile: str = "published"
    seed: int = 0
    output_dir: str = "runs/default"
    train: TrainConfig = TrainConfig()
    augment: AugmentConfig = AugmentConfig()
    encoder: EncoderConfig = EncoderConfig()
    bands: BandTable = BandTable()
    data: DataConfig = DataConfig()
    knn_neighbors: int = 5
    sweep_ratios: tuple[float, ...] = (0.01, 0.1, 0.2, 0.4, 0.6)
    sweep_taus: tuple[float, ...] = (0.05, 0.07, 0.1, 0.2)


_SECTIONS = {"train": TrainConfig, "augment": AugmentConfig, "encoder": EncoderConfig, "bands": BandTable,
             "data": DataConfig}
_TOP = {"profile", "seed", "output_dir", "knn_neighbors", "sweep_ratios", "sweep_taus"}


def _allowed_keys() -> set[str]:
    keys = set(_TOP)
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if section == "train" and f.name == "schedule":
                keys |= {"train.tau_min", "train.tau_max"}
            else:
                keys.add(f"{section}.{f.name}")
    return keys


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str) -> dict[str, object]:
    entries: dict[str, object] = {}
    problems = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"line {n}: expected 'key = value', got {line!r}")
            continue
        key, value = line.split("=", 1)
        entries[key.strip()] = parse_value(value)
    if problems:
        raise ConfigValidationError(problems)
    return entries


def _coerce(value, default):
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    return value


def build_config(entries: dict[str, object]) -> RunConfig:
    """Resolve key/value entries on top of the selected profile's defaults."""
    problems = []
    allowed = _allowed_keys()
    for key in entries:
        if key not in allowed:
            problems.append(f"unknown key {key!r}")
    profile = entries.get("profile", "published")
    if profile not in ("published", "desk"):
        problems.append(f"profile must be 'published' or 'desk', got {profile!r}")
    base = RunConfig(profile=str(profile))
    train_defaults = asdict(TrainConfig.desk() if profile == "desk" else TrainConfig())
    train_defaults.pop("schedule")
    train_defaults.update(tau_min=0.05, tau_max=0.1)

    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict[str, object] = {}
    for key, value in entries.items():
        if key not in allowed:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            if section == "train":
                default = train_defaults[name]
            else:
                default = getattr(getattr(base, section), name)
        else:
            section, name, default = None, key, getattr(base, key)
        try:
            coerced = _coerce(value, default)
        except TypeError as exc:
            problems.append(f"{key}: {exc}")
            continue
        if section is None:
            top[name] = coerced
        else:
            sections[section][name] = coerced

    built = {}
    train_kw = dict(train_defaults)
    train_kw.update(sections["train"])
    try:
        schedule = TempSchedule(train_kw.pop("tau_min"), train_kw.pop("tau_max"))
        built["train"] = TrainConfig(schedule=schedule, **train_kw)
    except ValueError as exc:
        problems.append(f"train: {exc}")
    for section in ("augment", "encoder", "bands", "data"):
        try:
            built[section] = replace(getattr(base, section), **sections[section])
        except (ValueError, TypeError) as exc:
            problems.append(f"{section}: {exc}")
    if sections["data"].get("source", base.data.source) not in ("synthetic", "cache", "edf"):
        problems.append(f"data.source must be synthetic, cache or edf")
    if problems:
        raise ConfigValidationError(problems)
    return replace(base, **top, **built)


def load_config(path=None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    entries = parse_text(Path(path).read_text()) if path else {}
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not key=value")
            continue
        key, value = item.split("=", 1)
        entries[key.strip()] = parse_value(value)
    if problems:
        raise ConfigValidationError(problems)
    return build_config(entries)


def dump_config(config: RunConfig) -> str:
    """Render every key so the snapshot alone reproduces the run."""
    lines = [f"profile = {json.dumps(config.profile)}", f"seed = {config.seed}",
             f"output_dir = {json.dumps(config.output_dir)}", f"knn_neighbors = {config.knn_neighbors}",
             f"sweep_ratios = {json.dumps(list(config.sweep_ratios))}",
             f"sweep_taus = {json.dumps(list(config.sweep_taus))}"]
    for section in _SECTIONS:
        values = asdict(getattr(config, section))
        if section == "train":
            sched = values.pop("schedule")
            values["tau_min"], values["tau_max"] = sched["tau_min"], sched["tau_max"]
        for name in sorted(values):
            v = values[name]
            v = list(v) if isinstance(v, tuple) else v
            lines.append(f"{section}.{name} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
