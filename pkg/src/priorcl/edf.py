"""EDF reader/writer, channel segmentation into 30 s epochs, and sidecar stage labels.

Only plain EDF is handled: 16-bit little-endian samples in contiguous data
records.  EDF+ annotation channels are read as ordinary signals.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .signal_data import EPOCH_SECONDS, Dataset, Epoch, SleepStage, samples_per_epoch


class EdfError(ValueError):
    """Base class for every structured parse failure."""


class ShortFileError(EdfError):
    pass


class HeaderFieldError(EdfError):
    pass


class HeaderArithmeticError(EdfError):
    pass


class DigitalRangeError(EdfError):
    pass


class PhysicalRangeError(EdfError):
    pass


class UnknownChannelError(LookupError):
    pass


class LabelError(ValueError):
    pass


_FIXED = [("version", 8), ("patient_id", 80), ("recording_id", 80), ("start_date", 8), ("start_time", 8),
          ("header_bytes", 8), ("reserved", 44), ("n_records", 8), ("record_duration", 8), ("n_signals", 4)]
_PER_SIGNAL = [("label", 16), ("transducer", 80), ("physical_dimension", 8), ("physical_min", 8),
               ("physical_max", 8), ("digital_min", 8), ("digital_max", 8), ("prefiltering", 80),
               ("samples_per_record", 8), ("reserved", 32)]
FIXED_HEADER_BYTES = 256
SIGNAL_HEADER_BYTES = 256


def _fit(value, width: int) -> str:
    """Render a number or string into exactly ``width`` ascii characters."""
    if isinstance(value, str):
        text = value
    elif isinstance(value, (int, np.integer)) or float(value).is_integer() and abs(value) < 10 ** (width - 1):
        text = str(int(value))
    else:
        text = repr(float(value))
        for digits in range(width, 0, -1):
            if len(text) <= width:
                break
            text = f"{float(value):.{digits}g}"
    if len(text) > width:
        raise ValueError(f"{value!r} does not fit in {width} characters")
    return text.ljust(width)


@dataclass(frozen=True)
class SignalHeader:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    transducer: str = ""
    physical_dimension: str = "uV"
    prefiltering: str = ""
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def field_text(self, name: str, width: int) -> str:
        return self.raw.get(name) or _fit(getattr(self, name) if name != "reserved" else "", width)


@dataclass(frozen=True)
class EdfHeader:
    signals: tuple[SignalHeader, ...]
    n_records: int
    record_duration_s: float
    version: str = "0"
    patient_id: str = ""
    recording_id: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    @property
    def header_bytes(self) -> int:
        return FIXED_HEADER_BYTES + SIGNAL_HEADER_BYTES * self.n_signals

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.signals]

    def field_text(self, name: str, width: int) -> str:
        if name in self.raw:
            return self.raw[name]
        value = {"header_bytes": self.header_bytes, "n_signals": self.n_signals,
                 "record_duration": self.record_duration_s, "reserved": ""}.get(name)
        return _fit(getattr(self, name) if value is None else value, width)


@dataclass
class ParsedEdf:
    header: EdfHeader
    digital: list[np.ndarray]

    @property
    def signals(self) -> list[np.ndarray]:
        return [to_physical(d, s) for d, s in zip(self.digital, self.header.signals)]

    def __iter__(self):
        # (header, physical signals) unpacking
        yield self.header
        yield self.signals


def to_physical(digital: np.ndarray, sig: SignalHeader) -> np.ndarray:
    """``physical_min + (d - digital_min) * (physical_max - physical_min) / (digital_max - digital_min)``."""
    scale = (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min)
    return sig.physical_min + (digital.astype(np.float64) - sig.digital_min) * scale


def _text(blob: bytes, offset: int, width: int) -> str:
    return blob[offset : offset + width].decode("latin-1")


def _number(text: str, name: str, kind=float):
    try:
        value = kind(text.strip()) if kind is float else int(text.strip())
    except ValueError:
        raise HeaderFieldError(f"field {name!r} is not a valid {kind.__name__}: {text.strip()!r}") from None
    if kind is float and not math.isfinite(value):
        raise HeaderFieldError(f"field {name!r} is not finite: {text.strip()!r}")
    return value


def parse_edf(data: bytes) -> ParsedEdf:
    """Decode an EDF byte stream.

    The result unpacks as ``header, physical_signals``; raw digital samples
    are kept on ``.digital`` for lossless rewriting.
    """
    data = bytes(data)
    if len(data) < FIXED_HEADER_BYTES:
        raise ShortFileError(f"{len(data)} bytes is shorter than the {FIXED_HEADER_BYTES}-byte fixed header")
    raw, off = {}, 0
    for name, width in _FIXED:
        raw[name] = _text(data, off, width)
        off += width
    header_bytes = _number(raw["header_bytes"], "header_bytes", int)
    n_records = _number(raw["n_records"], "n_records", int)
    duration = _number(raw["record_duration"], "record_duration")
    ns = _number(raw["n_signals"], "n_signals", int)
    if ns < 1:
        raise HeaderFieldError(f"n_signals must be >= 1, got {ns}")
    if header_bytes != FIXED_HEADER_BYTES * (1 + ns):
        raise HeaderArithmeticError(f"header_bytes {header_bytes} != 256 * (1 + n_signals={ns})")
    if len(data) < header_bytes:
        raise ShortFileError(f"stream of {len(data)} bytes is shorter than declared header of {header_bytes}")
    if duration <= 0:
        raise HeaderFieldError(f"record duration must be positive, got {duration}")
    per = {name: [] for name, _ in _PER_SIGNAL}
    for name, width in _PER_SIGNAL:
        for _ in range(ns):
            per[name].append(_text(data, off, width))
            off += width
    signals = []
    for i in range(ns):
        pmin = _number(per["physical_min"][i], f"physical_min[{i}]")
        pmax = _number(per["physical_max"][i], f"physical_max[{i}]")
        dmin = _number(per["digital_min"][i], f"digital_min[{i}]", int)
        dmax = _number(per["digital_max"][i], f"digital_max[{i}]", int)
        spr = _number(per["samples_per_record"][i], f"samples_per_record[{i}]", int)
        if dmin == dmax:
            raise DigitalRangeError(f"signal {i}: digital_min == digital_max == {dmin}")
        if dmin > dmax:
            raise DigitalRangeError(f"signal {i}: digital_min {dmin} > digital_max {dmax}")
        if dmin < -32768 or dmax > 32767:
            raise DigitalRangeError(f"signal {i}: digital range [{dmin}, {dmax}] exceeds 16 bits")
        if pmin == pmax:
            raise PhysicalRangeError(f"signal {i}: physical_min == physical_max == {pmin}")
        if spr < 1:
            raise HeaderFieldError(f"signal {i}: samples_per_record must be >= 1, got {spr}")
        signals.append(SignalHeader(
            label=per["label"][i].strip(), physical_min=pmin, physical_max=pmax, digital_min=dmin,
            digital_max=dmax, samples_per_record=spr, transducer=per["transducer"][i].strip(),
            physical_dimension=per["physical_dimension"][i].strip(), prefiltering=per["prefiltering"][i].strip(),
            raw={name: per[name][i] for name, _ in _PER_SIGNAL}))
    record_samples = sum(s.samples_per_record for s in signals)
    body = len(data) - header_bytes
    if n_records == -1:
        if body % (2 * record_samples):
            raise HeaderArithmeticError("n_records is -1 and the data length is not a whole number of records")
        n_records = body // (2 * record_samples)
    if n_records < 0:
        raise HeaderFieldError(f"n_records must be >= 0, got {n_records}")
    need = n_records * record_samples * 2
    if body < need:
        raise ShortFileError(f"header promises {n_records} records ({need} bytes) but only {body} bytes follow")
    samples = np.frombuffer(data, dtype="<i2", count=n_records * record_samples, offset=header_bytes)
    records = samples.reshape(n_records, record_samples)
    digital, col = [], 0
    for s in signals:
        digital.append(records[:, col : col + s.samples_per_record].reshape(-1).astype(np.int16))
        col += s.samples_per_record
    header = EdfHeader(tuple(signals), n_records, duration, raw["version"].strip(), raw["patient_id"].strip(),
                       raw["recording_id"].strip(), raw["start_date"].strip(), raw["start_time"].strip(), raw=raw)
    return ParsedEdf(header, digital)


def write_edf(header: EdfHeader, digital: Sequence[np.ndarray]) -> bytes:
    """Serialize digital samples (one int16 array per signal) under ``header``."""
    if len(digital) != header.n_signals:
        raise ValueError(f"{len(digital)} sample arrays for {header.n_signals} signals")
    parts = [header.field_text(name, width) for name, width in _FIXED]
    for name, width in _PER_SIGNAL:
        parts.extend(s.field_text(name, width) for s in header.signals)
    text = "".join(parts).encode("latin-1")
    if len(text) != header.header_bytes:
        raise ValueError(f"header renders to {len(text)} bytes, expected {header.header_bytes}")
    columns = []
    for d, s in zip(digital, header.signals):
        d = np.asarray(d)
        if d.size != header.n_records * s.samples_per_record:
            raise ValueError(f"signal {s.label!r}: {d.size} samples for {header.n_records} records "
                             f"of {s.samples_per_record}")
        columns.append(d.astype("<i2").reshape(header.n_records, s.samples_per_record))
    body = np.concatenate(columns, axis=1) if columns else np.zeros((0, 0), "<i2")
    return text + np.ascontiguousarray(body, dtype="<i2").tobytes()


def read_edf(path) -> ParsedEdf:
    return parse_edf(Path(path).read_bytes())


# ---------------------------------------------------------------- segmentation


def extract_channel(parsed: ParsedEdf, channel_label: str, epoch_seconds: float = EPOCH_SECONDS,
                    source_id: int = 0, subject_id: int | None = None) -> Dataset:
    """Cut one channel into non-overlapping epochs; a trailing partial epoch is dropped."""
    labels = parsed.header.labels
    if channel_label not in labels:
        raise UnknownChannelError(f"channel {channel_label!r} not found; available: {labels}")
    i = labels.index(channel_label)
    sig = parsed.header.signals[i]
    rate = sig.samples_per_record / parsed.header.record_duration_s
    if epoch_seconds != EPOCH_SECONDS:
        raise ValueError("only 30-second epochs are supported")
    n = samples_per_epoch(rate)
    x = to_physical(parsed.digital[i], sig)
    count = x.size // n
    epochs = [Epoch(x[j * n : (j + 1) * n].copy(), rate, None, source_id, j) for j in range(count)]
    return Dataset(epochs, {source_id: source_id if subject_id is None else subject_id})


# ---------------------------------------------------------------- labels

EXCLUDED = "EXCLUDED"

DEFAULT_LABEL_MAP: dict[str, SleepStage | str] = {
    "W": SleepStage.W, "N1": SleepStage.N1, "N2": SleepStage.N2, "N3": SleepStage.N3,
    "N4": SleepStage.N3, "REM": SleepStage.REM,
    "MOVEMENT": EXCLUDED, "UNKNOWN": EXCLUDED,
}


@dataclass(frozen=True)
class LabelFile:
    rows: tuple[tuple[int, SleepStage | str], ...]

    def __post_init__(self):
        idx = [i for i, _ in self.rows]
        for a, b in zip(idx, idx[1:]):
            if b <= a:
                raise LabelError(f"epoch indices must be strictly increasing; {b} follows {a}")
        if idx and idx[0] < 0:
            raise LabelError(f"negative epoch index {idx[0]}")


def _resolve(token: str, label_map: Mapping[str, SleepStage | str]):
    target = label_map.get(token.strip())
    if target is None:
        raise LabelError(f"stage token {token.strip()!r} is not in the label map")
    if isinstance(target, str) and target.upper() == EXCLUDED:
        return EXCLUDED
    return SleepStage[target] if isinstance(target, str) else SleepStage(target)


def parse_label_map(text: str) -> dict[str, SleepStage | str]:
    """``token,stage`` CSV lines where stage is a SleepStage name or ``EXCLUDED``."""
    out: dict[str, SleepStage | str] = {}
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].startswith("#"):
            continue
        token, target = row[0].strip(), row[1].strip()
        if target.upper() == EXCLUDED:
            out[token] = EXCLUDED
        elif target in SleepStage.__members__:
            out[token] = SleepStage[target]
        else:
            raise LabelError(f"unknown stage {target!r} for token {token!r}")
    return out


def parse_labels(text: str, label_map: Mapping[str, SleepStage | str] = DEFAULT_LABEL_MAP) -> LabelFile:
    """Read ``epoch_index,stage_token`` rows; a non-numeric first row is taken as a header."""
    rows = []
    for n, row in enumerate(csv.reader(io.StringIO(text))):
        if not row or not "".join(row).strip():
            continue
        try:
            index = int(row[0])
        except ValueError:
            if n == 0:
                continue
            raise LabelError(f"line {n + 1}: bad epoch index {row[0]!r}") from None
        if len(row) < 2:
            raise LabelError(f"line {n + 1}: missing stage token")
        rows.append((index, _resolve(row[1], label_map)))
    return LabelFile(tuple(rows))


def read_labels(path, label_map: Mapping[str, SleepStage | str] = DEFAULT_LABEL_MAP) -> LabelFile:
    return parse_labels(Path(path).read_text(), label_map)


def attach_labels(dataset: Dataset, labels: LabelFile) -> Dataset:
    """Label epochs by position; epochs with an excluded or missing label are dropped."""
    by_index = dict(labels.rows)
    for index in by_index:
        if index >= len(dataset):
            raise LabelError(f"label row for epoch {index} but the recording has only {len(dataset)} epochs")
    kept = [replace(e, label=by_index[i]) for i, e in enumerate(dataset.epochs)
            if i in by_index and by_index[i] != EXCLUDED]
    return Dataset(kept, {e.source_id: dataset.subjects[e.source_id] for e in kept})


def trim_wake(dataset: Dataset, minutes: float = 30.0) -> Dataset:
    """Keep W epochs only within ``minutes`` before the first and after the last sleep epoch."""
    labels = dataset.labels()
    position = np.array([e.index_in_recording for e in dataset.epochs])
    sleep = position[(labels >= 0) & (labels != int(SleepStage.W))]
    if sleep.size == 0:
        return dataset
    margin = int(round(minutes * 60.0 / EPOCH_SECONDS))
    lo, hi = sleep.min() - margin, sleep.max() + margin
    keep = [i for i, p in enumerate(position) if lo <= p <= hi]
    return dataset.subset(keep)
