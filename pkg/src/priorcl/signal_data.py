"""Epoch/dataset containers, view augmentation, and a band-driven synthetic EEG generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

EPOCH_SECONDS = 30.0


class SleepStage(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


def samples_per_epoch(sample_rate_hz: float) -> int:
    return int(round(EPOCH_SECONDS * sample_rate_hz))


@dataclass(frozen=True, eq=False)
class Epoch:
    samples: np.ndarray
    sample_rate_hz: float
    label: SleepStage | None = None
    source_id: int = 0
    index_in_recording: int = 0

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=np.float64)
        expected = samples_per_epoch(self.sample_rate_hz)
        if samples.ndim != 1 or samples.shape[0] != expected:
            raise ValueError(f"epoch must hold {expected} samples at {self.sample_rate_hz} Hz, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        if self.label is not None:
            object.__setattr__(self, "label", SleepStage(self.label))

    @property
    def n(self) -> int:
        return self.samples.shape[0]


@dataclass(eq=False)
class Dataset:
    epochs: list[Epoch]
    subjects: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        rates = {e.sample_rate_hz for e in self.epochs}
        if len(rates) > 1:
            raise ValueError(f"mixed sample rates in one dataset: {sorted(rates)}")
        for e in self.epochs:
            self.subjects.setdefault(e.source_id, e.source_id)

    def __len__(self):
        return len(self.epochs)

    @property
    def sample_rate_hz(self) -> float:
        return self.epochs[0].sample_rate_hz

    def samples(self) -> np.ndarray:
        return np.stack([e.samples for e in self.epochs])

    def labels(self) -> np.ndarray:
        """Integer labels; -1 where unlabeled."""
        return np.array([-1 if e.label is None else int(e.label) for e in self.epochs], dtype=np.int64)

    def subject_of(self, epoch: Epoch) -> int:
        return self.subjects[epoch.source_id]

    def subject_ids(self) -> np.ndarray:
        return np.array([self.subjects[e.source_id] for e in self.epochs], dtype=np.int64)

    def recordings(self) -> list[int]:
        return sorted({e.source_id for e in self.epochs})

    def subset(self, indices: Sequence[int]) -> "Dataset":
        chosen = [self.epochs[i] for i in indices]
        return Dataset(chosen, {e.source_id: self.subjects[e.source_id] for e in chosen})

    def unlabeled(self) -> "Dataset":
        return Dataset([replace(e, label=None) for e in self.epochs], dict(self.subjects))


def split_by_subject(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition by subject so that no subject lands on both sides."""
    subjects = np.array(sorted(set(dataset.subjects[e.source_id] for e in dataset.epochs)))
    if len(subjects) < 2:
        raise ValueError("subject-level split needs at least two subjects")
    order = np.random.default_rng(seed).permutation(subjects)
    n_train = min(max(1, int(round(train_fraction * len(subjects)))), len(subjects) - 1)
    train_subjects = set(order[:n_train].tolist())
    sid = dataset.subject_ids()
    train_idx = [i for i, s in enumerate(sid) if s in train_subjects]
    test_idx = [i for i, s in enumerate(sid) if s not in train_subjects]
    return dataset.subset(train_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    mask_fraction: float = 0.1
    scale_low: float = 0.8
    scale_high: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError(f"mask_fraction must lie in [0, 1), got {self.mask_fraction}")
        if not 0.0 < self.scale_low <= self.scale_high:
            raise ValueError(f"need 0 < scale_low <= scale_high, got [{self.scale_low}, {self.scale_high}]")


def augment_samples(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero one contiguous segment, then multiply by a single uniform scale factor."""
    n = x.shape[-1]
    length = int(round(config.mask_fraction * n))
    start = int(rng.integers(0, n - length + 1))
    scale = rng.uniform(config.scale_low, config.scale_high)
    out = np.array(x, dtype=np.float64)
    out[start : start + length] = 0.0
    return out * scale


def augment(epoch: Epoch, config: AugmentConfig, rng: np.random.Generator) -> Epoch:
    return replace(epoch, samples=augment_samples(epoch.samples, config, rng))


def two_views(epoch: Epoch, config: AugmentConfig, rng: np.random.Generator) -> tuple[Epoch, Epoch]:
    return augment(epoch, config, rng), augment(epoch, config, rng)


def augment_batch(samples: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Two views per row of ``samples``; row ``2i`` and ``2i+1`` come from epoch ``i``."""
    views = np.empty((2 * samples.shape[0], samples.shape[1]))
    for i, x in enumerate(samples):
        views[2 * i] = augment_samples(x, config, rng)
        views[2 * i + 1] = augment_samples(x, config, rng)
    return views


# ---------------------------------------------------------------- synthetic EEG

# Frequencies are drawn 1 Hz inside each band edge so that spectral leakage
# of a finite-length tone stays in its band.
_BAND_DRAW = {
    "delta": (1.5, 3.0),
    "theta": (5.0, 7.0),
    "alpha": (9.0, 12.0),
    "beta": (15.0, 29.0),
}

# Per-stage tone amplitudes (microvolts) and white-noise standard deviation.
# N1 and REM share the theta+alpha profile; N1 is weaker and noisier.
STAGE_PROFILES: dict[SleepStage, dict] = {
    SleepStage.W: {"tones": {"alpha": 20.0, "beta": 12.0}, "noise": 4.0},
    SleepStage.N1: {"tones": {"theta": 14.0, "alpha": 10.0}, "noise": 8.0},
    SleepStage.N2: {"tones": {"theta": 30.0}, "noise": 4.0},
    SleepStage.N3: {"tones": {"delta": 60.0}, "noise": 4.0},
    SleepStage.REM: {"tones": {"theta": 24.0, "alpha": 16.0}, "noise": 3.0},
}


def synth_epoch(stage: SleepStage, sample_rate_hz: float, rng: np.random.Generator,
                noise_scale: float = 1.0, amplitude_jitter: float = 0.3,
                source_id: int = 0, index_in_recording: int = 0) -> Epoch:
    """Random-phase tones in the stage's characteristic bands plus white noise.

    ``amplitude_jitter`` is the half-width of a uniform multiplicative jitter
    applied per tone; ``noise_scale`` multiplies the stage's noise level.
    """
    if sample_rate_hz < 64:
        raise ValueError(f"sample rate {sample_rate_hz} Hz is below 64 Hz; the 30 Hz beta band is not representable")
    stage = SleepStage(stage)
    n = samples_per_epoch(sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    profile = STAGE_PROFILES[stage]
    x = np.zeros(n)
    for band, amp in profile["tones"].items():
        lo, hi = _BAND_DRAW[band]
        freq = rng.uniform(lo, hi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        a = amp * rng.uniform(1.0 - amplitude_jitter, 1.0 + amplitude_jitter)
        x += a * np.sin(2.0 * np.pi * freq * t + phase)
    x += rng.normal(0.0, profile["noise"] * noise_scale, size=n)
    return Epoch(x, float(sample_rate_hz), stage, source_id, index_in_recording)


def synth_dataset(per_class: int, sample_rate_hz: float = 100.0, subjects: int = 10, seed: int = 0,
                  noise_scale: float = 1.0, amplitude_jitter: float = 0.3) -> Dataset:
    """Balanced labeled dataset, one recording per subject.

    The ``j``-th epoch of every stage goes to subject ``j % subjects``, so each
    subject receives an (almost) balanced share of every stage.
    """
    if per_class < 1 or subjects < 1:
        raise ValueError("per_class and subjects must be >= 1")
    rng = np.random.default_rng(seed)
    epochs = []
    counters = [0] * subjects
    for j in range(per_class):
        subject = j % subjects
        for stage in SleepStage:
            epochs.append(synth_epoch(stage, sample_rate_hz, rng, noise_scale, amplitude_jitter,
                                      source_id=subject, index_in_recording=counters[subject]))
            counters[subject] += 1
    return Dataset(epochs, {s: s for s in range(subjects)})


# ---------------------------------------------------------------- binary cache

CACHE_MAGIC = b"PCL1"
_HEADER = struct.Struct("<4sIdI")
_RECORD = struct.Struct("<BIII")
_UNLABELED = 255


class CacheFormatError(ValueError):
    pass


def dataset_to_bytes(dataset: Dataset) -> bytes:
    """Header ``magic, count, rate, samples/epoch``; records ``label, subject, recording, index, float64 samples``."""
    n = samples_per_epoch(dataset.sample_rate_hz) if dataset.epochs else 0
    rate = dataset.sample_rate_hz if dataset.epochs else 0.0
    parts = [_HEADER.pack(CACHE_MAGIC, len(dataset), rate, n)]
    for e in dataset.epochs:
        label = _UNLABELED if e.label is None else int(e.label)
        parts.append(_RECORD.pack(label, dataset.subjects[e.source_id], e.source_id, e.index_in_recording))
        parts.append(e.samples.astype("<f8").tobytes())
    return b"".join(parts)


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise CacheFormatError("truncated cache header")
    magic, count, rate, n = _HEADER.unpack_from(blob, 0)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    record_size = _RECORD.size + 8 * n
    if len(blob) != _HEADER.size + count * record_size:
        raise CacheFormatError(f"cache length {len(blob)} does not match {count} records of {record_size} bytes")
    epochs, subjects = [], {}
    offset = _HEADER.size
    for _ in range(count):
        label, subject, source, index = _RECORD.unpack_from(blob, offset)
        offset += _RECORD.size
        samples = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        epochs.append(Epoch(samples, rate, None if label == _UNLABELED else SleepStage(label), source, index))
        subjects[source] = subject
    return Dataset(epochs, subjects)


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
