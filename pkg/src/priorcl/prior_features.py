"""Rhythm band energies from the DFT of a raw epoch, and the log-distance between them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_EPS = 1e-12


@dataclass(frozen=True)
class Spectrum:
    magnitudes_sq: np.ndarray  # |P(k)|^2 for k = 0 .. N-1
    bin_hz: float

    @property
    def n(self) -> int:
        return self.magnitudes_sq.shape[-1]


@dataclass(frozen=True)
class PriorFeature:
    e_delta: float
    e_theta: float
    e_alpha: float
    e_beta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.e_delta, self.e_theta, self.e_alpha, self.e_beta], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "PriorFeature":
        d, t, a, b = (float(v) for v in values)
        return cls(d, t, a, b)


@dataclass(frozen=True)
class BandTable:
    """Half-open ``[low, high)`` frequency bands in Hz, in delta/theta/alpha/beta order."""

    delta: tuple[float, float] = (1.0, 4.0)
    theta: tuple[float, float] = (4.0, 8.0)
    alpha: tuple[float, float] = (8.0, 13.0)
    beta: tuple[float, float] = (14.0, 30.0)

    def __post_init__(self):
        bands = self.as_list()
        for name, (lo, hi) in zip(BAND_NAMES, bands):
            if not lo < hi:
                raise ValueError(f"band {name}: low {lo} must be below high {hi}")
        ordered = sorted(bands)
        for (_, hi), (lo, _) in zip(ordered, ordered[1:]):
            if lo < hi:
                raise ValueError(f"bands overlap: {ordered}")

    def as_list(self) -> list[tuple[float, float]]:
        return [tuple(map(float, b)) for b in (self.delta, self.theta, self.alpha, self.beta)]


BAND_NAMES = ("delta", "theta", "alpha", "beta")


def _samples_of(epoch_or_samples):
    if hasattr(epoch_or_samples, "samples"):
        return np.asarray(epoch_or_samples.samples, dtype=np.float64), float(epoch_or_samples.sample_rate_hz)
    return np.asarray(epoch_or_samples, dtype=np.float64), None


def dft_power(epoch, sample_rate_hz: float | None = None) -> Spectrum:
    """|P(k)|^2 of the unnormalized DFT ``P(k) = sum_n x(n) exp(-j 2 pi k n / N)``.

    Accepts an :class:`~priorcl.signal_data.Epoch` or a raw sample array with
    an explicit ``sample_rate_hz``.  The last axis is transformed, so a
    ``(n_epochs, N)`` matrix works too.
    """
    x, rate = _samples_of(epoch)
    rate = rate if sample_rate_hz is None else float(sample_rate_hz)
    if rate is None or rate <= 0:
        raise ValueError("a positive sample rate is required")
    n = x.shape[-1] if x.ndim else 0
    if n < 2:
        raise ValueError(f"signal needs at least 2 samples, got {n}")
    p = np.fft.fft(x, axis=-1)
    return Spectrum(p.real ** 2 + p.imag ** 2, rate / n)


def band_energies(spectrum: Spectrum, bands: BandTable = BandTable()) -> PriorFeature | np.ndarray:
    """Sum of |P(k)|^2 / N over non-negative-frequency bins in each band.

    Returns a :class:`PriorFeature` for a single spectrum and an
    ``(n_epochs, 4)`` array for a stacked one.
    """
    n = spectrum.n
    nyquist = spectrum.bin_hz * n / 2.0
    freqs = np.arange(n // 2 + 1) * spectrum.bin_hz
    half = spectrum.magnitudes_sq[..., : n // 2 + 1]
    out = []
    for name, (lo, hi) in zip(BAND_NAMES, bands.as_list()):
        if hi > nyquist:
            raise ValueError(f"band {name} ({lo}-{hi} Hz) exceeds Nyquist frequency {nyquist} Hz")
        mask = (freqs >= lo) & (freqs < hi)
        out.append(half[..., mask].sum(axis=-1) / n)
    energies = np.stack(out, axis=-1)
    if energies.ndim == 1:
        return PriorFeature.from_array(energies)
    return energies


def prior_features(samples: np.ndarray, sample_rate_hz: float, bands: BandTable = BandTable()) -> np.ndarray:
    """``(n_epochs, 4)`` band-energy matrix for a stack of raw epochs."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return band_energies(dft_power(samples, sample_rate_hz), bands)


def _vec(f) -> np.ndarray:
    return f.as_array() if isinstance(f, PriorFeature) else np.asarray(f, dtype=np.float64)


def dissimilarity(a, b, eps: float = DEFAULT_EPS) -> float:
    """``log(max(||E_a - E_b||, eps))``."""
    diff = _vec(a) - _vec(b)
    return float(np.log(max(np.sqrt(np.sum(diff * diff)), eps)))


def dissimilarity_row(anchor, candidates: Sequence, eps: float = DEFAULT_EPS) -> np.ndarray:
    cand = np.array([_vec(c) for c in candidates]) if not isinstance(candidates, np.ndarray) else candidates
    if cand.ndim != 2 or cand.shape[0] == 0:
        raise ValueError("candidate list must be non-empty")
    diff = _vec(anchor)[None, :] - cand
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    return np.log(np.maximum(dist, eps))
