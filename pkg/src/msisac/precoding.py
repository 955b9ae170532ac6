"""Time-reversal (channel-conjugate) precoding and focusing metrics.

Conjugating a sampled spectrum mirrors the impulse response in time, so the
prefilter is applied directly in the frequency domain.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import (ChannelSamples, MaskMismatchError, PathSet, PropagationPath,
                      sample_frf)
from .scene import SPEED_OF_LIGHT
from .waveform import FrameSymbols, ResourceAllocation


class DegenerateResponseError(ValueError):
    pass


@dataclass(frozen=True)
class TrPrefilter:
    values: np.ndarray
    source_mask: np.ndarray


@dataclass(frozen=True)
class TrResult:
    received: FrameSymbols
    response: np.ndarray
    """Delay-domain response per symbol, shape ``(N, M)``; lag 0 at row 0."""


def tr_prefilter(h_est: ChannelSamples, frame: Optional[FrameSymbols] = None) -> TrPrefilter:
    """Conjugate prefilter with transmit-energy normalisation.

    The scale makes ``sum |P X|^2 == sum |X|^2`` for ``frame``; without a
    frame, unit-modulus symbols on the mask are assumed.
    """
    if h_est.n_samples == 0:
        raise ValueError("empty channel estimate")
    p = np.where(h_est.mask, np.conj(h_est.values), 0)
    x = frame.values if frame is not None else h_est.mask.astype(complex)
    e_in = np.sum(np.abs(x[h_est.mask]) ** 2)
    e_out = np.sum(np.abs((p * x)[h_est.mask]) ** 2)
    if e_out == 0:
        raise DegenerateResponseError("channel estimate is identically zero")
    return TrPrefilter(p * np.sqrt(e_in / e_out), h_est.mask.copy())


def apply_tr(x: FrameSymbols, true_h: ChannelSamples, prefilter: TrPrefilter) -> TrResult:
    """Transmit ``X * P`` through ``H``; report the per-symbol inverse DFT of ``H * P``."""
    if not (np.array_equal(x.mask, true_h.mask) and np.array_equal(x.mask, prefilter.source_mask)):
        raise MaskMismatchError("frame, channel and prefilter masks differ")
    hp = true_h.values * prefilter.values
    y = FrameSymbols(np.where(x.mask, x.values * hp, 0), x.mask, x.numerology)
    return TrResult(y, np.fft.ifft(hp, axis=0))


def _delay_profile(response) -> np.ndarray:
    r = np.asarray(response)
    if r.size == 0:
        raise DegenerateResponseError("empty response")
    power = np.abs(r) ** 2
    return power.sum(axis=1) if power.ndim == 2 else power


def focusing_gain(response) -> float:
    """Peak over mean power of the delay profile, dB.

    A 2D response is first summed over symbols. A flat spectrum concentrates
    into one bin, giving the processing gain ``N``.
    """
    prof = _delay_profile(response)
    mean = prof.mean()
    if not mean > 0:
        raise DegenerateResponseError("zero response has no focusing gain")
    return float(10 * np.log10(prof.max() / mean))


def peak_to_sidelobe(response, guard: int = 1) -> float:
    """Peak over the strongest bin outside ``+-guard`` bins of the peak (circular), dB."""
    prof = _delay_profile(response)
    if not prof.max() > 0:
        raise DegenerateResponseError("zero response")
    n = prof.size
    i = int(np.argmax(prof))
    dist = np.abs((np.arange(n) - i + n // 2) % n - n // 2)
    side = prof[dist > guard]
    if side.size == 0 or side.max() == 0:
        return float("inf")
    return float(10 * np.log10(prof[i] / side.max()))


def displaced_family(carrier: float, delays: Sequence[float], gains: Sequence[complex],
                     angles: Sequence[float], c: float = SPEED_OF_LIGHT) -> Callable[[float], PathSet]:
    """Multipath seen from a receiver moved by ``d`` metres along a fixed axis.

    Path ``p`` arrives from angle ``angles[p]`` to that axis, so moving by
    ``d`` shifts its phase by ``2 pi fc d cos(angle) / c``; delay changes are
    below the resolution and ignored.
    """
    delays = np.asarray(delays, float)
    gains = np.asarray(gains, complex)
    cosines = np.cos(np.asarray(angles, float))

    def family(d: float) -> PathSet:
        g = gains * np.exp(-2j * np.pi * carrier * d * cosines / c)
        return PathSet(tuple(PropagationPath(t, 0.0, w) for t, w in zip(delays, g)), carrier)

    return family


@dataclass(frozen=True)
class MismatchCurve:
    displacements: np.ndarray
    gains_db: np.ndarray
    slope_db_per_m: float
    trend: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["displacement_m", "focusing_gain_db"])
        for d, g in zip(self.displacements, self.gains_db):
            wr.writerow([repr(float(d)), repr(float(g))])
        return buf.getvalue()


def tr_mismatch_curve(family: Callable[[float], PathSet], x: FrameSymbols,
                      alloc: ResourceAllocation, displacements: Sequence[float],
                      flat_tol_db_per_m: float = 1e-6) -> MismatchCurve:
    """Focusing gain with the prefilter frozen at displacement 0.

    The trend is the sign of a least-squares slope; fading makes the curve
    oscillate, so no strict monotonicity is implied.
    """
    d = np.asarray(displacements, dtype=float)
    if d.size < 2 or not np.any(d == 0):
        raise ValueError("need at least two displacements including 0")
    pre = tr_prefilter(sample_frf(family(0.0), alloc), x)
    gains = np.array([focusing_gain(apply_tr(x, sample_frf(family(di), alloc), pre).response)
                      for di in d])
    slope = float(np.polyfit(d, gains, 1)[0]) if np.ptp(d) > 0 else 0.0
    trend = ("flat" if abs(slope) <= flat_tol_db_per_m
             else "decreasing" if slope < 0 else "increasing")
    return MismatchCurve(d, gains, slope, trend)
