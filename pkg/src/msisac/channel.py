"""Scene-to-path conversion, frequency/slow-time channel synthesis and recovery."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .scene import (BistaticLink, Scenario, TargetState, bistatic_doppler,
                    los_doppler)
from .waveform import FrameSymbols, Numerology, ResourceAllocation


class EmptyChannelError(ValueError):
    """No resource element survived the empty-RE test."""


class MaskMismatchError(ValueError):
    pass


class PathTag(enum.Enum):
    LOS = "los"
    TARGET_BTP = "target_btp"
    TARGET_SCATTERED = "target_scattered"
    CLUTTER = "clutter"


@dataclass(frozen=True)
class PropagationPath:
    delay: float
    doppler: float
    weight: complex
    tag: PathTag = PathTag.TARGET_BTP

    def __post_init__(self):
        if not self.delay >= 0:
            raise ValueError(f"path delay must be >= 0, got {self.delay}")
        if not np.isfinite(self.weight) or not np.isfinite(self.doppler):
            raise ValueError("path weight and doppler must be finite")
        object.__setattr__(self, "weight", complex(self.weight))
        object.__setattr__(self, "tag", PathTag(self.tag))


@dataclass(frozen=True)
class PathSet:
    paths: tuple[PropagationPath, ...]
    carrier: float = 5.2e9

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if sum(p.tag is PathTag.LOS for p in self.paths) > 1:
            raise ValueError("at most one LOS path per link")

    def __len__(self) -> int:
        return len(self.paths)

    def __or__(self, other: "PathSet") -> "PathSet":
        return PathSet(self.paths + other.paths, self.carrier)

    def by_tag(self, tag: PathTag) -> list[PropagationPath]:
        return [p for p in self.paths if p.tag is tag]


@dataclass(frozen=True)
class ChannelSamples:
    """Channel values on a carrier x symbol grid; entries outside ``mask`` are 0."""
    numerology: Numerology
    values: np.ndarray
    weights: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        weights = np.asarray(self.weights, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        shape = self.numerology.shape
        if values.shape != shape or weights.shape != shape or mask.shape != shape:
            raise ValueError("channel arrays must match the numerology grid")
        if np.any(weights < 0):
            raise ValueError("weights must be >= 0")
        object.__setattr__(self, "values", np.where(mask, values, 0))
        object.__setattr__(self, "weights", np.where(mask, weights, 0.0))
        object.__setattr__(self, "mask", mask)

    @property
    def n_samples(self) -> int:
        return int(self.mask.sum())

    @property
    def is_full(self) -> bool:
        return bool(self.mask.all())


class Fluctuation(enum.Enum):
    DETERMINISTIC = "deterministic"
    RAYLEIGH_POWER = "rayleigh"
    RICIAN_POWER = "rician"


@dataclass(frozen=True)
class FluctuationModel:
    kind: Fluctuation = Fluctuation.DETERMINISTIC
    k_factor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Fluctuation(self.kind))
        if not self.k_factor >= 0:
            raise ValueError("k_factor must be >= 0")


def _path_phase(carrier: float, delay: float) -> complex:
    return np.exp(-2j * np.pi * carrier * delay)


def paths_from_scene(scenario: Scenario, link: BistaticLink, los: bool = True,
                     target: bool = True, clutter: bool = True,
                     reflectivities: Optional[Sequence[complex]] = None) -> PathSet:
    """Specular paths seen on ``link``.

    Delays are absolute (bounced range over c). Amplitudes use free-space
    spreading: ``1/R_los`` for the direct path and ``rho/(R_tx R_rx)`` for a
    scatterer, times the carrier phase ``exp(-j 2 pi fc tau)``. Target
    reflectivity defaults to ``sqrt(mean_reflectivity)`` unless
    ``reflectivities`` supplies one complex value per target.
    """
    tx, rx = scenario.check_link(link)
    c = scenario.speed_of_light
    fc = tx.carrier_frequency
    f_los = los_doppler(tx, rx, fc, c)
    out: list[PropagationPath] = []
    r_los = float(np.linalg.norm(tx.position - rx.position))
    if los and not link.is_monostatic:
        tau = r_los / c
        out.append(PropagationPath(tau, f_los, _path_phase(fc, tau) / r_los, PathTag.LOS))
    if target:
        if reflectivities is not None and len(reflectivities) != len(scenario.targets):
            raise ValueError("one reflectivity per target expected")
        for i, tgt in enumerate(scenario.targets):
            r_tx = np.linalg.norm(tx.position - tgt.position)
            r_rx = np.linalg.norm(rx.position - tgt.position)
            tau = (r_tx + r_rx) / c
            f_d = bistatic_doppler(tx, rx, tgt, fc, c) + f_los
            rho = (np.sqrt(tgt.mean_reflectivity) if reflectivities is None
                   else reflectivities[i])
            out.append(PropagationPath(tau, f_d, rho * _path_phase(fc, tau) / (r_tx * r_rx),
                                       PathTag.TARGET_BTP))
    if clutter:
        for pos, amp in scenario.clutter_points:
            static = TargetState(pos)
            r_tx = np.linalg.norm(tx.position - pos)
            r_rx = np.linalg.norm(rx.position - pos)
            tau = (r_tx + r_rx) / c
            f_d = bistatic_doppler(tx, rx, static, fc, c) + f_los
            out.append(PropagationPath(tau, f_d, amp * _path_phase(fc, tau) / (r_tx * r_rx),
                                       PathTag.CLUTTER))
    return PathSet(tuple(out), fc)


def steering(numerology: Numerology, delays, dopplers) -> tuple[np.ndarray, np.ndarray]:
    """Per-path carrier and symbol phasors, shapes ``(N, P)`` and ``(M, P)``."""
    a_f = np.exp(-2j * np.pi * np.outer(numerology.carrier_offsets, np.atleast_1d(delays)))
    a_t = np.exp(-2j * np.pi * np.outer(numerology.symbol_times, np.atleast_1d(dopplers)))
    return a_f, a_t


def synthesize(numerology: Numerology, delays, dopplers, gains) -> np.ndarray:
    """Full-grid ``sum_p g_p exp(-j2pi f_k tau_p) exp(-j2pi t_m alpha_p)``."""
    a_f, a_t = steering(numerology, delays, dopplers)
    return (a_f * np.atleast_1d(gains)) @ a_t.T


def sample_frf(paths: PathSet, alloc: ResourceAllocation) -> ChannelSamples:
    """Exact transfer function on the allocation's active REs (unit weights)."""
    num = alloc.numerology
    if alloc.n_active == 0:
        raise ValueError("allocation is empty")
    if paths.paths:
        tau = np.array([p.delay for p in paths.paths])
        alpha = np.array([p.doppler for p in paths.paths])
        gamma = np.array([p.weight for p in paths.paths])
        # delay drift over the frame against the delay resolution
        drift = np.max(np.abs(alpha)) * num.frame_duration / paths.carrier
        if drift > 0.5 / num.bandwidth:
            warnings.warn(f"range migration {drift:.3g} s exceeds half a delay bin; "
                          "slow-time-only Doppler model is approximate",
                          RuntimeWarning, stacklevel=2)
        h = synthesize(num, tau, alpha, gamma)
    else:
        h = np.zeros(num.shape, dtype=complex)
    return ChannelSamples(num, h, alloc.active.astype(float), alloc.active)


def draw_reflectivity(model: FluctuationModel, mean_power: float, rng_seed=None) -> complex:
    """One complex reflectivity with ``E|gamma|^2 = mean_power``."""
    if not mean_power >= 0:
        raise ValueError("mean_power must be >= 0")
    if model.kind is Fluctuation.DETERMINISTIC:
        return complex(np.sqrt(mean_power))
    rng = np.random.default_rng(rng_seed)
    diffuse = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
    if model.kind is Fluctuation.RAYLEIGH_POWER:
        return complex(np.sqrt(mean_power) * diffuse)
    k = model.k_factor
    if np.isinf(k):
        return complex(np.sqrt(mean_power))
    los = np.sqrt(k / (k + 1))
    return complex(np.sqrt(mean_power) * (los + np.sqrt(1 / (k + 1)) * diffuse))


def complex_noise(rng: np.random.Generator, shape, power: float) -> np.ndarray:
    return np.sqrt(power / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def apply_channel(x: FrameSymbols, h: ChannelSamples, noise_power_per_re: float,
                  rng_seed=None) -> FrameSymbols:
    """``Y = X * H + n`` on the frame's REs, with complex Gaussian noise of variance sigma^2."""
    if not np.array_equal(x.mask, h.mask):
        raise MaskMismatchError("frame and channel masks differ")
    if noise_power_per_re < 0:
        raise ValueError("noise power must be >= 0")
    y = x.values * h.values
    if noise_power_per_re > 0:
        rng = np.random.default_rng(rng_seed)
        y = y + np.where(x.mask, complex_noise(rng, x.values.shape, noise_power_per_re), 0)
    return FrameSymbols(y, x.mask, x.numerology)


def inverse_filter(y: FrameSymbols, x_ref: FrameSymbols, noise_power: float,
                   empty_threshold: float = 6.0) -> ChannelSamples:
    """Per-RE division ``Y / X_ref`` with an empty-RE test.

    REs with ``|X_ref|^2 <= empty_threshold * sigma^2`` are dropped from the
    mask. Surviving REs carry inverse-variance weight ``|X_ref|^2 / sigma^2``;
    with ``sigma^2 == 0`` the weight is ``|X_ref|^2`` (unit-noise scale) and
    only exactly-zero references are dropped.
    """
    if not np.array_equal(y.mask, x_ref.mask):
        raise MaskMismatchError("received and reference masks differ")
    e = np.abs(x_ref.values) ** 2
    if noise_power > 0:
        keep = x_ref.mask & (e > empty_threshold * noise_power)
        w = e / noise_power
    else:
        keep = x_ref.mask & (e > 0)
        w = e
    if not keep.any():
        raise EmptyChannelError("every resource element failed the empty-RE test")
    h = np.zeros_like(y.values)
    h[keep] = y.values[keep] / x_ref.values[keep]
    return ChannelSamples(y.numerology, h, np.where(keep, w, 0.0), keep)


def impair_reference(x: FrameSymbols, error_std: float, rng_seed=None) -> FrameSymbols:
    """Reference frame with additive complex error on each active RE (imperfect payload recovery)."""
    if error_std == 0:
        return x
    rng = np.random.default_rng(rng_seed)
    err = complex_noise(rng, x.values.shape, error_std**2)
    return FrameSymbols(np.where(x.mask, x.values + err, 0), x.mask, x.numerology)


def noisy_samples(h: ChannelSamples, noise_power: float, rng_seed=None) -> ChannelSamples:
    """Shortcut for unit-magnitude frames: ``H + n`` with weight ``1/sigma^2``."""
    rng = np.random.default_rng(rng_seed)
    noise = complex_noise(rng, h.values.shape, noise_power) if noise_power > 0 else 0
    w = np.where(h.mask, 1.0 / noise_power if noise_power > 0 else 1.0, 0.0)
    return ChannelSamples(h.numerology, h.values + noise, w, h.mask)
