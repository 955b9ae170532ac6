"""OFDM numerology, sparse resource-element allocation and waveform metrics.

Grids are indexed ``[carrier k, symbol m]``. Carrier ``k`` sits at baseband
offset ``f_k = k * carrier_spacing`` and symbol ``m`` at slow time
``t_m = m * symbol_duration``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Optional, Sequence, Union

import numpy as np

from .maps import ScatteringMap


class AllocationError(ValueError):
    pass


class AllocationConflictError(AllocationError):
    """Two links claim the same resource element."""


@dataclass(frozen=True)
class Numerology:
    n_carriers: int
    carrier_spacing: float
    n_symbols: int
    symbol_duration: float
    center_frequency: float = 5.2e9

    def __post_init__(self):
        if self.n_carriers < 1 or self.n_symbols < 1:
            raise ValueError("n_carriers and n_symbols must be >= 1")
        if not self.carrier_spacing > 0:
            raise ValueError("carrier_spacing must be > 0")
        # cyclic extension can only lengthen the symbol
        if self.symbol_duration < (1.0 / self.carrier_spacing) * (1 - 1e-12):
            raise ValueError("symbol_duration must be >= 1/carrier_spacing")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_carriers, self.n_symbols)

    @property
    def bandwidth(self) -> float:
        return self.n_carriers * self.carrier_spacing

    @property
    def frame_duration(self) -> float:
        return self.n_symbols * self.symbol_duration

    @property
    def carrier_offsets(self) -> np.ndarray:
        return np.arange(self.n_carriers) * self.carrier_spacing

    @property
    def symbol_times(self) -> np.ndarray:
        return np.arange(self.n_symbols) * self.symbol_duration

    @property
    def delay_bin(self) -> float:
        return 1.0 / self.bandwidth

    @property
    def doppler_bin(self) -> float:
        return 1.0 / self.frame_duration


# --- allocation schemes -----------------------------------------------------

@dataclass(frozen=True)
class Full:
    pass


@dataclass(frozen=True)
class TdmaUniform:
    period: int
    offset: int = 0


@dataclass(frozen=True)
class TdmaPattern:
    symbols: tuple[bool, ...]


@dataclass(frozen=True)
class FdmaBlocks:
    """Contiguous carrier ranges, each ``(start, stop)`` half-open."""
    ranges: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class FdmaFragmented:
    carriers: tuple[int, ...]


Scheme = Union[Full, TdmaUniform, TdmaPattern, FdmaBlocks, FdmaFragmented]


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class Binary:
    mask: np.ndarray


@dataclass(frozen=True)
class Continuous:
    weights: np.ndarray


Loading = Union[Uniform, Binary, Continuous]


def scheme_mask(numerology: Numerology, scheme: Scheme) -> np.ndarray:
    N, M = numerology.shape
    carriers = np.ones(N, dtype=bool)
    symbols = np.ones(M, dtype=bool)
    if isinstance(scheme, Full):
        pass
    elif isinstance(scheme, TdmaUniform):
        if scheme.period < 1 or not 0 <= scheme.offset < scheme.period:
            raise AllocationError(f"bad TDMA period/offset {scheme}")
        symbols = (np.arange(M) % scheme.period) == scheme.offset
    elif isinstance(scheme, TdmaPattern):
        symbols = np.asarray(scheme.symbols, dtype=bool)
        if symbols.shape != (M,):
            raise AllocationError(f"TDMA pattern needs {M} entries")
    elif isinstance(scheme, FdmaBlocks):
        carriers = np.zeros(N, dtype=bool)
        for start, stop in scheme.ranges:
            if not 0 <= start < stop <= N:
                raise AllocationError(f"carrier range {(start, stop)} outside 0..{N}")
            carriers[start:stop] = True
    elif isinstance(scheme, FdmaFragmented):
        idx = np.asarray(scheme.carriers, dtype=int)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= N:
            raise AllocationError(f"carrier indices outside 0..{N - 1}")
        carriers = np.zeros(N, dtype=bool)
        carriers[idx] = True
    else:
        raise TypeError(f"unknown scheme {scheme!r}")
    return np.outer(carriers, symbols)


@dataclass(frozen=True)
class ResourceAllocation:
    numerology: Numerology
    active: np.ndarray
    power: np.ndarray
    owner: Optional[np.ndarray] = None

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        power = np.asarray(self.power, dtype=float)
        if active.shape != self.numerology.shape or power.shape != active.shape:
            raise AllocationError("mask/power shape does not match numerology")
        if np.any(power < 0) or not np.all(np.isfinite(power)):
            raise AllocationError("power must be finite and non-negative")
        if np.any(power[~active] != 0):
            raise AllocationError("power on inactive resource elements")
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "power", power)
        if self.owner is not None:
            owner = np.asarray(self.owner, dtype=str)
            if owner.shape != active.shape:
                raise AllocationError("owner shape mismatch")
            object.__setattr__(self, "owner", owner)

    @property
    def total_power(self) -> float:
        return float(self.power.sum())

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def active_carriers(self) -> np.ndarray:
        return np.flatnonzero(self.active.any(axis=1))

    @property
    def active_symbols(self) -> np.ndarray:
        return np.flatnonzero(self.active.any(axis=0))

    def owners(self) -> list[str]:
        if self.owner is None:
            return []
        return sorted(set(self.owner[self.active].tolist()) - {""})

    def for_owner(self, tag: str) -> "ResourceAllocation":
        if self.owner is None:
            raise AllocationError("allocation has no owner tags")
        sel = self.active & (self.owner == tag)
        return ResourceAllocation(self.numerology, sel, np.where(sel, self.power, 0.0),
                                  np.where(sel, self.owner, ""))

    def scaled(self, total_power: float) -> "ResourceAllocation":
        return ResourceAllocation(self.numerology, self.active,
                                  self.power * (total_power / self.total_power), self.owner)


def build_allocation(numerology: Numerology, scheme: Scheme = Full(),
                     loading: Loading = Uniform(), total_power: float = 1.0,
                     owner: Optional[str] = None) -> ResourceAllocation:
    """Build an active-RE mask and normalised power grid.

    ``total_power`` is distributed over the active resource elements according
    to ``loading``; ``owner`` tags every active element with a link name.
    """
    if not total_power > 0:
        raise AllocationError("total_power must be > 0")
    mask = scheme_mask(numerology, scheme)
    if isinstance(loading, Uniform):
        weights = mask.astype(float)
    elif isinstance(loading, Binary):
        b = np.asarray(loading.mask, dtype=bool)
        if b.shape != mask.shape:
            raise AllocationError("binary loading mask shape mismatch")
        weights = (mask & b).astype(float)
    elif isinstance(loading, Continuous):
        w = np.asarray(loading.weights, dtype=float)
        if w.shape != mask.shape or np.any(w < 0):
            raise AllocationError("continuous weights must be non-negative and grid-shaped")
        weights = np.where(mask, w, 0.0)
    else:
        raise TypeError(f"unknown loading {loading!r}")
    if weights.sum() <= 0:
        raise AllocationError("allocation has no powered resource elements")
    active = weights > 0
    power = weights * (total_power / weights.sum())
    tags = None
    if owner is not None:
        tags = np.where(active, owner, "")
    return ResourceAllocation(numerology, active, power, tags)


def combine_allocations(allocs: Sequence[ResourceAllocation]) -> ResourceAllocation:
    """Merge per-link allocations into one shared frame; claims must be disjoint."""
    if not allocs:
        raise AllocationError("nothing to combine")
    num = allocs[0].numerology
    active = np.zeros(num.shape, dtype=bool)
    power = np.zeros(num.shape)
    owner = np.full(num.shape, "", dtype=object)
    for a in allocs:
        if a.numerology != num:
            raise AllocationError("allocations use different numerologies")
        if a.owner is None:
            raise AllocationError("every combined allocation needs an owner tag")
        clash = active & a.active
        if clash.any():
            k, m = np.argwhere(clash)[0]
            raise AllocationConflictError(
                f"RE (carrier {k}, symbol {m}) claimed by {owner[k, m]!r} and {a.owner[k, m]!r}")
        active |= a.active
        power += a.power
        owner[a.active] = a.owner[a.active]
    return ResourceAllocation(num, active, power, owner.astype(str))


# --- metrics ------------------------------------------------------------------

def rms_bandwidth(alloc: ResourceAllocation) -> float:
    """Root of the second central moment of the allocated power spectrum, Hz."""
    p = alloc.power.sum(axis=1)
    total = p.sum()
    if total <= 0:
        raise AllocationError("zero-power allocation")
    f = alloc.numerology.carrier_offsets
    mean = (p @ f) / total
    return float(np.sqrt(p @ (f - mean) ** 2 / total))


@dataclass(frozen=True)
class Limits:
    delay_resolution: float
    doppler_resolution: float
    max_unambiguous_doppler: float
    max_unambiguous_delay: float


def _lattice_step(indices: np.ndarray) -> int:
    if indices.size < 2:
        return 1
    return int(reduce(math.gcd, np.diff(indices).tolist()))


def unambiguous_limits(alloc: ResourceAllocation) -> Limits:
    """Resolution and unambiguous extent in delay and Doppler.

    Resolution follows the occupied extent (first to last active carrier or
    symbol, inclusive). The unambiguous extent follows the coarsest regular
    lattice that contains every active carrier/symbol, so TDMA with period
    ``p`` gives ``1 / (p * symbol_duration)``.
    """
    if alloc.n_active == 0:
        raise AllocationError("empty allocation")
    num = alloc.numerology
    k = alloc.active_carriers
    m = alloc.active_symbols
    occupied_bw = (k[-1] - k[0] + 1) * num.carrier_spacing
    occupied_t = (m[-1] - m[0] + 1) * num.symbol_duration
    return Limits(
        delay_resolution=1.0 / occupied_bw,
        doppler_resolution=1.0 / occupied_t,
        max_unambiguous_doppler=1.0 / (_lattice_step(m) * num.symbol_duration),
        max_unambiguous_delay=1.0 / (_lattice_step(k) * num.carrier_spacing),
    )


# --- symbols ------------------------------------------------------------------

@dataclass(frozen=True)
class FrameSymbols:
    """Frequency/slow-time frame; ``mask`` marks the REs the allocation reserves."""
    values: np.ndarray
    mask: np.ndarray
    numerology: Numerology

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != self.numerology.shape or mask.shape != values.shape:
            raise ValueError("frame shape does not match numerology")
        if np.any(values[~mask] != 0):
            raise ValueError("frame has energy outside its mask")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2))


@dataclass(frozen=True)
class MultisineMinPapr:
    pass


@dataclass(frozen=True)
class QamRandom:
    order: int = 16
    seed: int = 0


@dataclass(frozen=True)
class PilotPattern:
    stride: int = 4


SymbolMode = Union[MultisineMinPapr, QamRandom, PilotPattern]


def newman_phases(n: int) -> np.ndarray:
    """Newman's low-crest-factor phase schedule ``pi * j^2 / n``."""
    j = np.arange(n)
    return np.pi * j**2 / n


def qam_constellation(order: int) -> np.ndarray:
    """Square QAM alphabet with unit mean power."""
    side = int(round(math.sqrt(order)))
    if order < 4 or side * side != order:
        raise ValueError(f"unsupported QAM order {order}")
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    pts = (levels[:, None] + 1j * levels[None, :]).ravel()
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def generate_symbols(alloc: ResourceAllocation, mode: SymbolMode = MultisineMinPapr()) -> FrameSymbols:
    """Fill the allocation with transmit symbols.

    The frame energy always equals ``alloc.total_power``. Multisine frames have
    ``|X|^2 == power`` per element; QAM frames are rescaled as a whole.
    """
    num = alloc.numerology
    amp = np.sqrt(alloc.power)
    values = np.zeros(num.shape, dtype=complex)
    if isinstance(mode, MultisineMinPapr):
        for m in alloc.active_symbols:
            k = np.flatnonzero(alloc.active[:, m])
            values[k, m] = amp[k, m] * np.exp(1j * newman_phases(k.size))
    elif isinstance(mode, QamRandom):
        alphabet = qam_constellation(mode.order)
        rng = np.random.default_rng(mode.seed)
        pts = alphabet[rng.integers(0, alphabet.size, size=num.shape)]
        values = np.where(alloc.active, amp * pts, 0)
        values *= np.sqrt(alloc.total_power / np.sum(np.abs(values) ** 2))
    elif isinstance(mode, PilotPattern):
        if mode.stride < 1:
            raise ValueError("pilot stride must be >= 1")
        pilot = alloc.active & (np.arange(num.n_carriers) % mode.stride == 0)[:, None]
        if not pilot.any():
            raise AllocationError("no active carrier on the pilot lattice")
        values = np.where(pilot, amp, 0).astype(complex)
        values *= np.sqrt(alloc.total_power / np.sum(np.abs(values) ** 2))
    else:
        raise TypeError(f"unknown symbol mode {mode!r}")
    return FrameSymbols(values, alloc.active, num)


def ambiguity_function(frame: FrameSymbols, delay_grid, doppler_grid) -> ScatteringMap:
    """Delay-Doppler ambiguity of a frame by direct summation over its REs.

    ``chi(tau, alpha) = sum_{k,m} |X[k,m]|^2 exp(j2pi f_k tau) exp(j2pi t_m alpha)``,
    i.e. the autocorrelation of the multicarrier frame with carriers kept
    orthogonal by the cyclic extension. ``chi(0, 0)`` is the frame energy.
    """
    tau = np.asarray(delay_grid, dtype=float)
    alpha = np.asarray(doppler_grid, dtype=float)
    num = frame.numerology
    energy = np.abs(frame.values) ** 2
    k = np.flatnonzero(energy.any(axis=1))
    m = np.flatnonzero(energy.any(axis=0))
    a_tau = np.exp(2j * np.pi * np.outer(tau, num.carrier_offsets[k]))
    a_alpha = np.exp(2j * np.pi * np.outer(num.symbol_times[m], alpha))
    chi = a_tau @ energy[np.ix_(k, m)] @ a_alpha
    return ScatteringMap(np.abs(chi) ** 2, tau, alpha, chi,
                         normalization="chi(0,0) = frame energy")


# --- structured text import/export -------------------------------------------

def _rle(flat) -> list:
    out: list = []
    for v in flat:
        if out and out[-1][0] == v:
            out[-1][1] += 1
        else:
            out.append([v, 1])
    return out


def _unrle(runs) -> list:
    out: list = []
    for v, n in runs:
        out.extend([v] * int(n))
    return out


def numerology_to_dict(num: Numerology) -> dict:
    return {
        "n_carriers": num.n_carriers,
        "carrier_spacing_hz": num.carrier_spacing,
        "n_symbols": num.n_symbols,
        "symbol_duration_s": num.symbol_duration,
        "center_frequency_hz": num.center_frequency,
    }


def numerology_from_dict(d: dict) -> Numerology:
    return Numerology(int(d["n_carriers"]), float(d["carrier_spacing_hz"]),
                      int(d["n_symbols"]), float(d["symbol_duration_s"]),
                      float(d.get("center_frequency_hz", 5.2e9)))


def allocation_to_dict(alloc: ResourceAllocation) -> dict:
    """Carrier-major (row-major) run-length encoding of mask, owners and powers."""
    d = {
        "numerology": numerology_to_dict(alloc.numerology),
        "total_power": alloc.total_power,
        "active_rle": [[int(v), n] for v, n in _rle(alloc.active.ravel().tolist())],
        "power_active": alloc.power[alloc.active].tolist(),
    }
    if alloc.owner is not None:
        d["owner_rle"] = _rle(alloc.owner.ravel().tolist())
    return d


def allocation_from_dict(d: dict) -> ResourceAllocation:
    num = numerology_from_dict(d["numerology"])
    active = np.array(_unrle(d["active_rle"]), dtype=bool)
    if active.size != num.n_carriers * num.n_symbols:
        raise AllocationError("mask run lengths do not cover the grid")
    active = active.reshape(num.shape)
    power = np.zeros(num.shape)
    power[active] = np.asarray(d["power_active"], dtype=float)
    owner = None
    if "owner_rle" in d:
        owner = np.array(_unrle(d["owner_rle"]), dtype=str).reshape(num.shape)
    return ResourceAllocation(num, active, power, owner)
