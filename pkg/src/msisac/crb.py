"""Fisher information and Cramer-Rao bounds for the specular delay-Doppler model.

Parameters are ordered per path as ``[tau_p, alpha_p, Re gamma_p, Im gamma_p]``
and concatenated over paths (length ``4P``). The noise after inverse
filtering is white complex Gaussian with variance ``sigma^2 / power[k, m]``
on each active RE, so every RE contributes with weight ``power / sigma^2``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .waveform import ResourceAllocation

PARAM_KINDS = ("delay", "doppler", "gain_re", "gain_im")
PARAM_UNITS = {"delay": "s^2", "doppler": "Hz^2", "gain_re": "amplitude^2",
               "gain_im": "amplitude^2"}

# condition number above which F is declared singular
SINGULAR_CONDITION = 1e12


class IdentifiabilityError(ValueError):
    """Singular Fisher information; ``null_space`` holds the offending directions."""

    def __init__(self, message: str, null_space: np.ndarray, names: Sequence[str]):
        super().__init__(message)
        self.null_space = null_space
        self.names = list(names)


class PowerMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ParamVector:
    delays: np.ndarray
    dopplers: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.delays, dtype=float))
        a = np.atleast_1d(np.asarray(self.dopplers, dtype=float))
        g = np.atleast_1d(np.asarray(self.gains, dtype=complex))
        if not d.shape == a.shape == g.shape or d.ndim != 1:
            raise ValueError("delays, dopplers and gains need one entry per path")
        object.__setattr__(self, "delays", d)
        object.__setattr__(self, "dopplers", a)
        object.__setattr__(self, "gains", g)

    @property
    def n_paths(self) -> int:
        return self.delays.size

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.delays, self.dopplers, self.gains.real,
                                self.gains.imag]).ravel()

    @classmethod
    def from_array(cls, x) -> "ParamVector":
        a = np.asarray(x, dtype=float).reshape(-1, 4)
        return cls(a[:, 0], a[:, 1], a[:, 2] + 1j * a[:, 3])

    def names(self) -> list[str]:
        return [f"{kind}[{p}]" for p in range(self.n_paths) for kind in PARAM_KINDS]

    def index(self, kind: str, path: int = 0) -> int:
        return 4 * path + PARAM_KINDS.index(kind)


@dataclass(frozen=True)
class FisherMatrix:
    matrix: np.ndarray
    noise_power: float
    names: tuple[str, ...] = ()

    def __add__(self, other: "FisherMatrix") -> "FisherMatrix":
        if self.noise_power != other.noise_power:
            raise ValueError("cannot add FIMs with different noise power")
        return FisherMatrix(self.matrix + other.matrix, self.noise_power, self.names)


def model_jacobian(theta: ParamVector, f: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Complex derivatives ``dH/dtheta`` at sample points ``(f, t)``, shape ``(S, 4P)``."""
    a = np.exp(-2j * np.pi * (np.outer(f, theta.delays) + np.outer(t, theta.dopplers)))
    ga = a * theta.gains
    cols = []
    for p in range(theta.n_paths):
        cols += [-2j * np.pi * f * ga[:, p], -2j * np.pi * t * ga[:, p], a[:, p], 1j * a[:, p]]
    return np.column_stack(cols)


def model_values(theta: ParamVector, f: np.ndarray, t: np.ndarray) -> np.ndarray:
    a = np.exp(-2j * np.pi * (np.outer(f, theta.delays) + np.outer(t, theta.dopplers)))
    return a @ theta.gains


def _samples(alloc: ResourceAllocation):
    k, m = np.nonzero(alloc.active)
    num = alloc.numerology
    return num.carrier_offsets[k], num.symbol_times[m], alloc.power[k, m]


def fisher(theta: ParamVector, alloc: ResourceAllocation, noise_power: float) -> FisherMatrix:
    """Slepian-Bangs information ``(2/sigma^2) Re sum_r p_r dH_r^* dH_r^T``."""
    if not noise_power > 0:
        raise ValueError("noise_power must be > 0")
    if alloc.n_active == 0:
        raise ValueError("allocation is empty")
    f, t, p = _samples(alloc)
    D = model_jacobian(theta, f, t)
    F = 2.0 / noise_power * np.real(D.conj().T @ (p[:, None] * D))
    return FisherMatrix(0.5 * (F + F.T), noise_power, tuple(theta.names()))


@dataclass(frozen=True)
class CrbResult:
    bounds: np.ndarray
    names: tuple[str, ...]
    units: tuple[str, ...]
    condition: float
    rank: int

    def bound(self, name: str) -> float:
        return float(self.bounds[self.names.index(name)])


def _units(names: Sequence[str]) -> tuple[str, ...]:
    return tuple(PARAM_UNITS.get(n.split("[")[0], "") for n in names)


def crb_bounds(fim: FisherMatrix, allow_pinv: bool = False) -> CrbResult:
    """Diagonal of ``F^-1`` via symmetric eigendecomposition.

    ``F`` is first equilibrated to unit diagonal so the condition number
    compares parameters of different units fairly. A condition number above
    ``1e12`` (or a zero diagonal entry) raises :class:`IdentifiabilityError`
    naming the null-space directions, unless ``allow_pinv`` is set, in which
    case the pseudo-inverse is used and the numerical rank is reported.
    """
    F = fim.matrix
    n = F.shape[0]
    names = fim.names or tuple(f"theta[{i}]" for i in range(n))
    diag = np.diag(F).copy()
    live = diag > 0
    d = np.where(live, 1.0 / np.sqrt(np.where(live, diag, 1.0)), 0.0)
    Fs = F * np.outer(d, d)
    lam, V = np.linalg.eigh(Fs)
    top = lam.max() if lam.size else 0.0
    keep = lam > top / SINGULAR_CONDITION if top > 0 else np.zeros(lam.size, bool)
    # directions through dead parameters carry zero eigenvalues already
    rank = int(keep.sum())
    cond = float(top / lam.min()) if rank == n and lam.min() > 0 else float("inf")
    if rank < n and not allow_pinv:
        null = (V[:, ~keep] * d[:, None]) if live.all() else V[:, ~keep]
        null = null / np.linalg.norm(null, axis=0, keepdims=True).clip(1e-300)
        dirs = []
        for col in V[:, ~keep].T:
            big = np.argsort(-np.abs(col))[:3]
            dirs.append(" + ".join(f"{col[i]:+.2f}*{names[i]}" for i in big if abs(col[i]) > 1e-3))
        raise IdentifiabilityError(
            f"Fisher matrix singular (scaled cond {cond:.3g}, rank {rank}/{n}); "
            f"null directions: {'; '.join(dirs)}", null, names)
    inv_s = (V[:, keep] / lam[keep]) @ V[:, keep].T
    bounds = np.diag(inv_s) * d**2
    bounds = np.where(live, bounds, np.inf)
    return CrbResult(bounds, tuple(names), _units(names), cond, rank)


def crb(theta: ParamVector, alloc: ResourceAllocation, noise_power: float) -> CrbResult:
    return crb_bounds(fisher(theta, alloc, noise_power))


def single_tone_doppler_crb(noise_power: float, gain: complex, symbol_duration: float,
                            n_symbols: int, n_carriers: int) -> float:
    """Classical frequency bound for one complex tone seen on ``n_carriers`` looks."""
    M = n_symbols
    return 6 * noise_power / ((2 * np.pi) ** 2 * abs(gain) ** 2 * symbol_duration**2
                              * M * (M**2 - 1) * n_carriers)


def re_information_score(theta: ParamVector, alloc: ResourceAllocation, target_index: int,
                         noise_power: float, candidate_power: Optional[float] = None) -> np.ndarray:
    """CRB improvement of one parameter attributable to each resource element.

    For an inactive RE the score is the drop in ``CRB(theta_i)`` when that RE
    is added with ``candidate_power`` (default: the mean active power). For
    an active RE it is the increase when the RE is removed, i.e. the drop it
    is currently providing. Each RE contributes a rank-two real update
    ``(2 p / sigma^2)(u u^T + v v^T)`` with ``d = u + j v``, which is applied
    with the Woodbury identity. Zero-power REs score zero, and removals that
    make ``F`` singular score ``inf``.
    """
    fim = fisher(theta, alloc, noise_power).matrix
    C = np.linalg.inv(fim)
    num = alloc.numerology
    if candidate_power is None:
        candidate_power = alloc.total_power / alloc.n_active
    K, Mm = np.meshgrid(np.arange(num.n_carriers), np.arange(num.n_symbols), indexing="ij")
    f = num.carrier_offsets[K.ravel()]
    t = num.symbol_times[Mm.ravel()]
    D = model_jacobian(theta, f, t)
    p = np.where(alloc.active.ravel(), alloc.power.ravel(), candidate_power)
    sign = np.where(alloc.active.ravel(), -1.0, 1.0)
    c_i = C[:, target_index]
    scores = np.zeros(f.size)
    for r in range(f.size):
        if p[r] == 0:
            continue
        U = np.sqrt(2 * p[r] / noise_power) * np.column_stack([D[r].real, D[r].imag])
        S = np.eye(2) + sign[r] * U.T @ C @ U
        if abs(np.linalg.det(S)) < 1e-12 * max(1.0, np.abs(S).max() ** 2):
            scores[r] = np.inf
            continue
        w = U.T @ c_i
        delta = w @ np.linalg.solve(S, w)
        # adding lowers the bound by delta, removing raises it by delta
        scores[r] = delta
    return scores.reshape(num.shape)


Objective = Union[Mapping[str, float], np.ndarray]


def _objective_weights(obj: Objective, n_params: int) -> np.ndarray:
    if isinstance(obj, Mapping):
        w = np.zeros(n_params)
        for kind, weight in obj.items():
            if kind not in PARAM_KINDS:
                raise ValueError(f"unknown parameter kind {kind!r}")
            w[PARAM_KINDS.index(kind)::4] = weight
        return w
    w = np.asarray(obj, dtype=float)
    if w.shape != (n_params,):
        raise ValueError(f"objective weights need {n_params} entries")
    return w


@dataclass(frozen=True)
class RankedCandidate:
    index: int
    objective: float
    bounds: CrbResult
    allocation: ResourceAllocation


def compare_allocations(candidates: Sequence[ResourceAllocation], theta: ParamVector,
                        noise_power: float, objective: Objective = {"delay": 1.0},
                        rtol: float = 1e-9) -> list[RankedCandidate]:
    """Rank allocations by a weighted sum of CRBs (ascending, stable).

    All candidates must carry the same total power within ``rtol``.
    """
    if not candidates:
        return []
    ref = candidates[0].total_power
    for i, c in enumerate(candidates):
        if abs(c.total_power - ref) > rtol * abs(ref):
            raise PowerMismatchError(
                f"candidate {i} has total power {c.total_power}, expected {ref}")
    w = _objective_weights(objective, 4 * theta.n_paths)
    ranked = []
    for i, c in enumerate(candidates):
        res = crb(theta, c, noise_power)
        ranked.append(RankedCandidate(i, float(w @ res.bounds), res, c))
    return sorted(ranked, key=lambda rc: rc.objective)


def crb_table_csv(result: CrbResult) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["parameter", "bound", "units"])
    for n, b, u in zip(result.names, result.bounds, result.units):
        wr.writerow([n, repr(float(b)), u])
    return buf.getvalue()
