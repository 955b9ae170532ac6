"""Target position and velocity from per-link excess delay and Doppler."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .scene import (BistaticLink, Scenario, as_vec3, excess_range,
                    excess_range_gradient)


class LocalizationError(ValueError):
    pass


class RankDeficientError(LocalizationError):
    """Geometry does not determine every unknown."""


class TimeAlignmentError(LocalizationError):
    pass


@dataclass(frozen=True)
class BistaticObservation:
    link: BistaticLink
    etof: float
    etof_var: float
    edoppler: Optional[float] = None
    edoppler_var: Optional[float] = None
    timestamp: float = 0.0

    def __post_init__(self):
        if not self.etof_var > 0:
            raise ValueError("etof_var must be > 0")
        if self.edoppler is not None and not (self.edoppler_var or 0) > 0:
            raise ValueError("edoppler_var must be > 0 when edoppler is given")


@dataclass(frozen=True)
class PositionSolution:
    position: np.ndarray
    covariance: np.ndarray
    iterations: int
    residual_rms: float
    converged: bool
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def position_std(self) -> float:
        """Root of the covariance trace, metres."""
        return float(np.sqrt(np.trace(self.covariance)))


@dataclass(frozen=True)
class VelocitySolution:
    velocity: np.ndarray
    covariance: np.ndarray


def _dims(plane_z: Optional[float]) -> int:
    return 3 if plane_z is None else 2


def _check_rank(J: np.ndarray, what: str) -> None:
    s = np.linalg.svd(J, compute_uv=False)
    if s.size < J.shape[1] or s[-1] <= 1e-9 * max(s[0], 1e-300):
        raise RankDeficientError(f"{what}: design matrix rank deficient (singular values {s})")


def _ray_to_ellipsoid(centre, direction, tx, rx, total: float) -> np.ndarray:
    def g(s):
        p = centre + s * direction
        return np.linalg.norm(p - tx) + np.linalg.norm(p - rx) - total
    hi = total + 1.0
    s = optimize.brentq(g, 0.0, hi, xtol=1e-12)
    return centre + s * direction


def default_init(obs: Sequence[BistaticObservation], scenario: Scenario,
                 plane_z: Optional[float] = None) -> np.ndarray:
    """Mean of per-link ellipsoid points seen from the node centroid.

    For each link, the ray from the ellipsoid centre towards the node
    centroid is intersected with the eToF ellipsoid; the points are averaged.
    If the centroid coincides with a centre, the ray runs perpendicular to the
    baseline (in the x-y plane when possible).
    """
    c = scenario.speed_of_light
    ref = np.mean([n.position for n in scenario.nodes], axis=0)
    if plane_z is not None:
        ref = np.array([ref[0], ref[1], plane_z])
    pts = []
    for o in obs:
        tx, rx = scenario.check_link(o.link)
        total = np.linalg.norm(tx.position - rx.position) + c * max(o.etof, 0.0)
        centre = 0.5 * (tx.position + rx.position)
        if plane_z is not None:
            centre = np.array([centre[0], centre[1], plane_z])
        d = ref - centre
        if np.linalg.norm(d) < 1e-9:
            base = rx.position - tx.position
            d = np.cross(base, [0.0, 0.0, 1.0]) if np.linalg.norm(base[:2]) > 0 else np.array([1.0, 0, 0])
        d = d / np.linalg.norm(d)
        try:
            pts.append(_ray_to_ellipsoid(centre, d, tx.position, rx.position, total))
        except ValueError:
            pts.append(centre)
    p = np.mean(pts, axis=0)
    if plane_z is not None:
        p[2] = plane_z
    return p


def _design(obs, scenario, p, dims):
    c = scenario.speed_of_light
    r = np.empty(len(obs))
    J = np.empty((len(obs), dims))
    for i, o in enumerate(obs):
        tx, rx = scenario.check_link(o.link)
        r[i] = excess_range(tx.position, rx.position, p) / c - o.etof
        J[i] = excess_range_gradient(tx.position, rx.position, p)[:dims] / c
    return r, J


def solve_position(obs: Sequence[BistaticObservation], scenario: Scenario, init=None,
                   max_iter: int = 50, tol: float = 1e-10, plane_z: Optional[float] = None,
                   max_timestamp_spread: Optional[float] = None) -> PositionSolution:
    """Weighted Gauss-Newton multilateration from excess delays.

    Parameters
    ----------
    obs : sequence of BistaticObservation
        At least 3 (or 2 with ``plane_z``).
    init : array-like, optional
        Starting point; defaults to :func:`default_init`.
    tol : float
        Convergence when the step norm drops below this many metres.
    plane_z : float, optional
        Constrain the target to the plane ``z = plane_z`` (2D solve).
    max_timestamp_spread : float, optional
        Reject epochs whose observation timestamps spread wider than this.

    Returns
    -------
    PositionSolution
        Covariance ``(J^T W J)^-1`` in m^2 with ``W = diag(1/etof_var)``.
    """
    dims = _dims(plane_z)
    obs = list(obs)
    if len(obs) < dims:
        raise RankDeficientError(f"{len(obs)} observations cannot fix {dims} coordinates")
    if max_timestamp_spread is not None:
        ts = [o.timestamp for o in obs]
        if max(ts) - min(ts) > max_timestamp_spread:
            raise TimeAlignmentError(
                f"timestamps spread {max(ts) - min(ts):.3g} s > {max_timestamp_spread} s")
    p = as_vec3(init) if init is not None else default_init(obs, scenario, plane_z)
    if plane_z is not None:
        p = np.array([p[0], p[1], plane_z])
    sw = 1.0 / np.sqrt([o.etof_var for o in obs])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r, J = _design(obs, scenario, p, dims)
        _check_rank(J, "position")
        step = -np.linalg.pinv(J * sw[:, None]) @ (r * sw)
        p = p.copy()
        p[:dims] += step
        if np.linalg.norm(step) < tol:
            converged = True
            break
    r, J = _design(obs, scenario, p, dims)
    _check_rank(J, "position")
    Jw = J * sw[:, None]
    cov_d = np.linalg.inv(Jw.T @ Jw)
    cov = np.zeros((3, 3))
    cov[:dims, :dims] = 0.5 * (cov_d + cov_d.T)
    return PositionSolution(p, cov, it, float(np.sqrt(np.mean(r**2))), converged, r)


def solve_velocity(position, obs: Sequence[BistaticObservation], scenario: Scenario,
                   carrier: Optional[float] = None, planar: bool = False) -> VelocitySolution:
    """Linear weighted LS for target velocity from excess Doppler.

    Each observation gives ``edoppler = -(fc/c) <v, u_tx + u_rx> + known``
    where ``u`` are unit vectors from the nodes to the target and the known
    part collects node motion (including the direct-path range rate).
    """
    p = as_vec3(position)
    dims = 2 if planar else 3
    rows, data, wts = [], [], []
    c = scenario.speed_of_light
    for o in obs:
        if o.edoppler is None:
            continue
        tx, rx = scenario.check_link(o.link)
        fc = carrier if carrier is not None else tx.carrier_frequency
        u_tx = p - tx.position
        u_rx = p - rx.position
        u_tx = u_tx / np.linalg.norm(u_tx)
        u_rx = u_rx / np.linalg.norm(u_rx)
        base = rx.position - tx.position
        nb = np.linalg.norm(base)
        los_rate = base @ (rx.velocity - tx.velocity) / nb if nb > 0 else 0.0
        known = fc / c * (u_tx @ tx.velocity + u_rx @ rx.velocity + los_rate)
        rows.append(-fc / c * (u_tx + u_rx)[:dims])
        data.append(o.edoppler - known)
        wts.append(1.0 / o.edoppler_var)
    if len(rows) < dims:
        raise RankDeficientError(f"{len(rows)} Doppler observations cannot fix {dims} components")
    A = np.array(rows)
    sw = np.sqrt(wts)
    Aw = A * sw[:, None]
    _check_rank(Aw, "velocity (Doppler-blind direction)")
    N = Aw.T @ Aw
    v_d = np.linalg.solve(N, Aw.T @ (np.array(data) * sw))
    cov_d = np.linalg.inv(N)
    v = np.zeros(3)
    v[:dims] = v_d
    cov = np.zeros((3, 3))
    cov[:dims, :dims] = 0.5 * (cov_d + cov_d.T)
    return VelocitySolution(v, cov)


def ellipse_points(link: BistaticLink, scenario: Scenario, etof: float, plane_z: float = 0.0,
                   n_points: int = 181) -> np.ndarray:
    """Closed polyline of the eToF locus intersected with ``z = plane_z``.

    The locus is the prolate spheroid ``|p - tx| + |p - rx| = R_los + c etof``;
    its plane section is sampled uniformly in eccentric anomaly. Returns an
    ``(n_points, 3)`` array whose first and last rows are identical. At zero
    excess delay the locus collapses to the baseline segment.
    """
    if etof < 0:
        raise ValueError("etof must be >= 0")
    if n_points < 3:
        raise ValueError("n_points must be >= 3")
    tx, rx = scenario.check_link(link)
    c = scenario.speed_of_light
    F1, F2 = tx.position, rx.position
    f = 0.5 * np.linalg.norm(F2 - F1)
    a = f + 0.5 * c * etof
    centre = 0.5 * (F1 + F2)
    E = np.linspace(0.0, 2 * np.pi, n_points)
    if a <= 0:
        raise ValueError("zero-size locus (monostatic link with zero delay)")
    b2 = a * a - f * f
    if b2 <= 1e-18 * a * a:
        if abs(F1[2] - plane_z) > 1e-9 or abs(F2[2] - plane_z) > 1e-9:
            raise ValueError("degenerate locus (baseline segment) does not lie in the plane")
        s = 0.5 * (1 - np.cos(E))
        pts = F1 + s[:, None] * (F2 - F1)
        pts[-1] = pts[0]
        return pts
    e = (F2 - F1) / (2 * f) if f > 0 else np.array([1.0, 0.0, 0.0])
    Q = np.outer(e, e) / a**2 + (np.eye(3) - np.outer(e, e)) / b2
    dz = plane_z - centre[2]
    Q2 = Q[:2, :2]
    q0 = -dz * np.linalg.solve(Q2, Q[:2, 2])
    rhs = 1.0 - Q[2, 2] * dz**2 + q0 @ Q2 @ q0
    if rhs < 0:
        raise ValueError(f"plane z={plane_z} misses the eToF ellipsoid")
    lam, V = np.linalg.eigh(Q2)
    axes = np.sqrt(rhs / lam)
    xy = centre[:2] + q0 + (V @ (axes[:, None] * np.vstack([np.cos(E), np.sin(E)]))).T
    pts = np.column_stack([xy, np.full(n_points, plane_z)])
    pts[-1] = pts[0]
    return pts


@dataclass(frozen=True)
class OutlierReport:
    kept: tuple[int, ...]
    dropped: tuple[int, ...]
    standardized_residuals: np.ndarray
    solution: PositionSolution


def _standardized(obs, sol: PositionSolution) -> np.ndarray:
    return np.abs(sol.residuals) / np.sqrt([o.etof_var for o in obs])


def reject_outliers(obs: Sequence[BistaticObservation], scenario: Scenario,
                    provisional: Optional[PositionSolution] = None, k: float = 3.0,
                    plane_z: Optional[float] = None, min_keep: int = 3,
                    max_exhaustive: int = 12) -> tuple[list[BistaticObservation], OutlierReport]:
    """Drop inconsistent observations by largest-consensus subset search.

    Subsets are tried from the full set downwards; the first size with a
    subset whose standardised residuals are all ``<= k`` wins. Among equal
    sizes the lowest residual RMS wins, then the lexicographically first
    index tuple. The full set is kept when it is already consistent.
    """
    obs = list(obs)
    n = len(obs)
    if n < min_keep:
        raise LocalizationError(f"{n} observations, need at least {min_keep}")
    if n > max_exhaustive:
        raise LocalizationError(f"exhaustive search limited to {max_exhaustive} observations")
    init = provisional.position if provisional is not None else None
    full = solve_position(obs, scenario, init=init, plane_z=plane_z)
    z = _standardized(obs, full)
    if np.all(z <= k) or n == min_keep:
        if not np.all(z <= k):
            raise LocalizationError("inconsistent observations but none can be excluded")
        return obs, OutlierReport(tuple(range(n)), (), z, full)
    for size in range(n - 1, min_keep - 1, -1):
        best = None
        for subset in itertools.combinations(range(n), size):
            sub = [obs[i] for i in subset]
            try:
                sol = solve_position(sub, scenario, init=full.position, plane_z=plane_z)
            except RankDeficientError:
                continue
            zs = _standardized(sub, sol)
            if np.all(zs <= k):
                rms = float(np.sqrt(np.mean(zs**2)))
                if best is None or rms < best[0] - 1e-12:
                    best = (rms, subset, sol)
        if best is not None:
            _, subset, sol = best
            kept = [obs[i] for i in subset]
            # residuals of every observation against the consensus solution
            r, _ = _design(obs, scenario, sol.position, _dims(plane_z))
            z_all = np.abs(r) / np.sqrt([o.etof_var for o in obs])
            dropped = tuple(i for i in range(n) if i not in subset)
            return kept, OutlierReport(tuple(subset), dropped, z_all, sol)
    raise LocalizationError(f"no consistent subset of at least {min_keep} observations")


# --- delimited text -------------------------------------------------------------

OBS_HEADER = ["tx", "rx", "etof_ns", "etof_var_ns2", "edoppler_hz", "edoppler_var_hz2",
              "timestamp_s"]


def read_observations(text: str) -> list[BistaticObservation]:
    """Parse CSV rows with header ``tx,rx,etof_ns,etof_var_ns2,edoppler_hz,edoppler_var_hz2,timestamp_s``.

    Empty Doppler cells mean no Doppler measurement.
    """
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        missing = [h for h in ("tx", "rx", "etof_ns", "etof_var_ns2") if not row.get(h)]
        if missing:
            raise ValueError(f"observation row missing {missing}")
        dop = row.get("edoppler_hz") or None
        out.append(BistaticObservation(
            BistaticLink(row["tx"], row["rx"]), float(row["etof_ns"]) * 1e-9,
            float(row["etof_var_ns2"]) * 1e-18,
            float(dop) if dop is not None else None,
            float(row["edoppler_var_hz2"]) if dop is not None else None,
            float(row.get("timestamp_s") or 0.0)))
    return out


def write_observations(obs: Sequence[BistaticObservation]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(OBS_HEADER)
    for o in obs:
        wr.writerow([o.link.tx, o.link.rx, repr(o.etof * 1e9), repr(o.etof_var * 1e18),
                     "" if o.edoppler is None else repr(o.edoppler),
                     "" if o.edoppler is None else repr(o.edoppler_var), repr(o.timestamp)])
    return buf.getvalue()


def solution_csv(pos: PositionSolution, vel: Optional[VelocitySolution] = None) -> str:
    """One-row table: position [m], row-major covariance [m^2], optional velocity block."""
    head = ["x_m", "y_m", "z_m"] + [f"cov{i}{j}_m2" for i in range(3) for j in range(3)]
    vals = list(pos.position) + list(pos.covariance.ravel())
    head += ["iterations", "residual_rms_s", "converged"]
    vals += [pos.iterations, pos.residual_rms, int(pos.converged)]
    if vel is not None:
        head += ["vx_mps", "vy_mps", "vz_mps"] + [f"vcov{i}{j}_m2ps2" for i in range(3) for j in range(3)]
        vals += list(vel.velocity) + list(vel.covariance.ravel())
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(head)
    wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in vals])
    return buf.getvalue()
