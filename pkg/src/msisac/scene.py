"""Global-frame geometry of ISAC nodes, targets and clutter.

All positions are metres and velocities m/s in one Cartesian frame. Delays
returned here are *excess* delays (bounced path minus direct Tx-Rx path)
unless the name says otherwise.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

Vec3 = np.ndarray


class GeometryError(ValueError):
    """Singular or inconsistent scene geometry."""


def as_vec3(value) -> Vec3:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"expected 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"non-finite vector {arr}")
    return arr


class Role(enum.Enum):
    TX_ONLY = "tx"
    RX_ONLY = "rx"
    TXRX = "txrx"

    @property
    def can_transmit(self) -> bool:
        return self is not Role.RX_ONLY

    @property
    def can_receive(self) -> bool:
        return self is not Role.TX_ONLY


@dataclass(frozen=True)
class NodeState:
    id: str
    position: Vec3
    velocity: Vec3 = field(default_factory=lambda: np.zeros(3))
    role: Role = Role.TXRX
    carrier_frequency: float = 5.2e9

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        object.__setattr__(self, "velocity", as_vec3(self.velocity))
        object.__setattr__(self, "role", Role(self.role))
        if not self.carrier_frequency > 0:
            raise GeometryError(f"node {self.id!r}: carrier_frequency must be > 0")


@dataclass(frozen=True)
class TargetState:
    position: Vec3
    velocity: Vec3 = field(default_factory=lambda: np.zeros(3))
    mean_reflectivity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        object.__setattr__(self, "velocity", as_vec3(self.velocity))
        if not self.mean_reflectivity >= 0:
            raise GeometryError("mean_reflectivity must be >= 0")

    def at(self, dt: float) -> "TargetState":
        """Constant-velocity extrapolation by ``dt`` seconds."""
        return TargetState(self.position + dt * self.velocity, self.velocity,
                           self.mean_reflectivity)


@dataclass(frozen=True)
class BistaticLink:
    tx: str
    rx: str

    @property
    def is_monostatic(self) -> bool:
        return self.tx == self.rx

    def __str__(self) -> str:
        return f"{self.tx}->{self.rx}"


@dataclass(frozen=True)
class Scenario:
    nodes: tuple[NodeState, ...]
    targets: tuple[TargetState, ...] = ()
    clutter_points: tuple[tuple[Vec3, complex], ...] = ()
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(
            self, "clutter_points",
            tuple((as_vec3(p), complex(a)) for p, a in self.clutter_points))
        if not self.nodes:
            raise GeometryError("scenario needs at least one node")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"duplicate node ids in {ids}")

    def node(self, node_id: str) -> NodeState:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"unknown node id {node_id!r}")

    def check_link(self, link: BistaticLink) -> tuple[NodeState, NodeState]:
        tx, rx = self.node(link.tx), self.node(link.rx)
        if not tx.role.can_transmit:
            raise GeometryError(f"node {tx.id!r} cannot transmit")
        if not rx.role.can_receive:
            raise GeometryError(f"node {rx.id!r} cannot receive")
        if link.is_monostatic and tx.role is not Role.TXRX:
            raise GeometryError(f"monostatic link on {tx.id!r} needs role TXRX")
        return tx, rx

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "Scenario":
        """Rigid motion of the whole scene (positions rotated+shifted, velocities rotated)."""
        R = np.asarray(rotation, dtype=float)
        t = as_vec3(translation)
        nodes = [NodeState(n.id, R @ n.position + t, R @ n.velocity, n.role,
                           n.carrier_frequency) for n in self.nodes]
        targets = [TargetState(R @ g.position + t, R @ g.velocity, g.mean_reflectivity)
                   for g in self.targets]
        clutter = [(R @ p + t, a) for p, a in self.clutter_points]
        return Scenario(tuple(nodes), tuple(targets), tuple(clutter), self.speed_of_light)


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise GeometryError(f"coincident points ({what})")
    return v / n


def bistatic_range(tx_pos, rx_pos, tgt_pos) -> float:
    """Tx -> target -> Rx path length in metres."""
    tx_pos, rx_pos, tgt_pos = as_vec3(tx_pos), as_vec3(rx_pos), as_vec3(tgt_pos)
    return float(np.linalg.norm(tx_pos - tgt_pos) + np.linalg.norm(rx_pos - tgt_pos))


def excess_range(tx_pos, rx_pos, tgt_pos) -> float:
    return bistatic_range(tx_pos, rx_pos, tgt_pos) - float(
        np.linalg.norm(as_vec3(tx_pos) - as_vec3(rx_pos)))


def excess_delay(link: BistaticLink, scenario: Scenario, tgt_pos) -> float:
    """Excess time of flight of the bounced path over the direct path, seconds.

    For a monostatic link the direct path has zero length, so this is the
    two-way delay ``bistatic_range / c``.
    """
    tx, rx = scenario.check_link(link)
    return excess_range(tx.position, rx.position, tgt_pos) / scenario.speed_of_light


def _range_rate(p_from, v_from, p_to, v_to) -> float:
    """d/dt of |p_to - p_from| under constant velocities."""
    d = p_to - p_from
    n = np.linalg.norm(d)
    if n == 0:
        return 0.0
    return float(d @ (v_to - v_from) / n)


def bistatic_doppler(tx: NodeState, rx: NodeState, tgt: TargetState, carrier: float,
                     c: float = SPEED_OF_LIGHT) -> float:
    """Excess Doppler shift in Hz of the target path relative to the direct path.

    Computed as ``-(carrier/c) * d/dt[bistatic_range - los_range]``, so a
    shrinking excess range gives a positive shift.
    """
    if not carrier > 0:
        raise ValueError("carrier must be > 0")
    for node in (tx, rx):
        if np.array_equal(node.position, tgt.position):
            raise GeometryError(f"target coincides with node {node.id!r}")
    rate = (_range_rate(tx.position, tx.velocity, tgt.position, tgt.velocity)
            + _range_rate(rx.position, rx.velocity, tgt.position, tgt.velocity)
            - _range_rate(tx.position, tx.velocity, rx.position, rx.velocity))
    return -carrier / c * rate


def los_doppler(tx: NodeState, rx: NodeState, carrier: float,
                c: float = SPEED_OF_LIGHT) -> float:
    """Doppler shift of the direct Tx-Rx path, same sign convention."""
    return -carrier / c * _range_rate(tx.position, tx.velocity,
                                                   rx.position, rx.velocity)


def bistatic_angle(tx_pos, rx_pos, tgt_pos) -> float:
    """Angle at the target between the directions to Tx and Rx, in [0, pi]."""
    tgt_pos = as_vec3(tgt_pos)
    u_tx = _unit(as_vec3(tx_pos) - tgt_pos, "tx/target")
    u_rx = _unit(as_vec3(rx_pos) - tgt_pos, "rx/target")
    # atan2 keeps precision near 0 and pi where arccos does not
    return float(np.arctan2(np.linalg.norm(np.cross(u_tx, u_rx)), u_tx @ u_rx))


def cassini_excess_attenuation(link: BistaticLink, scenario: Scenario, tgt_pos) -> float:
    """Extra bistatic path attenuation in dB relative to direct Tx-Rx transmission.

    ``10 log10(R_los^2 / (R_tx^2 R_rx^2))`` with the scattering constant set to
    1 m^2, so 0 dB lies on the Cassini oval ``R_tx * R_rx = R_los``.
    Positive values mean the bounced path is *stronger* than the 0 dB level.
    """
    tx, rx = scenario.check_link(link)
    tgt_pos = as_vec3(tgt_pos)
    r_tx = np.linalg.norm(tx.position - tgt_pos)
    r_rx = np.linalg.norm(rx.position - tgt_pos)
    if r_tx == 0 or r_rx == 0:
        raise GeometryError("target at a node position")
    r_los = np.linalg.norm(tx.position - rx.position)
    with np.errstate(divide="ignore"):
        return float(10 * np.log10(r_los**2 / (r_tx**2 * r_rx**2)))


def excess_range_gradient(tx_pos, rx_pos, tgt_pos) -> np.ndarray:
    """Gradient of the excess range w.r.t. target position (sum of unit vectors)."""
    tgt_pos = as_vec3(tgt_pos)
    return (_unit(tgt_pos - as_vec3(tx_pos), "tx/target")
            + _unit(tgt_pos - as_vec3(rx_pos), "rx/target"))


def gdop(links: Sequence[BistaticLink], scenario: Scenario, tgt_pos, dims: int = 3) -> float:
    """Geometric dilution of precision for excess-delay multilateration.

    Position standard deviation (root of the covariance trace) equals
    ``gdop * c * sigma_tau`` for equal per-link delay noise ``sigma_tau``.
    ``dims=2`` restricts the solve to the x-y plane.
    Returns ``inf`` (with a warning) when the geometry is rank deficient.
    """
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    rows = []
    for link in links:
        tx, rx = scenario.check_link(link)
        rows.append(excess_range_gradient(tx.position, rx.position, tgt_pos)[:dims])
    J = np.array(rows).reshape(-1, dims)
    s = np.linalg.svd(J, compute_uv=False) if J.size else np.zeros(0)
    if len(s) < dims or s[-1] <= 1e-10 * max(s[0], 1e-300):
        warnings.warn(f"rank-deficient geometry: singular values {s}", RuntimeWarning,
                      stacklevel=2)
        return float("inf")
    return float(np.sqrt(np.sum(1.0 / s**2)))


def links_all(nodes: Iterable[NodeState], monostatic: bool = False) -> list[BistaticLink]:
    """Enumerate every admissible Tx/Rx pairing (up to N^2 measurements)."""
    nodes = list(nodes)
    out = []
    for tx in nodes:
        if not tx.role.can_transmit:
            continue
        for rx in nodes:
            if not rx.role.can_receive:
                continue
            if tx.id == rx.id and not (monostatic and tx.role is Role.TXRX):
                continue
            out.append(BistaticLink(tx.id, rx.id))
    return out
