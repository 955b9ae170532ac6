"""Experiment configuration: JSON documents with units in the key names.

:func:`normalize` checks a raw document and fills every default, producing
the config echo stored in reports. :func:`build` turns the echo into library
objects.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..channel import Fluctuation, FluctuationModel
from ..estimation import EstimatorConfig
from ..scene import BistaticLink, NodeState, Role, Scenario, SPEED_OF_LIGHT, TargetState
from ..waveform import (Binary, Continuous, FdmaBlocks, FdmaFragmented, Full, Numerology,
                        ResourceAllocation, TdmaPattern, TdmaUniform, Uniform,
                        build_allocation, combine_allocations, scheme_mask)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_MISSING = object()


def _field(d: dict, key: str, path: str, kind, default=_MISSING):
    full = f"{path}.{key}" if path else key
    if not isinstance(d, dict):
        raise ConfigError(path or "<root>", "expected an object")
    if key not in d or d[key] is None:
        if default is _MISSING:
            raise ConfigError(full, "required field missing")
        return copy.deepcopy(default)
    v = d[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
            raise ConfigError(full, f"expected a finite number, got {v!r}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(full, f"expected an integer, got {v!r}")
        return v
    if kind == "vec3":
        if (not isinstance(v, list) or len(v) != 3
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            raise ConfigError(full, f"expected [x, y, z], got {v!r}")
        return [float(x) for x in v]
    if kind is str:
        if not isinstance(v, str):
            raise ConfigError(full, f"expected a string, got {v!r}")
        return v
    if kind is list:
        if not isinstance(v, list):
            raise ConfigError(full, f"expected a list, got {v!r}")
        return v
    if kind is dict:
        if not isinstance(v, dict):
            raise ConfigError(full, f"expected an object, got {v!r}")
        return v
    if kind is bool:
        if not isinstance(v, bool):
            raise ConfigError(full, f"expected true/false, got {v!r}")
        return v
    raise TypeError(kind)


def _unknown(d: dict, allowed: set, path: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


# --- normalisation ---------------------------------------------------------------

def _norm_node(d, path):
    _unknown(d, {"id", "position_m", "velocity_mps", "role", "carrier_frequency_hz"}, path)
    role = _field(d, "role", path, str, "txrx")
    if role not in {r.value for r in Role}:
        raise ConfigError(f"{path}.role", f"expected one of tx, rx, txrx; got {role!r}")
    return {
        "id": _field(d, "id", path, str),
        "position_m": _field(d, "position_m", path, "vec3"),
        "velocity_mps": _field(d, "velocity_mps", path, "vec3", [0.0, 0.0, 0.0]),
        "role": role,
        "carrier_frequency_hz": _field(d, "carrier_frequency_hz", path, float, 5.2e9),
    }


def _norm_fluct(v, path):
    if v is None:
        return {"kind": "deterministic", "k_factor": 0.0}
    if isinstance(v, str):
        v = {"kind": v}
    _unknown(v, {"kind", "k_factor"}, path)
    kind = _field(v, "kind", path, str)
    if kind not in {f.value for f in Fluctuation}:
        raise ConfigError(f"{path}.kind", f"expected deterministic, rayleigh or rician; got {kind!r}")
    k = _field(v, "k_factor", path, float, 0.0)
    if k < 0:
        raise ConfigError(f"{path}.k_factor", "must be >= 0")
    return {"kind": kind, "k_factor": k}


def _norm_target(d, path):
    _unknown(d, {"position_m", "velocity_mps", "mean_reflectivity", "fluctuation"}, path)
    rho = _field(d, "mean_reflectivity", path, float, 1.0)
    if rho < 0:
        raise ConfigError(f"{path}.mean_reflectivity", "must be >= 0")
    return {
        "position_m": _field(d, "position_m", path, "vec3"),
        "velocity_mps": _field(d, "velocity_mps", path, "vec3", [0.0, 0.0, 0.0]),
        "mean_reflectivity": rho,
        "fluctuation": _norm_fluct(d.get("fluctuation"), f"{path}.fluctuation"),
    }


def _norm_clutter(d, path):
    _unknown(d, {"position_m", "amplitude"}, path)
    amp = d.get("amplitude", [1.0, 0.0])
    if isinstance(amp, (int, float)) and not isinstance(amp, bool):
        amp = [float(amp), 0.0]
    if not (isinstance(amp, list) and len(amp) == 2):
        raise ConfigError(f"{path}.amplitude", "expected a number or [re, im]")
    return {"position_m": _field(d, "position_m", path, "vec3"),
            "amplitude": [float(amp[0]), float(amp[1])]}


def _norm_scenario(d, path="scenario"):
    _unknown(d, {"nodes", "targets", "clutter", "speed_of_light_mps"}, path)
    nodes = _field(d, "nodes", path, list)
    if not nodes:
        raise ConfigError(f"{path}.nodes", "at least one node is required")
    out_nodes = [_norm_node(n, f"{path}.nodes[{i}]") for i, n in enumerate(nodes)]
    ids = [n["id"] for n in out_nodes]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}.nodes", f"duplicate node ids {ids}")
    return {
        "nodes": out_nodes,
        "targets": [_norm_target(t, f"{path}.targets[{i}]")
                    for i, t in enumerate(_field(d, "targets", path, list, []))],
        "clutter": [_norm_clutter(c, f"{path}.clutter[{i}]")
                    for i, c in enumerate(_field(d, "clutter", path, list, []))],
        "speed_of_light_mps": _field(d, "speed_of_light_mps", path, float, SPEED_OF_LIGHT),
    }


def _norm_numerology(d, path="numerology"):
    _unknown(d, {"n_carriers", "carrier_spacing_hz", "n_symbols", "symbol_duration_s",
                 "center_frequency_hz"}, path)
    out = {
        "n_carriers": _field(d, "n_carriers", path, int),
        "carrier_spacing_hz": _field(d, "carrier_spacing_hz", path, float),
        "n_symbols": _field(d, "n_symbols", path, int),
        "symbol_duration_s": _field(d, "symbol_duration_s", path, float),
        "center_frequency_hz": _field(d, "center_frequency_hz", path, float, 5.2e9),
    }
    try:
        Numerology(out["n_carriers"], out["carrier_spacing_hz"], out["n_symbols"],
                   out["symbol_duration_s"], out["center_frequency_hz"])
    except ValueError as e:
        raise ConfigError(path, str(e)) from None
    return out


_SCHEMES = {"full": set(), "tdma_uniform": {"period", "offset"}, "tdma_pattern": {"symbols"},
            "fdma_blocks": {"ranges"}, "fdma_fragmented": {"carriers"}}


def _norm_allocation(d, path):
    d = d or {}
    _unknown(d, {"scheme", "loading", "power_per_re", "total_power"}, path)
    scheme = d.get("scheme", {"kind": "full"})
    if isinstance(scheme, str):
        scheme = {"kind": scheme}
    spath = f"{path}.scheme"
    kind = _field(scheme, "kind", spath, str)
    if kind not in _SCHEMES:
        raise ConfigError(f"{spath}.kind", f"unknown scheme {kind!r}; expected one of {sorted(_SCHEMES)}")
    _unknown(scheme, _SCHEMES[kind] | {"kind"}, spath)
    s = {"kind": kind}
    if kind == "tdma_uniform":
        s["period"] = _field(scheme, "period", spath, int)
        s["offset"] = _field(scheme, "offset", spath, int, 0)
    elif kind == "tdma_pattern":
        s["symbols"] = [int(x) for x in _field(scheme, "symbols", spath, list)]
    elif kind == "fdma_blocks":
        s["ranges"] = [[int(a), int(b)] for a, b in _field(scheme, "ranges", spath, list)]
    elif kind == "fdma_fragmented":
        s["carriers"] = [int(x) for x in _field(scheme, "carriers", spath, list)]
    loading = d.get("loading", {"kind": "uniform"})
    if isinstance(loading, str):
        loading = {"kind": loading}
    lpath = f"{path}.loading"
    lkind = _field(loading, "kind", lpath, str)
    if lkind not in ("uniform", "binary", "continuous"):
        raise ConfigError(f"{lpath}.kind", f"unknown loading {lkind!r}")
    l = {"kind": lkind}
    if lkind == "binary":
        l["mask"] = _field(loading, "mask", lpath, list)
    elif lkind == "continuous":
        l["weights"] = _field(loading, "weights", lpath, list)
    out = {"scheme": s, "loading": l}
    if "total_power" in d:
        out["total_power"] = _field(d, "total_power", path, float)
        if out["total_power"] <= 0:
            raise ConfigError(f"{path}.total_power", "must be > 0")
    else:
        out["power_per_re"] = _field(d, "power_per_re", path, float, 1.0)
        if out["power_per_re"] <= 0:
            raise ConfigError(f"{path}.power_per_re", "must be > 0")
    return out


def _norm_estimator(d, path="estimator"):
    d = d or {}
    _unknown(d, {"method", "zero_pad", "threshold_db", "guard_bins", "max_order",
                 "refine_iterations", "convergence_tol", "alpha", "map_max_delay_s"}, path)
    method = _field(d, "method", path, str, "fft")
    if method not in ("fft", "model"):
        raise ConfigError(f"{path}.method", "expected 'fft' or 'model'")
    zp = _field(d, "zero_pad", path, list, [4, 4])
    if len(zp) != 2 or not all(isinstance(z, int) and z >= 1 for z in zp):
        raise ConfigError(f"{path}.zero_pad", "expected two integers >= 1")
    return {
        "method": method,
        "zero_pad": zp,
        "threshold_db": _field(d, "threshold_db", path, float, 13.0),
        "guard_bins": _field(d, "guard_bins", path, int, 2),
        "max_order": _field(d, "max_order", path, int, 4),
        "refine_iterations": _field(d, "refine_iterations", path, int, 50),
        "convergence_tol": _field(d, "convergence_tol", path, float, 1e-10),
        "alpha": _field(d, "alpha", path, float, 0.01),
        "map_max_delay_s": _field(d, "map_max_delay_s", path, float, 1e-6),
    }


def _norm_localization(d, path="localization"):
    d = d or {}
    _unknown(d, {"dims", "plane_z_m", "init_position_m", "etof_std_s", "edoppler_std_hz",
                 "ellipse_points"}, path)
    dims = _field(d, "dims", path, int, 2)
    if dims not in (2, 3):
        raise ConfigError(f"{path}.dims", "expected 2 or 3")
    return {
        "dims": dims,
        "plane_z_m": _field(d, "plane_z_m", path, float, 0.0),
        "init_position_m": _field(d, "init_position_m", path, "vec3", None),
        "etof_std_s": _field(d, "etof_std_s", path, float, 1e-9),
        "edoppler_std_hz": _field(d, "edoppler_std_hz", path, float, 1.0),
        "ellipse_points": _field(d, "ellipse_points", path, int, 361),
    }


def _norm_montecarlo(d, path="montecarlo"):
    if d is None:
        return None
    _unknown(d, {"experiment", "snr_db", "trials", "path", "n_links", "pfa"}, path)
    exp = _field(d, "experiment", path, str)
    if exp not in ("rmse", "detection"):
        raise ConfigError(f"{path}.experiment", "expected 'rmse' or 'detection'")
    trials = _field(d, "trials", path, int, 100)
    if trials < 1:
        raise ConfigError(f"{path}.trials", "must be >= 1")
    snr = [float(s) for s in _field(d, "snr_db", path, list, [10.0, 20.0, 30.0])]
    out = {"experiment": exp, "trials": trials, "snr_db": snr}
    if exp == "rmse":
        p = _field(d, "path", path, dict, {"delay_s": 1e-7, "doppler_hz": 100.0, "gain": [1.0, 0.0]})
        ppath = f"{path}.path"
        _unknown(p, {"delay_s", "doppler_hz", "gain"}, ppath)
        g = p.get("gain", [1.0, 0.0])
        out["path"] = {"delay_s": _field(p, "delay_s", ppath, float),
                       "doppler_hz": _field(p, "doppler_hz", ppath, float, 0.0),
                       "gain": [float(g[0]), float(g[1])]}
    else:
        n_links = [int(n) for n in _field(d, "n_links", path, list, [1, 2])]
        if not n_links or min(n_links) < 1:
            raise ConfigError(f"{path}.n_links", "entries must be >= 1")
        out["n_links"] = n_links
        out["pfa"] = _field(d, "pfa", path, float, 1e-3)
        if not 0 < out["pfa"] < 1:
            raise ConfigError(f"{path}.pfa", "must be in (0, 1)")
    return out


def _norm_candidates(d, path="candidates"):
    if d is None:
        return None
    if not isinstance(d, list) or not d:
        raise ConfigError(path, "expected a non-empty list of allocations")
    return [_norm_allocation(c, f"{path}[{i}]") for i, c in enumerate(d)]


def _norm_coverage(d, path="coverage"):
    if d is None:
        return None
    _unknown(d, {"x_range_m", "y_range_m", "step_m", "z_m"}, path)
    xr = _field(d, "x_range_m", path, list)
    yr = _field(d, "y_range_m", path, list)
    step = _field(d, "step_m", path, float, 1.0)
    if len(xr) != 2 or len(yr) != 2 or step <= 0:
        raise ConfigError(path, "x_range_m/y_range_m need [min, max] and step_m > 0")
    return {"x_range_m": [float(x) for x in xr], "y_range_m": [float(y) for y in yr],
            "step_m": step, "z_m": _field(d, "z_m", path, float, 0.0)}


TOP_LEVEL = {"scenario", "numerology", "transmissions", "links", "estimator",
             "noise_power_per_re", "localization", "montecarlo", "candidates", "objective",
             "crb_paths", "coverage", "seed", "outputs", "threads"}


def normalize(raw: dict) -> dict:
    """Validate ``raw`` and return a fully-defaulted copy (the config echo)."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    _unknown(raw, TOP_LEVEL, "")
    scen = _norm_scenario(_field(raw, "scenario", "", dict))
    num = _norm_numerology(_field(raw, "numerology", "", dict))
    node_ids = {n["id"]: n["role"] for n in scen["nodes"]}

    links = []
    for i, l in enumerate(_field(raw, "links", "", list, [])):
        p = f"links[{i}]"
        _unknown(l, {"tx", "rx"}, p)
        tx, rx = _field(l, "tx", p, str), _field(l, "rx", p, str)
        for end, nid in (("tx", tx), ("rx", rx)):
            if nid not in node_ids:
                raise ConfigError(f"{p}.{end}", f"unknown node id {nid!r}")
        if node_ids[tx] == "rx":
            raise ConfigError(f"{p}.tx", f"node {tx!r} cannot transmit")
        if node_ids[rx] == "tx":
            raise ConfigError(f"{p}.rx", f"node {rx!r} cannot receive")
        links.append({"tx": tx, "rx": rx})

    trans_raw = _field(raw, "transmissions", "", list, [])
    trans = []
    for i, t in enumerate(trans_raw):
        p = f"transmissions[{i}]"
        _unknown(t, {"tx", "allocation"}, p)
        tx = _field(t, "tx", p, str)
        if tx not in node_ids:
            raise ConfigError(f"{p}.tx", f"unknown node id {tx!r}")
        trans.append({"tx": tx, "allocation": _norm_allocation(t.get("allocation"), f"{p}.allocation")})
    declared = {t["tx"] for t in trans}
    for l in links:
        if l["tx"] not in declared:
            # every transmitter gets a full-grid allocation unless declared
            trans.append({"tx": l["tx"], "allocation": _norm_allocation(None, "transmissions[]")})
            declared.add(l["tx"])

    noise = _field(raw, "noise_power_per_re", "", float, 1e-3)
    if noise < 0:
        raise ConfigError("noise_power_per_re", "must be >= 0")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed", "expected an unsigned 64-bit integer")
    outputs = _field(raw, "outputs", "", list, ["tables", "ellipses", "maps"])
    bad = sorted(set(outputs) - {"tables", "ellipses", "maps"})
    if bad:
        raise ConfigError("outputs", f"unknown output kind {bad[0]!r}")
    crb_paths = _field(raw, "crb_paths", "", list, [])
    for i, cp in enumerate(crb_paths):
        _unknown(cp, {"delay_s", "doppler_hz", "gain"}, f"crb_paths[{i}]")
    objective = _field(raw, "objective", "", dict, {"delay": 1.0})
    echo = {
        "scenario": scen,
        "numerology": num,
        "transmissions": trans,
        "links": links,
        "estimator": _norm_estimator(raw.get("estimator")),
        "noise_power_per_re": noise,
        "localization": _norm_localization(raw.get("localization")),
        "montecarlo": _norm_montecarlo(raw.get("montecarlo")),
        "candidates": _norm_candidates(raw.get("candidates")),
        "crb_paths": [{"delay_s": _field(cp, "delay_s", f"crb_paths[{i}]", float),
                       "doppler_hz": _field(cp, "doppler_hz", f"crb_paths[{i}]", float, 0.0),
                       "gain": [float(x) for x in cp.get("gain", [1.0, 0.0])]}
                      for i, cp in enumerate(crb_paths)],
        "objective": {str(k): float(v) for k, v in objective.items()},
        "coverage": _norm_coverage(raw.get("coverage")),
        "seed": seed,
        "outputs": sorted(set(outputs)),
    }
    # building objects surfaces geometry/allocation errors at validation time
    build(echo)
    return echo


# --- object construction ----------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    echo: dict
    scenario: Scenario
    fluctuations: tuple[FluctuationModel, ...]
    numerology: Numerology
    allocation: Optional[ResourceAllocation]
    links: tuple[BistaticLink, ...]
    estimator: EstimatorConfig

    @property
    def seed(self) -> int:
        return self.echo["seed"]


def build_scenario(s: dict) -> Scenario:
    nodes = tuple(NodeState(n["id"], n["position_m"], n["velocity_mps"], Role(n["role"]),
                            n["carrier_frequency_hz"]) for n in s["nodes"])
    targets = tuple(TargetState(t["position_m"], t["velocity_mps"], t["mean_reflectivity"])
                    for t in s["targets"])
    clutter = tuple((c["position_m"], complex(*c["amplitude"])) for c in s["clutter"])
    return Scenario(nodes, targets, clutter, s["speed_of_light_mps"])


def build_numerology(n: dict) -> Numerology:
    return Numerology(n["n_carriers"], n["carrier_spacing_hz"], n["n_symbols"],
                      n["symbol_duration_s"], n["center_frequency_hz"])


def build_single_allocation(num: Numerology, a: dict, owner: Optional[str] = None,
                            path: str = "allocation") -> ResourceAllocation:
    s = a["scheme"]
    kind = s["kind"]
    try:
        if kind == "full":
            scheme = Full()
        elif kind == "tdma_uniform":
            scheme = TdmaUniform(s["period"], s["offset"])
        elif kind == "tdma_pattern":
            mask = np.zeros(num.n_symbols, dtype=bool)
            mask[np.asarray(s["symbols"], dtype=int)] = True
            scheme = TdmaPattern(tuple(mask.tolist()))
        elif kind == "fdma_blocks":
            scheme = FdmaBlocks(tuple((a_, b_) for a_, b_ in s["ranges"]))
        else:
            scheme = FdmaFragmented(tuple(s["carriers"]))
        l = a["loading"]
        if l["kind"] == "uniform":
            loading = Uniform()
        elif l["kind"] == "binary":
            loading = Binary(np.asarray(l["mask"], dtype=bool))
        else:
            loading = Continuous(np.asarray(l["weights"], dtype=float))
        if "total_power" in a:
            total = a["total_power"]
        else:
            total = a["power_per_re"] * int(scheme_mask(num, scheme).sum())
        return build_allocation(num, scheme, loading, total, owner)
    except (ValueError, IndexError) as e:
        raise ConfigError(path, str(e)) from None


def build(echo: dict) -> ExperimentConfig:
    try:
        scenario = build_scenario(echo["scenario"])
    except ValueError as e:
        raise ConfigError("scenario", str(e)) from None
    num = build_numerology(echo["numerology"])
    allocs = [build_single_allocation(num, t["allocation"], t["tx"], f"transmissions[{i}].allocation")
              for i, t in enumerate(echo["transmissions"])]
    try:
        alloc = combine_allocations(allocs) if allocs else None
    except ValueError as e:
        raise ConfigError("transmissions", str(e)) from None
    links = tuple(BistaticLink(l["tx"], l["rx"]) for l in echo["links"])
    for i, l in enumerate(links):
        try:
            scenario.check_link(l)
        except ValueError as e:
            raise ConfigError(f"links[{i}]", str(e)) from None
    e = echo["estimator"]
    try:
        est = EstimatorConfig(e["max_order"], None, e["refine_iterations"], e["convergence_tol"],
                              e["alpha"])
    except ValueError as err:
        raise ConfigError("estimator", str(err)) from None
    fl = tuple(FluctuationModel(Fluctuation(t["fluctuation"]["kind"]), t["fluctuation"]["k_factor"])
               for t in echo["scenario"]["targets"])
    return ExperimentConfig(echo, scenario, fl, num, alloc, links, est)


def load(source) -> ExperimentConfig:
    """Load from a path, JSON text or an already-parsed dict."""
    if isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("<root>", f"invalid JSON: {e}") from None
    return build(normalize(raw))
