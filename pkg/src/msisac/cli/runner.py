"""Experiment orchestration: single runs, Monte-Carlo sweeps, allocation ranking, coverage."""
from __future__ import annotations

import hashlib
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .. import crb as crb_mod
from ..channel import (ChannelSamples, FluctuationModel, apply_channel,
                       draw_reflectivity, inverse_filter, paths_from_scene, sample_frf)
from ..estimation import (EstimatorConfig, ScatteringMap, background_subtract, detect_peaks,
                          fit_model, scattering_function)
from ..localization import (BistaticObservation, LocalizationError, ellipse_points,
                            solve_position, solve_velocity)
from ..scene import (BistaticLink, GeometryError, bistatic_doppler, cassini_excess_attenuation,
                     excess_delay, gdop)
from ..waveform import (Full, MultisineMinPapr, ResourceAllocation, build_allocation,
                        generate_symbols)
from . import artifacts
from .config import ExperimentConfig, build_single_allocation

TOOL_NAME = "msisac"


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def trial_seed(master: int, trial: int, stream: str = "") -> int:
    """64-bit seed from BLAKE2b of ``"master:trial:stream"``.

    Streams are keyed by name (e.g. a link id), so adding a link never
    changes the noise drawn for existing links or trials.
    """
    digest = hashlib.blake2b(f"{master}:{trial}:{stream}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _map_parallel(fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map; results come back in input order whatever the completion order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class RunReport:
    data: dict
    maps: dict = field(default_factory=dict)
    ellipses: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    rasters: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


def _header(cfg: ExperimentConfig, verb: str) -> dict:
    return {"tool": {"name": TOOL_NAME, "version": tool_version()}, "verb": verb,
            "config": cfg.echo}


def _crop(smap: ScatteringMap, max_delay: float) -> ScatteringMap:
    keep = smap.delay_axis <= max_delay
    return ScatteringMap(smap.power[keep], smap.delay_axis[keep], smap.doppler_axis,
                         normalization=smap.normalization)


# --- single run ------------------------------------------------------------------

def _link_alloc(cfg: ExperimentConfig, link: BistaticLink) -> ResourceAllocation:
    return cfg.allocation.for_owner(link.tx)


def _reflectivities(cfg: ExperimentConfig, link: BistaticLink, trial: int) -> list[complex]:
    return [draw_reflectivity(fl, t.mean_reflectivity,
                              trial_seed(cfg.seed, trial, f"{link}:target{i}"))
            for i, (t, fl) in enumerate(zip(cfg.scenario.targets, cfg.fluctuations))]


def _estimate_strongest(h: ChannelSamples, cfg: ExperimentConfig):
    """(delay, doppler, map-or-None, detected) of the strongest component."""
    e = cfg.echo["estimator"]
    if e["method"] == "fft":
        smap = scattering_function(h, tuple(e["zero_pad"]))
        peaks = detect_peaks(smap, e["threshold_db"], e["guard_bins"])
        if not peaks:
            return None, None, smap, False
        return peaks[0].delay, peaks[0].doppler, smap, True
    est = fit_model(h, cfg.estimator)
    if est.order == 0:
        return None, None, None, False
    d, a, _ = est.paths[0]
    return d, a, None, True


def process_link(cfg: ExperimentConfig, link: BistaticLink, trial: int = 0) -> dict:
    """Scene -> frame -> channel -> inverse filter -> background subtraction -> estimates."""
    scen = cfg.scenario
    alloc = _link_alloc(cfg, link)
    sigma2 = cfg.echo["noise_power_per_re"]
    x = generate_symbols(alloc, MultisineMinPapr())
    rho = _reflectivities(cfg, link, trial)
    cur_paths = paths_from_scene(scen, link, reflectivities=rho)
    ref_paths = paths_from_scene(scen, link, target=False)
    y_cur = apply_channel(x, sample_frf(cur_paths, alloc), sigma2,
                          trial_seed(cfg.seed, trial, f"{link}:current"))
    y_ref = apply_channel(x, sample_frf(ref_paths, alloc), sigma2,
                          trial_seed(cfg.seed, trial, f"{link}:background"))
    h_cur = inverse_filter(y_cur, x, sigma2)
    h_ref = inverse_filter(y_ref, x, sigma2)

    if link.is_monostatic:
        los_d, los_a = 0.0, 0.0
    else:
        los_d, los_a, _, ok = _estimate_strongest(h_cur, cfg)
        if not ok:
            raise RuntimeError(f"link {link}: direct path not detected")
    h_sub = background_subtract(h_cur, h_ref)
    tgt_d, tgt_a, smap, detected = _estimate_strongest(h_sub, cfg)

    out = {"link": str(link), "tx": link.tx, "rx": link.rx, "detected": detected,
           "los_delay_s": los_d, "los_doppler_hz": los_a,
           "target_delay_s": tgt_d, "target_doppler_hz": tgt_a,
           "etof_s": tgt_d - los_d if detected else None,
           "edoppler_hz": tgt_a - los_a if detected else None}
    if scen.targets:
        tx, rx = scen.check_link(link)
        g = scen.targets[0]
        out["true_etof_s"] = excess_delay(link, scen, g.position)
        out["true_edoppler_hz"] = bistatic_doppler(tx, rx, g, tx.carrier_frequency,
                                                   scen.speed_of_light)
    if smap is not None:
        out["_map"] = _crop(smap, cfg.echo["estimator"]["map_max_delay_s"])
    return out


def _localize(cfg: ExperimentConfig, link_results: list[dict]) -> tuple[dict, dict]:
    loc = cfg.echo["localization"]
    dims = loc["dims"]
    plane = loc["plane_z_m"] if dims == 2 else None
    obs = []
    for r in link_results:
        if not r["detected"]:
            continue
        obs.append(BistaticObservation(
            BistaticLink(r["tx"], r["rx"]), max(r["etof_s"], 0.0), loc["etof_std_s"] ** 2,
            r["edoppler_hz"], loc["edoppler_std_hz"] ** 2))
    ellipses = {}
    for o in obs:
        try:
            ellipses[f"{o.link.tx}_{o.link.rx}"] = ellipse_points(
                o.link, cfg.scenario, o.etof, loc["plane_z_m"], loc["ellipse_points"])
        except ValueError:
            pass
    result: dict = {"n_observations": len(obs)}
    if len(obs) < dims:
        result["status"] = f"skipped: {len(obs)} detections for a {dims}D solve"
        return result, ellipses
    try:
        sol = solve_position(obs, cfg.scenario, init=loc["init_position_m"], plane_z=plane)
    except LocalizationError as e:
        result["status"] = f"failed: {e}"
        return result, ellipses
    result.update(status="ok", position_m=sol.position.tolist(),
                  covariance_m2=sol.covariance.tolist(), iterations=sol.iterations,
                  residual_rms_s=sol.residual_rms, converged=sol.converged)
    try:
        vel = solve_velocity(sol.position, obs, cfg.scenario, planar=dims == 2)
        result.update(velocity_mps=vel.velocity.tolist(), velocity_covariance_m2ps2=vel.covariance.tolist())
    except LocalizationError as e:
        result["velocity_status"] = f"failed: {e}"
    if cfg.scenario.targets:
        truth = cfg.scenario.targets[0]
        err = sol.position - truth.position
        if dims == 2:
            err = err[:2]
        result["position_error_m"] = float(np.linalg.norm(err))
    return result, ellipses


def run_single(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    if not cfg.links:
        raise ValueError("config has no links to process")
    t0 = time.perf_counter()
    results = _map_parallel(lambda l: process_link(cfg, l), list(cfg.links), threads)
    maps = {}
    for r in results:
        m = r.pop("_map", None)
        if m is not None:
            maps[f"map_{r['tx']}_{r['rx']}"] = m
    loc, ellipses = _localize(cfg, results)
    data = _header(cfg, "run")
    data.update(links=results, localization=loc)
    table = (["link", "detected", "etof_s", "edoppler_hz", "true_etof_s", "true_edoppler_hz",
              "los_delay_s", "los_doppler_hz", "target_delay_s", "target_doppler_hz"],
             [[r["link"], r["detected"], r["etof_s"], r["edoppler_hz"], r.get("true_etof_s"),
               r.get("true_edoppler_hz"), r["los_delay_s"], r["los_doppler_hz"],
               r["target_delay_s"], r["target_doppler_hz"]] for r in results])
    tables = {"links": table}
    if loc.get("status") == "ok":
        pos = loc["position_m"]
        cov = np.asarray(loc["covariance_m2"]).ravel().tolist()
        tables["solution"] = (["x_m", "y_m", "z_m"] + [f"cov{i}{j}_m2" for i in range(3) for j in range(3)]
                              + ["position_error_m"],
                              [pos + cov + [loc.get("position_error_m")]])
    return RunReport(data, maps, ellipses, tables, timing={"run_s": time.perf_counter() - t0})


# --- Monte Carlo ---------------------------------------------------------------------

def _mc_allocation(cfg: ExperimentConfig) -> ResourceAllocation:
    if cfg.allocation is not None:
        tx = cfg.echo["transmissions"][0]["tx"]
        a = cfg.allocation.for_owner(tx)
        return ResourceAllocation(a.numerology, a.active, a.power)
    n = cfg.numerology
    return build_allocation(n, Full(), total_power=float(n.n_carriers * n.n_symbols))


def _stats(err: np.ndarray) -> dict:
    n = err.size
    return {"rmse": float(np.sqrt(np.mean(err**2))), "mean": float(np.mean(err)),
            "std": float(np.std(err, ddof=1)) if n > 1 else None,
            "q05": float(np.quantile(err, 0.05)), "q50": float(np.quantile(err, 0.5)),
            "q95": float(np.quantile(err, 0.95))}


def rmse_trial(alloc: ResourceAllocation, theta: crb_mod.ParamVector, sigma2: float,
               est_cfg: EstimatorConfig, seed: int) -> tuple[float, float]:
    """Delay and Doppler error of the strongest fitted path for one noisy frame."""
    from ..channel import PathSet, PropagationPath
    path = PathSet((PropagationPath(float(theta.delays[0]), float(theta.dopplers[0]),
                                    complex(theta.gains[0])),))
    x = generate_symbols(alloc, MultisineMinPapr())
    y = apply_channel(x, sample_frf(path, alloc), sigma2, seed)
    h = inverse_filter(y, x, sigma2)
    est = fit_model(h, est_cfg)
    if est.order == 0:
        return float("nan"), float("nan")
    d, a, _ = est.paths[0]
    return d - theta.delays[0], a - theta.dopplers[0]


def _rmse_experiment(cfg: ExperimentConfig, threads: int) -> tuple[list, list]:
    mc = cfg.echo["montecarlo"]
    alloc = _mc_allocation(cfg)
    p = mc["path"]
    theta = crb_mod.ParamVector([p["delay_s"]], [p["doppler_hz"]], [complex(*p["gain"])])
    per_re = alloc.total_power / alloc.n_active
    rows = []
    for si, snr_db in enumerate(mc["snr_db"]):
        sigma2 = abs(theta.gains[0]) ** 2 * per_re / 10 ** (snr_db / 10)
        bounds = crb_mod.crb(theta, alloc, sigma2)
        errs = _map_parallel(
            lambda t: rmse_trial(alloc, theta, sigma2, cfg.estimator,
                                 trial_seed(cfg.seed, t, f"snr{si}")),
            list(range(mc["trials"])), threads)
        e = np.array(errs, dtype=float)
        missed = int(np.isnan(e[:, 0]).sum())
        e = e[~np.isnan(e[:, 0])]
        sd = _stats(e[:, 0]) if e.size else {}
        sa = _stats(e[:, 1]) if e.size else {}
        rows.append([snr_db, mc["trials"], missed,
                     sd.get("rmse"), math.sqrt(bounds.bound("delay[0]")), sd.get("mean"), sd.get("std"),
                     sd.get("q05"), sd.get("q50"), sd.get("q95"),
                     sa.get("rmse"), math.sqrt(bounds.bound("doppler[0]")), sa.get("mean"), sa.get("std"),
                     sa.get("q05"), sa.get("q50"), sa.get("q95")])
    header = ["snr_db", "trials", "missed",
              "rmse_delay_s", "crb_delay_s", "mean_err_delay_s", "std_err_delay_s",
              "q05_err_delay_s", "q50_err_delay_s", "q95_err_delay_s",
              "rmse_doppler_hz", "crb_doppler_hz", "mean_err_doppler_hz", "std_err_doppler_hz",
              "q05_err_doppler_hz", "q50_err_doppler_hz", "q95_err_doppler_hz"]
    return header, rows


def detection_statistic(alloc: ResourceAllocation, gamma: complex, sigma2: float,
                        seed: int) -> float:
    """Known-cell matched statistic ``|sum w a^* H|^2 / sum w`` (Exp(1) under noise only).

    The target sits in the zero-delay, zero-Doppler cell so the steering
    vector is all ones; the statistic is invariant to the cell choice.
    """
    from ..channel import PathSet, PropagationPath
    x = generate_symbols(alloc, MultisineMinPapr())
    paths = PathSet((PropagationPath(0.0, 0.0, gamma),)) if gamma != 0 else PathSet(())
    y = apply_channel(x, sample_frf(paths, alloc), sigma2, seed)
    h = inverse_filter(y, x, sigma2, empty_threshold=0.0)
    w = h.weights
    return float(abs(np.sum(w * h.values)) ** 2 / np.sum(w))


def _detection_experiment(cfg: ExperimentConfig, threads: int) -> tuple[list, list]:
    mc = cfg.echo["montecarlo"]
    alloc = _mc_allocation(cfg)
    n_max = max(mc["n_links"])
    fl = FluctuationModel("rayleigh")
    rows = []
    for si, snr_db in enumerate(mc["snr_db"]):
        snr = 10 ** (snr_db / 10)
        # E|gamma|^2 = 1 and sum(w) = total_power / sigma^2 give mean SNR `snr`
        sigma2 = alloc.total_power / snr

        def trial(t):
            sig, h0 = [], []
            for l in range(n_max):
                g = draw_reflectivity(fl, 1.0, trial_seed(cfg.seed, t, f"snr{si}:link{l}:gain"))
                sig.append(detection_statistic(alloc, g, sigma2,
                                               trial_seed(cfg.seed, t, f"snr{si}:link{l}:h1")))
                h0.append(detection_statistic(alloc, 0.0, sigma2,
                                              trial_seed(cfg.seed, t, f"snr{si}:link{l}:h0")))
            return sig, h0

        res = _map_parallel(trial, list(range(mc["trials"])), threads)
        s1 = np.array([r[0] for r in res])
        s0 = np.array([r[1] for r in res])
        for n in mc["n_links"]:
            thr = float(stats.gamma.isf(mc["pfa"], n))
            k = int(np.sum(s1[:, :n].sum(axis=1) > thr))
            k0 = int(np.sum(s0[:, :n].sum(axis=1) > thr))
            T = mc["trials"]
            lo = float(stats.beta.ppf(0.005, k, T - k + 1)) if k > 0 else 0.0
            hi = float(stats.beta.ppf(0.995, k + 1, T - k)) if k < T else 1.0
            analytic = float(stats.gamma.sf(thr / (1 + snr), n))
            rows.append([snr_db, n, T, thr, k / T, lo, hi, analytic, k0 / T])
    header = ["snr_db", "n_links", "trials", "threshold", "pd", "pd_ci99_low", "pd_ci99_high",
              "pd_analytic", "pfa_empirical"]
    return header, rows


def run_montecarlo(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    mc = cfg.echo["montecarlo"]
    if mc is None:
        raise ValueError("config has no 'montecarlo' section")
    t0 = time.perf_counter()
    if mc["experiment"] == "rmse":
        header, rows = _rmse_experiment(cfg, threads)
    else:
        header, rows = _detection_experiment(cfg, threads)
    data = _header(cfg, "montecarlo")
    data["results"] = [dict(zip(header, r)) for r in rows]
    return RunReport(data, tables={f"montecarlo_{mc['experiment']}": (header, rows)},
                     timing={"run_s": time.perf_counter() - t0})


# --- allocation ranking and coverage --------------------------------------------------

def crb_compare(cfg: ExperimentConfig) -> RunReport:
    echo = cfg.echo
    if not echo["candidates"]:
        raise ValueError("config has no 'candidates' list")
    if not echo["crb_paths"]:
        raise ValueError("config has no 'crb_paths' list")
    cands = [build_single_allocation(cfg.numerology, c, None, f"candidates[{i}]")
             for i, c in enumerate(echo["candidates"])]
    cp = echo["crb_paths"]
    theta = crb_mod.ParamVector([p["delay_s"] for p in cp], [p["doppler_hz"] for p in cp],
                                [complex(*p["gain"]) for p in cp])
    ranked = crb_mod.compare_allocations(cands, theta, echo["noise_power_per_re"], echo["objective"])
    names = list(theta.names())
    units = crb_mod._units(names)
    header = ["rank", "candidate", "objective"] + [f"{n}_{u.replace('^', '')}" for n, u in zip(names, units)]
    rows = [[i + 1, rc.index, rc.objective] + rc.bounds.bounds.tolist() for i, rc in enumerate(ranked)]
    data = _header(cfg, "crb-compare")
    data["ranking"] = [dict(zip(header, r)) for r in rows]
    return RunReport(data, tables={"crb_ranking": (header, rows)})


def coverage_map(cfg: ExperimentConfig) -> RunReport:
    cov = cfg.echo["coverage"]
    if cov is None:
        raise ValueError("config has no 'coverage' section")
    if not cfg.links:
        raise ValueError("coverage needs at least one link")
    step = cov["step_m"]
    xs = np.arange(cov["x_range_m"][0], cov["x_range_m"][1] + step / 2, step)
    ys = np.arange(cov["y_range_m"][0], cov["y_range_m"][1] + step / 2, step)
    z = cov["z_m"]
    rasters = {}
    best = np.full((xs.size, ys.size), -np.inf)
    for link in cfg.links:
        r = np.full((xs.size, ys.size), np.nan)
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                try:
                    r[i, j] = cassini_excess_attenuation(link, cfg.scenario, [x, y, z])
                except GeometryError:
                    pass
        rasters[f"cassini_{link.tx}_{link.rx}"] = (r, "cassini_excess_attenuation", "dB")
        best = np.fmax(best, r)
    rasters["cassini_best"] = (best, "cassini_excess_attenuation_best_link", "dB")
    g = np.full((xs.size, ys.size), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                try:
                    g[i, j] = gdop(list(cfg.links), cfg.scenario, [x, y, z], dims=2)
                except GeometryError:
                    pass
    rasters["gdop"] = (g, "gdop_2d", "dimensionless")
    data = _header(cfg, "coverage-map")
    data["rasters"] = sorted(rasters)
    data["x_axis_m"] = xs.tolist()
    data["y_axis_m"] = ys.tolist()
    return RunReport(data, rasters={k: (v, q, u, xs, ys) for k, (v, q, u) in rasters.items()})


# --- artifact emission ----------------------------------------------------------------

def emit_artifacts(report: RunReport, out_dir, formats: Sequence[str] = ("csv", "bin")) -> list[Path]:
    """Write report.json plus the requested tables, maps, polylines and rasters."""
    out = artifacts.ensure_dir(Path(out_dir))
    formats = set(formats)
    outputs = set(report.data.get("config", {}).get("outputs", ["tables", "ellipses", "maps"]))
    written = [artifacts.write_json(out / "report.json", report.data)]
    if "csv" in formats:
        if "tables" in outputs:
            for name, (header, rows) in sorted(report.tables.items()):
                written.append(artifacts.write_table(out / f"{name}.csv", header, rows))
        if "ellipses" in outputs:
            for name, pts in sorted(report.ellipses.items()):
                written.append(artifacts.write_polyline(out / f"ellipse_{name}.csv", pts))
    if "maps" in outputs:
        for name, smap in sorted(report.maps.items()):
            if "bin" in formats:
                written.extend(artifacts.write_map(out / name, smap))
            if "png" in formats:
                ext = [smap.delay_axis[0] * 1e9, smap.delay_axis[-1] * 1e9,
                       smap.doppler_axis[0], smap.doppler_axis[-1]]
                written.append(artifacts.write_png(out / f"{name}.png", smap.power, ext,
                                                   "delay [ns]", "Doppler [Hz]", name))
    for name, (values, quantity, units, xs, ys) in sorted(report.rasters.items()):
        if "bin" in formats:
            written.extend(artifacts.write_raster(out / name, values, xs, ys, quantity, units))
        if "png" in formats:
            written.append(artifacts.write_png(out / f"{name}.png", values,
                                               [xs[0], xs[-1], ys[0], ys[-1]], "x [m]", "y [m]",
                                               f"{quantity} [{units}]", db=False))
    return written
