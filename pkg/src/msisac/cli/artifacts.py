"""Artifact writers: delimited tables, binary maps with JSON sidecars, polylines, rasters.

Everything written here is a pure function of its inputs so repeated runs are
byte-identical; run timing is never written to disk.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..maps import ScatteringMap

ABSENT = "NA"


def _cell(v) -> str:
    if v is None:
        return ABSENT
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return ABSENT if math.isnan(v) else repr(v)
    return str(v)


def ensure_dir(out: Path) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    if not out.is_dir():
        raise OSError(f"output path {out} is not a directory")
    return out


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """CSV with a header row; units live in the column names, missing values are ``NA``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_cell(v) for v in r])
    return Path(path)


def read_table(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> Path:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return Path(path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _step(axis: np.ndarray) -> float:
    return float(axis[1] - axis[0]) if axis.size > 1 else 0.0


def write_map(stem: Path, smap: ScatteringMap) -> tuple[Path, Path]:
    """``<stem>.bin`` (little-endian float64, row-major ``[delay, doppler]``) plus ``<stem>.json``."""
    stem = Path(stem)
    bin_path = stem.with_suffix(".bin")
    side_path = stem.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(smap.power, dtype="<f8").tobytes(order="C"))
    write_json(side_path, {
        "n_delay": int(smap.delay_axis.size),
        "n_doppler": int(smap.doppler_axis.size),
        "delay_axis_start_s": float(smap.delay_axis[0]),
        "delay_axis_step_s": _step(smap.delay_axis),
        "doppler_axis_start_hz": float(smap.doppler_axis[0]),
        "doppler_axis_step_hz": _step(smap.doppler_axis),
        "delay_axis_s": smap.delay_axis.tolist(),
        "doppler_axis_hz": smap.doppler_axis.tolist(),
        "normalization": smap.normalization,
        "dtype": "float64 little-endian",
        "order": "row-major [delay, doppler]",
    })
    return bin_path, side_path


def read_map(stem: Path) -> ScatteringMap:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    shape = (side["n_delay"], side["n_doppler"])
    power = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if power.size != shape[0] * shape[1]:
        raise ValueError(f"binary holds {power.size} values, sidecar says {shape}")
    if "delay_axis_s" in side:
        d = np.asarray(side["delay_axis_s"], dtype=float)
        a = np.asarray(side["doppler_axis_hz"], dtype=float)
    else:
        d = side["delay_axis_start_s"] + side["delay_axis_step_s"] * np.arange(shape[0])
        a = side["doppler_axis_start_hz"] + side["doppler_axis_step_hz"] * np.arange(shape[1])
    return ScatteringMap(power.reshape(shape).astype(float), d, a,
                         normalization=side.get("normalization", ""))


def write_raster(stem: Path, values: np.ndarray, x_axis: np.ndarray, y_axis: np.ndarray,
                 quantity: str, units: str) -> tuple[Path, Path]:
    """Spatial raster ``values[ix, iy]`` in the same binary+sidecar layout as maps."""
    stem = Path(stem)
    bin_path = stem.with_suffix(".bin")
    side_path = stem.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(values, dtype="<f8").tobytes(order="C"))
    write_json(side_path, {
        "n_x": int(x_axis.size), "n_y": int(y_axis.size),
        "x_axis_start_m": float(x_axis[0]), "x_axis_step_m": _step(x_axis),
        "y_axis_start_m": float(y_axis[0]), "y_axis_step_m": _step(y_axis),
        "quantity": quantity, "units": units,
        "dtype": "float64 little-endian", "order": "row-major [x, y]",
    })
    return bin_path, side_path


def write_polyline(path: Path, points: np.ndarray) -> Path:
    pts = np.asarray(points)
    return write_table(path, ["x_m", "y_m"], ((p[0], p[1]) for p in pts))


def write_png(path: Path, values: np.ndarray, extent: Sequence[float], xlabel: str,
              ylabel: str, title: str = "", db: bool = True) -> Path:
    """Heatmap raster; needs the optional matplotlib dependency."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise RuntimeError("png output needs matplotlib (pip install 'artifact[plot]')") from e
    v = np.asarray(values, dtype=float)
    if db:
        with np.errstate(divide="ignore"):
            v = 10 * np.log10(np.maximum(v, np.finfo(float).tiny))
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    im = ax.imshow(v.T, origin="lower", aspect="auto", extent=extent, cmap="viridis")
    fig.colorbar(im, ax=ax, label="dB" if db else "")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return Path(path)
