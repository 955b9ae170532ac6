import copy
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from msisac.cli import ConfigError, load, main, normalize, run_montecarlo, trial_seed
from msisac.cli.artifacts import read_map, read_table, write_map
from msisac.maps import ScatteringMap

GOLDEN = Path(__file__).resolve().parents[1] / "golden" / "dual_link.cfg"

SMALL = {
    "scenario": {"nodes": [{"id": "a", "position_m": [0, 0, 0]}]},
    "numerology": {"n_carriers": 16, "carrier_spacing_hz": 1e6, "n_symbols": 8,
                   "symbol_duration_s": 1e-6},
}


@pytest.fixture(scope="module")
def golden_raw():
    return json.loads(GOLDEN.read_text())


@pytest.fixture(scope="module")
def golden_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("golden")
    assert main(["run", "--config", str(GOLDEN), "--out", str(out)]) == 0
    return out


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_validate_config_echoes_defaults(tmp_path, capsys):
    assert main(["validate-config", "--config", str(_write(tmp_path, SMALL))]) == 0
    echo = json.loads(capsys.readouterr().out)
    assert echo["estimator"]["threshold_db"] == 13.0
    assert echo["scenario"]["nodes"][0]["velocity_mps"] == [0.0, 0.0, 0.0]
    assert echo["numerology"]["center_frequency_hz"] == 5.2e9
    assert echo["localization"]["dims"] == 2
    assert echo["seed"] == 0


def test_echo_is_fixed_point():
    echo = normalize(copy.deepcopy(SMALL))
    assert normalize(copy.deepcopy(echo)) == echo


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c["scenario"].update(nodes=[]), "scenario.nodes"),
    (lambda c: c["scenario"]["nodes"][0].update(role="boss"), "scenario.nodes[0].role"),
    (lambda c: c["numerology"].update(n_carriers=0), "numerology"),
    (lambda c: c.update(links=[{"tx": "a", "rx": "ghost"}]), "links[0].rx"),
    (lambda c: c.update(estimator={"method": "magic"}), "estimator.method"),
    (lambda c: c.update(seed=-1), "seed"),
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c.update(montecarlo={"experiment": "rmse", "trials": 0}), "montecarlo.trials"),
])
def test_validation_errors_name_the_field(tmp_path, capsys, mutate, field):
    cfg = copy.deepcopy(SMALL)
    mutate(cfg)
    with pytest.raises(ConfigError) as err:
        load(cfg)
    assert err.value.path.startswith(field)
    assert main(["validate-config", "--config", str(_write(tmp_path, cfg))]) == 2
    assert field.split("[")[0].split(".")[0] in capsys.readouterr().err


def test_unreadable_and_malformed_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2


def test_bad_threads_and_seed(tmp_path):
    p = str(_write(tmp_path, SMALL))
    assert main(["validate-config", "--config", p, "--threads", "0"]) == 2
    assert main(["validate-config", "--config", p, "--seed", str(2**64)]) == 2


def test_pipeline_error_has_module_provenance(tmp_path, capsys):
    # a config without links validates but cannot run
    assert main(["run", "--config", str(_write(tmp_path, SMALL)), "--out", str(tmp_path)]) == 1
    assert "error in msisac.cli.runner" in capsys.readouterr().err


def test_golden_run_detects_and_localizes(golden_run, golden_raw):
    report = json.loads((golden_run / "report.json").read_text())
    links = report["links"]
    assert len(links) == 2 and all(l["detected"] for l in links)
    for l in links:
        assert abs(l["etof_s"] - l["true_etof_s"]) < 12.5e-9
        assert abs(l["edoppler_hz"] - l["true_edoppler_hz"]) < 20.0
    loc = report["localization"]
    assert loc["status"] == "ok" and loc["position_error_m"] < 2.0
    assert report["config"]["seed"] == golden_raw["seed"]
    assert report["tool"]["name"] == "msisac"


def test_golden_artifacts(golden_run):
    names = {p.name for p in golden_run.iterdir()}
    assert {"report.json", "links.csv", "solution.csv", "ellipse_tx_rx1.csv",
            "ellipse_tx_rx2.csv", "map_tx_rx1.bin", "map_tx_rx1.json"} <= names
    for link in ("rx1", "rx2"):
        rows = read_table(golden_run / f"ellipse_tx_{link}.csv")
        assert rows[0] == rows[-1] and len(rows) == 361
    header = (golden_run / "links.csv").read_text().splitlines()[0].split(",")
    assert "etof_s" in header and "edoppler_hz" in header
    side = json.loads((golden_run / "map_tx_rx1.json").read_text())
    size = (golden_run / "map_tx_rx1.bin").stat().st_size
    assert size == 8 * side["n_delay"] * side["n_doppler"]


def test_golden_run_deterministic_across_threads(golden_run, tmp_path):
    out8 = tmp_path / "t8"
    assert main(["run", "--config", str(GOLDEN), "--out", str(out8), "--threads", "8"]) == 0
    files = sorted(p.name for p in golden_run.iterdir())
    assert files == sorted(p.name for p in out8.iterdir())
    for name in files:
        assert (golden_run / name).read_bytes() == (out8 / name).read_bytes(), name


def test_seed_override_changes_noise(golden_run, tmp_path):
    out = tmp_path / "s"
    assert main(["run", "--config", str(GOLDEN), "--out", str(out), "--seed", "1"]) == 0
    assert (golden_run / "links.csv").read_bytes() != (out / "links.csv").read_bytes()
    assert json.loads((out / "report.json").read_text())["config"]["seed"] == 1


def test_map_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    smap = ScatteringMap(rng.random((128, 64)), np.arange(128) * 3.125e-9,
                         (np.arange(64) - 32) * 20.0, normalization="peak")
    bin_path, _ = write_map(tmp_path / "m", smap)
    assert bin_path.stat().st_size == 65536
    back = read_map(tmp_path / "m")
    assert back.power.tobytes() == smap.power.tobytes()
    np.testing.assert_array_equal(back.delay_axis, smap.delay_axis)
    np.testing.assert_array_equal(back.doppler_axis, smap.doppler_axis)
    assert back.normalization == "peak"


def test_golden_map_round_trip(golden_run):
    m = read_map(golden_run / "map_tx_rx1")
    raw = np.frombuffer((golden_run / "map_tx_rx1.bin").read_bytes(), "<f8")
    assert m.power.ravel().tobytes() == raw.tobytes()


def test_trial_seed_is_stable_and_keyed():
    assert trial_seed(7, 0, "a") == trial_seed(7, 0, "a")
    seeds = {trial_seed(7, t, s) for t in range(50) for s in ("a", "b")}
    assert len(seeds) == 100
    assert 0 <= trial_seed(2**64 - 1, 10**6, "x") < 2**64


def _mc_cfg(experiment, trials, **extra):
    cfg = copy.deepcopy(SMALL)
    cfg["montecarlo"] = {"experiment": experiment, "trials": trials, "snr_db": [10.0, 20.0]}
    cfg["montecarlo"].update(extra)
    return cfg


def test_single_trial_std_is_absent(tmp_path):
    cfg = _mc_cfg("rmse", 1, path={"delay_s": 1e-7, "doppler_hz": 1000.0})
    assert main(["montecarlo", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path)]) == 0
    rows = read_table(tmp_path / "montecarlo_rmse.csv")
    assert all(r["std_err_delay_s"] == "NA" and r["std_err_doppler_hz"] == "NA" for r in rows)
    assert all(float(r["crb_delay_s"]) > 0 for r in rows)


def test_montecarlo_deterministic_across_threads(tmp_path):
    p = str(_write(tmp_path, _mc_cfg("detection", 40, n_links=[1, 2])))
    outs = []
    for threads in ("1", "4"):
        out = tmp_path / threads
        assert main(["montecarlo", "--config", p, "--out", str(out), "--threads", threads]) == 0
        outs.append((out / "montecarlo_detection.csv").read_bytes())
    assert outs[0] == outs[1]


def test_detection_rows_are_consistent():
    rep = run_montecarlo(load(_mc_cfg("detection", 60, n_links=[1, 2])))
    for r in rep.data["results"]:
        assert r["pd_ci99_low"] <= r["pd"] <= r["pd_ci99_high"]
        assert 0 <= r["pd_analytic"] <= 1


def test_crb_compare_ranks_edges_first(tmp_path):
    cfg = copy.deepcopy(SMALL)
    cfg["numerology"] = {"n_carriers": 64, "carrier_spacing_hz": 1e6, "n_symbols": 32,
                         "symbol_duration_s": 0.5e-3}
    cfg["candidates"] = [
        {"scheme": {"kind": "fdma_blocks", "ranges": [[24, 40]]}, "total_power": 512.0},
        {"scheme": {"kind": "fdma_fragmented", "carriers": list(range(8)) + list(range(56, 64))},
         "total_power": 512.0}]
    cfg["crb_paths"] = [{"delay_s": 2e-7, "doppler_hz": 30.0}]
    assert main(["crb-compare", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path)]) == 0
    rows = read_table(tmp_path / "crb_ranking.csv")
    assert [int(r["candidate"]) for r in rows] == [1, 0]
    assert float(rows[0]["delay[0]_s2"]) < float(rows[1]["delay[0]_s2"])


def test_coverage_map_rasters(tmp_path, golden_raw):
    cfg = copy.deepcopy(golden_raw)
    cfg["coverage"] = {"x_range_m": [-20, 20], "y_range_m": [-10, 30], "step_m": 5.0}
    assert main(["coverage-map", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path)]) == 0
    side = json.loads((tmp_path / "gdop.json").read_text())
    assert (side["n_x"], side["n_y"]) == (9, 9)
    g = np.frombuffer((tmp_path / "gdop.bin").read_bytes(), "<f8")
    assert g.size == 81 and np.nanmin(g) > 0
    assert (tmp_path / "cassini_best.bin").exists()


def test_png_format_renders(tmp_path, golden_raw):
    pytest.importorskip("matplotlib")
    cfg = copy.deepcopy(golden_raw)
    cfg["coverage"] = {"x_range_m": [-10, 10], "y_range_m": [0, 20], "step_m": 5.0}
    out = tmp_path / "png"
    assert main(["coverage-map", "--config", str(_write(tmp_path, cfg)), "--out", str(out),
                 "--format", "png"]) == 0
    assert (out / "gdop.png").read_bytes()[:4] == b"\x89PNG"
    assert not (out / "gdop.bin").exists()


def test_unwritable_output_dir(tmp_path, golden_raw):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--config", str(GOLDEN), "--out", str(blocker / "sub")]) == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "msisac.cli", "validate-config", "--config",
                          str(_write(tmp_path, SMALL))], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["seed"] == 0
