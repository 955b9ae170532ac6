import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msisac.channel import (ChannelSamples, MaskMismatchError, PathSet, PathTag,
                            PropagationPath, sample_frf)
from msisac.estimation import background_subtract
from msisac.precoding import (DegenerateResponseError, apply_tr, displaced_family,
                              focusing_gain, peak_to_sidelobe, tr_mismatch_curve, tr_prefilter)
from msisac.scene import SPEED_OF_LIGHT
from msisac.waveform import (FdmaFragmented, Numerology, QamRandom,
                             build_allocation, generate_symbols)

NUM = Numerology(64, 1.25e6, 1, 0.8e-6, 5.2e9)
LAMBDA = SPEED_OF_LIGHT / NUM.center_frequency


@pytest.fixture
def alloc():
    return build_allocation(NUM, total_power=float(NUM.n_carriers))


def _paths(rng, n_paths, on_grid=True, total_power=1.0, tag=PathTag.TARGET_BTP):
    if on_grid:
        bins = rng.choice(np.arange(1, NUM.n_carriers), n_paths, replace=False)
        delays = bins / NUM.bandwidth
    else:
        delays = rng.uniform(0, 400e-9, n_paths)
    g = rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)
    g *= np.sqrt(total_power / np.sum(np.abs(g) ** 2))
    return PathSet(tuple(PropagationPath(t, 0.0, w, tag) for t, w in zip(delays, g)),
                   NUM.center_frequency), g


def _direct_acf(h):
    """Circular autocorrelation by explicit summation."""
    n = h.size
    return np.array([sum(h[(i + lag) % n] * np.conj(h[i]) for i in range(n)) for lag in range(n)])


def _focus(paths, alloc, est=None):
    x = generate_symbols(alloc)
    h = sample_frf(paths, alloc)
    pre = tr_prefilter(sample_frf(est, alloc) if est is not None else h, x)
    return apply_tr(x, h, pre), h, pre


def test_real_channel_prefilter_is_channel(alloc):
    rng = np.random.default_rng(0)
    vals = np.where(alloc.active, rng.standard_normal(NUM.shape), 0).astype(complex)
    h = ChannelSamples(NUM, vals, alloc.active.astype(float), alloc.active)
    pre = tr_prefilter(h)
    ratio = pre.values[alloc.active] / vals[alloc.active]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert ratio[0].real > 0 and ratio[0].imag == 0


def test_single_path_phase_cancelled(alloc):
    paths = PathSet((PropagationPath(137e-9, 0.0, np.exp(0.7j)),), NUM.center_frequency)
    res, h, pre = _focus(paths, alloc)
    hp = (h.values * pre.values)[alloc.active]
    np.testing.assert_allclose(hp, hp[0], rtol=1e-12)
    assert abs(hp[0].imag) < 1e-12 * abs(hp[0])


@pytest.mark.parametrize("seed", range(3))
def test_transmit_energy_preserved(seed):
    rng = np.random.default_rng(seed)
    a = build_allocation(NUM, FdmaFragmented(tuple(range(0, 64, 3))), total_power=5.0)
    x = generate_symbols(a, QamRandom(16, seed))
    paths, _ = _paths(rng, 5, on_grid=False)
    pre = tr_prefilter(sample_frf(paths, a), x)
    e_in = np.sum(np.abs(x.values) ** 2)
    e_out = np.sum(np.abs(x.values * pre.values) ** 2)
    assert e_out == pytest.approx(e_in, rel=1e-12)


@pytest.mark.parametrize("n_paths", [1, 3, 7, 20])
@pytest.mark.parametrize("seed", range(3))
def test_perfect_csi_response_is_channel_acf(alloc, n_paths, seed):
    rng = np.random.default_rng(100 * n_paths + seed)
    paths, g = _paths(rng, n_paths, total_power=rng.uniform(0.5, 3.0))
    res, h, pre = _focus(paths, alloc)
    scale = (pre.values / np.conj(h.values))[alloc.active][0]
    acf = _direct_acf(np.fft.ifft(h.values[:, 0]))
    resp = res.response[:, 0] / scale
    np.testing.assert_allclose(resp, acf, rtol=0, atol=1e-9 * np.abs(acf).max())
    # distinct on-grid delays are orthogonal, so the zero lag collects every path's power
    assert np.abs(resp[0]) ** 2 == pytest.approx(np.sum(np.abs(g) ** 2) ** 2, rel=1e-9)
    assert np.argmax(np.abs(resp)) == 0


def test_rich_multipath_focuses_better(alloc):
    rng = np.random.default_rng(5)
    psl = {p: np.mean([peak_to_sidelobe(_focus(_paths(rng, p, on_grid=False)[0], alloc)[0].response)
                       for _ in range(50)]) for p in (3, 20)}
    assert psl[20] > psl[3]


@pytest.mark.parametrize("delay", [0.0, 137e-9, 333.3e-9])
def test_single_path_gain_is_processing_gain(alloc, delay):
    paths = PathSet((PropagationPath(delay, 0.0, 0.3 - 0.4j),), NUM.center_frequency)
    gain = focusing_gain(_focus(paths, alloc)[0].response)
    assert gain == pytest.approx(10 * np.log10(NUM.n_carriers), abs=0.5)


def test_zero_channel_is_degenerate(alloc):
    h = ChannelSamples(NUM, np.zeros(NUM.shape, complex), np.ones(NUM.shape), alloc.active)
    with pytest.raises(DegenerateResponseError):
        tr_prefilter(h)
    with pytest.raises(DegenerateResponseError):
        focusing_gain(np.zeros((NUM.n_carriers, 1)))
    with pytest.raises(DegenerateResponseError):
        peak_to_sidelobe(np.zeros(8))


def test_mask_mismatch_rejected(alloc):
    paths, _ = _paths(np.random.default_rng(1), 3)
    x = generate_symbols(alloc)
    sparse = build_allocation(NUM, FdmaFragmented(tuple(range(32))))
    pre = tr_prefilter(sample_frf(paths, sparse))
    with pytest.raises(MaskMismatchError):
        apply_tr(x, sample_frf(paths, alloc), pre)


def _random_family(rng, n_paths=7):
    return displaced_family(NUM.center_frequency, rng.uniform(0, 400e-9, n_paths),
                            np.exp(2j * np.pi * rng.random(n_paths)),
                            rng.uniform(0, 2 * np.pi, n_paths))


@pytest.mark.parametrize("seed", range(5))
def test_mismatched_prefilter_loses_gain(alloc, seed):
    fam = _random_family(np.random.default_rng(seed))
    matched = focusing_gain(_focus(fam(4 * LAMBDA), alloc)[0].response)
    stale = focusing_gain(_focus(fam(4 * LAMBDA), alloc, est=fam(0.0))[0].response)
    assert stale < matched


@pytest.mark.parametrize("seed", range(5))
def test_mismatch_curve_peaks_at_zero(alloc, seed):
    fam = _random_family(np.random.default_rng(seed))
    d = np.linspace(0, 4 * LAMBDA, 17)
    curve = tr_mismatch_curve(fam, generate_symbols(alloc), alloc, d)
    assert np.argmax(curve.gains_db) == 0
    assert curve.trend == "decreasing"
    lines = curve.to_csv().splitlines()
    assert lines[0] == "displacement_m,focusing_gain_db" and len(lines) == 18


def test_single_path_curve_is_flat(alloc):
    fam = displaced_family(NUM.center_frequency, [120e-9], [1.0], [0.3])
    curve = tr_mismatch_curve(fam, generate_symbols(alloc), alloc, np.linspace(0, 4 * LAMBDA, 9))
    np.testing.assert_allclose(curve.gains_db, curve.gains_db[0], atol=1e-9)
    assert curve.trend == "flat"


@pytest.mark.parametrize("d", [[0.0], [0.1, 0.2]])
def test_mismatch_curve_needs_zero_and_two_points(alloc, d):
    fam = displaced_family(NUM.center_frequency, [120e-9], [1.0], [0.3])
    with pytest.raises(ValueError):
        tr_mismatch_curve(fam, generate_symbols(alloc), alloc, d)


def test_conjugate_prefilter_maximises_zero_lag(alloc):
    rng = np.random.default_rng(8)
    paths, _ = _paths(rng, 6, on_grid=False)
    x = generate_symbols(alloc)
    h = sample_frf(paths, alloc)
    pre = tr_prefilter(h, x)
    best = np.abs(apply_tr(x, h, pre).response[0, 0])
    energy = np.sum(np.abs(pre.values) ** 2)
    m = alloc.active
    for _ in range(1000):
        p = np.where(m, rng.standard_normal(NUM.shape) + 1j * rng.standard_normal(NUM.shape), 0)
        p *= np.sqrt(energy / np.sum(np.abs(p) ** 2))
        trial = type(pre)(p, m)
        assert np.abs(apply_tr(x, h, trial).response[0, 0]) <= best * (1 + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_background_subtracted_focus_ignores_clutter(seed, n_clutter):
    rng = np.random.default_rng(seed)
    alloc = build_allocation(NUM, total_power=float(NUM.n_carriers))
    target, _ = _paths(rng, 2, on_grid=False)
    clutter, _ = _paths(rng, n_clutter, on_grid=False, total_power=rng.uniform(1, 100),
                        tag=PathTag.CLUTTER)
    x = generate_symbols(alloc)
    h_t = background_subtract(sample_frf(target | clutter, alloc), sample_frf(clutter, alloc))
    h_ref = sample_frf(target, alloc)
    g_sub = focusing_gain(apply_tr(x, h_t, tr_prefilter(h_t, x)).response)
    g_ref = focusing_gain(apply_tr(x, h_ref, tr_prefilter(h_ref, x)).response)
    assert abs(g_sub - g_ref) < 0.1


def test_focusing_gain_sums_over_symbols():
    prof = np.zeros((8, 3), complex)
    prof[0] = 2.0
    assert focusing_gain(prof) == pytest.approx(10 * np.log10(8))
    assert focusing_gain(prof[:, 0]) == pytest.approx(10 * np.log10(8))
    assert peak_to_sidelobe(prof[:, 0]) == np.inf

