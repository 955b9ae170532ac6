import numpy as np
import pytest

from msisac.scene import BistaticLink, NodeState, Role, Scenario, TargetState
from msisac.waveform import Numerology


@pytest.fixture
def baseline_scene():
    """Tx and Rx 100 m apart on the x axis, one static target."""
    nodes = (NodeState("tx", (0, 0, 0), role=Role.TX_ONLY),
             NodeState("rx", (100, 0, 0), role=Role.RX_ONLY))
    return Scenario(nodes, (TargetState((50, 40, 0)),))


@pytest.fixture
def small_numerology():
    return Numerology(n_carriers=64, carrier_spacing=1.25e6, n_symbols=32,
                      symbol_duration=50e-6)


def random_scene(rng, n_rx=3, moving=True):
    """Random static-node scene with one target well away from the nodes."""
    nodes = [NodeState("tx", rng.uniform(-50, 50, 3), role=Role.TX_ONLY)]
    nodes += [NodeState(f"rx{i}", rng.uniform(-50, 50, 3), role=Role.RX_ONLY)
              for i in range(n_rx)]
    vel = rng.uniform(-20, 20, 3) if moving else np.zeros(3)
    tgt = TargetState(rng.uniform(-80, 80, 3) + np.array([0, 0, 120.0]), vel)
    links = [BistaticLink("tx", f"rx{i}") for i in range(n_rx)]
    return Scenario(tuple(nodes), (tgt,)), links


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    # a criterion fails if any of its phases fails
    if rep.failed or (rep.when == "call" and number not in _CRITERIA):
        _CRITERIA[number] = (title, "FAIL" if rep.failed else "PASS")
    elif rep.when == "setup" and rep.skipped:
        _CRITERIA[number] = (title, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}")
