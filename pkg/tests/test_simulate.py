import json

import numpy as np
import pytest

from helpers import linear_model
from narxhybrid.automaton import LearnedAutomaton, LearnedMode, LearnedTransition
from narxhybrid.guards import SvmGuard
from narxhybrid.narx import NarxTemplate
from narxhybrid.simulate import (DivergenceError, SimConfig, SimulationError, simulate,
                                 write_simulation)


def threshold_guard(pair, c, sign=1.0):
    """Linear guard on x1 active when ``sign * (x1 - c) > 0``."""
    return SvmGuard(pair, "linear", {}, np.array([[1.0]]), np.array([sign]), -sign * c,
                    np.zeros(1), np.ones(1))


def two_mode(k_reset=True):
    """Mode 0 climbs by 1, mode 1 falls by 1; switch above 3.5 / below 0.5.

    The reset into mode 1 jumps to 10 (so reset samples are recognisable).
    """
    up = linear_model([[1.0, 1.0]], 1)
    down = linear_model([[1.0, -1.0]], 1)
    jump = linear_model([[0.0, 10.0]], 1)
    t01 = LearnedTransition(0, 1, threshold_guard((0, 1), 3.5), [jump] if k_reset else [])
    t10 = LearnedTransition(1, 0, threshold_guard((1, 0), 0.5, -1.0), [up])
    return LearnedAutomaton([LearnedMode(0, up), LearnedMode(1, down)], [t01, t10], up.template)


def test_closed_form_single_mode():
    m = linear_model([[2.0, 0.0]], 1)
    a = LearnedAutomaton([LearnedMode(0, m)], [], m.template)
    r = simulate(a, SimConfig(np.array([[1.0]]), np.zeros((5, 0)), 4))
    np.testing.assert_array_equal(r.trace.outputs[:, 0], [1, 2, 4, 8, 16])
    assert r.events == [] and (r.modes == 0).all()


def test_silent_guards_reduce_to_rollout():
    a = two_mode()
    never = LearnedTransition(0, 1, threshold_guard((0, 1), 1e9), a.transitions[0].resets)
    b = LearnedAutomaton(a.modes, [never], a.template)
    r = simulate(b, SimConfig(np.array([[0.0]]), None, 20, 0))
    np.testing.assert_array_equal(r.trace.outputs[:, 0],
                                  a.mode(0).dynamics.rollout([[0.0]], np.zeros((21, 0)), 20)[:, 0])


def test_switch_reset_and_counters():
    r = simulate(two_mode(), SimConfig(np.array([[0.0]]), None, 10, 0))
    x = r.trace.outputs[:, 0]
    # 0 1 2 3 4 | reset -> 10 | 9 8 ...
    np.testing.assert_array_equal(x[:8], [0, 1, 2, 3, 4, 10, 9, 8])
    assert [(e.step, e.source, e.target) for e in r.events] == [(4, 0, 1)]
    np.testing.assert_array_equal(r.modes[:7], [0, 0, 0, 0, 0, 1, 1])
    assert r.counters == {"mode_steps": 9, "reset_steps": 1}
    assert r.switch_times() == [5.0]


def test_no_reset_ablation_only_switches_mode():
    cfg = SimConfig(np.array([[0.0]]), None, 10, 0, resets=False)
    x = simulate(two_mode(), cfg).trace.outputs[:, 0]
    np.testing.assert_array_equal(x[:8], [0, 1, 2, 3, 4, 3, 2, 1])


def test_guards_quiet_during_reset_samples():
    up = linear_model([[1.0, 1.0]], 1)
    flat = linear_model([[1.0, 0.0]], 1)
    back = linear_model([[0.0, 0.0]], 1)
    # mode 1's guard is active right after the switch (x = 0 < 0.5)
    a = LearnedAutomaton(
        [LearnedMode(0, up), LearnedMode(1, flat)],
        [LearnedTransition(0, 1, threshold_guard((0, 1), 1.5), [back]),
         LearnedTransition(1, 0, threshold_guard((1, 0), 0.5, -1.0), [up])], up.template)
    r = simulate(a, SimConfig(np.array([[0.0]]), None, 6, 0))
    assert r.events[0].step == 2
    assert r.suppressed and r.suppressed[0].step == 3
    assert r.events[1].step == 4


def test_determinism_and_sidecar(tmp_path):
    cfg = SimConfig(np.array([[0.0]]), None, 30, 0, t0=1.0, dt=0.5)
    r1 = simulate(two_mode(), cfg)
    r2 = simulate(two_mode(), cfg)
    assert np.array_equal(r1.trace.outputs, r2.trace.outputs)
    write_simulation(r1, tmp_path / "sim" / "a.csv")
    side = json.loads((tmp_path / "sim" / "a.modes.json").read_text())
    assert side["events"][0]["time"] == r1.switch_times()[0]
    assert len(side["modes"]) == 31


def test_errors():
    a = two_mode()
    with pytest.raises(SimulationError):
        simulate(a, SimConfig(np.zeros((0, 1)), None, 3, 0))
    with pytest.raises(KeyError):
        simulate(a, SimConfig(np.zeros((1, 1)), None, 3, 7))
    tpl = NarxTemplate.create(1, 1, 1)
    m = linear_model([[1.0, 1.0, 0.0]], 1, 1, 1)
    b = LearnedAutomaton([LearnedMode(0, m)], [], tpl)
    with pytest.raises(SimulationError):
        simulate(b, SimConfig(np.zeros((1, 1)), np.zeros((3, 1)), 5, 0))


def test_divergence_reports_step():
    boom = linear_model([[1e300, 0.0]], 1)
    a = LearnedAutomaton([LearnedMode(0, boom)], [], boom.template)
    with pytest.raises(DivergenceError) as info:
        simulate(a, SimConfig(np.array([[10.0]]), None, 5, 0))
    assert info.value.step == 2
    assert len(info.value.partial.trace) == 2
