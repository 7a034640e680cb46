import json
import math

import numpy as np
import pytest

from narxhybrid.benchgen import (GroundTruthSystem, SystemError_, catalog_names, generate_dataset,
                                 load_catalog, rkf45_step, simulate_system)
from narxhybrid.config import ConfigError
from narxhybrid.expr import parse


def system(**kw):
    base = {"dt": 0.01, "samples": 100, "modes": [{"id": "a", "ode": "x1"}],
            "init": {"mode": "a", "state": {"x1": 1.0}}}
    base.update(kw)
    return GroundTruthSystem.from_json(base)


def test_constant():
    s = system(modes=[{"id": "a", "ode": "0"}], samples=10, init={"state": {"x1": 3.0}})
    sim = simulate_system(s, "a", [3.0])
    assert len(sim.trace) == 10
    assert (sim.trace.outputs == 3.0).all()


def test_exponential_closed_form():
    sim = simulate_system(system(), "a", [1.0])
    np.testing.assert_allclose(sim.trace.outputs[:, 0], np.exp(sim.trace.times), rtol=0, atol=1e-8)


def test_harmonic_closed_form():
    s = system(modes=[{"id": "a", "k": 2, "ode": "-x1"}], samples=700)
    sim = simulate_system(s, "a", [1.0, 0.0])
    np.testing.assert_allclose(sim.trace.outputs[:, 0], np.cos(sim.trace.times), atol=1e-8)


def test_rkf45_step_orders():
    f = lambda t, y: y  # noqa: E731
    for h in (0.1, 0.05):
        y4, err = rkf45_step(f, 0.0, np.array([1.0]), h)
        assert abs(y4[0] - math.exp(h)) < 2 * h ** 5
        assert abs(err[0]) < h ** 5


def test_guard_crossing_located_and_reset_applied():
    s = system(modes=[{"id": "a", "ode": "1"}, {"id": "b", "ode": "-1"}],
               transitions=[{"src": "a", "dst": "b", "guard": "x1 >= 0.5",
                             "reset": {"matrix": [[1]], "offset": [0.25]}}],
               samples=60)
    sim = simulate_system(s, "a", [0.123])
    (ev,) = sim.events
    assert ev.time == pytest.approx(0.5 - 0.123, abs=1e-10)
    g = parse("x1 >= 0.5", condition=True)
    t = sim.trace.times
    x = sim.trace.outputs[:, 0]
    before = t < ev.time
    assert (g.evaluate({"x1": x[before]}) < 0).all()
    # after the crossing: 0.5 + 0.25 then falling at unit speed
    np.testing.assert_allclose(x[~before], 0.75 - (t[~before] - ev.time), atol=1e-9)


def test_schema_errors():
    with pytest.raises(ConfigError, match="/modes"):
        GroundTruthSystem.from_json({"dt": 0.1, "samples": 5, "modes": []})
    with pytest.raises(ConfigError, match="/dt: missing required field 'dt'"):
        GroundTruthSystem.from_json({"samples": 5, "modes": [{"id": "a", "ode": "1"}]})
    with pytest.raises(SystemError_):
        system(transitions=[{"src": "a", "dst": "zz", "guard": "x1 >= 1"}])
    with pytest.raises(SystemError_):
        system(modes=[{"id": "a", "ode": "y7 + 1"}])
    with pytest.raises(SystemError_):
        system(transitions=[{"src": "a", "dst": "a", "guard": "x1 >= 1",
                             "reset": {"matrix": [[1, 0]]}}])


def test_catalog_loads():
    assert set(catalog_names()) >= {"simple_linear", "two_state_ha", "loop_syst", "duffing",
                                    "bouncing_box", "thermostat"}
    for name in catalog_names():
        load_catalog(name)


def test_seeded_generation_is_byte_identical(tmp_path):
    s = load_catalog("simple_linear")
    generate_dataset(s, tmp_path / "a", n_train=2, n_test=1, seed=7)
    generate_dataset(s, tmp_path / "b", n_train=2, n_test=1, seed=7)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    generate_dataset(s, tmp_path / "c", n_train=2, n_test=1, seed=8)
    assert (tmp_path / "a/train/trace_000.csv").read_bytes() != (tmp_path / "c/train/trace_000.csv").read_bytes()


def test_loop_cycle(tmp_path):
    log = generate_dataset(load_catalog("loop_syst"), tmp_path, n_train=2, n_test=0, seed=0)
    for events in log.values():
        assert [(e[1], e[2]) for e in events] == [("q1", "q2"), ("q2", "q3"), ("q3", "q4"),
                                                  ("q4", "q1")]
    meta = json.loads((tmp_path / "system.json").read_text())
    assert meta["seed"] == 0 and meta["errors"] == {}
