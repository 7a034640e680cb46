"""Shared fixtures: generated benchmark datasets and inferred automata."""
from __future__ import annotations

import time

import numpy as np
import pytest

from narxhybrid.benchgen import catalog_path, generate_dataset, load_catalog
from narxhybrid.config import load_config
from narxhybrid.pipeline import infer, load_switches
from narxhybrid.trace import Trace, load_dataset


class Bench:
    """A generated dataset plus the automaton inferred from its training split."""

    def __init__(self, name: str, root):
        self.name = name
        self.root = root
        self.cfg = load_config(catalog_path(f"{name}.infer"))
        t = time.perf_counter()
        generate_dataset(load_catalog(name), root, seed=0)
        self.gen_time = time.perf_counter() - t
        self.data = load_dataset(root)
        self.switches = load_switches(root)
        t = time.perf_counter()
        self.result = infer(self.data["train"], self.cfg)
        self.infer_time = time.perf_counter() - t

    @property
    def automaton(self):
        return self.result.automaton


_cache: dict[str, Bench] = {}


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """``bench(name)`` generates (once per session) and infers a catalog benchmark."""

    def get(name: str) -> Bench:
        if name not in _cache:
            _cache[name] = Bench(name, tmp_path_factory.mktemp(name))
        return _cache[name]
    return get


def make_trace(x, u=None, dt=1.0, t0=0.0) -> Trace:
    return Trace(t0, dt, np.asarray(x, dtype=float), None if u is None else np.asarray(u, dtype=float))


_acceptance: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints the PASS/FAIL line of criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _acceptance[n] = line
        with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
            print(f"\n{line}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_acceptance):
            terminalreporter.write_line(_acceptance[n])
