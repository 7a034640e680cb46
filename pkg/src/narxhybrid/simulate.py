"""Discrete-time execution of a learned automaton."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .automaton import LearnedAutomaton
from .guards import lag_differences
from .narx import TermEvaluationError
from .trace import Trace, save_trace

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class DivergenceError(SimulationError):
    """A prediction was not finite; ``step`` is the sample index and
    ``partial`` the result up to (excluding) that sample."""

    def __init__(self, step: int, partial: "SimResult"):
        super().__init__(f"simulation diverged at step {step}")
        self.step = step
        self.partial = partial


@dataclass
class SimConfig:
    """Seed samples (oldest first), inputs for every produced sample, and the
    number of samples to generate after the seed. With ``resets`` off a
    transition only changes the mode (used for ablations)."""

    seed_history: np.ndarray
    inputs: np.ndarray
    steps: int
    initial_mode: int | None = None
    t0: float = 0.0
    dt: float = 1.0
    resets: bool = True


@dataclass
class SimEvent:
    step: int            # last sample of the source mode
    source: int
    target: int
    decision: float


@dataclass
class SimResult:
    trace: Trace
    modes: np.ndarray
    events: list[SimEvent]
    suppressed: list[SimEvent] = field(default_factory=list)
    overlaps: int = 0
    counters: dict = field(default_factory=dict)

    def switch_times(self) -> list[float]:
        """Time of the first sample produced in each new mode."""
        return [self.trace.time_of(e.step + 1) for e in self.events]

    def to_json(self) -> dict:
        return {
            "modes": self.modes.tolist(),
            "events": [{"step": e.step, "time": self.trace.time_of(e.step + 1),
                        "source": e.source, "target": e.target, "decision": e.decision}
                       for e in self.events],
            "suppressed": [{"step": e.step, "source": e.source, "target": e.target}
                           for e in self.suppressed],
            "overlaps": self.overlaps,
            "counters": self.counters,
        }


def simulate(automaton: LearnedAutomaton, config: SimConfig) -> SimResult:
    """Run ``automaton`` from ``config.seed_history``.

    At every sample ``tau`` the guards of the current mode are evaluated on
    ``(x[tau], ..., u[tau])``. When one is active (the largest decision
    value wins), the transition's reset models produce ``x[tau+1] ..
    x[tau+k]`` and guards stay silent for those ``k`` samples; otherwise the
    current mode predicts ``x[tau+1]``.
    """
    a = automaton
    if not a.modes:
        raise SimulationError("automaton has no modes")
    n, m = a.template.n, a.template.m
    seed = np.asarray(config.seed_history, dtype=float).reshape(-1, n)
    s = len(seed)
    total = s + int(config.steps)
    U = np.asarray(config.inputs, dtype=float).reshape(-1, m) if m else np.zeros((total, 0))
    if U.shape[0] < total:
        raise SimulationError(f"inputs cover {U.shape[0]} samples, {total} needed")
    U = U[:total]
    if s < a.max_order or s == 0:
        raise SimulationError(f"seed of {s} samples is shorter than the maximal order {a.max_order}")
    mode = a.modes[0].id if config.initial_mode is None else config.initial_mode
    a.mode(mode)
    X = np.empty((total, n))
    X[:s] = seed
    modes = np.empty(total, dtype=int)
    modes[:s] = mode
    events, suppressed = [], []
    overlaps = 0
    counters = {"mode_steps": 0, "reset_steps": 0}
    quiet_until = -1
    tau = s - 1

    def result(upto):
        return SimResult(Trace(config.t0, config.dt, X[:upto], U[:upto]), modes[:upto].copy(),
                         events, suppressed, overlaps, dict(counters))

    while tau < total - 1:
        fired = None
        outs = a.outgoing(mode)
        if outs:
            cands = []
            for tr in outs:
                g = tr.guard
                if tau < g.lags:
                    continue
                v = np.concatenate([*lag_differences(X, np.array([tau]), g.lags), U[[tau]]], axis=1)[0]
                dec = float(g.decision(v))
                if dec > 0:
                    cands.append((dec, tr))
            if cands:
                cands.sort(key=lambda c: -c[0])
                if tau <= quiet_until:
                    for dec, tr in cands:
                        suppressed.append(SimEvent(tau, mode, tr.target, dec))
                else:
                    if len(cands) > 1:
                        overlaps += 1
                        log.warning("step %d: %d guards of mode %d active", tau, len(cands), mode)
                    fired = cands[0]
        try:
            if fired is not None:
                dec, tr = fired
                events.append(SimEvent(tau, mode, tr.target, dec))
                mode = tr.target
                a.mode(mode)
                models = tr.resets if config.resets else []
                k = len(models)
                for i, model in enumerate(models, start=1):
                    t = tau + i
                    if t >= total:
                        break
                    ko = model.order
                    X[t] = model.predict(X[t - ko:t], U[t])
                    modes[t] = mode
                    counters["reset_steps"] += 1
                    if not np.isfinite(X[t]).all():
                        raise DivergenceError(t, result(t))
                quiet_until = tau + k
                if k:
                    tau = min(tau + k, total - 1)
                    continue
            dyn = a.mode(mode).dynamics
            k = dyn.order
            t = tau + 1
            X[t] = dyn.predict(X[t - k:t], U[t])
            modes[t] = mode
            counters["mode_steps"] += 1
            if not np.isfinite(X[t]).all():
                raise DivergenceError(t, result(t))
            tau = t
        except TermEvaluationError:
            raise DivergenceError(tau + 1, result(tau + 1)) from None
    return result(total)


def write_simulation(result: SimResult, csv_path, json_path=None) -> None:
    """Trace CSV plus a sidecar JSON with per-step modes and switch events."""
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    save_trace(result.trace, csv_path)
    json_path = Path(json_path) if json_path else Path(csv_path).with_suffix(".modes.json")
    json_path.write_text(json.dumps(result.to_json()) + "\n")
