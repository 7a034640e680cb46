"""End-to-end inference and evaluation on trace datasets."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .automaton import (LearnedAutomaton, assemble, best_mode, characterize_modes,
                        learn_resets)
from .clustering import Clustering, cluster
from .config import InferConfig
from .guards import build_guard_datasets, lag_differences, train_svm
from .metrics import EvalReport, hdt, switch_index, trace_diff
from .narx import NarxTemplate
from .segmentation import SegmentationResult, segment_dataset
from .simulate import DivergenceError, SimConfig, SimResult, simulate
from .trace import Trace

log = logging.getLogger(__name__)

PHASES = ("segmentation", "clustering", "modes", "guards", "resets")


class PhaseError(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


@dataclass
class InferenceResult:
    automaton: LearnedAutomaton
    segmentations: dict[str, SegmentationResult]
    clustering: Clustering
    guard_datasets: dict
    timings: dict
    warnings: list[str] = field(default_factory=list)

    def segmentation_report(self) -> dict:
        return {tid: r.to_json() for tid, r in self.segmentations.items()}


def template_for(cfg: InferConfig, traces: dict[str, Trace]) -> NarxTemplate:
    first = next(iter(traces.values()))
    return NarxTemplate.create(cfg.template["order"], first.n, first.m,
                               cfg.template.get("terms", []))


def _svm_settings(cfg: InferConfig, pair) -> dict:
    svm = cfg.svm
    over = svm.get("per_pair", {}).get(f"{pair[0]}->{pair[1]}", {})
    return {"kernel": over.get("kernel", svm["kernel"]),
            "params": over.get("params", svm.get("params", {})),
            "C": over.get("C", svm["C"])}


def infer(traces: dict[str, Trace], cfg: InferConfig, threads: int = 1) -> InferenceResult:
    """Segment, cluster, characterize modes, learn guards and resets."""
    if not traces:
        raise PhaseError("segmentation", "no training traces")
    timings = {}
    warnings: list[str] = []
    try:
        template = template_for(cfg, traces)
    except ValueError as exc:
        raise PhaseError("segmentation", f"invalid template: {exc}") from None
    tol = cfg.segmenter["tol"]

    t = time.perf_counter()
    try:
        segs, errors = segment_dataset(traces, template, cfg.segmenter["kind"],
                                       cfg.segmenter.get("window"), tol, threads)
    except ValueError as exc:
        raise PhaseError("segmentation", str(exc)) from None
    timings["segmentation"] = time.perf_counter() - t
    for tid, msg in errors.items():
        warnings.append(f"{tid}: segmentation failed: {msg}")
    for tid, r in segs.items():
        warnings.extend(f"{tid}: {w}" for w in r.warnings)
    refs = [s for tid in sorted(segs) for s in segs[tid].segments]
    if not refs:
        raise PhaseError("segmentation", "no fittable segments survived screening")

    t = time.perf_counter()
    try:
        cl = cluster(refs, traces, template, cfg.clustering["criterion"], tol,
                     cfg.clustering.get("assign", "first"))
    except ValueError as exc:
        raise PhaseError("clustering", str(exc)) from None
    timings["clustering"] = time.perf_counter() - t

    t = time.perf_counter()
    try:
        modes = characterize_modes(cl)
    except ValueError as exc:
        raise PhaseError("modes", str(exc)) from None
    timings["modes"] = time.perf_counter() - t

    t = time.perf_counter()
    lags = cfg.svm.get("lags", 0)
    datasets = build_guard_datasets(traces, segs, cl, lags=lags)

    def train(pair):
        st = _svm_settings(cfg, pair)
        return pair, train_svm(datasets[pair], st["kernel"], st["C"], st["params"],
                               max_points=cfg.svm.get("max_points", 600))
    try:
        if threads > 1 and len(datasets) > 1:
            with ThreadPoolExecutor(threads) as pool:
                guards = dict(pool.map(train, sorted(datasets)))
        else:
            guards = dict(train(p) for p in sorted(datasets))
    except ValueError as exc:
        raise PhaseError("guards", str(exc)) from None
    for pair, g in guards.items():
        if g.diagnostics.get("training_accuracy", 1.0) < 1.0:
            warnings.append(f"guard {pair}: training accuracy "
                            f"{g.diagnostics['training_accuracy']:.6f}")
    timings["guards"] = time.perf_counter() - t

    t = time.perf_counter()
    resets, info = {}, {}
    mode_by_id = {m.id: m for m in modes}
    try:
        for pair in sorted(datasets):
            rt = learn_resets(traces, datasets[pair], mode_by_id[pair[0]].dynamics.template, tol)
            resets[pair] = rt.models
            info[pair] = {"crossings": len(datasets[pair].positive_refs),
                          "windows": rt.windows, "skipped_windows": rt.skipped,
                          "reset_residuals": rt.residuals}
            if rt.skipped:
                warnings.append(f"resets {pair}: {rt.skipped} window(s) outside the traces skipped")
    except ValueError as exc:
        raise PhaseError("resets", str(exc)) from None
    timings["resets"] = time.perf_counter() - t
    timings["total"] = sum(timings[p] for p in PHASES)

    initial = {}
    for tid, r in segs.items():
        for ref in r.segments:
            if ref in cl.assignment:
                initial[tid] = cl.assignment[ref]
                break
    meta = {"tol": tol, "initial_modes": initial, "config": cfg.echo(),
            "clustering": {"criterion": cl.criterion, "assign": cl.assign},
            "timings": timings}
    try:
        automaton = assemble(modes, guards, resets, template, meta, info)
    except ValueError as exc:
        raise PhaseError("resets", str(exc)) from None
    return InferenceResult(automaton, segs, cl, datasets, timings, warnings)


# --------------------------------------------------------------------------
# evaluation


def simulate_trace(automaton: LearnedAutomaton, trace: Trace, probe: int = 10,
                   initial_mode: int | None = None, resets: bool = True) -> SimResult:
    """Roll ``automaton`` out from the first ``k`` samples of ``trace`` with its inputs.

    Unless given, the initial mode is the one that best predicts the first
    ``probe`` samples (only the seed itself enters the simulation).
    """
    k = automaton.max_order
    seed_len = max(k, 1)
    if initial_mode is None:
        initial_mode = best_mode(automaton, trace.slice(0, min(len(trace), max(probe, k + 1))))
    cfg = SimConfig(trace.outputs[:seed_len], trace.inputs, len(trace) - seed_len, initial_mode,
                    trace.t0, trace.dt, resets)
    return simulate(automaton, cfg)


def guard_offsets(automaton: LearnedAutomaton, trace: Trace, switches) -> list[float]:
    """Timing of the learned guards along a recorded trajectory.

    ``switches`` are the indices of the first sample after each true switch.
    For every dwell the active mode is the best one-step predictor of it; the
    result holds, per switch, the distance in samples between the switch and
    the sample following the first activation of one of that mode's guards
    (``inf`` if none fires before the next switch).
    """
    k = automaton.max_order
    X, U = trace.outputs, trace.inputs
    bounds = [0] + [int(i) for i in switches] + [len(trace)]
    out = []
    for j, sw in enumerate(bounds[1:-1], start=1):
        lo, hi = bounds[j - 1], bounds[j + 1]
        if sw - lo <= k + 1:
            out.append(float("inf"))
            continue
        mode = best_mode(automaton, trace.slice(lo, sw))
        first = None
        for tr in automaton.outgoing(mode):
            start = max(lo + k if lo else 0, tr.guard.lags)
            taus = np.arange(start, hi - 1)
            if taus.size == 0:
                continue
            V = np.hstack([*lag_differences(X, taus, tr.guard.lags), U[taus]])
            hits = taus[tr.guard.decision(V) > 0]
            if hits.size and (first is None or hits[0] < first):
                first = int(hits[0])
        out.append(float("inf") if first is None else float(abs(first + 1 - sw)))
    return out


def evaluate(automaton: LearnedAutomaton, traces: dict[str, Trace], switches: dict | None,
             cfg: InferConfig, timings: dict | None = None, resets: bool = True) -> EvalReport:
    """Diff metrics from full rollouts and HDT_c of changepoints found on ``traces``.

    ``switches`` maps trace ids to ``[[time, src, dst], ...]``; without it
    HDT_c is omitted.
    """
    template = automaton.template
    tol = cfg.segmenter["tol"]
    segs, _ = segment_dataset(traces, template, cfg.segmenter["kind"],
                              cfg.segmenter.get("window"), tol)
    per = []
    hd_s, hd_n = [], []
    dmax, sums, count = 0.0, 0.0, 0
    for tid in sorted(traces):
        tr = traces[tid]
        row = {"trace": tid}
        try:
            sim = simulate_trace(automaton, tr, cfg.eval.get("probe", 10), resets=resets)
            d = trace_diff(sim.trace, tr)
        except DivergenceError as exc:
            row["diverged_at"] = exc.step
            d = None
            sim = None
        if d is not None:
            row.update(diff_max=d.diff_max, diff_avg=d.diff_avg,
                       per_output_max=d.per_output_max, per_output_avg=d.per_output_avg)
            dmax = max(dmax, d.diff_max)
            sums += d.diff_avg * len(tr)
            count += len(tr)
        else:
            dmax = float("inf")
        if sim is not None:
            row["simulated_switches"] = [e.step + 1 for e in sim.events]
            row["initial_mode"] = int(sim.modes[0])
        if tid in segs:
            cps = segs[tid].interior
            row["changepoints"] = cps
        if switches is not None and tid in switches:
            true_t = [float(e[0]) for e in switches[tid]]
            true_i = [switch_index(t, tr.t0, tr.dt) for t in true_t]
            row["true_switches"] = true_i
            if tid in segs:
                found = segs[tid].interior
                row["hdt_c"] = hdt([tr.time_of(p) for p in found], true_t)
                row["hdt_c_samples"] = hdt(found, true_i)
                hd_s.append(row["hdt_c"])
                hd_n.append(row["hdt_c_samples"])
            if sim is not None:
                sim_i = [e.step + 1 for e in sim.events]
                row["sim_switch_hdt_samples"] = hdt(sim_i, true_i)
            row["guard_switch_offsets"] = guard_offsets(automaton, tr, true_i)
        per.append(row)
    davg = sums / count if count else float("inf")
    return EvalReport(max(hd_s) if hd_s else None, max(hd_n) if hd_n else None,
                      dmax, davg if np.isfinite(dmax) else dmax, per, dict(timings or {}),
                      config=cfg.echo())


def load_switches(root) -> dict | None:
    p = Path(root) / "switches.json"
    if not p.exists():
        return None
    return json.loads(p.read_text())
