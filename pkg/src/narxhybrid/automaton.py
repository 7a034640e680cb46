"""Learned hybrid automata: modes, guarded transitions and reset models."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering
from .guards import GuardDataset, SvmGuard
from .narx import (DEFAULT_TOL, LsqProblem, NarxModel, NarxTemplate, TermEvaluationError,
                   combine, problem_for, solve_problem)
from .trace import Trace

log = logging.getLogger(__name__)


class AutomatonError(ValueError):
    pass


@dataclass
class LearnedMode:
    id: int
    dynamics: NarxModel
    residual: float = 0.0
    segments: int = 0

    @property
    def order(self) -> int:
        return self.dynamics.order

    def to_json(self) -> dict:
        return {"id": self.id, "dynamics": self.dynamics.to_json(),
                "normalized_residual": self.residual, "segments": self.segments}

    @classmethod
    def from_json(cls, obj: dict) -> "LearnedMode":
        return cls(int(obj["id"]), NarxModel.from_json(obj["dynamics"]),
                   float(obj.get("normalized_residual", 0.0)), int(obj.get("segments", 0)))


@dataclass
class LearnedTransition:
    """Transition ``source -> target``; ``resets[i-1]`` produces the i-th
    sample after the guard fires."""

    source: int
    target: int
    guard: SvmGuard
    resets: list[NarxModel]
    info: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"source": self.source, "target": self.target, "guard": self.guard.to_json(),
                "resets": [r.to_json() for r in self.resets], "info": self.info}

    @classmethod
    def from_json(cls, obj: dict) -> "LearnedTransition":
        return cls(int(obj["source"]), int(obj["target"]), SvmGuard.from_json(obj["guard"]),
                   [NarxModel.from_json(r) for r in obj["resets"]], dict(obj.get("info", {})))


@dataclass
class LearnedAutomaton:
    modes: list[LearnedMode]
    transitions: list[LearnedTransition]
    template: NarxTemplate
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [m.id for m in self.modes]
        if len(set(ids)) != len(ids):
            raise AutomatonError("duplicate mode ids")
        seen = set()
        for t in self.transitions:
            if t.source not in ids or t.target not in ids:
                raise AutomatonError(f"transition {t.source}->{t.target} references an unknown mode")
            if (t.source, t.target) in seen:
                raise AutomatonError(f"duplicate transition {t.source}->{t.target}")
            seen.add((t.source, t.target))

    def mode(self, mid: int) -> LearnedMode:
        for m in self.modes:
            if m.id == mid:
                return m
        raise KeyError(mid)

    def outgoing(self, mid: int) -> list[LearnedTransition]:
        return [t for t in self.transitions if t.source == mid]

    @property
    def max_order(self) -> int:
        return max((m.order for m in self.modes), default=0)

    def to_json(self) -> dict:
        return {"modes": [m.to_json() for m in self.modes],
                "transitions": [t.to_json() for t in self.transitions],
                "template": self.template.to_json(), "metadata": copy.deepcopy(self.metadata)}

    @classmethod
    def from_json(cls, obj: dict) -> "LearnedAutomaton":
        try:
            return cls([LearnedMode.from_json(m) for m in obj["modes"]],
                       [LearnedTransition.from_json(t) for t in obj["transitions"]],
                       NarxTemplate.from_json(obj["template"]), dict(obj.get("metadata", {})))
        except KeyError as exc:
            raise AutomatonError(f"automaton JSON lacks field {exc}") from None


def characterize_modes(clustering: Clustering) -> list[LearnedMode]:
    """One mode per cluster, reusing the cluster's joint fit."""
    modes = []
    for c in clustering.clusters:
        fr = c.fit
        if not fr.fittable(clustering.tol):
            raise AutomatonError(f"cluster {c.id} residual {fr.normalized_residual:.3g} "
                                 f"exceeds tol {clustering.tol:g}")
        modes.append(LearnedMode(c.id, fr.model, fr.normalized_residual, len(c.segments)))
    return modes


@dataclass
class ResetFit:
    models: list[NarxModel]
    windows: int
    skipped: int
    residuals: list[float]


def learn_resets(traces: dict[str, Trace], dataset: GuardDataset, template: NarxTemplate,
                 tol: float = DEFAULT_TOL) -> ResetFit:
    """Fit ``k`` reset models for one transition.

    For a positive point ``tau`` (last sample before the switch) the i-th
    window is ``[tau - k + i, tau + i]``: its last sample ``x[tau + i]`` is
    explained by the ``k`` samples before it, which straddle the switch.
    Model ``i`` is the joint least-squares fit of all i-th windows.
    Windows leaving the trace are skipped.
    """
    k = template.order
    models, residuals = [], []
    skipped = 0
    used = 0
    for i in range(1, k + 1):
        problems: list[LsqProblem] = []
        for tid, tau in dataset.positive_refs:
            tr = traces[tid]
            lo, hi = tau - k + i, tau + i + 1
            if lo < 0 or hi > len(tr):
                skipped += 1
                continue
            try:
                problems.append(problem_for(template, tr.slice(lo, hi)))
            except TermEvaluationError:
                skipped += 1
        if not problems:
            raise AutomatonError(f"no usable crossing windows for reset {i} of {dataset.pair}")
        joint = combine(problems)
        if joint.rows < template.d:
            log.warning("reset %d of %s: %d windows for %d coefficients, using the "
                        "minimum-norm solution", i, dataset.pair, joint.rows, template.d)
        fr = solve_problem(template, joint)
        if not fr.fittable(tol):
            log.info("reset %d of %s: normalized residual %.3g above tol", i, dataset.pair,
                     fr.normalized_residual)
        models.append(fr.model)
        residuals.append(fr.normalized_residual)
        used = max(used, len(problems))
    return ResetFit(models, used, skipped, residuals)


def assemble(modes: list[LearnedMode], guards: dict, resets: dict, template: NarxTemplate,
             metadata: dict | None = None, info: dict | None = None) -> LearnedAutomaton:
    """Combine modes, guards ``{(q, q'): SvmGuard}`` and resets ``{(q, q'): [models]}``."""
    ids = {m.id for m in modes}
    transitions = []
    for pair in sorted(guards):
        if pair not in resets:
            raise AutomatonError(f"transition {pair} has a guard but no resets")
        q, q2 = pair
        if q not in ids or q2 not in ids:
            raise AutomatonError(f"transition {pair} references an unknown mode")
        transitions.append(LearnedTransition(q, q2, guards[pair], list(resets[pair]),
                                             dict((info or {}).get(pair, {}))))
    return LearnedAutomaton(list(modes), transitions, template, dict(metadata or {}))


def best_mode(automaton: LearnedAutomaton, prefix: Trace) -> int:
    """Mode that explains the start of ``prefix``.

    Every mode one-step-predicts the prefix. A mode keeps its run while its
    accumulated error stays within 10x the best accumulated error; the longest
    run wins, then the lowest maximal error, then the lower id. Accumulating
    keeps a competitor whose error momentarily crosses zero from ending the
    run of the right mode. A switch inside the
    prefix therefore does not override the mode active at its start. Modes of
    order ``>= len(prefix)`` cannot be scored and rank last.
    """
    if not automaton.modes:
        raise AutomatonError("automaton has no modes")
    L = len(prefix)
    X, U = prefix.outputs, prefix.inputs
    floor = 1e-12 * max(1.0, float(np.max(np.abs(X))) if X.size else 1.0)
    errs = {}
    for m in automaton.modes:
        e = np.full(L, np.inf)
        k = m.order
        try:
            for tau in range(k, L):
                e[tau] = float(np.max(np.abs(m.dynamics.predict(X[tau - k:tau], U[tau]) - X[tau])))
        except TermEvaluationError:
            pass
        errs[m.id] = e
    start = max((m.order for m in automaton.modes if m.order < L), default=L)
    cum = {mid: np.cumsum(e[start:]) for mid, e in errs.items()}
    best_c = np.min(np.vstack(list(cum.values())), axis=0) if cum else None

    def score(mid):
        e = errs[mid][start:]
        ok = cum[mid] <= 10 * best_c + floor * np.arange(1, e.size + 1)
        run = int(np.argmin(ok)) if not ok.all() else len(ok)
        worst = float(np.max(e)) if e.size else np.inf
        return (-run, worst, mid)
    return min(errs, key=score)
