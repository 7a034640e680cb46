"""Greedy grouping of segments that a single NARX model explains jointly."""
from __future__ import annotations

from dataclasses import dataclass, field

from .narx import (DEFAULT_TOL, FitResult, LsqProblem, NarxTemplate, TermEvaluationError,
                   problem_for, solve_problem)
from .trace import SegmentRef, Trace

CRITERIA = ("mergeable", "minimal")
ASSIGNMENTS = ("first", "best")


@dataclass
class Cluster:
    id: int
    segments: list[SegmentRef]
    template: NarxTemplate
    problem: LsqProblem = field(repr=False)
    fit: FitResult = field(repr=False)
    min_order: int | None = None


@dataclass
class Rejection:
    residual: float
    reason: str


@dataclass
class Clustering:
    clusters: list[Cluster]
    assignment: dict[SegmentRef, int]
    criterion: str
    tol: float
    decisions: list[dict] = field(default_factory=list)
    assign: str = "first"

    def labels(self, refs) -> list[int]:
        return [self.assignment[r] for r in refs]

    def partition(self) -> list[set[SegmentRef]]:
        return [set(c.segments) for c in self.clusters]

    def to_json(self) -> dict:
        return {
            "criterion": self.criterion,
            "tol": self.tol,
            "assign": self.assign,
            "clusters": [{
                "id": c.id,
                "segments": [s.to_json() for s in c.segments],
                "min_order": c.min_order,
                "normalized_residual": c.fit.normalized_residual,
                "model": c.fit.model.to_json(),
            } for c in self.clusters],
            "decisions": self.decisions,
        }


@dataclass
class _Item:
    ref: SegmentRef
    index: int
    problems: dict            # order -> LsqProblem
    min_order: int | None = None


def _order_key(item: _Item):
    # longer first; among equal lengths, larger signal energy first
    p = next(iter(item.problems.values()))
    return (-len(item.ref), -p.osq, item.index)


def try_merge(cluster: Cluster, problem: LsqProblem, tol: float = DEFAULT_TOL,
              segment_order: int | None = None) -> FitResult | Rejection:
    """Joint fit of ``cluster`` plus one segment, or the reason it fails.

    ``segment_order`` is the segment's own minimal order when the minimal
    criterion is active; the cluster's stored order must match it.
    """
    if segment_order is not None and segment_order != cluster.min_order:
        return Rejection(float("nan"), f"minimal order {segment_order} != cluster order {cluster.min_order}")
    joint = cluster.problem.merge(problem)
    fr = solve_problem(cluster.template, joint)
    if fr.fittable(tol):
        return fr
    return Rejection(fr.normalized_residual, "joint fit residual above tolerance")


def _joint(cluster: Cluster, problem: LsqProblem):
    return cluster.problem.merge(problem)


def cluster(segments: list[SegmentRef], traces: dict[str, Trace], template: NarxTemplate,
            criterion: str = "mergeable", tol: float = DEFAULT_TOL,
            assign: str = "first") -> Clustering:
    """Greedy maximal partition of ``segments``.

    Segments are visited by decreasing length (ties: decreasing signal energy,
    then input order). With ``assign="first"`` a segment joins the first
    existing cluster that accepts it; with ``assign="best"`` it joins the
    accepting cluster with the lowest joint residual (earlier cluster on
    ties). ``best`` resists short foreign segments slipping into a large
    cluster, whose normalized residual barely moves when they are added.
    Under ``minimal`` a segment may only join a cluster of the same minimal
    order whose union stays fittable at that order.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    if assign not in ASSIGNMENTS:
        raise ValueError(f"unknown assignment rule {assign!r}")
    items = []
    for i, ref in enumerate(segments):
        seg = ref.resolve(traces)
        if criterion == "mergeable":
            items.append(_Item(ref, i, {template.order: problem_for(template, seg)}))
            continue
        probs = {}
        order = None
        for j in range(template.order + 1):
            tj = template.truncated(j)
            if len(seg) < j + 1:
                break
            try:
                probs[j] = problem_for(tj, seg)
            except TermEvaluationError:
                continue
            if solve_problem(tj, probs[j]).fittable(tol):
                order = j
                break
        if order is None:
            raise ValueError(f"segment {ref} is not fittable at any order")
        items.append(_Item(ref, i, probs, order))

    items.sort(key=_order_key)
    clusters: list[Cluster] = []
    assignment: dict[SegmentRef, int] = {}
    decisions = []
    for it in items:
        order = template.order if criterion == "mergeable" else it.min_order
        prob = it.problems[order]
        accepted = []
        chosen = None
        for c in clusters:
            out = try_merge(c, prob, tol, None if criterion == "mergeable" else order)
            if isinstance(out, FitResult):
                accepted.append(c.id)
                if chosen is None or (assign == "best"
                                      and out.normalized_residual < chosen[1].normalized_residual):
                    chosen = (c, out)
        if chosen is None:
            tmpl = template.truncated(order)
            c = Cluster(len(clusters), [it.ref], tmpl, prob, solve_problem(tmpl, prob),
                        None if criterion == "mergeable" else order)
            clusters.append(c)
        else:
            c, fr = chosen
            c.segments.append(it.ref)
            c.problem = _joint(c, prob)
            c.fit = fr
        assignment[it.ref] = c.id
        decisions.append({"segment": it.ref.to_json(), "cluster": c.id, "accepting": accepted})
    return Clustering(clusters, assignment, criterion, tol, decisions, assign)
