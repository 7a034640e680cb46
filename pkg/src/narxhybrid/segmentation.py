"""Changepoint detection: split traces into maximal fittable segments."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .narx import DEFAULT_TOL, NarxTemplate, TraceDesign
from .trace import SegmentRef, Trace

log = logging.getLogger(__name__)


class SegmentationError(ValueError):
    pass


@dataclass
class SegmentationResult:
    """Changepoints ``0 = p_0 < ... < p_s = len`` and the screened segments."""

    trace_id: str
    changepoints: list[int]
    segments: list[SegmentRef]
    dropped: list[tuple[SegmentRef, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def interior(self) -> list[int]:
        return self.changepoints[1:-1]

    def to_json(self, trace: Trace | None = None) -> dict:
        out = {
            "trace": self.trace_id,
            "changepoints": self.changepoints,
            "segments": [[s.lo, s.hi] for s in self.segments],
            "dropped": [{"lo": s.lo, "hi": s.hi, "reason": r} for s, r in self.dropped],
            "warnings": self.warnings,
        }
        if trace is not None:
            out["changepoint_times"] = [trace.time_of(p) for p in self.changepoints]
        return out


def default_window(template: NarxTemplate) -> int:
    """``max(k + 2, 2 d)``: every window yields an overdetermined fit."""
    return max(template.order + 2, 2 * template.d)


def _screen(design: TraceDesign, trace_id: str, cps: list[int], tol: float,
            window: int | None = None) -> SegmentationResult:
    k = design.template.order
    res = SegmentationResult(trace_id, cps, [])
    for a, b in zip(cps[:-1], cps[1:]):
        ref = SegmentRef(trace_id, a, b)
        if b - a < k + 1:
            res.dropped.append((ref, f"shorter than order+1 ({b - a} < {k + 1})"))
        elif design.has_fault(a, b):
            res.dropped.append((ref, "nonlinear term evaluation fault"))
        else:
            fr = design.fit(a, b)
            if fr.fittable(tol):
                res.segments.append(ref)
                if window is not None and b - a < window and b != cps[-1]:
                    res.warnings.append(f"segment [{a}, {b}) shorter than the window {window}")
            else:
                res.dropped.append((ref, f"not fittable (normalized residual {fr.normalized_residual:.3g})"))
    for ref, why in res.dropped:
        res.warnings.append(f"dropped [{ref.lo}, {ref.hi}): {why}")
    return res


def segment_sliding(trace: Trace, template: NarxTemplate, window: int | None = None,
                    tol: float = DEFAULT_TOL, trace_id: str | None = None) -> SegmentationResult:
    """Sliding-window changepoint detection followed by screening.

    A window ``[l, l+w)`` that is not fittable yields changepoint ``l+w-1``
    and the scan resumes at ``l+w``; otherwise the window moves by one.
    """
    w = default_window(template) if window is None else int(window)
    k = template.order
    if w <= k + 1:
        raise SegmentationError(f"window {w} must exceed order+1 = {k + 1}")
    L = len(trace)
    if L < w:
        raise SegmentationError(f"trace of length {L} is shorter than the window {w}")
    design = TraceDesign(template, trace)
    ok = design.window_fittable(w, tol)
    cps = [0]
    l = 0
    while l <= L - w:
        if not ok[l]:
            cps.append(l + w - 1)
            l += w
        else:
            l += 1
    cps.append(L)
    return _screen(design, trace_id or trace.name, cps, tol, w)


def segment_binary(trace: Trace, template: NarxTemplate, tol: float = DEFAULT_TOL,
                   trace_id: str | None = None) -> SegmentationResult:
    """Changepoints by binary search of the longest fittable prefix."""
    k = template.order
    L = len(trace)
    if L < k + 2:
        raise SegmentationError(f"trace of length {L} is shorter than order+2 = {k + 2}")
    design = TraceDesign(template, trace)
    cps = [0]
    last = 0
    while last < L:
        lb, rb = last + k + 1, L
        while lb < rb:
            mid = math.ceil((lb + rb) / 2)
            if not design.fittable(last, mid, tol):
                rb = mid - 1
            else:
                lb = mid
        cps.append(rb)
        last = rb
    return _screen(design, trace_id or trace.name, cps, tol)


def segment_dataset(traces: dict[str, Trace], template: NarxTemplate, kind: str = "sliding",
                    window: int | None = None, tol: float = DEFAULT_TOL, threads: int = 1):
    """Segment every trace independently.

    Returns
    -------
    results : dict trace_id -> SegmentationResult, in sorted id order
    errors : dict trace_id -> message
    """
    if kind not in ("sliding", "binary"):
        raise SegmentationError(f"unknown segmenter {kind!r}")

    def run(tid):
        tr = traces[tid]
        if kind == "sliding":
            return segment_sliding(tr, template, window, tol, tid)
        return segment_binary(tr, template, tol, tid)

    ids = sorted(traces)
    results, errors = {}, {}

    def guarded(tid):
        try:
            return tid, run(tid), None
        except (SegmentationError, ValueError) as exc:
            return tid, None, str(exc)

    if threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(guarded, ids))
    else:
        outcomes = [guarded(t) for t in ids]
    for tid, res, err in outcomes:
        if err is None:
            results[tid] = res
        else:
            log.warning("segmentation of %s failed: %s", tid, err)
            errors[tid] = err
    return results, errors
