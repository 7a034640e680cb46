"""Evaluation metrics: changepoint Hausdorff distance and trace deviations."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .trace import Trace

NORMALIZATION_NOTE = ("Diff values are raw absolute differences (no normalization by signal "
                      "range); multi-output traces use the maximum over outputs per step.")


def hdt(identified, truth) -> float:
    """Hausdorff distance between two sets of times.

    Both empty gives 0; exactly one empty gives ``inf`` (see :func:`hdt_report`).
    """
    a = np.asarray(list(identified), dtype=float).reshape(-1)
    b = np.asarray(list(truth), dtype=float).reshape(-1)
    if a.size == 0 and b.size == 0:
        return 0.0
    if a.size == 0 or b.size == 0:
        return math.inf
    d = np.abs(a[:, None] - b[None, :])
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def hdt_report(identified, truth) -> dict:
    value = hdt(identified, truth)
    return {"value": value, "unmatched": math.isinf(value)}


def switch_index(time: float, t0: float, dt: float) -> int:
    """Index of the first sample taken at or after ``time``."""
    return int(math.ceil((time - t0) / dt - 1e-9))


@dataclass
class TraceDiff:
    diff_max: float
    diff_avg: float
    per_output_max: list[float]
    per_output_avg: list[float]


def trace_diff(predicted: Trace, truth: Trace) -> TraceDiff:
    """Pointwise deviation ``max_j |x_hat_j[t] - x_j[t]|`` reduced over ``t``."""
    P, T = predicted.outputs, truth.outputs
    if P.shape != T.shape:
        raise ValueError(f"shape mismatch: predicted {P.shape}, truth {T.shape}")
    err = np.abs(P - T)
    step = err.max(axis=1)
    return TraceDiff(float(step.max()), float(step.mean()),
                     err.max(axis=0).tolist(), err.mean(axis=0).tolist())


@dataclass
class EvalReport:
    """Aggregated evaluation over a set of traces.

    ``hdt_c`` is in seconds against the exact switch times, ``hdt_c_samples``
    compares changepoint indices with the first sample after each switch.
    """

    hdt_c: float | None
    hdt_c_samples: float | None
    diff_max: float
    diff_avg: float
    per_trace: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=lambda: [NORMALIZATION_NOTE])
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.diff_max < 0 or self.diff_avg < 0 or self.diff_avg > self.diff_max + 1e-15:
            raise ValueError("inconsistent diff values")
        if self.hdt_c is not None and self.hdt_c < 0:
            raise ValueError("hdt_c must be non-negative")

    def to_json(self) -> dict:
        return {"hdt_c": _finite(self.hdt_c), "hdt_c_samples": _finite(self.hdt_c_samples),
                "diff_max": self.diff_max, "diff_avg": self.diff_avg,
                "per_trace": self.per_trace, "timings": self.timings, "notes": self.notes,
                "config": self.config}

    def csv_row(self, benchmark: str, tool: str = "narxhybrid") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["benchmark", "tool", "hdt_c", "diff_max", "diff_avg", "total_time"])
        w.writerow([benchmark, tool, _fmt(self.hdt_c), _fmt(self.diff_max), _fmt(self.diff_avg),
                    _fmt(self.timings.get("total"))])
        return buf.getvalue()


def _finite(v):
    if v is None:
        return None
    return v if math.isfinite(v) else "inf"


def _fmt(v):
    return "" if v is None else f"{v:.6g}"
