"""Uniformly sampled input-output traces and their CSV representation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TraceFormatError(ValueError):
    """Base class for problems found while reading a trace file."""


class HeaderError(TraceFormatError):
    pass


class SamplingError(TraceFormatError):
    pass


class NonFiniteValueError(TraceFormatError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trace:
    """Discrete-time trace ``v_0 .. v_l`` sampled with fixed period ``dt``.

    Parameters
    ----------
    t0 : float
        Time of the first sample.
    dt : float
        Sampling period, strictly positive.
    outputs : array_like, shape (l+1, n)
    inputs : array_like, shape (l+1, m), optional
        Defaults to an empty ``(l+1, 0)`` matrix.
    """

    t0: float
    dt: float
    outputs: np.ndarray
    inputs: np.ndarray = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        out = np.array(self.outputs, dtype=float)
        if out.ndim == 1:
            out = out.reshape(-1, 1)
        if out.ndim != 2 or out.shape[0] < 1:
            raise ValueError("outputs must be a non-empty (samples, n) matrix")
        inp = self.inputs
        inp = np.zeros((out.shape[0], 0)) if inp is None else np.array(inp, dtype=float)
        if inp.ndim == 1:
            inp = inp.reshape(-1, 1)
        if inp.shape[0] != out.shape[0]:
            raise ValueError(f"inputs have {inp.shape[0]} rows, outputs {out.shape[0]}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if not math.isfinite(self.t0):
            raise ValueError("t0 must be finite")
        if not (np.isfinite(out).all() and np.isfinite(inp).all()):
            raise ValueError("trace values must be finite")
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "outputs", _frozen(out))
        object.__setattr__(self, "inputs", _frozen(inp))

    def __len__(self) -> int:
        return self.outputs.shape[0]

    @property
    def n(self) -> int:
        return self.outputs.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def ell(self) -> int:
        """Index of the last sample (length minus one)."""
        return len(self) - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) * self.dt

    def time_of(self, index) -> float:
        return self.t0 + index * self.dt

    def slice(self, lo: int, hi: int) -> "Trace":
        """Segment ``[lo, hi)`` as a new trace starting at ``t0 + lo*dt``."""
        if not (0 <= lo < hi <= len(self)):
            raise IndexError(f"invalid slice [{lo}, {hi}) of a trace with {len(self)} samples")
        return Trace(self.t0 + lo * self.dt, self.dt, self.outputs[lo:hi],
                     self.inputs[lo:hi], name=self.name)

    def equals(self, other: "Trace") -> bool:
        """Same period and values; start times may differ by float rounding."""
        return (abs(self.t0 - other.t0) <= 1e-9 * self.dt and self.dt == other.dt
                and np.array_equal(self.outputs, other.outputs)
                and np.array_equal(self.inputs, other.inputs))


@dataclass(frozen=True, order=True)
class SegmentRef:
    """Half-open index range ``[lo, hi)`` of a named trace."""

    trace_id: str
    lo: int
    hi: int

    def __post_init__(self):
        if not (0 <= self.lo < self.hi):
            raise ValueError(f"invalid segment [{self.lo}, {self.hi})")

    def __len__(self) -> int:
        return self.hi - self.lo

    def resolve(self, traces) -> Trace:
        trace = traces[self.trace_id]
        if self.hi > len(trace):
            raise IndexError(f"segment {self} exceeds trace length {len(trace)}")
        return trace.slice(self.lo, self.hi)

    def to_json(self) -> dict:
        return {"trace": self.trace_id, "lo": self.lo, "hi": self.hi}


def format_trace(trace: Trace, output_names=None, input_names=None) -> str:
    """CSV text for ``trace``; 17 significant digits round-trip every float."""
    out_names = output_names or [f"x{j + 1}" for j in range(trace.n)]
    in_names = input_names or [f"u{j + 1}" for j in range(trace.m)]
    buf = io.StringIO()
    buf.write(",".join(["t", *out_names, *in_names]) + "\n")
    times = trace.times
    for tau in range(len(trace)):
        row = [times[tau], *trace.outputs[tau], *trace.inputs[tau]]
        buf.write(",".join("%.17g" % v for v in row) + "\n")
    return buf.getvalue()


def save_trace(trace: Trace, path, **kw) -> None:
    Path(path).write_text(format_trace(trace, **kw), encoding="utf-8")


def parse_trace(text: str, name: str = "", dt: float | None = None) -> Trace:
    """Parse CSV text in the format written by :func:`format_trace`."""
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise HeaderError("empty file: missing header")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise HeaderError("malformed header: first column must be 't'")
    n = m = 0
    for col, h in enumerate(header[1:], start=1):
        if h.startswith("x") and h[1:].isdigit():
            if m:
                raise HeaderError(f"malformed header: output column {h!r} (column {col}) after inputs")
            n += 1
        elif h.startswith("u") and h[1:].isdigit():
            m += 1
        else:
            raise HeaderError(f"malformed header: unrecognised column {h!r} (column {col})")
    if n == 0:
        raise HeaderError("malformed header: no output columns")
    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise TraceFormatError(f"row {r} has {len(row)} fields, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise TraceFormatError(f"unparsable value {cell!r} at row {r}, column {header[c]}") from None
            if not math.isfinite(v):
                raise NonFiniteValueError(f"non-finite value at row {r}, column {header[c]}")
            data[r, c] = v
    if data.shape[0] == 0:
        raise TraceFormatError("trace has no samples")
    t = data[:, 0]
    if dt is None:
        if len(t) < 2:
            raise SamplingError("cannot infer dt from a single row")
        dt = t[1] - t[0]
        short = float("%.15g" % dt)
        if abs(short - dt) <= 1e-12 * abs(dt):
            dt = short
    if not dt > 0:
        raise SamplingError("non-increasing timestamps at row 1")
    expected = t[0] + np.arange(len(t)) * dt
    bad = np.flatnonzero(np.abs(t - expected) > 1e-9 * dt)
    if bad.size:
        raise SamplingError(f"non-uniform sampling at row {bad[0]}")
    return Trace(t[0], dt, data[:, 1:1 + n], data[:, 1 + n:], name=name)


def load_trace(path, dt: float | None = None) -> Trace:
    path = Path(path)
    return parse_trace(path.read_text(encoding="utf-8"), name=path.stem, dt=dt)


def load_dataset(root) -> dict[str, dict[str, Trace]]:
    """Load ``root/train/*.csv`` and ``root/test/*.csv``.

    Returns ``{"train": {id: trace}, "test": {id: trace}}`` where ids look like
    ``train/trace_000``; missing splits give empty dicts.
    """
    root = Path(root)
    out: dict[str, dict[str, Trace]] = {}
    for split in ("train", "test"):
        traces = {}
        for p in sorted((root / split).glob("*.csv")):
            tid = f"{split}/{p.stem}"
            tr = load_trace(p)
            traces[tid] = Trace(tr.t0, tr.dt, tr.outputs, tr.inputs, name=tid)
        out[split] = traces
    return out
