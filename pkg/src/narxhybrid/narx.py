"""Templated NARX difference equations and their least-squares fitting.

A template of order ``k`` with nonlinear terms ``f_1 .. f_alpha`` describes

    x[t] = sum_i a_i o f_i(y_t) + sum_i B_i x[t-i] + B_{k+1} u[t] + c

with ``y_t = (x[t-1], ..., x[t-k], u[t])`` and ``o`` the elementwise product.
Per output ``i`` the regressor is

    chi_{i,t} = [f_1(y_t)_i, ..., f_alpha(y_t)_i, x[t-1], ..., x[t-k], u[t], 1]

of length ``d = alpha + k*n + m + 1``; the coefficient matrix stores one row
per output in the same column order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .expr import EvaluationError, Expression, lag_symbol, parse
from .trace import Trace

log = logging.getLogger(__name__)

RCOND = 1e-12
DEFAULT_TOL = 1e-7


class TemplateError(ValueError):
    """Invalid template or term definition."""


class TermEvaluationError(ArithmeticError):
    """A nonlinear term produced a non-finite value."""

    def __init__(self, term_index: int, tau: int, detail: str = ""):
        self.term_index = term_index
        self.tau = tau
        msg = f"nonlinear term {term_index} is not finite at tau={tau}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


# --------------------------------------------------------------------------
# templates


@dataclass(frozen=True)
class NonlinearTerm:
    """One vector-valued term ``f(y_t)`` in R^n.

    A term is written either as a single expression or as a list with one
    expression per output.  A single expression that uses the index-free
    symbol ``x(-i)`` is evaluated per output with ``x`` bound to that output;
    otherwise the scalar value is shared by every output.
    """

    text: str | tuple[str, ...]
    parts: tuple[Expression, ...]
    per_output: bool

    @classmethod
    def parse(cls, text, n: int, m: int) -> "NonlinearTerm":
        if isinstance(text, str):
            parts = (parse(text, lags=True),)
        else:
            text = tuple(text)
            if len(text) != n:
                raise TemplateError(f"term {list(text)} needs {n} components, got {len(text)}")
            parts = tuple(parse(s, lags=True) for s in text)
        for p in parts:
            _check_term_symbols(p, n, m)
        per_output = not isinstance(text, str) or any(v == "x" for v, _ in parts[0].lagged)
        return cls(text, parts, per_output)

    @property
    def max_lag(self) -> int:
        return max(p.max_lag for p in self.parts)

    def to_json(self):
        return self.text if isinstance(self.text, str) else list(self.text)

    def evaluate(self, env: dict, n: int, backend: str = "numpy"):
        """Return a list of ``n`` component values (arrays or floats)."""
        if len(self.parts) > 1:
            return [p.evaluate(env, backend) for p in self.parts]
        expr = self.parts[0]
        if not self.per_output:
            v = expr.evaluate(env, backend)
            return [v] * n
        out = []
        lags = [lag for var, lag in expr.lagged if var == "x"]
        for i in range(n):
            local = dict(env)
            for lag in lags:
                local[lag_symbol("x", lag)] = env[lag_symbol(f"x{i + 1}", lag)]
            out.append(expr.evaluate(local, backend))
        return out


def _check_term_symbols(expr: Expression, n: int, m: int) -> None:
    for name in expr.names:
        if name.startswith("u") and name[1:].isdigit() and 1 <= int(name[1:]) <= m:
            continue
        if name.startswith("x"):
            raise TemplateError(f"{expr.source!r}: outputs need a lag, e.g. {name}(-1)")
        raise TemplateError(f"{expr.source!r}: unknown symbol {name!r}")
    for var, lag in expr.lagged:
        if lag < 1:
            raise TemplateError(f"{expr.source!r}: lag of {var} must be at least 1")
        if var == "x":
            continue
        if var.startswith("x") and var[1:].isdigit() and 1 <= int(var[1:]) <= n:
            continue
        raise TemplateError(f"{expr.source!r}: unknown lagged symbol {var!r}")


@dataclass(frozen=True)
class NarxTemplate:
    """Structure of a NARX model: order, dimensions and nonlinear terms."""

    order: int
    n: int
    m: int
    terms: tuple[NonlinearTerm, ...] = ()

    def __post_init__(self):
        if self.order < 0 or self.n < 1 or self.m < 0:
            raise TemplateError(f"invalid template sizes k={self.order}, n={self.n}, m={self.m}")
        for t in self.terms:
            if t.max_lag > self.order:
                raise TemplateError(f"term {t.to_json()!r} uses lag {t.max_lag} > order {self.order}")

    @classmethod
    def create(cls, order: int, n: int = 1, m: int = 0, terms: Iterable = ()) -> "NarxTemplate":
        return cls(int(order), int(n), int(m), tuple(NonlinearTerm.parse(t, n, m) for t in terms))

    @property
    def alpha(self) -> int:
        return len(self.terms)

    @property
    def d(self) -> int:
        return self.alpha + self.order * self.n + self.m + 1

    @property
    def shared_design(self) -> bool:
        """True when every output uses the same regressor vector."""
        return not any(t.per_output for t in self.terms)

    def truncated(self, order: int) -> "NarxTemplate":
        """Template of lower order; terms reaching deeper than ``order`` are dropped."""
        if not 0 <= order <= self.order:
            raise TemplateError(f"cannot truncate order {self.order} template to {order}")
        return NarxTemplate(order, self.n, self.m, tuple(t for t in self.terms if t.max_lag <= order))

    def column_labels(self) -> list[str]:
        labels = [f"f{a + 1}" for a in range(self.alpha)]
        labels += [f"x{j + 1}(-{i})" for i in range(1, self.order + 1) for j in range(self.n)]
        labels += [f"u{j + 1}" for j in range(self.m)]
        return labels + ["1"]

    def to_json(self) -> dict:
        return {"order": self.order, "n": self.n, "m": self.m,
                "terms": [t.to_json() for t in self.terms]}

    @classmethod
    def from_json(cls, obj: dict) -> "NarxTemplate":
        return cls.create(obj["order"], obj.get("n", 1), obj.get("m", 0), obj.get("terms", ()))


# --------------------------------------------------------------------------
# design matrices


def _design(template: NarxTemplate, outputs: np.ndarray, inputs: np.ndarray):
    """Regressors for every ``t`` in ``k .. L-1`` (ascending).

    Returns
    -------
    O : ndarray (T, n)
    D : ndarray (p, T, d)
        ``p`` is 1 when all outputs share the regressor, else ``n``.
    bad : ndarray of bool (T,)
        Rows where some nonlinear term is not finite.
    first_fault : tuple or None
        ``(term_index, row)`` of the first fault.
    """
    k, n, m = template.order, template.n, template.m
    L = outputs.shape[0]
    if outputs.shape[1] != n or inputs.shape[1] != m:
        raise TemplateError(f"trace has n={outputs.shape[1]}, m={inputs.shape[1]}; "
                            f"template expects n={n}, m={m}")
    if L < k + 1:
        raise ValueError(f"segment of length {L} is shorter than order+1 = {k + 1}")
    T = L - k
    p = 1 if template.shared_design else n
    D = np.empty((p, T, template.d))
    O = outputs[k:]
    env = {}
    for i in range(1, k + 1):
        for j in range(n):
            env[lag_symbol(f"x{j + 1}", i)] = outputs[k - i:L - i, j]
    for j in range(m):
        env[f"u{j + 1}"] = inputs[k:, j]
    bad = np.zeros(T, dtype=bool)
    first_fault = None
    for a, term in enumerate(template.terms):
        try:
            comps = term.evaluate(env, n)
        except EvaluationError:
            bad[:] = True
            first_fault = first_fault or (a, 0)
            continue
        for i in range(p):
            col = np.broadcast_to(np.asarray(comps[i], dtype=float), (T,))
            D[i, :, a] = col
            nonfin = ~np.isfinite(col)
            if nonfin.any():
                bad |= nonfin
                if first_fault is None:
                    first_fault = (a, int(np.flatnonzero(nonfin)[0]))
        if bad.any():
            D[:, bad, a] = 0.0
    col = template.alpha
    for i in range(1, k + 1):
        D[:, :, col:col + n] = outputs[k - i:L - i]
        col += n
    D[:, :, col:col + m] = inputs[k:]
    D[:, :, -1] = 1.0
    return O, D, bad, first_fault


def _checked_design(template: NarxTemplate, seg: Trace):
    O, D, bad, fault = _design(template, seg.outputs, seg.inputs)
    if fault is not None:
        raise TermEvaluationError(fault[0], fault[1] + template.order)
    return O, D


def build_design(template: NarxTemplate, segment: Trace):
    """Observation matrix ``O`` (n x T) and per-output design matrices.

    Columns are ordered from the last sample down to sample ``k``.

    Returns
    -------
    O : ndarray, shape (n, T)
    D : list of n ndarrays, each shape (d, T)
    """
    O, D = _checked_design(template, segment)
    O = O[::-1].T.copy()
    mats = [D[min(i, D.shape[0] - 1)][::-1].T.copy() for i in range(template.n)]
    return O, mats


# --------------------------------------------------------------------------
# compressed least squares


class LsqProblem:
    """Least-squares data ``min ||O_i - D_i lam_i||`` kept in QR-compressed form.

    Stacking the rows of several segments is exact: if ``D = Q R`` then
    ``||D x - o||^2 = ||R x - Q^T o||^2 + ||o - Q Q^T o||^2`` for every ``x``,
    so two problems merge by stacking their ``R`` factors and adding the
    orthogonal remainders.  Cost of a merge is O(d^3), independent of the
    number of rows already absorbed.
    """

    __slots__ = ("R", "c", "perp", "osq", "rows")

    def __init__(self, R, c, perp, osq, rows):
        self.R = R          # (p, r, d)
        self.c = c          # (n, r)
        self.perp = perp    # (n,)
        self.osq = osq      # squared Frobenius norm of O
        self.rows = rows

    @classmethod
    def from_rows(cls, O: np.ndarray, D: np.ndarray) -> "LsqProblem":
        n = O.shape[1]
        Q, R = np.linalg.qr(D)
        if D.shape[0] == 1:
            c = (Q[0].T @ O).T
            rem = O - Q[0] @ c.T
        else:
            c = np.einsum("itr,ti->ir", Q, O)
            rem = O - np.einsum("itr,ir->ti", Q, c)
        perp = np.einsum("ti,ti->i", rem, rem)
        osq = float(np.einsum("ti,ti->", O, O))
        return cls(R, c.reshape(n, -1), perp, osq, O.shape[0])

    def merge(self, other: "LsqProblem") -> "LsqProblem":
        R = np.concatenate([self.R, other.R], axis=1)
        c = np.concatenate([self.c, other.c], axis=1)
        return LsqProblem.from_rows_compressed(R, c, self.perp + other.perp,
                                               self.osq + other.osq, self.rows + other.rows)

    @classmethod
    def from_rows_compressed(cls, R, c, perp, osq, rows) -> "LsqProblem":
        inner = cls.from_rows(c.T, R)
        return cls(inner.R, inner.c, perp + inner.perp, osq, rows)

    def solve(self):
        """Minimum-norm coefficients (n, d) and per-output residual norms (n,)."""
        n = self.c.shape[0]
        U, s, Vt = np.linalg.svd(self.R, full_matrices=False)
        keep = s > RCOND * s[:, :1] if s.shape[1] else np.zeros_like(s, dtype=bool)
        keep &= s > 0
        inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        coeffs = np.empty((n, self.R.shape[2]))
        fit_sq = np.empty(n)
        for i in range(n):
            j = 0 if self.R.shape[0] == 1 else i
            z = U[j].T @ self.c[i]
            coeffs[i] = Vt[j].T @ (inv[j] * z)
            r = self.R[j] @ coeffs[i] - self.c[i]
            fit_sq[i] = r @ r
        return coeffs, np.sqrt(np.maximum(self.perp + fit_sq, 0.0))

    @property
    def onorm(self) -> float:
        return math.sqrt(self.osq)


def problem_for(template: NarxTemplate, segment: Trace) -> LsqProblem:
    O, D = _checked_design(template, segment)
    return LsqProblem.from_rows(O, D)


# --------------------------------------------------------------------------
# models and fitting


class NarxModel:
    """A template together with its coefficient matrix (n x d)."""

    def __init__(self, template: NarxTemplate, coeffs):
        coeffs = np.array(coeffs, dtype=float).reshape(template.n, template.d)
        if not np.isfinite(coeffs).all():
            raise ValueError("coefficients must be finite")
        coeffs.setflags(write=False)
        self.template = template
        self.coeffs = coeffs

    @property
    def order(self) -> int:
        return self.template.order

    def blocks(self) -> dict:
        """Split coefficients into ``a`` (n x alpha), ``B`` (list of n x n), ``Bu`` and ``c``."""
        t = self.template
        a = self.coeffs[:, :t.alpha]
        col = t.alpha
        B = []
        for _ in range(t.order):
            B.append(self.coeffs[:, col:col + t.n])
            col += t.n
        return {"a": a, "B": B, "Bu": self.coeffs[:, col:col + t.m], "c": self.coeffs[:, -1]}

    def regressors(self, history, u) -> np.ndarray:
        """Regressor matrix (n x d) for one step; ``history`` is oldest first."""
        t = self.template
        k, n = t.order, t.n
        hist = np.asarray(history, dtype=float).reshape(-1, n) if k else np.zeros((0, n))
        if hist.shape[0] != k:
            raise ValueError(f"history must hold {k} samples, got {hist.shape[0]}")
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape[0] != t.m:
            raise ValueError(f"input must have {t.m} entries, got {u.shape[0]}")
        lagged = hist[::-1].reshape(-1)
        chi = np.empty((n, t.d))
        if t.alpha:
            env = {}
            for i in range(1, k + 1):
                row = hist[k - i]
                for j in range(n):
                    env[lag_symbol(f"x{j + 1}", i)] = float(row[j])
            for j in range(t.m):
                env[f"u{j + 1}"] = float(u[j])
            for a, term in enumerate(t.terms):
                try:
                    vals = term.evaluate(env, n, backend="math")
                except EvaluationError as exc:
                    raise TermEvaluationError(a, k, str(exc)) from None
                chi[:, a] = vals
            if not np.isfinite(chi[:, :t.alpha]).all():
                raise TermEvaluationError(int(np.flatnonzero(~np.isfinite(chi[:, :t.alpha]))[0] % t.alpha), k)
        chi[:, t.alpha:t.alpha + k * n] = lagged
        chi[:, t.alpha + k * n:-1] = u
        chi[:, -1] = 1.0
        return chi

    def predict(self, history, u=()) -> np.ndarray:
        """Next output given the last ``k`` outputs (oldest first) and ``u[t]``."""
        chi = self.regressors(history, u)
        return np.einsum("id,id->i", self.coeffs, chi)

    def rollout(self, seed, inputs, steps: int) -> np.ndarray:
        """Generate ``steps`` further samples after ``seed`` (k x n) using ``inputs``.

        ``inputs`` must cover ``len(seed) + steps`` samples.
        """
        k, n = self.order, self.template.n
        seed = np.asarray(seed, dtype=float).reshape(-1, n)
        inputs = np.asarray(inputs, dtype=float).reshape(len(seed) + steps, -1)
        out = np.empty((len(seed) + steps, n))
        out[:len(seed)] = seed
        for tau in range(len(seed), len(seed) + steps):
            out[tau] = self.predict(out[tau - k:tau], inputs[tau])
        return out

    def to_json(self) -> dict:
        return {**self.template.to_json(), "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "NarxModel":
        return cls(NarxTemplate.from_json(obj), obj["coeffs"])

    def __repr__(self) -> str:
        return f"NarxModel(order={self.order}, n={self.template.n}, d={self.template.d})"


@dataclass
class FitResult:
    model: NarxModel
    residual: float
    rows_used: int
    residuals: np.ndarray
    onorm: float

    @property
    def normalized_residual(self) -> float:
        return self.residual / max(1.0, self.onorm)

    def fittable(self, tol: float = DEFAULT_TOL) -> bool:
        return self.normalized_residual <= tol


def solve_problem(template: NarxTemplate, problem: LsqProblem) -> FitResult:
    coeffs, res = problem.solve()
    return FitResult(NarxModel(template, coeffs), float(res.max()), problem.rows,
                     res, problem.onorm)


def combine(problems: Sequence[LsqProblem]) -> LsqProblem:
    out = problems[0]
    for p in problems[1:]:
        out = out.merge(p)
    return out


def _as_segments(segments) -> list[Trace]:
    if isinstance(segments, Trace):
        return [segments]
    segs = list(segments)
    if not segs:
        raise ValueError("empty segment set")
    return segs


def fit(template: NarxTemplate, segments) -> FitResult:
    """Jointly fit one model to one or several segments (minimum-norm LS)."""
    segs = _as_segments(segments)
    return solve_problem(template, combine([problem_for(template, s) for s in segs]))


def is_fittable(template: NarxTemplate, segments, tol: float = DEFAULT_TOL) -> bool:
    """True iff the joint residual divided by ``max(1, ||O||_F)`` is at most ``tol``.

    Term-evaluation faults make the segment set not fittable.
    """
    try:
        return fit(template, segments).fittable(tol)
    except TermEvaluationError as exc:
        log.warning("segment set not fittable: %s", exc)
        return False


def min_fitting_order(template: NarxTemplate, segments, tol: float = DEFAULT_TOL) -> int | None:
    """Smallest order ``j <= k`` at which the segments are fittable."""
    segs = _as_segments(segments)
    for j in range(template.order + 1):
        if is_fittable(template.truncated(j), segs, tol):
            return j
    return None


# --------------------------------------------------------------------------
# whole-trace helpers used by segmentation


class TraceDesign:
    """Regressors of a whole trace, for fast fits of sub-ranges.

    Row ``r`` corresponds to sample ``t = r + k``, so segment ``[lo, hi)``
    uses rows ``lo .. hi-k-1``.
    """

    def __init__(self, template: NarxTemplate, trace: Trace):
        self.template = template
        self.trace = trace
        self.O, self.D, self.bad, _ = _design(template, trace.outputs, trace.inputs)
        self._badcum = np.concatenate([[0], np.cumsum(self.bad)])

    def has_fault(self, lo: int, hi: int) -> bool:
        k = self.template.order
        return bool(self._badcum[hi - k] - self._badcum[lo])

    def problem(self, lo: int, hi: int) -> LsqProblem:
        k = self.template.order
        if hi - lo < k + 1:
            raise ValueError(f"segment [{lo}, {hi}) shorter than order+1")
        if self.has_fault(lo, hi):
            bad = lo + int(np.flatnonzero(self.bad[lo:hi - k])[0]) + k
            raise TermEvaluationError(-1, bad)
        return LsqProblem.from_rows(self.O[lo:hi - k], self.D[:, lo:hi - k])

    def fit(self, lo: int, hi: int) -> FitResult:
        return solve_problem(self.template, self.problem(lo, hi))

    def fittable(self, lo: int, hi: int, tol: float = DEFAULT_TOL) -> bool:
        if self.has_fault(lo, hi):
            return False
        return self.fit(lo, hi).fittable(tol)

    def window_fittable(self, w: int, tol: float = DEFAULT_TOL, chunk: int = 4096) -> np.ndarray:
        """Fittability of every window ``[l, l+w)``, computed in batches."""
        k = self.template.order
        L = len(self.trace)
        nwin = L - w + 1
        if nwin <= 0:
            return np.zeros(0, dtype=bool)
        rows = w - k
        out = np.empty(nwin, dtype=bool)
        Ow = np.lib.stride_tricks.sliding_window_view(self.O, rows, axis=0)      # (W, n, rows)
        Dw = np.lib.stride_tricks.sliding_window_view(self.D, rows, axis=1)      # (p, W, d, rows)
        badw = np.lib.stride_tricks.sliding_window_view(self.bad, rows).any(axis=1)
        n = self.O.shape[1]
        for s in range(0, nwin, chunk):
            e = min(nwin, s + chunk)
            O = np.swapaxes(Ow[s:e], 1, 2)                 # (B, rows, n)
            res_sq = np.zeros((e - s, n))
            for j in range(Dw.shape[0]):
                A = np.swapaxes(Dw[j, s:e], 1, 2)          # (B, rows, d)
                U, sv, _ = np.linalg.svd(A, full_matrices=False)
                keep = (sv > RCOND * sv[:, :1]) & (sv > 0)
                U = U * keep[:, None, :]
                cols = slice(None) if Dw.shape[0] == 1 else slice(j, j + 1)
                b = O[:, :, cols]
                r = b - U @ (np.swapaxes(U, 1, 2) @ b)
                res_sq[:, cols] = np.einsum("brn,brn->bn", r, r)
            E = np.sqrt(res_sq.max(axis=1))
            onorm = np.sqrt(np.einsum("brn,brn->b", O, O))
            out[s:e] = E / np.maximum(1.0, onorm) <= tol
        out &= ~badw
        return out
