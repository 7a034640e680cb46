"""Guard learning: labelled switch datasets and kernel SVMs trained by SMO."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .trace import Trace

log = logging.getLogger(__name__)

KERNELS = ("linear", "poly", "rbf")


class GuardError(ValueError):
    pass


# --------------------------------------------------------------------------
# datasets


@dataclass
class ModeMap:
    """Per-sample mode labels of one trace.

    ``modes[tau]`` is the cluster id of the segment containing ``tau`` or -1
    when that segment was screened out; ``starts[tau]`` marks the first
    sample of every segment (changepoints).
    """

    modes: np.ndarray
    starts: np.ndarray

    def next_event(self, tau: int):
        """Mode entered at ``tau + 1``, or ``None`` when the mode just continues."""
        return int(self.modes[tau + 1]) if self.starts[tau + 1] else None


def mode_maps(segmentations: dict, clustering) -> dict[str, ModeMap]:
    """Mode labels for every segmented trace.

    ``segmentations`` maps trace ids to segmentation results; segments that
    do not appear in ``clustering.assignment`` count as screened out.
    """
    out = {}
    for tid, res in segmentations.items():
        L = res.changepoints[-1]
        modes = np.full(L, -1, dtype=int)
        starts = np.zeros(L + 1, dtype=bool)
        starts[res.changepoints] = True
        for ref in res.segments:
            cid = clustering.assignment.get(ref)
            if cid is not None:
                modes[ref.lo:ref.hi] = cid
        out[tid] = ModeMap(modes, starts[:L])
    return out


def guard_features(trace: Trace, lags: int = 0, taus=None) -> np.ndarray:
    """Feature rows ``(x[tau], dx[tau], ..., d^lags x[tau], u[tau])``.

    ``d^i x`` is the i-th backward difference of the outputs, so ``lags``
    extra columns carry the recent motion of the trace. Differences rather
    than raw lagged samples keep the columns well conditioned after
    standardization (consecutive samples are almost collinear). With
    ``lags=0`` a row is the state ``v_tau`` of outputs and inputs.
    ``taus`` selects rows (all ``tau >= lags`` when omitted).
    """
    X, U = trace.outputs, trace.inputs
    if taus is None:
        taus = np.arange(lags, len(trace))
    taus = np.asarray(taus, dtype=int)
    if taus.size and taus.min() < lags:
        raise GuardError(f"feature rows need tau >= {lags}")
    if not taus.size:
        return np.zeros((0, trace.n * (lags + 1) + trace.m))
    return np.hstack([*lag_differences(X, taus, lags), U[taus]])


def lag_differences(X: np.ndarray, taus, lags: int) -> list[np.ndarray]:
    """``[x[tau], dx[tau], ..., d^lags x[tau]]`` for rows ``taus`` of ``X``."""
    window = [X[taus - i] for i in range(lags + 1)]
    cols = [window[0]]
    for _ in range(lags):
        window = [window[i] - window[i + 1] for i in range(len(window) - 1)]
        cols.append(window[0])
    return cols


@dataclass
class GuardDataset:
    """Points of source mode ``pair[0]`` labelled by whether the next sample
    enters ``pair[1]``.

    ``positive_refs`` and ``negative_refs`` hold ``(trace_id, tau)`` of each row.
    """

    pair: tuple[int, int]
    positives: np.ndarray
    negatives: np.ndarray
    positive_refs: list[tuple[str, int]] = field(default_factory=list)
    negative_refs: list[tuple[str, int]] = field(default_factory=list)
    lags: int = 0

    @property
    def dim(self) -> int:
        return self.positives.shape[1]

    def xy(self):
        X = np.vstack([self.positives, self.negatives])
        y = np.concatenate([np.ones(len(self.positives)), -np.ones(len(self.negatives))])
        return X, y


def build_guard_datasets(traces: dict[str, Trace], segmentations: dict, clustering,
                         lags: int = 0) -> dict[tuple[int, int], GuardDataset]:
    """One dataset per ordered mode pair that the training data shows switching.

    A point ``tau`` in mode ``q`` is positive for ``(q, q')`` when ``tau + 1``
    starts a segment of mode ``q'``, and negative otherwise (the mode
    continues or a different mode is entered). A change into the same mode
    (two consecutive segments of one cluster) counts as a switch ``(q, q)``.
    Points in screened-out segments, points followed by one, the last sample
    of a trace and the first ``lags`` samples are skipped.
    """
    maps = mode_maps(segmentations, clustering)
    # (trace_id, source) -> list of (tau, event)
    per_source: dict[int, list[tuple[str, int, int | None]]] = {}
    for tid in sorted(maps):
        mm = maps[tid]
        L = len(mm.modes)
        for tau in range(lags, L - 1):
            q = mm.modes[tau]
            if q < 0 or mm.modes[tau + 1] < 0:
                continue
            per_source.setdefault(int(q), []).append((tid, tau, mm.next_event(tau)))
    out = {}
    feats = {}
    for q, rows in sorted(per_source.items()):
        targets = sorted({e for _, _, e in rows if e is not None})
        if not targets:
            continue
        by_trace: dict[str, list[int]] = {}
        for i, (tid, tau, _) in enumerate(rows):
            by_trace.setdefault(tid, []).append(i)
        F = np.empty((len(rows), traces[rows[0][0]].n * (lags + 1) + traces[rows[0][0]].m))
        for tid, idx in by_trace.items():
            F[idx] = guard_features(traces[tid], lags, [rows[i][1] for i in idx])
        feats[q] = F
        events = [e for _, _, e in rows]
        for q2 in targets:
            pos = [i for i, e in enumerate(events) if e == q2]
            neg = [i for i, e in enumerate(events) if e != q2]
            out[(q, q2)] = GuardDataset(
                (q, q2), F[pos], F[neg],
                [(rows[i][0], rows[i][1]) for i in pos],
                [(rows[i][0], rows[i][1]) for i in neg], lags)
    return out


# --------------------------------------------------------------------------
# kernels and SMO


def kernel_matrix(A: np.ndarray, B: np.ndarray, kernel: str, params: dict) -> np.ndarray:
    G = A @ B.T
    if kernel == "linear":
        return G
    if kernel == "poly":
        return (params["gamma"] * G + params["coef0"]) ** params["degree"]
    if kernel == "rbf":
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * G
        return np.exp(-params["gamma"] * np.maximum(sq, 0.0))
    raise GuardError(f"unknown kernel {kernel!r}")


def kernel_params(kernel: str, dim: int, params: dict | None = None) -> dict:
    """Fill defaults: ``gamma = 1/dim``; poly ``degree = 2``, ``coef0 = 1``."""
    if kernel not in KERNELS:
        raise GuardError(f"unknown kernel {kernel!r}")
    p = dict(params or {})
    unknown = set(p) - {"gamma", "degree", "coef0"}
    if unknown:
        raise GuardError(f"unknown kernel parameter(s) {sorted(unknown)}")
    if kernel == "linear":
        return {}
    p.setdefault("gamma", 1.0 / max(dim, 1))
    if kernel == "poly":
        p.setdefault("degree", 2)
        p.setdefault("coef0", 1.0)
        p["degree"] = int(p["degree"])
        return {k: p[k] for k in ("gamma", "degree", "coef0")}
    return {"gamma": float(p["gamma"])}


@dataclass
class SmoResult:
    alpha: np.ndarray
    rho: float
    iterations: int
    converged: bool
    gap: float
    ipm_iterations: int = 0


def _violating_pair(a, G, y, C):
    """Maximal violating pair ``(i, j)`` and the KKT gap ``m(a) - M(a)``."""
    pos = y > 0
    up = np.where(pos, a < C, a > 0)
    low = np.where(pos, a > 0, a < C)
    v = -y * G
    vu = np.where(up, v, -np.inf)
    vl = np.where(low, v, np.inf)
    i = int(np.argmax(vu))
    j = int(np.argmin(vl))
    return i, j, float(vu[i] - vl[j])


def _pair_step(Q, G, a, y, C, i, j):
    """Analytic minimisation over ``(a_i, a_j)`` with clipping to the box."""
    ai, aj = a[i], a[j]
    if y[i] != y[j]:
        quad = max(Q[i, i] + Q[j, j] + 2 * Q[i, j], 1e-12)
        delta = (-G[i] - G[j]) / quad
        diff = ai - aj
        ni, nj = ai + delta, aj + delta
        if diff > 0:
            if nj < 0:
                nj, ni = 0.0, diff
        elif ni < 0:
            ni, nj = 0.0, -diff
        if diff > 0:
            if ni > C:
                ni, nj = C, C - diff
        elif nj > C:
            nj, ni = C, C + diff
    else:
        quad = max(Q[i, i] + Q[j, j] - 2 * Q[i, j], 1e-12)
        delta = (G[i] - G[j]) / quad
        s = ai + aj
        ni, nj = ai - delta, aj + delta
        if s > C:
            if ni > C:
                ni, nj = C, s - C
        elif nj < 0:
            nj, ni = 0.0, s
        if s > C:
            if nj > C:
                nj, ni = C, s - C
        elif ni < 0:
            ni, nj = 0.0, s
    G += Q[i] * (ni - ai) + Q[j] * (nj - aj)
    a[i], a[j] = ni, nj


def _interior_point(Q, y, C, max_iter: int = 200, eps: float = 1e-10):
    """Primal-dual interior-point solution of the same dual problem.

    Mehrotra predictor-corrector on ``min 1/2 a'Qa - e'a`` with
    ``y'a = 0`` and ``0 <= a <= C``. Unlike pairwise steps its iteration
    count does not grow with the size of the multipliers, which is what
    nearly hard-margin problems with a tiny geometric margin need.

    Returns ``(alpha, iterations, converged)``.
    """
    N = len(y)
    e = np.ones(N)
    a = np.full(N, min(1.0, C / 2))
    z = np.ones(N)
    w = np.ones(N) if np.isfinite(C) else np.zeros(N)
    lam = 0.0
    ub = np.isfinite(C)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        s = C - a if ub else np.full(N, np.inf)
        rd = Q @ a - e + lam * y - z + w
        rp = y @ a
        gap = a @ z + (s @ w if ub else 0.0)
        mu = gap / (2 * N if ub else N)
        scale = 1.0 + np.abs(Q @ a).max()
        if (np.linalg.norm(rd, np.inf) <= eps * scale and abs(rp) <= eps * (1 + np.abs(a).max())
                and gap <= eps * (1.0 + abs(0.5 * a @ Q @ a - a.sum()))):
            converged = True
            break
        D = z / a + (w / s if ub else 0.0)
        H = Q + np.diag(D)
        try:
            fac = cho_factor(H)
        except np.linalg.LinAlgError:
            H[np.diag_indices(N)] += 1e-12 * np.abs(np.diag(H)).max()
            fac = cho_factor(H)
        hy = cho_solve(fac, y)

        def solve(r1, r2):
            # [H y; y' 0] [da; dl] = [r1; r2]
            hr = cho_solve(fac, r1)
            dl = (y @ hr - r2) / (y @ hy)
            return hr - hy * dl, dl

        def direction(sig_mu, c1, c2):
            r = -rd + (sig_mu - a * z - c1) / a
            if ub:
                r -= (sig_mu - s * w - c2) / s
            da, dl = solve(r, -rp)
            dz = (sig_mu - a * z - c1 - z * da) / a
            dw = (sig_mu - s * w - c2 + w * da) / s if ub else np.zeros(N)
            return da, dl, dz, dw

        def max_step(v, dv):
            neg = dv < 0
            return min(1.0, float(np.min(-v[neg] / dv[neg]))) if neg.any() else 1.0

        def steps(da, dz, dw):
            tp = max_step(a, da)
            if ub:
                tp = min(tp, max_step(s, -da))
            td = max_step(z, dz)
            if ub:
                td = min(td, max_step(w, dw))
            return tp, td

        da, dl, dz, dw = direction(0.0, 0.0, 0.0)
        tp, td = steps(da, dz, dw)
        aff = (a + tp * da) @ (z + td * dz)
        if ub:
            aff += (s - tp * da) @ (w + td * dw)
        sigma = (max(aff, 0.0) / gap) ** 3 if gap > 0 else 0.0
        da, dl, dz, dw = direction(sigma * mu, da * dz, -da * dw if ub else 0.0)
        tp, td = steps(da, dz, dw)
        tp, td = 0.99 * tp, 0.99 * td
        a = a + tp * da
        lam = lam + td * dl
        z = z + td * dz
        if ub:
            w = w + td * dw
        a = np.clip(a, 1e-300, C * (1 - 1e-16) if ub else np.inf)
    return a, it, converged


def smo(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3,
        max_iter: int = 1_000_000, fallback: bool = True, stall: int | None = None) -> SmoResult:
    """Solve the soft-margin SVM dual with maximal-violating-pair SMO.

    Minimises ``1/2 a'Qa - e'a`` subject to ``0 <= a <= C`` and ``y'a = 0``,
    where ``Q = (y y') * K``. Stops when the KKT gap ``m(a) - M(a)`` drops
    below ``tol``. The decision function is ``sum a_i y_i K(x_i, x) - rho``.

    Pairwise steps need a number of iterations that grows with the size of
    the optimal multipliers. With ``fallback`` set, when ``stall`` steps
    (default ``20 N``, at most ``max_iter``) have not reached the tolerance,
    the problem is handed to :func:`_interior_point`, multipliers below
    ``1e-9`` of the largest are set to zero and SMO resumes from there to
    certify the KKT gap.
    """
    N = len(y)
    y = np.asarray(y, dtype=float)
    Q = K * np.outer(y, y)
    a = np.zeros(N)
    G = -np.ones(N)
    budget = max_iter if not fallback else min(max_iter, stall or 20 * N)
    it = 0
    gap = np.inf

    def run(limit):
        nonlocal it, gap
        while it < limit:
            i, j, gap = _violating_pair(a, G, y, C)
            if gap < tol:
                return
            it += 1
            _pair_step(Q, G, a, y, C, i, j)
        _, _, gap = _violating_pair(a, G, y, C)

    run(budget)
    ipm_iters = 0
    if fallback and gap >= tol:
        x, ipm_iters, ok = _interior_point(Q, y, C)
        x[x < 1e-9 * x.max()] = 0.0
        x[x > C * (1 - 1e-9)] = C
        # restore y'a = 0 exactly on the largest free multiplier of the majority side
        free = np.flatnonzero((x > 0) & (x < C))
        if free.size:
            k = free[np.argmax(x[free])]
            x[k] -= y[k] * (y @ x)
            x[k] = min(max(x[k], 0.0), C)
        a[:] = x
        G[:] = Q @ a - 1.0
        run(max_iter)
    pos = y > 0
    free = (a > 0) & (a < C)
    yG = y * G
    if free.any():
        rho = float(yG[free].mean())
    else:
        up = np.where(pos, a < C, a > 0)
        low = np.where(pos, a > 0, a < C)
        ub = yG[up].min() if up.any() else np.inf
        lb = yG[low].max() if low.any() else -np.inf
        if not np.isfinite(ub):
            ub = lb
        if not np.isfinite(lb):
            lb = ub
        rho = float(0.5 * (ub + lb))
    return SmoResult(a, rho, it, gap < tol, float(gap), ipm_iters)


# --------------------------------------------------------------------------
# guards


@dataclass
class SvmGuard:
    """Kernel SVM guard; active iff ``decision(v) > 0``."""

    pair: tuple[int, int]
    kernel: str
    params: dict
    support_vectors: np.ndarray        # raw (unstandardized) feature space
    weights: np.ndarray                # alpha_i * y_i
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    lags: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def standardize(self, V) -> np.ndarray:
        return (np.asarray(V, dtype=float) - self.mean) / self.scale

    def decision(self, V) -> np.ndarray:
        """Decision values for rows of ``V`` (or a single vector)."""
        V = np.asarray(V, dtype=float)
        single = V.ndim == 1
        V2 = np.atleast_2d(V)
        if V2.shape[1] != self.dim:
            raise GuardError(f"guard expects {self.dim} features, got {V2.shape[1]}")
        if len(self.weights) == 0:
            out = np.full(len(V2), self.bias)
        else:
            K = kernel_matrix(self.standardize(V2), self.standardize(self.support_vectors),
                              self.kernel, self.params)
            out = K @ self.weights + self.bias
        return out[0] if single else out

    def to_json(self) -> dict:
        return {
            "pair": list(self.pair), "kernel": self.kernel, "params": self.params,
            "support_vectors": self.support_vectors.tolist(), "weights": self.weights.tolist(),
            "bias": self.bias,
            "standardization": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
            "lags": self.lags, "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SvmGuard":
        st = obj["standardization"]
        dim = len(st["mean"])
        return cls(tuple(obj["pair"]), obj["kernel"], dict(obj.get("params", {})),
                   np.array(obj["support_vectors"], dtype=float).reshape(-1, dim),
                   np.array(obj["weights"], dtype=float), float(obj["bias"]),
                   np.array(st["mean"], dtype=float), np.array(st["scale"], dtype=float),
                   int(obj.get("lags", 0)), dict(obj.get("diagnostics", {})))


@dataclass
class GuardEvaluation:
    active: bool
    decision: float


def evaluate_guard(guard: SvmGuard, v) -> GuardEvaluation:
    d = float(guard.decision(np.asarray(v, dtype=float).reshape(-1)))
    return GuardEvaluation(d > 0, d)


def _working_set(X: np.ndarray, y: np.ndarray, max_points: int) -> np.ndarray:
    """Initial training subset: every positive, the negatives nearest to the
    positives, and an even stride over the remaining negatives."""
    N = len(y)
    if N <= max_points:
        return np.arange(N)
    pos = np.flatnonzero(y > 0)
    neg = np.flatnonzero(y < 0)
    budget = max(max_points - len(pos), 2)
    P = X[pos]
    near = np.empty(len(neg))
    for s in range(0, len(neg), 4096):
        blk = X[neg[s:s + 4096]]
        d = (blk * blk).sum(1)[:, None] + (P * P).sum(1)[None, :] - 2 * blk @ P.T
        near[s:s + 4096] = d.min(1)
    order = np.argsort(near, kind="stable")
    close = neg[order[:budget // 2]]
    rest = np.setdiff1d(neg, close)
    stride = rest[np.linspace(0, len(rest) - 1, min(len(rest), budget - len(close))).astype(int)]
    return np.unique(np.concatenate([pos, close, stride]))


def train_svm(dataset: GuardDataset, kernel: str = "rbf", C: float = 1e4,
              params: dict | None = None, tol: float = 1e-3, max_iter: int = 1_000_000,
              max_points: int = 600, rounds: int = 8) -> SvmGuard:
    """Soft-margin SVM guard for ``dataset``.

    Features are standardized to zero mean and unit variance over the whole
    dataset. Large datasets are trained on a working subset (see
    :func:`_working_set`); misclassified points outside the subset are added
    and the machine retrained, for at most ``rounds`` rounds.
    """
    if len(dataset.positives) == 0 or len(dataset.negatives) == 0:
        raise GuardError(f"degenerate dataset for {dataset.pair}: one class is empty")
    if not C > 0:
        raise GuardError("C must be positive")
    X, y = dataset.xy()
    mean = X.mean(0)
    scale = X.std(0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    p = kernel_params(kernel, X.shape[1], params)
    work = _working_set(Z, y, max_points)
    total_iter = 0
    for rnd in range(rounds):
        Kw = kernel_matrix(Z[work], Z[work], kernel, p)
        res = smo(Kw, y[work], C, tol, max_iter)
        total_iter += res.iterations
        sv = res.alpha > 0
        w = res.alpha[sv] * y[work][sv]
        Zs = Z[work][sv]
        dec = np.empty(len(y))
        for s in range(0, len(y), 8192):
            dec[s:s + 8192] = kernel_matrix(Z[s:s + 8192], Zs, kernel, p) @ w - res.rho
        wrong = np.flatnonzero(np.sign(dec) != y)
        missing = np.setdiff1d(wrong, work)
        if missing.size == 0:
            break
        work = np.union1d(work, missing[:max(max_points // 4, 1)])
    if not res.converged:
        log.warning("SMO for guard %s stopped after %d iterations (KKT gap %.3g)",
                    dataset.pair, res.iterations, res.gap)
    acc = float(np.mean(np.sign(dec) == y))
    diag = {"iterations": total_iter, "ipm_iterations": res.ipm_iterations,
            "converged": bool(res.converged), "kkt_gap": res.gap,
            "training_accuracy": acc, "training_points": int(len(work)),
            "dataset_points": int(len(y)), "rounds": rnd + 1,
            "positives": int((y > 0).sum()), "negatives": int((y < 0).sum())}
    if acc < 1.0:
        log.warning("guard %s: training accuracy %.6f", dataset.pair, acc)
    return SvmGuard(dataset.pair, kernel, p, X[work][sv], w, -res.rho, mean, scale,
                    dataset.lags, diag)
