"""Random NARX instances and switched traces for tests."""
from __future__ import annotations

import numpy as np

from narxhybrid.narx import NarxModel, NarxTemplate, build_design
from narxhybrid.trace import Trace

_WRAPS = ("sin({})", "cos({})", "tanh({})", "{0}/(1 + {0}^2)")


def random_terms(rng: np.random.Generator, k: int, n: int, m: int, alpha: int) -> list[str]:
    """Bounded nonlinear terms in the lagged outputs (and current inputs)."""
    terms = []
    while len(terms) < alpha:
        var = f"x{rng.integers(1, n + 1)}({-int(rng.integers(1, k + 1))})"
        if m and rng.random() < 0.4:
            var = f"{var}*u{rng.integers(1, m + 1)}"
        t = _WRAPS[rng.integers(len(_WRAPS))].format(var)
        if t not in terms:
            terms.append(t)
    return terms


def random_model(rng: np.random.Generator, k: int, n: int, m: int, alpha: int) -> NarxModel:
    """A NARX model whose linear part is a contraction, so rollouts stay bounded."""
    tpl = NarxTemplate.create(k, n, m, random_terms(rng, k, n, m, alpha))
    a = rng.uniform(-1, 1, (n, alpha))
    B = [rng.uniform(-1, 1, (n, n)) for _ in range(k)]
    gain = sum(np.abs(b).sum(1).max() for b in B)
    B = [b * rng.uniform(0.3, 0.9) / gain for b in B]
    Bu = rng.uniform(-1, 1, (n, m))
    c = rng.uniform(-1, 1, (n, 1))
    return NarxModel(tpl, np.hstack([a, *B, Bu, c]))


def rollout_trace(model: NarxModel, rng: np.random.Generator, length: int) -> Trace:
    t = model.template
    seed = rng.uniform(-1, 1, (t.order, t.n))
    u = rng.uniform(-1, 1, (length, t.m))
    x = model.rollout(seed, u, length - t.order)
    return Trace(0.0, 1.0, x, u)


def design_condition(model: NarxModel, traces) -> float:
    """Condition number of the stacked regressors of every output."""
    mats = [build_design(model.template, tr)[1] for tr in traces]
    return max(np.linalg.cond(np.hstack([m[i] for m in mats]).T) for i in range(model.template.n))


def linear_model(coeffs, k: int, n: int = 1, m: int = 0) -> NarxModel:
    return NarxModel(NarxTemplate.create(k, n, m), coeffs)


def random_oscillator(rng):
    """Second-order model with input, poles near the unit circle."""
    r, th = rng.uniform(0.9, 0.99), rng.uniform(0.2, 1.2)
    return linear_model([[2 * r * np.cos(th), -r * r, rng.uniform(0.5, 2), rng.uniform(-1, 1)]], 2, 1, 1)


def switched_trace(models, lengths, seed_hist, rng=None, m: int = 0) -> tuple[Trace, list[int]]:
    """Concatenate rollouts of ``models``; each continues from the previous history.

    Returns the trace and the indices of the first sample of every new mode.
    """
    k = max(mm.order for mm in models)
    total = sum(lengths)
    u = np.zeros((total, m)) if rng is None else rng.uniform(-1, 1, (total, m))
    x = np.empty((total, models[0].template.n))
    x[:k] = seed_hist
    switches, start = [], 0
    for j, (mm, L) in enumerate(zip(models, lengths)):
        lo = max(start, k)
        for tau in range(lo, start + L):
            x[tau] = mm.predict(x[tau - mm.order:tau], u[tau])
        if j:
            switches.append(start)
        start += L
    return Trace(0.0, 1.0, x, u), switches
