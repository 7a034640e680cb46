"""Ground-truth hybrid systems with ODE dynamics and a sampled-trace generator.

Systems are described in JSON::

    {
      "name": "duffing",
      "dt": 0.001, "samples": 10000,
      "modes": [{"id": "q1", "k": 2, "ode": "u1 - 0.5*dx1 + x1 - 1.5*x1^3"}, ...],
      "transitions": [{"src": "q1", "dst": "q2", "guard": "x1^2 <= 0.64",
                       "reset": {"matrix": [[1, 0], [0, 0.95]]}}, ...],
      "init": {"mode": "q1", "state": {"x1": [-1.5, 1.5], "dx1": 0}},
      "inputs": [{"kind": "cosine", "amplitude": 0.5, "frequency": 0.2}]
    }

``ode`` holds one right-hand side per output (a string when n = 1) giving
the highest derivative of that output; ``k`` is an int or a per-output list.
Inside expressions ``x1`` is an output, ``dx1``/``d2x1``... its derivatives,
``u1`` an input and ``t`` time.  Resets are affine maps on the stacked state
``(x1, dx1, ..., x2, dx2, ...)``.

Integration uses an adaptive Runge-Kutta-Fehlberg 4(5) scheme whose steps
end on sample times; guard crossings are located by bisection to 1e-10 s.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import validate_system
from .expr import EvaluationError, Expression, parse
from .trace import Trace, save_trace

EVENT_TIME_TOL = 1e-10


class SystemError_(ValueError):
    """Invalid system definition."""


class IntegrationError(RuntimeError):
    pass


def state_names(orders: list[int]) -> list[str]:
    names = []
    for j, k in enumerate(orders):
        for r in range(k):
            names.append(f"x{j + 1}" if r == 0 else (f"dx{j + 1}" if r == 1 else f"d{r}x{j + 1}"))
    return names


# --------------------------------------------------------------------------
# input signals


@dataclass
class InputSignal:
    """Scalar input ``u(t)``; parameters may be ``[lo, hi]`` ranges drawn per trace."""

    kind: str
    params: dict

    def realize(self, rng: np.random.Generator, t_end: float) -> "RealizedSignal":
        p = {k: _draw(v, rng) for k, v in self.params.items() if k != "kind"}
        if self.kind == "constant":
            return RealizedSignal(lambda t, ref: p.get("value", 0.0), [])
        if self.kind == "step":
            t_s, a, b = p["time"], p.get("before", 0.0), p.get("after", 1.0)
            return RealizedSignal(lambda t, ref: a if ref <= t_s else b, [t_s])
        if self.kind == "cosine":
            A, f, ph = p.get("amplitude", 1.0), p.get("frequency", 1.0), p.get("phase", 0.0)
            off = p.get("offset", 0.0)
            w = 2 * math.pi * f
            return RealizedSignal(lambda t, ref: off + A * math.cos(w * t + ph), [])
        if self.kind == "random":
            hold = p["hold"]
            lo, hi = p.get("low", -1.0), p.get("high", 1.0)
            count = int(math.ceil(t_end / hold)) + 2
            levels = p.get("levels")
            if levels:
                vals = rng.choice(np.asarray(levels, dtype=float), size=count)
            else:
                vals = rng.uniform(lo, hi, size=count)
            vals = [float(v) for v in vals]

            def value(t, ref):
                return vals[max(0, int(math.ceil(ref / hold - 1e-9)) - 1)]
            return RealizedSignal(value, [hold * i for i in range(1, count)])
        raise SystemError_(f"unknown input kind {self.kind!r}")


@dataclass
class RealizedSignal:
    func: object
    breaks: list

    def __call__(self, t: float, ref: float | None = None) -> float:
        return self.func(t, t if ref is None else ref)


def _draw(value, rng):
    if isinstance(value, list) and len(value) == 2 and all(isinstance(v, (int, float)) for v in value):
        return float(rng.uniform(value[0], value[1]))
    if isinstance(value, dict) and "low" in value:
        step = value.get("step")
        if step:
            count = int(math.floor((value["high"] - value["low"]) / step + 1e-9))
            return value["low"] + step * int(rng.integers(0, count + 1))
        return float(rng.uniform(value["low"], value["high"]))
    if isinstance(value, dict) and "choice" in value:
        return value["choice"][int(rng.integers(0, len(value["choice"])))]
    return value


# --------------------------------------------------------------------------
# system definition


@dataclass
class OdeMode:
    id: str
    orders: list[int]
    rhs: list[Expression]


@dataclass
class OdeTransition:
    src: str
    dst: str
    guard: Expression
    matrix: np.ndarray
    offset: np.ndarray


@dataclass
class GroundTruthSystem:
    name: str
    modes: dict[str, OdeMode]
    transitions: list[OdeTransition]
    init: dict
    inputs: list[InputSignal]
    dt: float
    samples: int
    orders: list[int] = field(default_factory=list)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.orders)

    @property
    def m(self) -> int:
        return len(self.inputs)

    @property
    def state_names(self) -> list[str]:
        return state_names(self.orders)

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruthSystem":
        validate_system(obj)
        try:
            return cls._from_json(obj)
        except KeyError as exc:
            raise SystemError_(f"missing field {exc.args[0]!r}") from None

    @classmethod
    def _from_json(cls, obj):
        inputs = [InputSignal(s["kind"], dict(s)) for s in obj.get("inputs", [])]
        m = len(inputs)
        modes = {}
        orders = None
        for md in obj["modes"]:
            rhs_src = md["ode"]
            rhs_src = [rhs_src] if isinstance(rhs_src, str) else list(rhs_src)
            k = md.get("k", 1)
            ks = [int(k)] * len(rhs_src) if isinstance(k, (int, float)) else [int(v) for v in k]
            if len(ks) != len(rhs_src):
                raise SystemError_(f"mode {md['id']}: {len(ks)} orders for {len(rhs_src)} equations")
            if orders is None:
                orders = ks
            elif ks != orders:
                raise SystemError_(f"mode {md['id']}: orders {ks} differ from {orders}")
            modes[md["id"]] = OdeMode(md["id"], ks, [parse(s) for s in rhs_src])
        if not modes:
            raise SystemError_("system has no modes")
        names = set(state_names(orders)) | {f"u{j + 1}" for j in range(m)} | {"t"}
        for md in modes.values():
            for e in md.rhs:
                _check_names(e, names, f"mode {md.id}")
        N = sum(orders)
        trans = []
        for tr in obj.get("transitions", []):
            if tr["src"] not in modes or tr["dst"] not in modes:
                raise SystemError_(f"transition {tr['src']}->{tr['dst']} references unknown mode")
            g = parse(tr["guard"], condition=True)
            _check_names(g, names, f"guard {tr['src']}->{tr['dst']}")
            reset = tr.get("reset") or {}
            M = np.array(reset.get("matrix", np.eye(N)), dtype=float)
            b = np.array(reset.get("offset", np.zeros(N)), dtype=float)
            if M.shape != (N, N) or b.shape != (N,):
                raise SystemError_(f"reset of {tr['src']}->{tr['dst']} must be {N}x{N} with offset {N}")
            trans.append(OdeTransition(tr["src"], tr["dst"], g, M, b))
        dt = float(obj["dt"])
        samples = int(obj["samples"])
        if not dt > 0 or samples < 1:
            raise SystemError_("dt must be positive and samples at least 1")
        return cls(obj.get("name", "system"), modes, trans, obj.get("init", {}), inputs,
                   dt, samples, orders, obj)

    def outgoing(self, mode: str) -> list[OdeTransition]:
        return [t for t in self.transitions if t.src == mode]

    def draw_initial(self, rng: np.random.Generator) -> tuple[str, np.ndarray]:
        initial = self.init.get("mode", next(iter(self.modes)))
        mode = _draw({"choice": initial}, rng) if isinstance(initial, list) else initial
        if mode not in self.modes:
            raise SystemError_(f"unknown initial mode {mode!r}")
        values = self.init.get("state", {})
        z = np.array([float(_draw(values.get(nm, 0.0), rng)) for nm in self.state_names])
        return mode, z


def _check_names(e: Expression, allowed: set, where: str):
    bad = sorted(e.names - allowed)
    if bad or e.lagged:
        raise SystemError_(f"{where}: unknown symbols {bad or sorted(v for v, _ in e.lagged)}")


def load_system(path_or_obj) -> GroundTruthSystem:
    if isinstance(path_or_obj, dict):
        return GroundTruthSystem.from_json(path_or_obj)
    return GroundTruthSystem.from_json(json.loads(Path(path_or_obj).read_text()))


def catalog_path(name: str) -> Path:
    return Path(__file__).parent / "catalog" / f"{name}.json"


def catalog_names() -> list[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "catalog").glob("*.json")
                  if not p.stem.endswith(".infer"))


def load_catalog(name: str) -> GroundTruthSystem:
    return load_system(catalog_path(name))


# --------------------------------------------------------------------------
# RKF45


_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)
_E = (1 / 360, 0.0, -128 / 4275, -2197 / 75240, 1 / 50, 2 / 55)


def rkf45_step(f, t: float, y: np.ndarray, h: float, k1: np.ndarray | None = None):
    """One Fehlberg step.  Returns the 4th-order solution and the error estimate."""
    ks = [f(t, y) if k1 is None else k1]
    for i in range(1, 6):
        yi = y + h * sum(a * k for a, k in zip(_A[i], ks))
        ks.append(f(t + _C[i] * h, yi))
    y4 = y + h * sum(b * k for b, k in zip(_B4, ks) if b)
    err = h * sum(e * k for e, k in zip(_E, ks) if e)
    return y4, err


def _hermite(t, a, ya, fa, b, yb, fb):
    h = b - a
    s = (np.asarray(t) - a) / h
    s = s[:, None]
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * ya + h10 * h * fa + h01 * yb + h11 * h * fb


@dataclass
class SwitchEvent:
    time: float
    src: str
    dst: str


@dataclass
class Simulation:
    trace: Trace
    events: list[SwitchEvent]
    initial_mode: str
    initial_state: np.ndarray
    steps: int


class _Runner:
    def __init__(self, system: GroundTruthSystem, signals: list[RealizedSignal], rtol, atol):
        self.sys = system
        self.signals = signals
        self.rtol, self.atol = rtol, atol
        self.names = system.state_names
        # index of the highest stored derivative per output, and its derivative target
        self.slots = []
        pos = 0
        for k in system.orders:
            self.slots.append((pos, k))
            pos += k
        self.N = pos
        self.ref = 0.0

    def env(self, t, z):
        env = dict(zip(self.names, (float(v) for v in z)))
        ref = self.ref
        for j, s in enumerate(self.signals):
            env[f"u{j + 1}"] = s(t, ref)
        env["t"] = t
        return env

    def rhs(self, mode: OdeMode):
        slots = self.slots

        def f(t, z):
            env = self.env(t, z)
            dz = np.empty(self.N)
            for (pos, k), e in zip(slots, mode.rhs):
                dz[pos:pos + k - 1] = z[pos + 1:pos + k]
                try:
                    dz[pos + k - 1] = e.evaluate(env, "math")
                except EvaluationError as exc:
                    raise IntegrationError(f"t={t}: {exc}") from None
            return dz
        return f

    def margin(self, tr: OdeTransition, t, z):
        return tr.guard.evaluate(self.env(t, z), "math")

    def inputs_at(self, times):
        out = np.empty((len(times), len(self.signals)))
        for i, t in enumerate(times):
            for j, s in enumerate(self.signals):
                # sample u[tau] belongs to the interval that ends at t_tau
                out[i, j] = s(t, t)
        return out


def simulate_system(system: GroundTruthSystem, mode: str, z0, *, samples: int | None = None,
                    dt: float | None = None, t0: float = 0.0, signals=None,
                    rtol: float = 1e-9, atol: float = 1e-12, max_step: float | None = None,
                    max_steps: int = 10_000_000,
                    rng: np.random.Generator | None = None) -> Simulation:
    """Integrate ``system`` from ``(mode, z0)`` and sample the outputs.

    Steps end on sample times (and are further capped at ``max_step``), so
    samples are integrator states rather than interpolated values.

    Returns the sampled :class:`Trace` (outputs and inputs) and the switch log.
    """
    dt = system.dt if dt is None else dt
    max_step = dt if max_step is None else max_step
    samples = system.samples if samples is None else samples
    t_end = t0 + (samples - 1) * dt
    rng = rng or np.random.default_rng(0)
    if signals is None:
        signals = [s.realize(rng, t_end) for s in system.inputs]
    run = _Runner(system, signals, rtol, atol)
    times = t0 + np.arange(samples) * dt
    z = np.array(z0, dtype=float)
    if z.shape != (run.N,):
        raise SystemError_(f"initial state needs {run.N} entries ({run.names})")
    breaks = sorted({b for s in signals for b in s.breaks if t0 < b < t_end})
    out = np.empty((samples, run.N))
    nxt = 0
    events: list[SwitchEvent] = []
    t = t0
    cur = mode
    h = min(dt, 1e-3) if samples > 1 else 0.0
    steps = 0
    bi = 0

    def fire_pending(t, z, cur):
        for _ in range(100):
            run.ref = t
            active = [tr for tr in system.outgoing(cur) if run.margin(tr, t, z) >= 0]
            if not active:
                return z, cur
            tr = max(active, key=lambda tr: run.margin(tr, t, z))
            z = tr.matrix @ z + tr.offset
            events.append(SwitchEvent(t, cur, tr.dst))
            cur = tr.dst
        raise IntegrationError(f"more than 100 instantaneous switches at t={t}")

    z, cur = fire_pending(t, z, cur)
    if samples == 1:
        out[0] = z
    while nxt < samples and samples > 1:
        while bi < len(breaks) and breaks[bi] <= t + 1e-12:
            bi += 1
        stop = min(t_end, breaks[bi]) if bi < len(breaks) else t_end
        # steps end on sample times so samples never come from interpolation
        ahead = nxt if nxt < samples and times[nxt] > t + 1e-12 else nxt + 1
        if ahead < samples:
            stop = min(stop, times[ahead])
        f = run.rhs(system.modes[cur])
        h = min(h, stop - t, max_step)
        run.ref = t + 0.5 * h
        fa = f(t, z)
        while True:
            run.ref = t + 0.5 * h
            y, err = rkf45_step(f, t, z, h, fa)
            scale = run.atol + run.rtol * np.maximum(np.abs(z), np.abs(y))
            e = float(np.max(np.abs(err) / scale)) if run.N else 0.0
            if not np.isfinite(y).all():
                e = np.inf
            if e <= 1.0:
                break
            h *= max(0.1, 0.9 * e ** -0.2) if np.isfinite(e) else 0.1
            if h < 1e-14 * max(1.0, abs(t)):
                raise IntegrationError(f"step size underflow at t={t}")
        steps += 1
        if steps > max_steps:
            raise IntegrationError("step limit exceeded")
        t_new = t + h if stop - (t + h) > 1e-13 * max(1.0, abs(stop)) else stop
        # guard crossing inside [t, t_new]?
        crossing = None
        for tr in system.outgoing(cur):
            if run.margin(tr, t_new, y) >= 0:
                lo, hi = 0.0, t_new - t
                yh = y
                while hi - lo > EVENT_TIME_TOL:
                    mid = 0.5 * (lo + hi)
                    run.ref = t + 0.5 * mid
                    ym, _ = rkf45_step(f, t, z, mid, fa)
                    if run.margin(tr, t + mid, ym) >= 0:
                        hi, yh = mid, ym
                    else:
                        lo = mid
                if crossing is None or hi < crossing[0]:
                    crossing = (hi, tr, yh)
        if crossing is not None:
            s, tr, yh = crossing
            t_new, y = t + s, yh
        run.ref = t + 0.5 * (t_new - t)
        fb = f(t_new, y)
        # samples falling in [t, t_new)
        last = crossing is None and t_new >= t_end
        hi_idx = nxt
        while hi_idx < samples and (times[hi_idx] < t_new or (last and hi_idx == samples - 1)):
            hi_idx += 1
        if hi_idx > nxt:
            if t_new > t:
                out[nxt:hi_idx] = _hermite(times[nxt:hi_idx], t, z, fa, t_new, y, fb)
            else:
                out[nxt:hi_idx] = z
            nxt = hi_idx
        step_taken = t_new - t
        t, z = t_new, y
        if crossing is not None:
            tr = crossing[1]
            z = tr.matrix @ z + tr.offset
            events.append(SwitchEvent(t, cur, tr.dst))
            cur = tr.dst
            z, cur = fire_pending(t, z, cur)
        # next step size from the error estimate of the accepted step
        if step_taken > 0:
            grow = 5.0 if e == 0 else min(5.0, max(0.2, 0.9 * e ** -0.2))
            h = max(h * grow, 1e-12)
        if t >= t_end and nxt < samples:
            out[nxt:] = z
            nxt = samples
    idx = [pos for pos, _ in run.slots]
    trace = Trace(t0, dt, out[:, idx], run.inputs_at(times))
    return Simulation(trace, events, mode, np.array(z0, dtype=float), steps)


# --------------------------------------------------------------------------
# datasets


def trace_rng(seed: int, index: int) -> np.random.Generator:
    """Independent RNG stream per trace index."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_traces(system: GroundTruthSystem, count: int, seed: int, offset: int = 0,
                    **kw) -> list[Simulation]:
    sims = []
    for i in range(count):
        rng = trace_rng(seed, offset + i)
        mode, z0 = system.draw_initial(rng)
        sims.append(simulate_system(system, mode, z0, rng=rng, **kw))
    return sims


def generate_dataset(system: GroundTruthSystem, out_dir, *, n_train: int = 9, n_test: int = 6,
                     seed: int = 0, **kw) -> dict:
    """Write ``train/*.csv``, ``test/*.csv``, ``switches.json`` and ``system.json``.

    Returns the switch log ``{trace_id: [[time, src, dst], ...]}``.
    """
    out = Path(out_dir)
    log: dict[str, list] = {}
    initial: dict[str, str] = {}
    errors: dict[str, str] = {}
    for split, count, offset in (("train", n_train, 0), ("test", n_test, n_train)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            tid = f"{split}/trace_{i:03d}"
            rng = trace_rng(seed, offset + i)
            mode, z0 = system.draw_initial(rng)
            try:
                sim = simulate_system(system, mode, z0, rng=rng, **kw)
            except IntegrationError as exc:
                errors[tid] = str(exc)
                continue
            save_trace(sim.trace, out / split / f"trace_{i:03d}.csv")
            log[tid] = [[e.time, e.src, e.dst] for e in sim.events]
            initial[tid] = mode
    (out / "switches.json").write_text(json.dumps(log, indent=1) + "\n")
    meta = {"system": system.raw, "seed": seed, "n_train": n_train, "n_test": n_test,
            "initial_modes": initial, "errors": errors}
    (out / "system.json").write_text(json.dumps(meta, indent=1) + "\n")
    if errors:
        raise IntegrationError(f"{len(errors)} trace(s) failed: {errors}")
    return log
