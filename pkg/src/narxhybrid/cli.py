"""Command-line entry point: ``narxhybrid {generate,infer,simulate,eval,pipeline}``.

Exit codes are 0 on success, 2 for configuration or input errors and 3 when
a pipeline phase fails.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from .automaton import LearnedAutomaton
from .benchgen import (GroundTruthSystem, IntegrationError, SystemError_, catalog_path,
                       generate_dataset, load_system)
from .config import ConfigError, InferConfig, load_json, make_config
from .pipeline import PhaseError, evaluate, infer, load_switches, simulate_trace
from .simulate import SimulationError, write_simulation
from .trace import TraceFormatError, load_dataset, load_trace

log = logging.getLogger("narxhybrid")

EXIT_OK, EXIT_CONFIG, EXIT_PHASE = 0, 2, 3


class InputError(Exception):
    """Unreadable or missing input file."""


def _dump(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such file")
    return load_json(p)


def resolve_system(source, base: Path | None = None) -> GroundTruthSystem:
    """A system given inline, as a JSON path, or by catalog name."""
    if isinstance(source, dict):
        return load_system(source)
    if source is None:
        raise ConfigError("no system given", "/system")
    cands = [Path(source)]
    if base is not None:
        cands.append(base / source)
    for p in cands:
        if p.is_file():
            return load_system(_read_json(p))
    cat = catalog_path(str(source))
    if cat.is_file():
        return load_system(_read_json(cat))
    raise InputError(f"system {source!r} is neither a file nor a catalog entry")


def resolve_config(source) -> tuple[dict, Path | None]:
    """Raw infer config from a path or a catalog name (``<name>.infer.json``)."""
    p = Path(source)
    if p.is_file():
        return _read_json(p), p.parent
    cat = catalog_path(f"{source}.infer")
    if cat.is_file():
        return _read_json(cat), cat.parent
    raise InputError(f"config {source!r} is neither a file nor a catalog entry")


def apply_overrides(raw: dict, args) -> InferConfig:
    raw = copy.deepcopy(raw)
    seg = raw.setdefault("segmenter", {})
    if getattr(args, "segmenter", None):
        seg["kind"] = args.segmenter
    if getattr(args, "window", None) is not None:
        seg["window"] = args.window
    if getattr(args, "tol", None) is not None:
        seg["tol"] = args.tol
    if getattr(args, "criterion", None):
        raw.setdefault("clustering", {})["criterion"] = args.criterion
    if getattr(args, "seed", None) is not None:
        raw.setdefault("dataset", {})["seed"] = args.seed
    return make_config(raw)


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    base = None
    n_train, n_test, seed = 9, 6, 0
    if args.config:
        raw, base = resolve_config(args.config)
        cfg = apply_overrides(raw, args)
        n_train, n_test, seed = (cfg.dataset["n_train"], cfg.dataset["n_test"],
                                 cfg.dataset["seed"])
        system_spec = args.system or cfg.system
    else:
        system_spec = args.system
        if args.seed is not None:
            seed = args.seed
    if system_spec is None:
        raise ConfigError("either --system or a config with a system is required", "/system")
    system = resolve_system(system_spec, base)
    n_train = args.n_train if args.n_train is not None else n_train
    n_test = args.n_test if args.n_test is not None else n_test
    switches = generate_dataset(system, args.out, n_train=n_train, n_test=n_test, seed=seed)
    print(json.dumps({"out": str(args.out), "system": system.name, "seed": seed,
                      "train": n_train, "test": n_test,
                      "switches": sum(len(v) for v in switches.values())}))
    return EXIT_OK


def _load_traces(data, split: str) -> dict:
    root = Path(data)
    if not root.is_dir():
        raise InputError(f"{root}: no such dataset directory")
    traces = load_dataset(root)[split]
    if not traces:
        raise InputError(f"{root}/{split}: no trace CSVs")
    return traces


def run_infer(cfg: InferConfig, data, out, threads: int = 1) -> LearnedAutomaton:
    traces = _load_traces(data, "train")
    result = infer(traces, cfg, threads=threads)
    out = Path(out)
    echo = cfg.echo()
    _dump(result.automaton.to_json(), out / "automaton.json")
    _dump({"config": echo, "traces": result.segmentation_report()}, out / "segmentation.json")
    _dump({"config": echo, **result.clustering.to_json()}, out / "clustering.json")
    _dump({"config": echo, "timings": result.timings, "warnings": result.warnings,
           "modes": len(result.automaton.modes),
           "transitions": [[t.source, t.target] for t in result.automaton.transitions],
           "segments": sum(len(r.segments) for r in result.segmentations.values())},
          out / "infer_report.json")
    for w in result.warnings:
        log.warning(w)
    return result.automaton


def cmd_infer(args) -> int:
    raw, _ = resolve_config(args.config)
    cfg = apply_overrides(raw, args)
    a = run_infer(cfg, args.data, args.out, args.threads)
    print(json.dumps({"out": str(args.out), "modes": len(a.modes),
                      "transitions": len(a.transitions),
                      "timings": a.metadata.get("timings", {})}))
    return EXIT_OK


def _load_automaton(path) -> LearnedAutomaton:
    try:
        return LearnedAutomaton.from_json(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise InputError(f"{path}: not a valid automaton ({exc})") from None


def cmd_simulate(args) -> int:
    a = _load_automaton(args.automaton)
    p = Path(args.trace)
    if not p.is_file():
        raise InputError(f"{p}: no such trace")
    trace = load_trace(p)
    try:
        sim = simulate_trace(a, trace, args.probe, args.initial_mode, resets=not args.no_resets)
    except SimulationError as exc:
        raise PhaseError("simulation", str(exc)) from None
    write_simulation(sim, args.out)
    print(json.dumps({"out": str(args.out), "samples": len(sim.trace),
                      "switches": len(sim.events), "overlaps": sim.overlaps}))
    return EXIT_OK


def run_eval(a: LearnedAutomaton, cfg: InferConfig, data, out, split: str | None = None,
             csv_path=None, resets: bool = True):
    split = split or cfg.eval.get("split", "test")
    traces = _load_traces(data, split)
    report = evaluate(a, traces, load_switches(data), cfg, a.metadata.get("timings"), resets=resets)
    _dump(report.to_json(), out)
    if csv_path:
        Path(csv_path).write_text(report.csv_row(cfg.name), encoding="utf-8")
    return report


def cmd_eval(args) -> int:
    a = _load_automaton(args.automaton)
    if args.config:
        raw, _ = resolve_config(args.config)
        cfg = apply_overrides(raw, args)
    else:
        cfg = make_config(a.metadata.get("config") or {"template": {"order": a.template.order}})
    report = run_eval(a, cfg, args.data, args.out, args.split, args.csv, not args.no_resets)
    print(json.dumps({"out": str(args.out), "hdt_c": report.to_json()["hdt_c"],
                      "diff_max": report.diff_max, "diff_avg": report.diff_avg}))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    raw, base = resolve_config(args.config)
    cfg = apply_overrides(raw, args)
    out = Path(args.out)
    system = resolve_system(cfg.system, base)
    data = out / "data"
    generate_dataset(system, data, n_train=cfg.dataset["n_train"], n_test=cfg.dataset["n_test"],
                     seed=cfg.dataset["seed"])
    a = run_infer(cfg, data, out / "model", args.threads)
    split = cfg.eval.get("split", "test")
    for tid, tr in sorted(_load_traces(data, split).items()):
        try:
            sim = simulate_trace(a, tr, cfg.eval.get("probe", 10))
        except SimulationError as exc:
            log.warning("%s: %s", tid, exc)
            continue
        write_simulation(sim, out / "sim" / f"{Path(tid).name}.csv")
    report = run_eval(a, cfg, data, out / "report.json", split, out / "report.csv")
    print(json.dumps({"out": str(out), "modes": len(a.modes),
                      "hdt_c": report.to_json()["hdt_c"], "diff_max": report.diff_max,
                      "diff_avg": report.diff_avg,
                      "total_time": report.timings.get("total")}))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narxhybrid",
                                     description="Infer hybrid automata with NARX mode dynamics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--segmenter", choices=["sliding", "binary"])
        p.add_argument("--window", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--criterion", choices=["mergeable", "minimal"])

    p = sub.add_parser("generate", help="sample train/test traces from a ground-truth system")
    p.add_argument("--system", help="system JSON file or catalog name")
    p.add_argument("--config", help="infer config (uses its system and dataset sections)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("infer", help="learn an automaton from training traces")
    p.add_argument("--config", required=True, help="infer config file or catalog name")
    p.add_argument("--data", required=True, help="dataset directory with train/*.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    overrides(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="roll out an automaton along a trace's seed and inputs")
    p.add_argument("--automaton", required=True)
    p.add_argument("--trace", required=True, help="CSV providing the seed samples and inputs")
    p.add_argument("--out", required=True, help="output CSV (a .modes.json sidecar is added)")
    p.add_argument("--initial-mode", type=int)
    p.add_argument("--probe", type=int, default=10)
    p.add_argument("--no-resets", action="store_true", help="ablation: switch modes without resets")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="HDT_c and Diff metrics on a dataset")
    p.add_argument("--automaton", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="defaults to the config stored in the automaton")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--csv", help="also write a one-row CSV summary")
    p.add_argument("--split", choices=["test", "train"])
    p.add_argument("--no-resets", action="store_true")
    overrides(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="generate, infer, simulate and evaluate in one go")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    overrides(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SystemError_) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, TraceFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PhaseError as exc:
        print(f"phase failure: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except (IntegrationError, SimulationError) as exc:
        print(f"phase failure: {exc}", file=sys.stderr)
        return EXIT_PHASE


if __name__ == "__main__":
    sys.exit(main())
