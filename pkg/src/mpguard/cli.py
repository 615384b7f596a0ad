"""Command-line entry point.

Subcommands:
  run     one experiment (dataset + model + attack + defense) across seeds
  ablate  direct attack against every guard variant
  sweep   non-targeted attack intensity sweep, no-defense vs guard
  bench   guard-estimation scaling benchmark
  gen     write a synthetic dataset to disk
  orbits  export graphlet degree vectors for an edge list

Exit codes: 0 success, 2 configuration error, 3 runtime failure (partial
results are written where possible).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .bench import (RunConfig, load_config, run_ablation, run_experiment,
                    run_intensity_sweep, scaling_bench)
from .errors import ConfigError, ValidationError
from .graph import save_edge_list
from .synth import count_orbits, save_gdv


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seeds", None):
        overrides["seeds"] = _parse_int_list(args.seeds)
    if getattr(args, "threads", None):
        overrides["threads"] = args.threads
    if overrides:
        cfg = replace(cfg, **overrides)
        cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpguard",
        description="Graph poisoning attacks and similarity-gated defense "
                    "at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="flat key=value file")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seeds", help="comma-separated seed list override")
        p.add_argument("--threads", type=int, help="worker processes")

    common(sub.add_parser("run", help="single experiment"))
    common(sub.add_parser("ablate", help="guard component ablation"))
    sweep = sub.add_parser("sweep", help="attack intensity sweep")
    common(sweep)
    sweep.add_argument("--rates", default="0.05,0.10,0.15,0.20,0.25",
                       help="comma-separated attack rates")

    bench = sub.add_parser("bench", help="guard estimation scaling benchmark")
    bench.add_argument("--sizes", default="1000,2000,4000,8000")
    bench.add_argument("--dim", type=int, default=16)
    bench.add_argument("--repeats", type=int, default=25)
    bench.add_argument("--out", help="optional output directory")

    gen = sub.add_parser("gen", help="write a synthetic dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)

    orbits = sub.add_parser("orbits", help="export graphlet degree vectors")
    orbits.add_argument("--edges", required=True)
    orbits.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def _dispatch(args) -> int:
    if args.command == "run":
        report = run_experiment(_load_cfg(args), out_dir=args.out)
        print(report.format_table())
        return 3 if any(r.error for r in report.rows) else 0
    if args.command == "ablate":
        report = run_ablation(_load_cfg(args), out_dir=args.out)
        print(report.format_table())
        return 3 if any(r.error for r in report.rows) else 0
    if args.command == "sweep":
        report = run_intensity_sweep(_load_cfg(args),
                                     rates=_parse_float_list(args.rates),
                                     out_dir=args.out)
        print(report.format_table())
        return 3 if any(r.error for r in report.rows) else 0
    if args.command == "bench":
        result = scaling_bench(_parse_int_list(args.sizes), dim=args.dim,
                               repeats=args.repeats)
        print(result.format_table())
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            lines = ["edges,seconds"]
            lines += [f"{e},{t:.9f}" for e, t in
                      zip(result.sizes, result.seconds)]
            lines.append(f"# slope={result.slope:.6e} "
                         f"intercept={result.intercept:.6e} "
                         f"r_squared={result.r_squared:.6f}")
            (out / "bench.csv").write_text("\n".join(lines) + "\n",
                                           encoding="utf-8")
        return 0
    if args.command == "gen":
        return _generate(args)
    if args.command == "orbits":
        from .graph import load_edge_list
        graph = load_edge_list(args.edges)
        save_gdv(count_orbits(graph), args.out)
        print(f"wrote {graph.n_nodes} graphlet vectors to {args.out}")
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def _generate(args) -> int:
    from .bench import build_graph
    cfg = load_config(args.config)
    graph, _ = build_graph(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_edge_list(
        graph, out / "edges.txt",
        features_path=(out / "features.csv") if graph.features is not None else None,
        labels_path=(out / "labels.txt") if graph.labels is not None else None)
    graph.export_masks(out / "masks")
    print(f"wrote {graph.n_nodes} nodes / {graph.n_edges} edges to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
