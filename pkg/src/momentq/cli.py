"""Command-line entry point: ``momentq <subcommand> ...``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bounds as bnd
from . import harness
from .frozenlake import DEFAULT_SLIP, GridSpec, UnreachableGoalError, build_frozenlake, generate_grid
from .mdp import ConvergenceError, load_mdp, save_mdp, solve_qstar

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _emit(text: str, out: str | None) -> None:
    if out:
        harness.write_atomic(Path(out), text)
    else:
        sys.stdout.write(text)


def cmd_env_gen(args) -> int:
    spec = generate_grid(args.size, args.seed, args.density, args.slip)
    _emit(spec.to_text(), args.out)
    return EXIT_OK


def cmd_env_compile(args) -> int:
    spec = GridSpec.from_text(Path(args.map).read_text(), slip=args.slip)
    mdp = build_frozenlake(spec, gamma=args.gamma)
    _emit(json.dumps(mdp.to_dict()) + "\n", args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    mdp = load_mdp(args.mdp)
    q, policy = solve_qstar(mdp, tol=args.tol)
    doc = {"q": q.tolist(), "policy": policy.tolist(), "v": q.max(axis=1).tolist()}
    _emit(json.dumps(doc) + "\n", args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    if args.workers:
        cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), "workers": args.workers})
    manifest = harness.run_experiment(cfg)
    print(json.dumps({"output_dir": str(cfg.resolved_output()), "runs": len(manifest["run_files"]),
                      "wall_time_s": manifest["wall_time_s"]}))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    algos = cfg.algos
    if args.algo is not None:
        labels = harness.algo_labels(algos)
        if args.algo not in labels:
            raise harness.ConfigError(f"algo {args.algo!r} not in config; choose from {labels}")
        algos = [algos[labels.index(args.algo)]]
    elif len(algos) != 1:
        raise harness.ConfigError("config lists several algos; pick one with --algo")
    d = cfg.to_dict()
    d.update(algos=algos, seeds=[args.seed], workers=1)
    single = harness.ExperimentConfig.from_dict(d)
    label = harness.algo_labels(cfg.algos)[cfg.algos.index(algos[0])]
    rows = harness.run_single(single, algos[0], label, args.seed)
    out = single.resolved_output() / harness.run_file_name(label, args.seed)
    harness.write_atomic(out, harness._rows_to_csv(rows))
    print(str(out))
    return EXIT_OK


def cmd_bounds(args) -> int:
    inputs = bnd.BoundInputs.load(args.inputs)
    if args.run is None:
        report = {"kind": args.kind, "bound": bnd.evaluate(args.kind, inputs)}
        if args.kind == "thm3":
            report["rate"] = bnd.bound_thm3(inputs).rate
    else:
        per_seed: dict[int, list[tuple[int, float]]] = {}
        for row in harness.read_run_file(args.run):
            per_seed.setdefault(row["seed"], []).append((row["k"], row["value"]))
        ks = [k for k, _ in next(iter(per_seed.values()))]
        emp = [[v for _, v in rows] for rows in per_seed.values()]
        report = bnd.compare_bound_vs_run(args.kind, inputs, ks, emp)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_aggregate(args) -> int:
    files = list(args.runs)
    if args.dir:
        files += sorted(str(p) for p in Path(args.dir).glob("run_*.csv"))
    if not files:
        raise harness.ConfigError("no run files given")
    records = harness.aggregate(files)
    _emit(harness.aggregates_to_csv(records), args.out)
    return EXIT_OK


def cmd_plotdata(args) -> int:
    records = harness.read_aggregates(args.aggregate)
    ks = None if args.checkpoints is None else [int(k) for k in args.checkpoints.split(",") if k.strip()]
    harness.emit_plotdata(records, args.out, fmt=args.format, checkpoints=ks)
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="momentq", description="Momentum Q-learning experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    env = sub.add_parser("env", help="generate or compile FrozenLake maps")
    env_sub = env.add_subparsers(dest="env_command", required=True, parser_class=_Parser)
    gen = env_sub.add_parser("gen", help="random map in S/F/H/G text format")
    gen.add_argument("--size", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--density", type=float, default=0.1)
    gen.add_argument("--slip", type=float, default=DEFAULT_SLIP)
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_env_gen)
    comp = env_sub.add_parser("compile", help="map text to MDP JSON")
    comp.add_argument("map")
    comp.add_argument("--gamma", type=float, default=0.95)
    comp.add_argument("--slip", type=float, default=DEFAULT_SLIP)
    comp.add_argument("--out")
    comp.set_defaults(func=cmd_env_compile)

    solve = sub.add_parser("solve", help="optimal Q-function of an MDP JSON")
    solve.add_argument("mdp")
    solve.add_argument("--tol", type=float, default=1e-10)
    solve.add_argument("--out")
    solve.set_defaults(func=cmd_solve)

    run = sub.add_parser("run", help="one algorithm and seed from a config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--algo", help="label of the algo entry to run")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="full multi-seed experiment")
    bench.add_argument("config")
    bench.add_argument("--workers", type=int)
    bench.set_defaults(func=cmd_bench)

    bounds = sub.add_parser("bounds", help="evaluate a finite-sample bound")
    bounds.add_argument("--kind", choices=("thm1", "thm2", "thm3"), required=True)
    bounds.add_argument("--inputs", required=True)
    bounds.add_argument("--run", help="run CSV whose value column is compared with the bound")
    bounds.set_defaults(func=cmd_bounds)

    agg = sub.add_parser("aggregate", help="fold run files into mean and std per checkpoint")
    agg.add_argument("runs", nargs="*")
    agg.add_argument("--dir")
    agg.add_argument("--out")
    agg.set_defaults(func=cmd_aggregate)

    plot = sub.add_parser("plotdata", help="aggregate CSV to plot-ready data")
    plot.add_argument("aggregate")
    plot.add_argument("--format", choices=("csv", "gnuplot"), default="csv")
    plot.add_argument("--checkpoints", help="comma-separated checkpoint filter")
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=cmd_plotdata)
    return p


CONFIG_ERRORS = (
    harness.ConfigError,
    bnd.BoundDomainError,
    UnreachableGoalError,
    FileNotFoundError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)
RUNTIME_ERRORS = (ConvergenceError, RuntimeError, OSError, FloatingPointError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    np.seterr(all="warn")
    raise SystemExit(main())
