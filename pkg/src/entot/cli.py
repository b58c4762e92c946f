"""Command-line entry point: ``entot {solve,gen,bench,oracle,compare}``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import DomainError, ExponentOverflowError, is_feasible
from .harness import (
    RecordWriter,
    comparisons,
    emit_outputs,
    metric_d,
    ratios_csv,
    run_benchmark,
)
from .instances import InstanceSpec, synthetic_instance, uniform_instance
from .oracle import SizeRefused, exact_ot
from .solvers import METHODS, SolverFailure, approx_ot

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_instance(path) -> InstanceSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read instance {path}: {exc.strerror or exc}") from exc
    try:
        return InstanceSpec.from_json(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path, doc):
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def cmd_solve(args):
    spec = _load_instance(args.input)
    res = approx_ot(spec.cost, spec.r, spec.c, args.eps, args.method,
                    max_iter=args.max_iter, eta=args.eta)
    summary = {
        "method": res.method,
        "status": res.trace.status.value,
        "eta": res.eta,
        "eps": args.eps,
        "eps_prime": res.eps_prime,
        "iterations": res.trace.n_iter,
        "cost": res.cost,
        "d": metric_d(res.plan, spec.r, spec.c),
        "feasible": is_feasible(res.plan, spec.r, spec.c),
    }
    print(json.dumps(summary))
    if args.out:
        doc = dict(summary, trace=res.trace.to_dict())
        if args.save_plan:
            doc["plan"] = res.plan.tolist()
        _write_json(args.out, doc)
    return EXIT_OK


def cmd_gen(args):
    if args.kind == "uniform":
        spec = uniform_instance(args.n)
    else:
        spec = synthetic_instance(args.seed, args.side, args.fg)
    text = json.dumps(spec.to_json())
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {args.out}: {exc.strerror or exc}") from exc
    else:
        print(text)
    return EXIT_OK


def _read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def cmd_bench(args):
    config = _read_config(args.config)
    out_dir = Path(args.out_dir)
    with RecordWriter(out_dir / "records.jsonl") as sink:
        records = run_benchmark(config, sink=sink)
    paths = emit_outputs(records, out_dir, args.format, args.plotdata, pairs=config.get("compare"))
    failed = sum(r.status not in ("converged", "max_iterations") for r in records)
    print(f"{len(records)} records ({failed} failed) -> " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_oracle(args):
    spec = _load_instance(args.input)
    sol = exact_ot(spec.cost, spec.r, spec.c)
    print(json.dumps({"n": spec.n, "value": sol.value, "pivots": sol.pivots}))
    return EXIT_OK


def cmd_compare(args):
    config = {
        "instances": [{"kind": "synthetic", "side": args.side, "fg_fraction": args.fg}],
        "methods": list(args.methods),
        "seeds": args.seeds,
        "budgets": {"max_iter": args.max_iter, "tol": args.tol},
    }
    if args.eps is not None:
        config["eps_grid"] = [args.eps]
    else:
        config["eta_grid"] = [args.eta]
    records = run_benchmark(config)
    comps = comparisons(records, [tuple(args.methods)])
    text = ratios_csv(comps, args.floor)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {args.out}: {exc.strerror or exc}") from exc
    else:
        sys.stdout.write(text)
    for key, comp in comps:
        st = comp.stats(args.floor)
        if st["median"].size:
            print(f"# {key['pair']}: median of per-checkpoint medians "
                  f"{float(np.median(st['median'])):.4f} over {st['median'].size} checkpoints",
                  file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="entot", description="Entropic optimal transport solvers and benchmarks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="eps-approximate OT on one instance")
    s.add_argument("--input", required=True, help="instance JSON")
    s.add_argument("--method", choices=METHODS, default="greenkhorn")
    s.add_argument("--eps", type=float, default=0.5)
    s.add_argument("--eta", type=float, default=None, help="override the scheduled eta")
    s.add_argument("--max-iter", type=int, default=None)
    s.add_argument("--out", help="write summary and trace JSON here")
    s.add_argument("--save-plan", action="store_true", help="include the plan in --out")
    s.set_defaults(func=cmd_solve)

    g = sub.add_parser("gen", help="generate an instance JSON")
    g.add_argument("--kind", choices=("synthetic", "uniform"), default="synthetic")
    g.add_argument("--side", type=int, default=20)
    g.add_argument("--fg", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=4, help="size of the uniform instance")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("bench", help="run a benchmark config")
    b.add_argument("--config", required=True)
    b.add_argument("--out-dir", required=True)
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.add_argument("--plotdata", action="store_true")
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("oracle", help="exact LP value of an instance")
    o.add_argument("--input", required=True)
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("compare", help="competitive ratios of two methods on synthetic pairs")
    c.add_argument("--methods", nargs=2, choices=METHODS, default=["sinkhorn", "greenkhorn"])
    c.add_argument("--side", type=int, default=8)
    c.add_argument("--fg", type=float, default=0.1)
    c.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    grid = c.add_mutually_exclusive_group()
    grid.add_argument("--eta", type=float, default=5.0)
    grid.add_argument("--eps", type=float, default=None)
    c.add_argument("--tol", type=float, default=1e-8)
    c.add_argument("--max-iter", type=int, default=100_000)
    c.add_argument("--floor", type=float, default=1e-12,
                   help="drop checkpoints where any d-value is at or below this")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SolverFailure, ExponentOverflowError, FloatingPointError) as exc:
        print(f"entot: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"entot: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, DomainError, SizeRefused) as exc:
        print(f"entot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
