"""Metrics, benchmark sweeps and result files.

A benchmark config is a dict (usually loaded from ``bench.json``)::

    {
      "instances": [{"kind": "synthetic", "side": 8, "fg_fraction": 0.1}],
      "methods": ["sinkhorn", "greenkhorn"],
      "eta_grid": [1, 5, 9],          # or "eps_grid": [0.5, 1.0]
      "seeds": [0, 1, 2],
      "budgets": {"max_iter": 100000, "max_seconds": 60, "tol": 1e-6},
      "oracle": true,
      "compare": [["sinkhorn", "greenkhorn"]]
    }

With ``eps_grid`` each cell runs the full approximation pipeline at that
accuracy.  With ``eta_grid`` the solver runs directly on the regularized
problem at that ``eta`` until the marginal error is below ``budgets.tol``,
and the plan is then rounded.  Either way one :class:`RunRecord` is produced
per (instance, seed, grid value, method) cell.

Iterations are converted to "row/col updates": one Sinkhorn sweep counts as
``n`` updates and one Greenkhorn step as one.  The accelerated methods have
no such unit, so their update count is the outer iteration count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .core import DomainError, OTError, RegularizedInstance, round_to_polytope, scaling_matrix
from .instances import RNG_NAME, InstanceSpec, instance_from_config
from .oracle import MAX_EXACT_N, exact_ot
from .solvers import (
    METHODS,
    SolverFailure,
    Status,
    apdagd,
    apdamd,
    approx_ot,
    greenkhorn,
    sinkhorn,
)

TIMING_FIELDS = ("wall_seconds",)
DEFAULT_PAIRS = (("sinkhorn", "greenkhorn"), ("apdagd", "apdamd"), ("greenkhorn", "apdamd"))
SERIES_COLUMNS = ("kind", "seed", "n", "grid", "grid_value", "algorithm", "iteration", "updates", "d")
RATIO_COLUMNS = ("pair", "kind", "grid", "grid_value", "updates", "seeds", "min", "median", "max")


def metric_d(X, r, c) -> float:
    """Distance to the transportation polytope: ``||r(X) - r||_1 + ||c(X) - c||_1``."""
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if X.shape != (r.size, c.size):
        raise DomainError(f"plan shape {X.shape} does not match marginals ({r.size}, {c.size})")
    return float(np.abs(X.sum(axis=1) - r).sum() + np.abs(X.sum(axis=0) - c).sum())


def competitive_ratio(d1: float, d2: float) -> float:
    """``ln(d1 / d2)``; positive when the second algorithm is closer."""
    if not (d1 > 0 and d2 > 0):
        raise DomainError(f"competitive ratio needs positive distances, got {d1!r}, {d2!r}")
    return math.log(d1) - math.log(d2)


# ---------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    kind: str
    seed: int | None
    n: int
    fg_fraction: float | None
    method: str
    eta: float
    eps: float | None
    eps_prime: float | None
    status: str
    iterations: int
    updates: int
    grad_calls: int
    wall_seconds: float
    d_unrounded: float
    d: float
    cost: float
    oracle_value: float | None
    rng: str = RNG_NAME
    error: str = ""
    # (updates, d) samples of the unrounded iterate; not part of the summary table
    series: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "series"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("series")
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        return cls(**{k: doc[k] for k in cls.columns() if k in doc})


@dataclass
class ComparisonSeries:
    """d-values of two algorithms at common update counts, one row per seed.

    ``d_a`` and ``d_b`` have shape ``(seeds, checkpoints)``; a value of ``nan``
    means the run produced no sample there.
    """

    name_a: str
    name_b: str
    updates: np.ndarray
    seeds: list
    d_a: np.ndarray
    d_b: np.ndarray

    def ratios(self) -> np.ndarray:
        """``ln(d_a / d_b)``, ``nan`` wherever either value is not positive."""
        ok = (self.d_a > 0) & (self.d_b > 0)
        out = np.full(self.d_a.shape, np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[ok] = np.log(self.d_a[ok]) - np.log(self.d_b[ok])
        return out

    def stats(self, floor: float = 0.0) -> dict:
        """Per-checkpoint min / median / max of the ratios over seeds.

        With ``floor > 0`` a checkpoint is kept only if every seed has both
        d-values above ``floor``; otherwise only where at least one seed has
        a defined ratio.
        """
        rat = self.ratios()
        if floor > 0:
            keep = np.all((self.d_a > floor) & (self.d_b > floor), axis=0)
        else:
            keep = np.any(np.isfinite(rat), axis=0)
        rat = rat[:, keep]
        with np.errstate(all="ignore"):
            return {
                "updates": self.updates[keep],
                "seeds": np.sum(np.isfinite(rat), axis=0),
                "min": np.nanmin(rat, axis=0) if rat.size else np.zeros(0),
                "median": np.nanmedian(rat, axis=0) if rat.size else np.zeros(0),
                "max": np.nanmax(rat, axis=0) if rat.size else np.zeros(0),
            }


def _step_lookup(series, points):
    """Value of a piecewise-constant series ``[(x, y), ...]`` at each point."""
    if not series:
        return np.full(len(points), np.nan)
    xs = np.array([p[0] for p in series], dtype=np.float64)
    ys = np.array([p[1] for p in series], dtype=np.float64)
    pos = np.searchsorted(xs, points, side="right") - 1
    out = np.where(pos >= 0, ys[np.clip(pos, 0, None)], np.nan)
    return out


def compare_records(records_a: list[RunRecord], records_b: list[RunRecord],
                    checkpoints=None) -> ComparisonSeries:
    """Align two methods run on the same seeds.

    Checkpoints default to the update counts sampled by the first method.
    A run that stopped early keeps its last d-value at later checkpoints.
    """
    by_seed_b = {r.seed: r for r in records_b}
    pairs = [(a, by_seed_b[a.seed]) for a in records_a if a.seed in by_seed_b]
    if not pairs:
        raise DomainError("no common seeds to compare")
    if checkpoints is None:
        first = pairs[0][0].series
        checkpoints = [u for u, _ in first]
    points = np.asarray(checkpoints, dtype=np.float64)
    d_a = np.vstack([_step_lookup(a.series, points) for a, _ in pairs])
    d_b = np.vstack([_step_lookup(b.series, points) for _, b in pairs])
    return ComparisonSeries(pairs[0][0].method, pairs[0][1].method, points.astype(np.int64),
                            [a.seed for a, _ in pairs], d_a, d_b)


# ---------------------------------------------------------------------------
# one cell


def _series(trace, n, method):
    res = trace.residual
    if method == "sinkhorn":
        return [(int(t) * n, float(res[t])) for t in range(res.size)]
    if method == "greenkhorn":
        # sample at sweep-equivalent boundaries and at the last step
        idx = list(range(0, res.size, n))
        if idx[-1] != res.size - 1:
            idx.append(res.size - 1)
        return [(int(t), float(res[t])) for t in idx]
    return [(int(t), float(res[t])) for t in range(res.size)]


def _updates(trace, n, method):
    return trace.n_iter * n if method == "sinkhorn" else trace.n_iter


def _solve_fixed_eta(spec: InstanceSpec, method, eta, budgets):
    inst = RegularizedInstance(spec.cost, spec.r, spec.c, eta)
    tol = float(budgets.get("tol", 1e-6))
    secs = budgets.get("max_seconds")
    if method in ("sinkhorn", "greenkhorn"):
        cap = int(budgets.get("max_iter", 1_000_000))
        solver = sinkhorn if method == "sinkhorn" else greenkhorn
        pots, trace = solver(inst, tol, cap, max_seconds=secs)
        X = scaling_matrix(pots, inst)
    else:
        cap = int(budgets.get("max_iter", 100_000))
        solver = apdamd if method == "apdamd" else apdagd
        X, trace = solver(inst, eps_prime=tol, max_iter=cap, max_seconds=secs)
    return X, trace


def run_cell(spec: InstanceSpec, method: str, *, eps=None, eta=None, budgets=None,
             oracle_value=None) -> RunRecord:
    """Run one method on one instance and summarize it; never raises solver errors."""
    budgets = budgets or {}
    n = spec.n
    fg = spec.params.get("fg_fraction")
    base = dict(kind=spec.kind, seed=spec.seed, n=n, fg_fraction=fg, method=method,
                oracle_value=oracle_value)
    start = time.perf_counter()
    try:
        if method not in METHODS:
            raise DomainError(f"unknown method {method!r}")
        if eps is not None:
            res = approx_ot(spec.cost, spec.r, spec.c, eps, method,
                            max_iter=budgets.get("max_iter"), max_seconds=budgets.get("max_seconds"))
            trace, plan, X = res.trace, res.plan, res.unrounded
            eta_used, eps_prime = res.eta, res.eps_prime
            target_r, target_c = res.instance.r.weights, res.instance.c.weights
        else:
            X, trace = _solve_fixed_eta(spec, method, eta, budgets)
            if trace.status is Status.NUMERICAL_FAILURE:
                raise SolverFailure(f"{method} line search failed", trace)
            plan = round_to_polytope(X, spec.r, spec.c)
            eta_used, eps_prime = float(eta), None
            target_r, target_c = spec.r, spec.c
        return RunRecord(
            **base, eta=eta_used, eps=eps, eps_prime=eps_prime, status=trace.status.value,
            iterations=trace.n_iter, updates=_updates(trace, n, method),
            grad_calls=int(trace.grad_calls[-1]), wall_seconds=time.perf_counter() - start,
            d_unrounded=metric_d(X, target_r, target_c), d=metric_d(plan, spec.r, spec.c),
            cost=float(np.sum(spec.cost * plan)), series=_series(trace, n, method),
        )
    except (OTError, FloatingPointError, ValueError) as exc:
        status = Status.NUMERICAL_FAILURE.value if isinstance(exc, (SolverFailure, OverflowError)) else "error"
        nan = float("nan")
        return RunRecord(
            **base, eta=float(eta) if eta is not None else nan, eps=eps, eps_prime=None,
            status=status, iterations=0, updates=0, grad_calls=0,
            wall_seconds=time.perf_counter() - start, d_unrounded=nan, d=nan, cost=nan,
            error=f"{type(exc).__name__}: {exc}",
        )


# ---------------------------------------------------------------------------
# sweeps


def validate_config(config: dict) -> dict:
    if not isinstance(config, dict):
        raise DomainError("benchmark config must be a JSON object")
    for key in ("instances", "methods"):
        if not config.get(key):
            raise DomainError(f"benchmark config needs a nonempty {key!r} list")
    has_eps, has_eta = "eps_grid" in config, "eta_grid" in config
    if has_eps == has_eta:
        raise DomainError("benchmark config needs exactly one of 'eps_grid' or 'eta_grid'")
    grid = config["eps_grid"] if has_eps else config["eta_grid"]
    if not grid or any(not (float(g) > 0) for g in grid):
        raise DomainError("grid values must be positive")
    for m in config["methods"]:
        if m not in METHODS:
            raise DomainError(f"unknown method {m!r}; choose from {METHODS}")
    return config


def _instances_for(entry, seeds):
    if entry.get("kind") == "synthetic":
        return [instance_from_config(entry, seed) for seed in seeds]
    spec = instance_from_config(entry)
    out = []
    for seed in seeds:
        # seed-independent families are replicated so every seed has a record
        out.append(InstanceSpec(spec.kind, spec.cost, spec.r, spec.c, seed, spec.params))
    return out


def run_benchmark(config: dict, sink: Callable[[RunRecord], None] | None = None) -> list[RunRecord]:
    """Run the full cross product; ``sink`` is called with each record as soon as it exists."""
    config = validate_config(config)
    seeds = [int(s) for s in config.get("seeds", [0])]
    budgets = config.get("budgets", {})
    grid_key = "eps_grid" if "eps_grid" in config else "eta_grid"
    records = []
    for entry in config["instances"]:
        for spec in _instances_for(entry, seeds):
            opt = None
            if config.get("oracle") and spec.n <= MAX_EXACT_N:
                opt = exact_ot(spec.cost, spec.r, spec.c).value
            for g in config[grid_key]:
                for method in config["methods"]:
                    kw = {"eps": float(g)} if grid_key == "eps_grid" else {"eta": float(g)}
                    rec = run_cell(spec, method, budgets=budgets, oracle_value=opt, **kw)
                    records.append(rec)
                    if sink is not None:
                        sink(rec)
    return records


def comparisons(records: list[RunRecord], pairs=None) -> list[tuple[dict, ComparisonSeries]]:
    """Group records by (kind, grid value) and align each requested method pair."""
    pairs = [tuple(p) for p in (pairs or DEFAULT_PAIRS)]
    groups: dict = {}
    for r in records:
        if r.series:
            grid, value = ("eps", r.eps) if r.eps is not None else ("eta", r.eta)
            groups.setdefault((r.kind, r.n, grid, value), {}).setdefault(r.method, []).append(r)
    out = []
    for (kind, n, grid, value), by_method in groups.items():
        for a, b in pairs:
            if a in by_method and b in by_method:
                key = {"pair": f"{a}/{b}", "kind": kind, "n": n, "grid": grid, "grid_value": value}
                out.append((key, compare_records(by_method[a], by_method[b])))
    return out


# ---------------------------------------------------------------------------
# output


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def records_csv(records: Iterable[RunRecord], timing: bool = True) -> str:
    cols = [c for c in RunRecord.columns() if timing or c not in TIMING_FIELDS]
    return _csv_text(cols, ([r.to_dict()[c] for c in cols] for r in records))


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else repr(value)
    return value


def records_json(records: Iterable[RunRecord], timing: bool = True) -> str:
    docs = []
    for r in records:
        d = {k: _json_safe(v) for k, v in r.to_dict().items()}
        if not timing:
            for k in TIMING_FIELDS:
                d.pop(k)
        docs.append(d)
    return json.dumps({"records": docs}, indent=2) + "\n"


def parse_records_json(text: str) -> list[RunRecord]:
    docs = json.loads(text)["records"]
    out = []
    for d in docs:
        for k in ("d", "d_unrounded", "cost", "wall_seconds", "eta"):
            if d.get(k) is None and k in d:
                d[k] = float("nan")
        out.append(RunRecord.from_dict(d))
    return out


def series_csv(records: Iterable[RunRecord]) -> str:
    rows = []
    for r in records:
        grid, value = ("eps", r.eps) if r.eps is not None else ("eta", r.eta)
        per_update = r.n if r.method == "sinkhorn" else 1
        for u, d in r.series:
            rows.append((r.kind, r.seed, r.n, grid, value, r.method, u // per_update, u, d))
    return _csv_text(SERIES_COLUMNS, rows)


def ratios_csv(comps, floor: float = 0.0) -> str:
    rows = []
    for key, comp in comps:
        st = comp.stats(floor)
        for i in range(st["updates"].size):
            rows.append((key["pair"], key["kind"], key["grid"], key["grid_value"],
                         int(st["updates"][i]), int(st["seeds"][i]),
                         float(st["min"][i]), float(st["median"][i]), float(st["max"][i])))
    return _csv_text(RATIO_COLUMNS, rows)


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def emit_outputs(records: list[RunRecord], out_dir, format: str = "csv", plotdata: bool = False,
                 pairs=None, timing: bool = True) -> list[Path]:
    """Write ``results.<format>`` and, with ``plotdata``, ``series.csv`` and ``ratios.csv``."""
    if not records:
        raise DomainError("no records to emit")
    out_dir = Path(out_dir)
    if format == "csv":
        written = [_write(out_dir / "results.csv", records_csv(records, timing))]
    elif format == "json":
        written = [_write(out_dir / "results.json", records_json(records, timing))]
    else:
        raise DomainError(f"unknown format {format!r}")
    if plotdata:
        written.append(_write(out_dir / "series.csv", series_csv(records)))
        written.append(_write(out_dir / "ratios.csv", ratios_csv(comparisons(records, pairs))))
    return written


class RecordWriter:
    """Append-only JSON-lines log, flushed after every record.

    Used as the ``sink`` of :func:`run_benchmark` so an interrupted sweep
    keeps every finished cell.
    """

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w")
        except OSError as exc:
            raise OSError(f"cannot open {self.path}: {exc.strerror or exc}") from exc

    def __call__(self, record: RunRecord):
        doc = {k: _json_safe(v) for k, v in record.to_dict().items()}
        self._fh.write(json.dumps(doc) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
