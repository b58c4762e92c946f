"""Iterative solvers for entropic OT and the eps-approximation pipeline.

Sinkhorn and Greenkhorn work on the scaled dual ``f(u, v)`` and return
potentials; APDAMD and APDAGD work on the multiplier dual and return the
averaged primal plan.  Every solver also returns a :class:`SolverTrace`.
"""

from __future__ import annotations

import enum
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .core import (
    ConstraintOperator,
    DomainError,
    DualPotentials,
    OTError,
    RegularizedInstance,
    bound_R,
    reweight_marginals,
    round_to_polytope,
    scaling_matrix,
    schedule_eta_eps,
)

DEFAULT_MAX_SCALING_ITER = 1_000_000
DEFAULT_MAX_ACCEL_ITER = 100_000
MAX_DOUBLINGS = 64
DECREASE_SLACK = 1e-9
IDENTITY_RTOL = 1e-12

METHODS = ("sinkhorn", "greenkhorn", "apdamd", "apdagd")


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_FAILURE = "numerical_failure"


class SolverFailure(OTError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class InvariantViolation(OTError, AssertionError):
    pass


def _checks_enabled(flag):
    if flag is not None:
        return bool(flag)
    return os.environ.get("ENTOT_CHECK", "").strip().lower() not in ("", "0", "false", "no")


@dataclass
class SolverTrace:
    """Per-iteration diagnostics of one solver run.

    ``residual`` is ``E_t`` for the scaling methods and ``||A x^t - b||_1``
    for the accelerated ones; ``dual`` is the objective the method descends.
    """

    method: str
    iters: np.ndarray
    residual: np.ndarray
    dual: np.ndarray
    ls_doublings: np.ndarray
    grad_calls: np.ndarray
    elapsed: np.ndarray
    status: Status
    extras: dict = field(default_factory=dict)

    @property
    def n_iter(self) -> int:
        return int(self.iters[-1]) if self.iters.size else 0

    @property
    def final_residual(self) -> float:
        return float(self.residual[-1])

    @property
    def wall_seconds(self) -> float:
        return float(self.elapsed[-1]) if self.elapsed.size else 0.0

    def records(self) -> list[dict]:
        return [
            {
                "iter": int(t),
                "residual": float(e),
                "dual": float(d),
                "ls_doublings": int(k),
                "grad_calls": int(g),
                "elapsed": float(s),
            }
            for t, e, d, k, g, s in zip(self.iters, self.residual, self.dual,
                                        self.ls_doublings, self.grad_calls, self.elapsed)
        ]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "status": self.status.value,
            "records": self.records(),
        }


@dataclass(frozen=True)
class MirrorMap:
    """Quadratic mirror map ``phi(z) = ||z||^2 / (2 delta)``.

    ``delta`` is the inverse strong-convexity modulus with respect to the
    l-infinity norm; ``delta = n`` gives the default map for ``n`` atoms.
    """

    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError("mirror delta must be positive")

    @classmethod
    def for_atoms(cls, n: int) -> "MirrorMap":
        return cls(float(n))

    def prox(self, z0, g, alpha):
        """argmin_z <g, z> + B(z, z0) / alpha."""
        return z0 - self.delta * alpha * g

    def bregman(self, z, z0) -> float:
        d = np.asarray(z) - np.asarray(z0)
        return float(d @ d) / (2.0 * self.delta)


@dataclass
class ApproxResult:
    plan: np.ndarray
    cost: float
    trace: SolverTrace
    eta: float
    eps_prime: float
    method: str
    unrounded: np.ndarray
    instance: RegularizedInstance
    potentials: DualPotentials | None = None

    @property
    def schedule(self):
        return self.eta, self.eps_prime


# ---------------------------------------------------------------------------
# Sinkhorn / Greenkhorn


def _initial_potentials(inst: RegularizedInstance, init) -> tuple[np.ndarray, np.ndarray]:
    n = inst.n
    if isinstance(init, DualPotentials):
        return init.u.copy(), init.v.copy()
    if init == "zero":
        return np.zeros(n), np.zeros(n)
    if init == "normalized":
        # Split -log(1'exp(-C/eta)1) evenly so that B(u0, v0) has unit mass.
        total, _, _ = _kernels.lse_axes(inst.log_kernel, np.zeros(n), np.zeros(n), 1.0, 0.0)
        return np.full(n, -0.5 * total), np.full(n, -0.5 * total)
    raise DomainError(f"unknown init {init!r}")


def _out_of_time(elapsed, max_seconds):
    return max_seconds is not None and elapsed > max_seconds


def _require_positive_marginals(inst):
    if inst.r.weights.min() <= 0 or inst.c.weights.min() <= 0:
        raise DomainError("solver needs strictly positive marginals; reweight first")


def sinkhorn(inst: RegularizedInstance, eps_prime: float,
             max_iter: int = DEFAULT_MAX_SCALING_ITER, *, init="normalized",
             max_seconds: float | None = None):
    """Alternating full row / column scaling until ``E_t <= eps_prime``.

    One iteration is one sweep; sweeps alternate rows (even t) and columns.
    """
    _require_positive_marginals(inst)
    r, c = inst.r.weights, inst.c.weights
    log_r, log_c = np.log(r), np.log(c)
    u, v = _initial_potentials(inst, init)
    logK = inst.log_kernel
    res, dual, times = [], [], []
    start = time.perf_counter()
    status = Status.MAX_ITERATIONS
    t = 0
    while True:
        total, row, col = _kernels.lse_axes(logK, u, v, 1.0, 0.0)
        err = float(np.abs(np.exp(row) - r).sum() + np.abs(np.exp(col) - c).sum())
        res.append(err)
        dual.append(math.exp(total) - u @ r - v @ c)
        times.append(time.perf_counter() - start)
        if err <= eps_prime:
            status = Status.CONVERGED
            break
        if t >= max_iter or _out_of_time(times[-1], max_seconds):
            break
        if t % 2 == 0:
            u = u + log_r - row
        else:
            v = v + log_c - col
        t += 1
    iters = np.arange(t + 1)
    trace = SolverTrace("sinkhorn", iters, np.array(res), np.array(dual),
                        np.zeros(t + 1, dtype=np.int64), iters * inst.n, np.array(times), status,
                        extras={"time_limited": status is not Status.CONVERGED and t < max_iter})
    return DualPotentials(u, v), trace


def greenkhorn(inst: RegularizedInstance, eps_prime: float,
               max_iter: int = DEFAULT_MAX_SCALING_ITER, *, init="normalized",
               check: bool | None = None, chunk: int = 1 << 14,
               max_seconds: float | None = None):
    """Greedy single row-or-column scaling until ``E_t <= eps_prime``.

    Picks the row and column with the largest gain ``rho``; the row wins only
    if its gain is strictly larger, and ties inside an argmax go to the lowest
    index.  Row and column sums of ``B`` are cached and updated in ``O(n)``
    per step, with a full recomputation every ``8n`` steps.
    """
    _require_positive_marginals(inst)
    n = inst.n
    r = np.ascontiguousarray(inst.r.weights)
    c = np.ascontiguousarray(inst.c.weights)
    logK = np.ascontiguousarray(inst.log_kernel)
    u, v = _initial_potentials(inst, init)
    total, row, col = _kernels.lse_axes(logK, u, v, 1.0, 0.0)
    rs, cs = np.exp(row), np.exp(col)
    acc = np.array([math.exp(total), u @ r, v @ c])

    size = max_iter + 1
    res = np.empty(size)
    dual = np.empty(size)
    axis = np.full(size, -1, dtype=np.int8)
    idx = np.full(size, -1, dtype=np.int64)
    elapsed = np.empty(size)

    start = time.perf_counter()
    t = 0
    while True:
        t_next, code = _kernels.greenkhorn_steps(
            logK, r, c, u, v, rs, cs, acc, res, dual, axis, idx,
            t, min(t + chunk, size), max_iter, float(eps_prime), 8 * n,
        )
        elapsed[t:t_next + 1] = time.perf_counter() - start
        t = t_next
        if code != _kernels.RUNNING or _out_of_time(elapsed[t], max_seconds):
            break
    status = Status.CONVERGED if code == _kernels.CONVERGED else Status.MAX_ITERATIONS
    m = t + 1
    iters = np.arange(m)
    trace = SolverTrace("greenkhorn", iters, res[:m].copy(), dual[:m].copy(),
                        np.zeros(m, dtype=np.int64), iters.copy(), elapsed[:m].copy(), status,
                        extras={"axis": axis[:m].copy(), "index": idx[:m].copy(),
                                "time_limited": code == _kernels.RUNNING})
    if _checks_enabled(check):
        check_greenkhorn_decrease(trace, n)
    return DualPotentials(u, v), trace


def greenkhorn_decrease_slack(trace: SolverTrace, n: int) -> np.ndarray:
    """``f_t - f_{t+1} - E_t^2 / (28 n)`` for every completed step."""
    drop = trace.dual[:-1] - trace.dual[1:]
    return drop - trace.residual[:-1] ** 2 / (28.0 * n)


def check_greenkhorn_decrease(trace: SolverTrace, n: int, slack: float = DECREASE_SLACK):
    gap = greenkhorn_decrease_slack(trace, n)
    bad = np.flatnonzero(gap < -slack)
    if bad.size:
        t = int(bad[0])
        raise InvariantViolation(
            f"dual decrease below E_t^2/(28n) at step {t}: shortfall {-gap[t]:.3e}"
        )


def greenkhorn_iteration_bound(inst: RegularizedInstance, eps_prime: float) -> float:
    return 2.0 + 112.0 * inst.n * bound_R(inst) / eps_prime


# ---------------------------------------------------------------------------
# accelerated primal-dual methods


class _Oracle:
    """Dual value, gradient and primal point for one of the two dual forms."""

    def __init__(self, inst: RegularizedInstance, A: ConstraintOperator, normalized: bool):
        self.inst = inst
        self.n = inst.n
        self.b = A.b
        self.normalized = normalized
        self.calls = 0

    def __call__(self, lam):
        n, eta = self.n, self.inst.eta
        alpha, beta = lam[:n], lam[n:]
        total, row, col = _kernels.lse_axes(self.inst.log_kernel, alpha, beta, 1.0 / eta, -1.0)
        self.calls += 1
        if self.normalized:
            value = eta * total
            ax = np.concatenate([np.exp(row - total), np.exp(col - total)])
        else:
            value = eta * math.exp(total) if total < 709.0 else math.inf
            with np.errstate(over="ignore"):
                ax = np.concatenate([np.exp(row), np.exp(col)])
        value -= lam @ self.b
        return value, ax - self.b, total

    def bregman_gap(self, mu, total_mu, lam_new):
        """``phi(lam_new) - phi(mu) - <grad phi(mu), lam_new - mu>`` without cancellation.

        With ``P = x(mu)`` and ``D_ij = (d_i + d_j) / eta`` for ``d = lam_new - mu``
        the gap is ``eta * sum P (e^D - 1 - D)`` for the exponential dual and
        ``eta * log(1 + sum P (e^D' - 1 - D'))`` for the log-sum-exp dual, where
        ``D'`` is ``D`` centred under ``P``.  Every term is nonnegative.
        """
        eta = self.inst.eta
        offset = -1.0 - total_mu if self.normalized else -1.0
        s = _kernels.bregman_sum(self.inst.log_kernel, mu, lam_new - mu, 1.0 / eta, offset,
                                 self.normalized)
        return eta * math.log1p(s) if self.normalized else eta * s

    def primal(self, lam, total):
        n, eta = self.n, self.inst.eta
        logits = self.inst.log_kernel + (lam[:n, None] + lam[None, n:]) / eta - 1.0
        if self.normalized:
            logits -= total
        return np.exp(logits)


def accelerated_stepsize(delta: float, M: float, abar: float) -> float:
    """Positive root of ``delta * M * a^2 = abar + a``."""
    return (1.0 + math.sqrt(1.0 + 4.0 * delta * M * abar)) / (2.0 * delta * M)


def _accelerated(method: str, inst: RegularizedInstance, A: ConstraintOperator, delta: float,
                 prox: Callable, sqnorm: Callable, normalized: bool, eps_prime: float,
                 max_iter: int, dual_tol: float | None, max_seconds: float | None = None):
    n = inst.n
    oracle = _Oracle(inst, A, normalized)
    lam = np.zeros(2 * n)
    z = lam.copy()
    abar = 0.0
    L = 1.0
    x = np.zeros((n, n))
    phi_lam, grad_lam, _ = oracle(lam)
    oracle.calls = 0  # the starting evaluation is diagnostic only

    res, dual, doublings, calls, times = [], [], [], [], []
    Ms, alphas, abars = [], [], []
    start = time.perf_counter()
    status = Status.MAX_ITERATIONS
    k = 0
    t = 0
    while True:
        res.append(A.residual(x))
        dual.append(phi_lam)
        doublings.append(k)
        calls.append(oracle.calls)
        times.append(time.perf_counter() - start)
        if t >= 1 and res[-1] <= eps_prime:
            status = Status.CONVERGED
            break
        if t >= 1 and dual_tol is not None and np.abs(grad_lam).sum() <= dual_tol:
            status = Status.CONVERGED
            break
        if t >= max_iter or _out_of_time(times[-1], max_seconds):
            break
        M = L / 2.0
        k = 0
        while True:
            M *= 2.0
            k += 1
            if k > MAX_DOUBLINGS:
                status = Status.NUMERICAL_FAILURE
                break
            a = accelerated_stepsize(delta, M, abar)
            abar_new = abar + a
            mu = (a * z + abar * lam) / abar_new
            phi_mu, g_mu, total_mu = oracle(mu)
            z_new = prox(z, g_mu, a)
            lam_new = (a * z_new + abar * lam) / abar_new
            phi_new, g_new, _ = oracle(lam_new)
            gap = oracle.bregman_gap(mu, total_mu, lam_new)
            if gap <= 0.5 * M * sqnorm(lam_new - mu):
                break
        if status is Status.NUMERICAL_FAILURE:
            break
        x = (a * oracle.primal(mu, total_mu) + abar * x) / abar_new
        Ms.append(M)
        alphas.append(a)
        abars.append(abar_new)
        L = M / 2.0
        abar = abar_new
        z, lam = z_new, lam_new
        phi_lam, grad_lam = phi_new, g_new
        t += 1

    m = len(res)
    trace = SolverTrace(method, np.arange(m), np.array(res), np.array(dual),
                        np.array(doublings, dtype=np.int64), np.array(calls, dtype=np.int64),
                        np.array(times), status,
                        extras={"M": np.array(Ms), "alpha": np.array(alphas),
                                "alpha_bar": np.array(abars), "delta": delta,
                                "lambda": lam.copy(), "dual_grad_l1": float(np.abs(grad_lam).sum()),
                                "L0": 1.0,
                                "time_limited": status is Status.MAX_ITERATIONS and t < max_iter})
    return x, trace


def apdamd(inst: RegularizedInstance, constraints: ConstraintOperator | None = None,
           mirror: MirrorMap | None = None, eps_prime: float = 1e-6,
           max_iter: int = DEFAULT_MAX_ACCEL_ITER, *, dual_tol: float | None = None,
           check: bool | None = None, max_seconds: float | None = None):
    """Adaptive primal-dual accelerated mirror descent on the log-sum-exp dual.

    Returns the averaged primal plan and its trace; ``trace.extras['lambda']``
    holds the last multiplier iterate.
    """
    _require_positive_marginals(inst)
    A = constraints or ConstraintOperator.for_instance(inst)
    mirror = mirror or MirrorMap.for_atoms(inst.n)
    sqinf = lambda d: float(np.max(np.abs(d))) ** 2
    X, trace = _accelerated("apdamd", inst, A, mirror.delta, mirror.prox, sqinf, True,
                            eps_prime, max_iter, dual_tol, max_seconds)
    if _checks_enabled(check) and trace.status is not Status.NUMERICAL_FAILURE:
        check_accelerated_invariants(trace, inst, A.norm_1to1)
    return X, trace


def apdagd(inst: RegularizedInstance, constraints: ConstraintOperator | None = None,
           eps_prime: float = 1e-6, max_iter: int = DEFAULT_MAX_ACCEL_ITER, *,
           dual_tol: float | None = None, max_seconds: float | None = None):
    """Euclidean accelerated gradient baseline on the exponential-sum dual."""
    _require_positive_marginals(inst)
    A = constraints or ConstraintOperator.for_instance(inst)
    prox = lambda z0, g, a: z0 - a * g
    sq2 = lambda d: float(d @ d)
    return _accelerated("apdagd", inst, A, 1.0, prox, sq2, False, eps_prime, max_iter, dual_tol,
                        max_seconds)


def accelerated_bounds(trace: SolverTrace, inst: RegularizedInstance, norm_A: float = 2.0) -> dict:
    """Evaluate the stepsize identity and the accumulator / oracle-call bounds.

    Arrays are indexed by completed outer iteration ``t = 1..T``.
    """
    delta = trace.extras["delta"]
    M = trace.extras["M"]
    a = trace.extras["alpha"]
    abar = trace.extras["alpha_bar"]
    t = np.arange(1, M.size + 1)
    identity_rel = np.abs(delta * M * a**2 - abar) / abar if M.size else np.zeros(0)
    abar_floor = inst.eta * (t + 1) ** 2 / (8.0 * delta * norm_A**2)
    L0 = trace.extras["L0"]
    call_cap = 4 * t + 4 + (2 * math.log(norm_A**2 / (2 * inst.eta)) - 2 * math.log(L0)) / math.log(2)
    return {
        "identity_rel": identity_rel,
        "alpha_bar": abar,
        "alpha_bar_floor": abar_floor,
        "grad_calls": trace.grad_calls[1:],
        "grad_call_cap": call_cap,
    }


def apdamd_iteration_bound(inst: RegularizedInstance, delta: float, eps_prime: float,
                           norm_A: float = 2.0) -> float:
    return 1.0 + 4.0 * math.sqrt(2.0) * norm_A * math.sqrt(delta * (bound_R(inst) + 0.5) / eps_prime)


def check_accelerated_invariants(trace: SolverTrace, inst: RegularizedInstance, norm_A: float = 2.0):
    b = accelerated_bounds(trace, inst, norm_A)
    bad = np.flatnonzero(b["identity_rel"] > IDENTITY_RTOL)
    if bad.size:
        raise InvariantViolation(f"stepsize identity broken at iteration {bad[0] + 1}")
    bad = np.flatnonzero(b["alpha_bar"] < b["alpha_bar_floor"])
    if bad.size:
        raise InvariantViolation(f"accumulator below its lower bound at iteration {bad[0] + 1}")
    bad = np.flatnonzero(b["grad_calls"] > b["grad_call_cap"])
    if bad.size:
        raise InvariantViolation(f"gradient-call count above its bound at iteration {bad[0] + 1}")


# ---------------------------------------------------------------------------
# eps-approximate OT


def approx_ot(C, r, c, eps: float, method: str = "greenkhorn", *, max_iter: int | None = None,
              eta: float | None = None, init="normalized", check: bool | None = None,
              max_seconds: float | None = None) -> ApproxResult:
    """Return an exactly feasible plan with cost within ``eps`` of optimal.

    Pipeline: schedule ``(eta, eps')``, mix the marginals with uniform mass,
    solve the regularized problem to ``eps'/2``, round onto ``U(r, c)``.
    Passing ``eta`` overrides the scheduled regularization (the accuracy
    guarantee then no longer applies).
    """
    method = method.lower()
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}; choose from {METHODS}")
    C = np.asarray(C, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n = C.shape[0]
    eta_s, eps_prime = schedule_eta_eps(eps, n, float(C.max()))
    if eta is not None:
        eta_s = float(eta)
    r_t, c_t = reweight_marginals(r, c, eps_prime)
    inst = RegularizedInstance(C, r_t, c_t, eta_s)
    tol = eps_prime / 2.0
    pots = None
    if method in ("sinkhorn", "greenkhorn"):
        cap = DEFAULT_MAX_SCALING_ITER if max_iter is None else max_iter
        if method == "sinkhorn":
            pots, trace = sinkhorn(inst, tol, cap, init=init, max_seconds=max_seconds)
        else:
            pots, trace = greenkhorn(inst, tol, cap, init=init, check=check,
                                     max_seconds=max_seconds)
        X = scaling_matrix(pots, inst)
    else:
        cap = DEFAULT_MAX_ACCEL_ITER if max_iter is None else max_iter
        if method == "apdamd":
            X, trace = apdamd(inst, eps_prime=tol, max_iter=cap, check=check,
                              max_seconds=max_seconds)
        else:
            X, trace = apdagd(inst, eps_prime=tol, max_iter=cap, max_seconds=max_seconds)
    if trace.status is Status.NUMERICAL_FAILURE:
        raise SolverFailure(f"{method} failed: line search exceeded {MAX_DOUBLINGS} doublings", trace)
    X_hat = round_to_polytope(X, r, c)
    return ApproxResult(X_hat, float(np.sum(C * X_hat)), trace, eta_s, eps_prime, method, X, inst, pots)
