"""Domain types and the dual objectives of entropic optimal transport.

Two dual parameterisations are used throughout:

* scaled potentials ``(u, v)`` with ``B(u, v)_ij = exp(u_i + v_j - C_ij / eta)``
  and the objective ``f(u, v) = 1'B1 - <u, r> - <v, c>``;
* multipliers ``lambda = (alpha, beta)`` of the log-sum-exp dual
  ``phi(alpha, beta) = eta * log sum exp((alpha_i + beta_j - C_ij)/eta - 1)
  - <alpha, r> - <beta, c>`` and its exponential-sum variant.

All exponential sums go through :func:`entot._kernels.lse_axes`, so nothing
overflows as long as the true value is representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

HIST_TOL = 1e-12
FEAS_TOL = 1e-9


class OTError(Exception):
    """Base class for errors raised by this package."""


class DomainError(OTError, ValueError):
    pass


class DegenerateInstanceError(DomainError):
    pass


class ExponentOverflowError(OTError, OverflowError):
    pass


# ---------------------------------------------------------------------------
# types


def _as_vector(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise DomainError(f"{name} must be a vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Histogram:
    """Probability vector on ``n`` atoms."""

    weights: np.ndarray

    def __post_init__(self):
        w = _as_vector(self.weights, "weights")
        if w.size == 0:
            raise DomainError("histogram must have at least one atom")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DomainError("histogram entries must be finite and nonnegative")
        if abs(w.sum() - 1.0) > HIST_TOL:
            raise DomainError(f"histogram sums to {w.sum()!r}, expected 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    max_abs: float = field(init=False)

    def __post_init__(self):
        C = np.asarray(self.entries, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise DomainError(f"cost must be a square matrix, got shape {C.shape}")
        if not np.all(np.isfinite(C)) or np.any(C < 0):
            raise DomainError("cost entries must be finite and nonnegative")
        C.setflags(write=False)
        object.__setattr__(self, "entries", C)
        object.__setattr__(self, "max_abs", float(C.max()))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


@dataclass(frozen=True)
class DualPotentials:
    """Pair of dual vectors, either ``(u, v)`` or ``(alpha, beta)``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = _as_vector(self.u, "u").copy()
        v = _as_vector(self.v, "v").copy()
        if u.shape != v.shape:
            raise DomainError("dual vectors must have equal length")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise DomainError("dual potentials must be finite")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, n: int) -> "DualPotentials":
        return cls(np.zeros(n), np.zeros(n))

    @classmethod
    def from_stacked(cls, lam) -> "DualPotentials":
        lam = _as_vector(lam, "lambda")
        n = lam.size // 2
        return cls(lam[:n], lam[n:])

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u, self.v])

    def to_lambda(self, eta: float) -> "DualPotentials":
        """Map scaled potentials (u, v) to multipliers (alpha, beta)."""
        return DualPotentials(eta * (self.u + 0.5), eta * (self.v + 0.5))

    def to_scaled(self, eta: float) -> "DualPotentials":
        """Inverse of :meth:`to_lambda`."""
        return DualPotentials(self.u / eta - 0.5, self.v / eta - 0.5)


def is_feasible(X, r, c, tol: float = FEAS_TOL) -> bool:
    """True when ``X >= 0`` and both marginals match to ``tol`` in l1."""
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(X < 0):
        return False
    return bool(np.abs(X.sum(axis=1) - r).sum() <= tol and np.abs(X.sum(axis=0) - c).sum() <= tol)


@dataclass(frozen=True)
class RegularizedInstance:
    cost: CostMatrix
    r: Histogram
    c: Histogram
    eta: float

    def __post_init__(self):
        if not isinstance(self.cost, CostMatrix):
            object.__setattr__(self, "cost", CostMatrix(self.cost))
        if not isinstance(self.r, Histogram):
            object.__setattr__(self, "r", Histogram(self.r))
        if not isinstance(self.c, Histogram):
            object.__setattr__(self, "c", Histogram(self.c))
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise DomainError(f"eta must be positive, got {self.eta!r}")
        n = self.cost.n
        if self.r.n != n or self.c.n != n:
            raise DomainError(f"dimension mismatch: cost {n}, r {self.r.n}, c {self.c.n}")
        object.__setattr__(self, "eta", float(self.eta))
        logK = -self.cost.entries / self.eta
        logK.setflags(write=False)
        object.__setattr__(self, "_logK", logK)

    @property
    def n(self) -> int:
        return self.cost.n

    @property
    def C(self) -> np.ndarray:
        return self.cost.entries

    @property
    def log_kernel(self) -> np.ndarray:
        """``-C / eta``, cached."""
        return self._logK

    def with_marginals(self, r, c) -> "RegularizedInstance":
        return RegularizedInstance(self.cost, r, c, self.eta)

    def with_eta(self, eta: float) -> "RegularizedInstance":
        return RegularizedInstance(self.cost, self.r, self.c, eta)


@dataclass(frozen=True)
class ConstraintOperator:
    """The marginal map ``vec(X) -> (X 1; X' 1)`` and its right-hand side.

    The ``2n x n^2`` matrix is never built.  Vectors ``vec(X)`` are row-major.
    """

    n: int
    b: np.ndarray

    @classmethod
    def for_instance(cls, inst: RegularizedInstance) -> "ConstraintOperator":
        return cls(inst.n, np.concatenate([inst.r.weights, inst.c.weights]))

    norm_1to1 = 2.0

    def apply(self, x) -> np.ndarray:
        X = np.asarray(x, dtype=np.float64).reshape(self.n, self.n)
        return np.concatenate([X.sum(axis=1), X.sum(axis=0)])

    def adjoint(self, lam) -> np.ndarray:
        """``A' lambda`` as an ``n x n`` matrix with entries ``alpha_i + beta_j``."""
        lam = np.asarray(lam, dtype=np.float64)
        return lam[: self.n, None] + lam[None, self.n :]

    def residual(self, x) -> float:
        """``||A x - b||_1``."""
        return float(np.abs(self.apply(x) - self.b).sum())


# ---------------------------------------------------------------------------
# (u, v) parameterisation


def _check_dims(pots: DualPotentials, inst: RegularizedInstance):
    if pots.u.size != inst.n:
        raise DomainError(f"potentials have length {pots.u.size}, instance has n={inst.n}")


def scaling_matrix(pots: DualPotentials, inst: RegularizedInstance) -> np.ndarray:
    """``B(u, v)_ij = exp(u_i + v_j - C_ij / eta)``."""
    _check_dims(pots, inst)
    expo = pots.u[:, None] + pots.v[None, :] + inst.log_kernel
    with np.errstate(over="ignore"):
        B = np.exp(expo)
    if not np.all(np.isfinite(B)):
        i, j = np.unravel_index(np.argmax(expo), expo.shape)
        raise ExponentOverflowError(
            f"exp overflow in scaling matrix at ({i}, {j}): exponent {expo[i, j]:.6g}"
        )
    return B


def _log_marginals(pots: DualPotentials, inst: RegularizedInstance):
    _check_dims(pots, inst)
    return _kernels.lse_axes(inst.log_kernel, pots.u, pots.v, 1.0, 0.0)


def _exp_checked(x, what):
    if x > 709.0:
        raise ExponentOverflowError(f"{what} overflows: log value {x:.6g}")
    return math.exp(x)


def dual_f(pots: DualPotentials, inst: RegularizedInstance) -> float:
    """``f(u, v) = 1'B(u, v)1 - <u, r> - <v, c>``."""
    total, _, _ = _log_marginals(pots, inst)
    return _exp_checked(total, "sum of B(u, v)") - pots.u @ inst.r.weights - pots.v @ inst.c.weights


def grad_f(pots: DualPotentials, inst: RegularizedInstance):
    """Return ``(B1 - r, B'1 - c)``."""
    _, row, col = _log_marginals(pots, inst)
    if max(row.max(), col.max()) > 709.0:
        raise ExponentOverflowError("marginal of B(u, v) overflows")
    return np.exp(row) - inst.r.weights, np.exp(col) - inst.c.weights


def residual_E(pots: DualPotentials, inst: RegularizedInstance) -> float:
    """``||r(B) - r||_1 + ||c(B) - c||_1``."""
    gr, gc = grad_f(pots, inst)
    return float(np.abs(gr).sum() + np.abs(gc).sum())


def gain_rho(a, b):
    """``rho(a, b) = b - a + a log(a / b)`` with ``rho(0, b) = b``.

    Accepts scalars or arrays.
    """
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if np.any(a_arr < 0):
        raise DomainError("rho requires a >= 0")
    if np.any(b_arr <= 0):
        raise DomainError("rho requires b > 0")
    a_arr, b_arr = np.broadcast_arrays(a_arr, b_arr)
    out = _kernels._gain_vec(a_arr.ravel(), b_arr.ravel()).reshape(a_arr.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# (alpha, beta) parameterisation


def _lambda_logits(lam: DualPotentials, inst: RegularizedInstance):
    _check_dims(lam, inst)
    return _kernels.lse_axes(inst.log_kernel, lam.u, lam.v, 1.0 / inst.eta, -1.0)


def _marginal_rhs(inst, constraints):
    if constraints is None:
        return inst.r.weights, inst.c.weights
    return constraints.b[: inst.n], constraints.b[inst.n :]


def semi_dual_phi(lam: DualPotentials, inst: RegularizedInstance,
                  constraints: ConstraintOperator | None = None) -> float:
    """Log-sum-exp dual value at ``lambda = (alpha, beta)`` (no additive constant)."""
    total, _, _ = _lambda_logits(lam, inst)
    r, c = _marginal_rhs(inst, constraints)
    return inst.eta * total - lam.u @ r - lam.v @ c


def primal_from_dual(lam: DualPotentials, inst: RegularizedInstance) -> np.ndarray:
    """Softmax plan ``x(lambda)``; entries sum to one."""
    total, _, _ = _lambda_logits(lam, inst)
    logits = inst.log_kernel + (lam.u[:, None] + lam.v[None, :]) / inst.eta - 1.0
    return np.exp(logits - total)


def grad_phi(lam: DualPotentials, inst: RegularizedInstance,
             constraints: ConstraintOperator | None = None) -> np.ndarray:
    """Gradient ``A x(lambda) - b`` as a stacked ``2n`` vector.

    Its l1 norm is the marginal violation of the softmax plan ``x(lambda)``.
    """
    total, row, col = _lambda_logits(lam, inst)
    r, c = _marginal_rhs(inst, constraints)
    return np.concatenate([np.exp(row - total) - r, np.exp(col - total) - c])


def exp_dual_phi(lam: DualPotentials, inst: RegularizedInstance,
                 constraints: ConstraintOperator | None = None) -> float:
    """Exponential-sum dual ``eta * sum exp(...) - <alpha, r> - <beta, c>``."""
    total, _, _ = _lambda_logits(lam, inst)
    r, c = _marginal_rhs(inst, constraints)
    return inst.eta * _exp_checked(total, "exponential dual") - lam.u @ r - lam.v @ c


def exp_primal_from_dual(lam: DualPotentials, inst: RegularizedInstance) -> np.ndarray:
    """Unnormalised plan ``exp((alpha_i + beta_j - C_ij)/eta - 1)``."""
    _check_dims(lam, inst)
    logits = inst.log_kernel + (lam.u[:, None] + lam.v[None, :]) / inst.eta - 1.0
    return np.exp(logits)


def grad_exp_phi(lam: DualPotentials, inst: RegularizedInstance,
                 constraints: ConstraintOperator | None = None) -> np.ndarray:
    _, row, col = _lambda_logits(lam, inst)
    r, c = _marginal_rhs(inst, constraints)
    return np.concatenate([np.exp(row) - r, np.exp(col) - c])


# ---------------------------------------------------------------------------
# primal side


def primal_objective(X, inst_or_cost, eta: float | None = None) -> float:
    """``<C, X> - eta H(X)`` with ``0 log 0 = 0``.

    ``inst_or_cost`` is either a :class:`RegularizedInstance` (its ``eta`` is
    used unless overridden) or a cost array, in which case ``eta`` is required.
    """
    X = np.asarray(X, dtype=np.float64)
    if np.any(X < 0):
        raise DomainError("plan entries must be nonnegative")
    if isinstance(inst_or_cost, RegularizedInstance):
        C = inst_or_cost.C
        eta = inst_or_cost.eta if eta is None else eta
    else:
        C = np.asarray(inst_or_cost, dtype=np.float64)
        if eta is None:
            raise TypeError("eta is required when passing a bare cost matrix")
    pos = X > 0
    neg_entropy = float(np.sum(X[pos] * np.log(X[pos])))
    return float(np.sum(C * X)) + eta * neg_entropy


def reweight_marginals(r, c, eps_prime: float):
    """Mix both marginals with the uniform vector at weight ``eps_prime / 8``."""
    if not eps_prime > 0:
        raise DomainError("eps_prime must be positive")
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n = r.size
    w = eps_prime / 8.0
    r_t = (1.0 - w) * r + w / n
    c_t = (1.0 - w) * c + w / n
    return Histogram(r_t), Histogram(c_t)


def round_to_polytope(X, r, c) -> np.ndarray:
    """Project a nonnegative plan onto the transportation polytope U(r, c).

    Rows are scaled down to at most ``r``, then columns to at most ``c``;
    the remaining mass deficit is added back as a rank-one matrix.
    """
    F = np.array(X, dtype=np.float64, copy=True)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if F.ndim != 2 or F.shape != (r.size, c.size):
        raise DomainError(f"plan shape {F.shape} does not match marginals ({r.size}, {c.size})")
    if np.any(F < 0):
        raise DomainError("plan entries must be nonnegative")
    rows = F.sum(axis=1)
    scale = np.ones_like(rows)
    np.divide(r, rows, out=scale, where=rows > r)
    F *= scale[:, None]
    cols = F.sum(axis=0)
    scale = np.ones_like(cols)
    np.divide(c, cols, out=scale, where=cols > c)
    F *= scale[None, :]
    err_r = np.clip(r - F.sum(axis=1), 0.0, None)
    err_c = np.clip(c - F.sum(axis=0), 0.0, None)
    mass = err_r.sum()
    if mass > 0:
        F += np.outer(err_r, err_c) / mass
    return F


# ---------------------------------------------------------------------------
# bounds and schedules


def bound_R(inst: RegularizedInstance) -> float:
    """l-infinity radius containing an optimal ``(u*, v*)``."""
    floor = min(inst.r.weights.min(), inst.c.weights.min())
    if floor <= 0:
        raise DomainError("bound_R needs strictly positive marginals; reweight first")
    return inst.cost.max_abs / inst.eta + math.log(inst.n) - 2.0 * math.log(floor)


def bound_R_hat(inst: RegularizedInstance) -> float:
    """l-infinity radius containing an optimal ``(alpha*, beta*)``."""
    return inst.eta * (bound_R(inst) + 0.5)


def schedule_eta_eps(eps: float, n: int, c_max: float):
    """Return ``(eta, eps_prime)`` for a target additive accuracy ``eps``."""
    if not eps > 0:
        raise DomainError("eps must be positive")
    if n < 2:
        raise DomainError("schedule needs n >= 2")
    if not c_max > 0:
        raise DegenerateInstanceError("max cost is zero: every feasible plan is optimal")
    return eps / (4.0 * math.log(n)), eps / (8.0 * c_max)
