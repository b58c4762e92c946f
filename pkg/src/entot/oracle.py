"""Exact reference solutions at desk scale.

``exact_ot`` solves the unregularized transportation LP with a primal
network simplex on the complete bipartite graph rows -> columns.  The basis
is a spanning tree of ``2n - 1`` cells; node potentials double as the dual
certificate returned with the plan.  ``reference_dual_optimum`` runs Sinkhorn
to a tight tolerance and serves as ``f*`` for dual-gap checks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import (
    FEAS_TOL,
    DomainError,
    DualPotentials,
    Histogram,
    OTError,
    RegularizedInstance,
    dual_f,
    is_feasible,
)
from .solvers import Status, sinkhorn

MAX_EXACT_N = 256
REFERENCE_MAX_SWEEPS = 10_000_000
CERT_TOL = 1e-9


class SizeRefused(DomainError):
    pass


class OracleFailure(OTError):
    pass


@dataclass(frozen=True)
class ExactSolution:
    plan: np.ndarray
    value: float
    certificate: DualPotentials | None = None
    pivots: int = 0

    def slackness_residual(self, C) -> float:
        """``sum X_ij * |C_ij - u_i - v_j|`` plus any negative reduced cost."""
        if self.certificate is None:
            return float("nan")
        C = np.asarray(C, dtype=np.float64)
        red = C - self.certificate.u[:, None] - self.certificate.v[None, :]
        return float(np.sum(self.plan * np.abs(red)) + max(0.0, -red.min()))


class _Tree:
    """Basis of the transportation simplex: ``2n - 1`` cells spanning all nodes.

    Rows are nodes ``0..n-1`` and columns ``n..2n-1``; a basic cell ``(i, j)``
    is the edge ``{i, n + j}``.
    """

    def __init__(self, n):
        self.n = n
        self.adj = [dict() for _ in range(2 * n)]  # node -> {neighbour: cell}

    def add(self, i, j):
        self.adj[i][self.n + j] = (i, j)
        self.adj[self.n + j][i] = (i, j)

    def remove(self, i, j):
        del self.adj[i][self.n + j]
        del self.adj[self.n + j][i]

    def potentials(self, C):
        n = self.n
        pot = np.zeros(2 * n)
        seen = np.zeros(2 * n, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            a = queue.popleft()
            for b, (i, j) in self.adj[a].items():
                if not seen[b]:
                    seen[b] = True
                    # u_i + v_j = C_ij on every basic cell
                    pot[b] = C[i, j] - pot[a]
                    queue.append(b)
        return pot[:n], pot[n:]

    def path(self, src, dst):
        """Cells on the tree path from node ``src`` to node ``dst``, in order."""
        parent = {src: None}
        queue = deque([src])
        while queue:
            a = queue.popleft()
            if a == dst:
                break
            for b in self.adj[a]:
                if b not in parent:
                    parent[b] = a
                    queue.append(b)
        cells = []
        b = dst
        while parent[b] is not None:
            a = parent[b]
            cells.append(self.adj[a][b])
            b = a
        cells.reverse()
        return cells


def _northwest_corner(r, c, tree):
    n = r.size
    X = np.zeros((n, n))
    s, d = r.copy(), c.copy()
    i = j = 0
    while True:
        x = min(s[i], d[j])
        X[i, j] = x
        s[i] -= x
        d[j] -= x
        tree.add(i, j)
        if i == n - 1 and j == n - 1:
            break
        if i == n - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif s[i] <= d[j]:
            i += 1
        else:
            j += 1
    return X


def exact_ot(C, r, c, *, max_pivots: int | None = None) -> ExactSolution:
    """Optimal vertex of the transportation polytope and its cost.

    Dantzig pricing over all cells; after a long run of degenerate pivots the
    entering and leaving choices switch to Bland's lowest-index rule, which
    cannot cycle.
    """
    C = np.asarray(C, dtype=np.float64)
    r = Histogram(r).weights.copy()
    c = Histogram(c).weights.copy()
    n = r.size
    if C.shape != (n, n) or c.size != n:
        raise DomainError(f"shape mismatch: C {C.shape}, r {r.size}, c {c.size}")
    if n > MAX_EXACT_N:
        raise SizeRefused(f"exact solver refuses n={n} > {MAX_EXACT_N}")
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise DomainError("cost entries must be finite and nonnegative")
    # rescale c so both sides carry the same total mass to the last bit
    c *= r.sum() / c.sum()

    tree = _Tree(n)
    X = _northwest_corner(r, c, tree)
    tol = 1e-12 * max(1.0, float(C.max()))
    cap = max_pivots if max_pivots is not None else 50 * n * n + 1000
    bland_after = 20 * n + 50
    degenerate = 0
    pivots = 0
    while True:
        u, v = tree.potentials(C)
        red = C - u[:, None] - v[None, :]
        bland = degenerate > bland_after
        if bland:
            neg = np.flatnonzero(red.ravel() < -tol)
            if neg.size == 0:
                break
            flat = int(neg[0])
        else:
            flat = int(np.argmin(red))
            if red.flat[flat] >= -tol:
                break
        if pivots >= cap:
            raise OracleFailure(f"network simplex did not finish within {cap} pivots")
        ei, ej = divmod(flat, n)
        cycle = tree.path(ei, n + ej)
        minus = cycle[0::2]
        plus = cycle[1::2]
        theta = min(X[cell] for cell in minus)
        ties = [cell for cell in minus if X[cell] <= theta]
        leave = min(ties) if bland else ties[0]
        for cell in minus:
            X[cell] -= theta
        for cell in plus:
            X[cell] += theta
        X[ei, ej] += theta
        X[leave] = 0.0
        tree.remove(*leave)
        tree.add(ei, ej)
        degenerate = degenerate + 1 if theta == 0.0 else 0
        pivots += 1

    np.clip(X, 0.0, None, out=X)
    u, v = tree.potentials(C)
    return ExactSolution(X, float(np.sum(C * X)), DualPotentials(u, v), pivots)


def exact_value(C, r, c) -> float:
    return exact_ot(C, r, c).value


def reference_dual_optimum(inst: RegularizedInstance, tol: float = 1e-10,
                           max_sweeps: int = REFERENCE_MAX_SWEEPS):
    """High-accuracy ``(u*, v*)`` and ``f* = f(u*, v*)`` via Sinkhorn to ``E <= tol``."""
    if tol < 1e-12:
        raise DomainError("reference tolerance must be at least 1e-12")
    pots, trace = sinkhorn(inst, tol, max_sweeps)
    if trace.status is not Status.CONVERGED:
        raise OracleFailure(
            f"reference Sinkhorn stalled at E={trace.final_residual:.3e} after {trace.n_iter} sweeps"
        )
    return pots, dual_f(pots, inst)


def is_certified(sol: ExactSolution, C, r, c, tol: float = CERT_TOL) -> bool:
    return is_feasible(sol.plan, r, c, FEAS_TOL) and sol.slackness_residual(C) <= tol
