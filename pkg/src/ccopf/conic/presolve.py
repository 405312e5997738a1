"""Structural reductions applied to a cone program before solving.

Dispatch formulations pin most coordinates through singleton equality
rows (non-dispatchable buses, deterministic sources), which makes the
interior-point KKT system several times larger than the space actually
being optimized.  ``presolve`` settles what inspection can settle --
variables fixed by singleton rows, vacuous or dependent equality rows,
cone rows no remaining variable touches, columns no remaining row
touches -- and keeps exact maps back to the original space, so
``solve_reduced`` is a drop-in replacement for ``solve``.

Conclusions reached during the reductions carry the same Farkas
certificates the solver itself produces.  Fixing rows lift dual vectors
back to the full row space exactly: processed newest-first, each fixing
row's multiplier is determined by the stationarity of the column it
fixed, and the substituted right-hand sides telescope so the lifted
certificate keeps the reduced one's negative objective value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .problem import Cone, ConicProblem, Solution
from .solver import solve

__all__ = ["Reduction", "presolve", "solve_reduced"]


def _kkt_residuals(problem, x, y, z, s):
    pres = max(
        np.linalg.norm(problem.A @ x - problem.b) / (1.0 + np.linalg.norm(problem.b)),
        np.linalg.norm(problem.G @ x + s - problem.h) / (1.0 + np.linalg.norm(problem.h)),
    )
    dres = np.linalg.norm(problem.A.T @ y + problem.G.T @ z + problem.c) / (
        1.0 + np.linalg.norm(problem.c))
    gap = float(s @ z) / max(1.0, abs(problem.objective(x)))
    return (float(pres), float(dres), gap)


@dataclass(frozen=True)
class Reduction:
    """Reduced problem plus the exact maps back to the original space.

    ``decided`` is set when the reductions alone settle the instance; then
    ``problem`` is None and there is nothing left to solve.
    """

    original: ConicProblem
    problem: ConicProblem | None
    decided: Solution | None
    free: np.ndarray
    fixed_values: np.ndarray
    keep_eq: np.ndarray
    keep_row: np.ndarray
    fix_order: tuple[tuple[int, int, float], ...]
    slack_h: np.ndarray
    offset: float
    counts: dict[str, int]

    def lift_duals(self, y_kept, z_kept, ray=False):
        """Scatter reduced multipliers and solve for the fixing-row duals.

        Optimal multipliers balance the cost on each fixed column; a
        Farkas ray balances the homogeneous system instead.
        """
        y = np.zeros(self.original.n_eq)
        z = np.zeros(self.original.n_cone_rows)
        y[self.keep_eq] = y_kept
        z[self.keep_row] = z_kept
        cost = np.zeros(self.original.n_var) if ray else self.original.c
        return _lift(self.original, self.fix_order, y, z, cost)

    def expand(self, reduced: Solution) -> Solution:
        """Map a solution of the reduced problem back to the original."""
        orig = self.original
        info = dict(reduced.info)
        info["presolve"] = dict(self.counts)
        if reduced.status == "unbounded":
            x = np.zeros(orig.n_var)
            x[self.free] = reduced.x
            s = np.zeros(orig.n_cone_rows)
            s[self.keep_row] = reduced.s
            y, z = self.lift_duals(reduced.y, reduced.z)
            return Solution(x=x, y=y, z=z, s=s, status="unbounded",
                            objective=-np.inf,
                            kkt_residuals=reduced.kkt_residuals,
                            iterations=reduced.iterations,
                            certificate=np.concatenate([x, s]), info=info)
        if reduced.status == "infeasible":
            cert = reduced.certificate
            y, z = self.lift_duals(cert[:reduced.y.size], cert[reduced.y.size:],
                                   ray=True)
            x = self.fixed_values.copy()
            x[self.free] = reduced.x
            s = self.slack_h.copy()
            s[self.keep_row] = reduced.s
            return Solution(x=x, y=y, z=z, s=s, status="infeasible",
                            objective=np.nan,
                            kkt_residuals=reduced.kkt_residuals,
                            iterations=reduced.iterations,
                            certificate=np.concatenate([y, z]), info=info)
        x = self.fixed_values.copy()
        x[self.free] = reduced.x
        s = self.slack_h.copy()
        s[self.keep_row] = reduced.s
        y, z = self.lift_duals(reduced.y, reduced.z)
        return Solution(x=x, y=y, z=z, s=s, status=reduced.status,
                        objective=reduced.objective + self.offset,
                        kkt_residuals=reduced.kkt_residuals,
                        iterations=reduced.iterations, info=info)


def _lift(problem, fix_order, y, z, cost):
    """Fill fixing-row duals from column stationarity, newest fixing first.

    A row fixed earlier has no entry left in a column fixed later, so each
    equation encountered in reverse order has exactly one unknown.
    """
    if not fix_order:
        return y, z
    Ac = sp.csc_matrix(problem.A)
    Gc = sp.csc_matrix(problem.G)
    for row, col, coef in reversed(fix_order):
        lo, hi = Ac.indptr[col], Ac.indptr[col + 1]
        resid = cost[col] + Ac.data[lo:hi] @ y[Ac.indices[lo:hi]]
        lo, hi = Gc.indptr[col], Gc.indptr[col + 1]
        resid += Gc.data[lo:hi] @ z[Gc.indices[lo:hi]]
        y[row] = -resid / coef
    return y, z


def _decided(status, x, y, z, s, counts, detail,
             objective=np.nan, certificate=None, residuals=None):
    info = {"presolve": dict(counts), "detected": detail}
    if residuals is None:
        residuals = (np.inf, np.inf, np.inf)
    return Solution(x=x, y=y, z=z, s=s, status=status, objective=objective,
                    kkt_residuals=residuals, iterations=0,
                    certificate=certificate, info=info)


def presolve(problem: ConicProblem, tol: float = 1e-9) -> Reduction:
    """Reduce a cone program; may settle it outright (see ``Reduction``)."""
    n, p, m = problem.n_var, problem.n_eq, problem.n_cone_rows
    A = sp.csr_matrix(problem.A, copy=True)
    A.eliminate_zeros()
    G = sp.csr_matrix(problem.G, copy=True)
    G.eliminate_zeros()
    Acol = A.tocsc()
    b = problem.b.astype(float, copy=True)
    c = problem.c
    free = np.ones(n, dtype=bool)
    keep_eq = np.ones(p, dtype=bool)
    keep_row = np.ones(m, dtype=bool)
    fixed_values = np.zeros(n)
    fix_order: list[tuple[int, int, float]] = []
    counts = {"fixed_variables": 0, "dropped_equalities": 0,
              "dropped_cone_rows": 0, "zeroed_columns": 0}
    b_floor = tol * (1.0 + (np.abs(problem.b).max() if p else 0.0))
    h_floor = tol * (1.0 + (np.abs(problem.h).max() if m else 0.0))

    def reduction(decided=None, red=None, slack_h=None):
        return Reduction(
            original=problem, problem=red, decided=decided, free=free,
            fixed_values=fixed_values, keep_eq=keep_eq, keep_row=keep_row,
            fix_order=tuple(fix_order),
            slack_h=problem.h.copy() if slack_h is None else slack_h,
            offset=float(c[~free] @ fixed_values[~free]), counts=counts)

    def infeasible(y_scatter, z_scatter, detail):
        y, z = _lift(problem, fix_order, y_scatter, z_scatter, np.zeros(n))
        sol = _decided("infeasible", fixed_values.copy(), y, z,
                       np.zeros(m), counts, detail,
                       certificate=np.concatenate([y, z]))
        return reduction(decided=sol)

    # Cascade of singleton fixings: substituting a fixed variable can
    # empty further rows or leave them singleton in turn.
    while True:
        sub = A[:, free].tocsr()
        row_n = sub.getnnz(axis=1)
        free_idx = np.flatnonzero(free)
        progressed = False
        for r in np.flatnonzero(keep_eq & (row_n == 0)):
            if abs(b[r]) > b_floor:
                y0 = np.zeros(p)
                y0[r] = -1.0 / b[r]
                return infeasible(y0, np.zeros(m),
                                  "equality row with no variables left")
            keep_eq[r] = False
            counts["dropped_equalities"] += 1
            progressed = True
        newly = []
        for r in np.flatnonzero(keep_eq & (row_n == 1)):
            jf = sub.indices[sub.indptr[r]]
            j = free_idx[jf]
            if not free[j]:
                continue
            coef = sub.data[sub.indptr[r]]
            fixed_values[j] = b[r] / coef
            free[j] = False
            keep_eq[r] = False
            fix_order.append((int(r), int(j), float(coef)))
            newly.append(j)
            progressed = True
        if newly:
            counts["fixed_variables"] += len(newly)
            b = b - Acol[:, newly] @ fixed_values[newly]
        if not progressed:
            break

    # Remaining equality rows may be linearly dependent; drop the redundant
    # ones if consistent, certify infeasibility otherwise.
    kept = np.flatnonzero(keep_eq)
    n_free = int(free.sum())
    if kept.size and n_free and kept.size * n_free <= 4_000_000:
        Ak = A[kept][:, free].toarray()
        _, rfac, piv = scipy.linalg.qr(Ak.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(rfac))
        cut = diag[0] * max(Ak.shape) * np.finfo(float).eps if diag.size else 0.0
        rank = int(np.sum(diag > cut))
        if rank < kept.size:
            xhat, *_ = scipy.linalg.lstsq(Ak, b[kept])
            resid = Ak @ xhat - b[kept]
            if np.abs(resid).max() > 10.0 * b_floor:
                y0 = np.zeros(p)
                y0[kept] = resid / (resid @ resid)
                return infeasible(y0, np.zeros(m),
                                  "inconsistent dependent equality rows")
            drop = np.ones(kept.size, dtype=bool)
            drop[piv[:rank]] = False
            keep_eq[kept[drop]] = False
            counts["dropped_equalities"] += int(drop.sum())

    # Cone rows that no free variable touches are decided by their
    # substituted right-hand side alone.
    fixed_idx = np.flatnonzero(~free)
    h_work = problem.h.astype(float, copy=True)
    if fixed_idx.size:
        h_work -= G.tocsc()[:, fixed_idx] @ fixed_values[fixed_idx]
    row_g = G[:, free].getnnz(axis=1) if n_free else np.zeros(m, dtype=int)
    at = 0
    for cone in problem.cones:
        rows = np.arange(at, at + cone.dim)
        at += cone.dim
        if cone.kind == "nonneg":
            for i in rows:
                if row_g[i]:
                    continue
                if h_work[i] < -h_floor:
                    z0 = np.zeros(m)
                    z0[i] = -1.0 / h_work[i]
                    return infeasible(np.zeros(p), z0,
                                      "nonnegative row with no variables left")
                if h_work[i] >= 0.0:
                    keep_row[i] = False
                    counts["dropped_cone_rows"] += 1
        elif not row_g[rows].any():
            hb = h_work[rows]
            margin = hb[0] - np.linalg.norm(hb[1:])
            if margin < -h_floor:
                z0 = np.zeros(m)
                zb = (np.concatenate([[np.linalg.norm(hb[1:])], -hb[1:]])
                      if np.linalg.norm(hb[1:]) > 0.0
                      else np.concatenate([[1.0], np.zeros(cone.dim - 1)]))
                z0[rows] = zb / -(hb @ zb)
                return infeasible(np.zeros(p), z0,
                                  "cone block with no variables left")
            if margin >= 0.0:
                keep_row[rows] = False
                counts["dropped_cone_rows"] += cone.dim

    # Columns absent from every kept row: unbounded if they carry cost,
    # otherwise pin them to zero.
    if n_free:
        col_a = A[keep_eq][:, free].getnnz(axis=0)
        col_g = G[keep_row][:, free].getnnz(axis=0)
        free_idx = np.flatnonzero(free)
        c_floor = tol * (1.0 + np.abs(c).max())
        for jf in np.flatnonzero((col_a == 0) & (col_g == 0)):
            j = free_idx[jf]
            if abs(c[j]) > c_floor:
                ray = np.zeros(n)
                ray[j] = -np.sign(c[j])
                sol = _decided("unbounded", ray, np.zeros(p),
                               np.zeros(m), np.zeros(m), counts,
                               "cost on a variable no row touches",
                               objective=-np.inf,
                               certificate=np.concatenate([ray, np.zeros(m)]))
                return reduction(decided=sol)
            free[j] = False
            counts["zeroed_columns"] += 1

    if not free.any():
        # Everything is pinned; the fixings either satisfy what remains or
        # the instance was caught infeasible above.
        x = fixed_values.copy()
        y, z = _lift(problem, fix_order, np.zeros(p), np.zeros(m), c)
        s = h_work.copy()
        sol = _decided("optimal", x, y, z, s, counts,
                       "all variables fixed",
                       objective=float(c @ x),
                       residuals=_kkt_residuals(problem, x, y, z, s))
        return reduction(decided=sol, slack_h=h_work)

    cones = []
    at = 0
    for cone in problem.cones:
        kept_dim = int(keep_row[at:at + cone.dim].sum())
        at += cone.dim
        if kept_dim:
            cones.append(Cone(cone.kind, kept_dim))
    dense_a = not sp.issparse(problem.A)
    dense_g = not sp.issparse(problem.G)
    Ar = A[keep_eq][:, free]
    Gr = G[keep_row][:, free]
    red = ConicProblem(
        c=c[free],
        A=Ar.toarray() if dense_a else Ar.tocsr(),
        b=b[keep_eq],
        G=Gr.toarray() if dense_g else Gr.tocsr(),
        h=h_work[keep_row],
        cones=tuple(cones),
        var_names=tuple(np.asarray(problem.var_names)[free])
        if problem.var_names else (),
    )
    return reduction(red=red, slack_h=h_work)


def solve_reduced(problem: ConicProblem, settings: dict | None = None) -> Solution:
    """Presolve, solve what remains, and map the answer back."""
    red = presolve(problem)
    if red.decided is not None:
        return red.decided
    return red.expand(solve(red.problem, settings))
