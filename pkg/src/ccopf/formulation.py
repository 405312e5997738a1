"""Probabilistically constrained dispatch as a second-order cone program.

The control is an affine feedback law in the demand germs: bus injections
share the demand's basis, u_i = u_{i,0} + sum_l u_{i,l} psi_l(xi_l), so power
balance can be imposed degree by degree and then holds for every realization,
not merely in expectation.  Each probabilistic limit tightens the mean margin
by ``beta`` standard deviations of the policy, which is exactly a
second-order cone over the coefficients.  Assembly is pure: the returned
problems are immutable and carry no solver state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse as sp
from scipy import special

from .conic import Cone, ConicProblem
from .grid import Grid, Ptdf
from .uncertainty import DemandPce

__all__ = [
    "CostSpec",
    "ChanceSpec",
    "CcOpfProblem",
    "FormulationError",
    "beta_factor",
    "build_socp",
    "build_gaussian_reference",
    "unpack_coefficients",
    "reference_coefficients",
]

BETA_RULES = ("distributionally_robust", "gaussian_exact")

# Matches the solver's dense/sparse crossover so small assemblies take the
# dense path and case-300-sized ones are born sparse.
_DENSE_LIMIT = 1200


class FormulationError(ValueError):
    """Raised for invalid cost, risk, or dimension data."""


def beta_factor(rule, epsilon: float) -> float:
    """Standard-deviation buffer for a one-sided limit at risk level epsilon.

    ``rule`` is ``"distributionally_robust"`` (valid for any distribution
    with known mean and variance), ``"gaussian_exact"`` (tight when the
    margin is Gaussian), or a number, which is returned as an explicit
    buffer unchanged.
    """
    if isinstance(rule, bool) or not isinstance(rule, (int, float, str)):
        raise FormulationError(f"invalid beta rule {rule!r}")
    if isinstance(rule, (int, float)):
        if rule < 0.0:
            raise FormulationError(f"explicit beta must be nonnegative, got {rule}")
        return float(rule)
    if not 0.0 < epsilon < 1.0:
        raise FormulationError(f"risk level must lie in (0, 1), got {epsilon}")
    if rule == "distributionally_robust":
        return math.sqrt((1.0 - epsilon) / epsilon)
    if rule == "gaussian_exact":
        beta = float(special.ndtri(1.0 - epsilon))
        if beta < 0.0:
            raise FormulationError(
                f"risk level {epsilon} above one half needs no buffer; use an explicit beta")
        return beta
    raise FormulationError(f"unknown beta rule {rule!r}; expected one of {BETA_RULES} or a number")


@dataclass(frozen=True)
class CostSpec:
    """Quadratic dispatch cost J(u) = u'Hu/2 + h'u over all buses.

    ``H`` must be symmetric positive semidefinite; a 1-d array is taken as
    its diagonal.  Non-generator buses simply carry zero rows.
    """

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).ravel()
        H = np.asarray(self.H, dtype=float)
        if H.ndim == 1:
            H = np.diag(H)
        if H.shape != (h.size, h.size):
            raise FormulationError(f"cost shapes disagree: H {H.shape}, h ({h.size},)")
        if not np.allclose(H, H.T, atol=1e-12):
            raise FormulationError("quadratic cost matrix must be symmetric")
        if H.any():
            floor = -1e-10 * max(1.0, float(np.abs(H).max()))
            if np.linalg.eigvalsh(H).min() < floor:
                raise FormulationError("quadratic cost matrix must be positive semidefinite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @classmethod
    def from_grid(cls, grid: Grid) -> "CostSpec":
        return cls(H=grid.cost_H_diag, h=grid.cost_h)

    @property
    def n_bus(self) -> int:
        return self.h.size

    @property
    def is_quadratic(self) -> bool:
        return bool(self.H.any())

    def factor(self) -> np.ndarray | None:
        """Slim root R with H = R'R, or None when the cost is linear.

        Rows belonging to zero eigenvalues are dropped, so R has full row
        rank and ``u'Hu = ||Ru||^2`` exactly.
        """
        if not self.is_quadratic:
            return None
        diag = np.diag(self.H)
        if np.count_nonzero(self.H) == np.count_nonzero(diag):
            support = np.flatnonzero(diag > 0.0)
            root = np.zeros((support.size, self.n_bus))
            root[np.arange(support.size), support] = np.sqrt(diag[support])
            return root
        w, vecs = np.linalg.eigh(self.H)
        keep = w > 1e-12 * w.max()
        return np.sqrt(w[keep])[:, None] * vecs[:, keep].T

    def split(self, coeffs: np.ndarray, gammas: np.ndarray) -> tuple[float, float]:
        """(nominal cost, uncertainty cost) of a coefficient matrix.

        ``coeffs`` is (n_bus, L+1) with the mean in column 0; ``gammas`` are
        the squared norms of the degree-one polynomials.
        """
        coeffs = np.asarray(coeffs, dtype=float)
        u0 = coeffs[:, 0]
        nominal = 0.5 * u0 @ self.H @ u0 + self.h @ u0
        spread = 0.0
        for l, gamma in enumerate(np.asarray(gammas, dtype=float), start=1):
            ul = coeffs[:, l]
            spread += 0.5 * gamma * (ul @ self.H @ ul)
        return float(nominal), float(spread)

    def value(self, coeffs: np.ndarray, gammas: np.ndarray) -> float:
        """Expected cost of a coefficient matrix (sum of both split parts)."""
        nominal, spread = self.split(coeffs, gammas)
        return nominal + spread


@dataclass(frozen=True)
class ChanceSpec:
    """Risk levels and the rule turning them into standard-deviation buffers.

    Generation and line limits may carry different risk levels; both must
    lie in (0, 0.5].  ``beta_rule`` is passed to :func:`beta_factor`.
    """

    epsilon_gen: float
    epsilon_line: float
    beta_rule: object = "distributionally_robust"

    def __post_init__(self):
        for label, eps in (("generation", self.epsilon_gen), ("line", self.epsilon_line)):
            if not 0.0 < eps <= 0.5:
                raise FormulationError(f"{label} risk level must lie in (0, 0.5], got {eps}")
        # Evaluate both buffers now so a bad rule fails at construction.
        beta_factor(self.beta_rule, self.epsilon_gen)
        beta_factor(self.beta_rule, self.epsilon_line)

    @property
    def beta_gen(self) -> float:
        return beta_factor(self.beta_rule, self.epsilon_gen)

    @property
    def beta_line(self) -> float:
        return beta_factor(self.beta_rule, self.epsilon_line)


@dataclass(frozen=True)
class CcOpfProblem:
    """One dispatch instance: network, demand expansion, cost, and risk."""

    grid: Grid
    ptdf: Ptdf
    demand: DemandPce
    cost: CostSpec
    chance: ChanceSpec

    def __post_init__(self):
        n = self.grid.n_bus
        if self.demand.d0.size != n:
            raise FormulationError(
                f"demand expansion covers {self.demand.d0.size} buses, grid has {n}")
        if self.cost.n_bus != n:
            raise FormulationError(f"cost covers {self.cost.n_bus} buses, grid has {n}")
        if self.ptdf.matrix.shape != (self.grid.n_line, n):
            raise FormulationError(
                f"sensitivity matrix is {self.ptdf.matrix.shape}, "
                f"expected ({self.grid.n_line}, {n})")

    @property
    def n_bus(self) -> int:
        return self.grid.n_bus

    @property
    def n_terms(self) -> int:
        """Number of expansion terms per bus (constant plus one per germ)."""
        return self.demand.basis.size + 1

    @property
    def gammas(self) -> np.ndarray:
        return self.demand.basis.gammas

    def demand_columns(self) -> np.ndarray:
        """Demand coefficients as one (n_bus, L+1) matrix, mean first."""
        return np.column_stack([self.demand.d0, self.demand.coeffs])


class _RowStack:
    """Triplet accumulator for one stacked constraint matrix."""

    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.rhs: list[float] = []

    def __len__(self) -> int:
        return len(self.rhs)

    def add(self, cols, vals, rhs) -> None:
        r = len(self.rhs)
        cols = np.atleast_1d(cols)
        self.rows.extend([r] * cols.size)
        self.cols.extend(int(c) for c in cols)
        self.vals.extend(float(v) for v in np.atleast_1d(vals))
        self.rhs.append(float(rhs))


def _materialize(stacks, n_cols: int, dense: bool):
    rows, cols, vals, rhs = [], [], [], []
    offset = 0
    for stack in stacks:
        rows.extend(r + offset for r in stack.rows)
        cols.extend(stack.cols)
        vals.extend(stack.vals)
        rhs.extend(stack.rhs)
        offset += len(stack)
    if dense:
        mat = np.zeros((offset, n_cols))
        mat[rows, cols] = vals
        return mat, np.array(rhs)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(offset, n_cols))
    return mat, np.array(rhs)


def unpack_coefficients(x: np.ndarray, n_bus: int, n_terms: int) -> np.ndarray:
    """Policy coefficient matrix (n_bus, n_terms) from a solution vector.

    The assembled problems store coefficients degree-major in the leading
    ``n_bus * n_terms`` entries; any epigraph variables follow and are
    ignored here.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size < n_bus * n_terms:
        raise FormulationError(
            f"solution vector has {x.size} entries, expected at least {n_bus * n_terms}")
    return x[:n_bus * n_terms].reshape(n_terms, n_bus).T.copy()


def build_socp(problem: CcOpfProblem, global_balancing: bool = False) -> ConicProblem:
    """Assemble the coefficient-space cone program.

    The first ``n_bus * n_terms`` variables are the policy coefficients in
    degree-major order (expansion term l occupies columns [l*N, (l+1)*N));
    with a quadratic cost, one epigraph variable per cost-carrying term
    follows.  Constraints:

    * one balance equality per expansion term;
    * equality pins for buses whose injection bounds coincide and for terms
      whose demand column is identically zero (zero is optimal there, and
      pinning lets the conic presolve drop those columns exactly);
    * per finite generation bound and line rating, a cone tying the mean
      margin to ``beta`` policy standard deviations;
    * per cost-carrying term, an epigraph cone for t >= ||R u_l||^2 / 2.

    Degenerate pieces collapse: ``beta = 0`` or an uncertainty-free term
    produces plain nonnegativity rows instead of cones.

    ``global_balancing`` forces every free bus to respond identically to all
    uncertainty-carrying terms, collapsing the feedback to one shared signal.
    Per-term balance then requires the terms' aggregate fluctuations to agree,
    so the flag can render an otherwise feasible instance infeasible.
    """
    grid, chance, cost = problem.grid, problem.chance, problem.cost
    n_bus, n_terms = problem.n_bus, problem.n_terms
    gammas = problem.gammas
    d_cols = problem.demand_columns()

    active = [l for l in range(1, n_terms) if d_cols[:, l].any()]
    pinned = np.isfinite(grid.u_min) & (grid.u_min == grid.u_max)
    root = cost.factor()
    epi_terms = [0] + active if root is not None else []

    n_u = n_bus * n_terms
    n_var = n_u + len(epi_terms)
    t_col = {l: n_u + k for k, l in enumerate(epi_terms)}

    c = np.zeros(n_var)
    c[:n_bus] = cost.h
    for l in epi_terms:
        c[t_col[l]] = 1.0 if l == 0 else gammas[l - 1]

    names = [f"u{grid.bus_ids[i]}.{l}" for l in range(n_terms) for i in range(n_bus)]
    names += [f"t.{l}" for l in epi_terms]

    eq = _RowStack()
    for l in range(n_terms):
        eq.add(np.arange(l * n_bus, (l + 1) * n_bus), np.ones(n_bus), -d_cols[:, l].sum())
    for i in np.flatnonzero(pinned):
        eq.add([i], [1.0], grid.u_min[i])
        for l in range(1, n_terms):
            eq.add([l * n_bus + i], [1.0], 0.0)
    for l in range(1, n_terms):
        if l in active:
            continue
        for i in np.flatnonzero(~pinned):
            eq.add([l * n_bus + i], [1.0], 0.0)

    lin = _RowStack()
    soc = _RowStack()
    soc_cones: list[Cone] = []

    def bound_cone(head_cols, head_vals, head_rhs, tails):
        if tails:
            soc.add(head_cols, head_vals, head_rhs)
            for cols, vals, rhs in tails:
                soc.add(cols, vals, rhs)
            soc_cones.append(Cone("soc", 1 + len(tails)))
        else:
            lin.add(head_cols, head_vals, head_rhs)

    if root is not None:
        for l in epi_terms:
            soc.add([t_col[l]], [-1.0], 0.5)
            soc.add([t_col[l]], [-1.0], -0.5)
            for row in root:
                nz = np.flatnonzero(row)
                soc.add(l * n_bus + nz, -row[nz], 0.0)
            soc_cones.append(Cone("soc", 2 + root.shape[0]))

    beta_u = chance.beta_gen
    for i in np.flatnonzero(~pinned):
        tails = []
        if beta_u > 0.0:
            tails = [([l * n_bus + i], [-beta_u * math.sqrt(gammas[l - 1])], 0.0)
                     for l in active]
        if np.isfinite(grid.u_max[i]):
            bound_cone([i], [1.0], grid.u_max[i], tails)
        if np.isfinite(grid.u_min[i]):
            bound_cone([i], [-1.0], -grid.u_min[i], tails)

    beta_l = chance.beta_line
    bus_cols = np.arange(n_bus)
    flows = problem.ptdf.matrix @ d_cols
    for k in range(grid.n_line):
        if not (np.isfinite(grid.line_hi[k]) or np.isfinite(grid.line_lo[k])):
            continue
        phi = problem.ptdf.matrix[k]
        tails = []
        if beta_l > 0.0:
            for l in active:
                scale = beta_l * math.sqrt(gammas[l - 1])
                tails.append((l * n_bus + bus_cols, -scale * phi, scale * flows[k, l]))
        if np.isfinite(grid.line_hi[k]):
            bound_cone(bus_cols, phi, grid.line_hi[k] - flows[k, 0], tails)
        if np.isfinite(grid.line_lo[k]):
            bound_cone(bus_cols, -phi, flows[k, 0] - grid.line_lo[k], tails)

    n_rows = len(eq) + len(lin) + len(soc)
    dense = n_var + n_rows <= _DENSE_LIMIT
    A, b = _materialize([eq], n_var, dense)
    G, h = _materialize([lin, soc], n_var, dense)
    cones = ([Cone("nonneg", len(lin))] if len(lin) else []) + soc_cones
    return ConicProblem(c=c, A=A, b=b, G=G, h=h, cones=tuple(cones), var_names=tuple(names))


def build_gaussian_reference(problem: CcOpfProblem) -> ConicProblem:
    """Participation-factor form of an all-Gaussian, linear-cost instance.

    Variables are (u0, alpha): the policy responds to the total demand
    deviation as u = u0 - alpha * 1'(d - d0), so each bus's standard
    deviation is |alpha_i| * sigma_tot with sigma_tot^2 = sum_l gamma_l
    (1'd_l)^2.  Requires every germ Gaussian and a linear cost.  Map
    solutions back with :func:`reference_coefficients`.
    """
    grid, chance, cost = problem.grid, problem.chance, problem.cost
    bad = [g.kind for g in problem.demand.basis.components if g.kind != "gaussian_standard"]
    if bad:
        raise FormulationError(f"reference form requires Gaussian germs, found {bad[0]!r}")
    if cost.is_quadratic:
        raise FormulationError("reference form requires a linear cost")

    n_bus, n_terms = problem.n_bus, problem.n_terms
    gammas = problem.gammas
    d_cols = problem.demand_columns()
    sums = d_cols.sum(axis=0)
    sigma_tot = math.sqrt(float(gammas @ sums[1:] ** 2))
    active = [l for l in range(1, n_terms) if d_cols[:, l].any()]
    pinned = np.isfinite(grid.u_min) & (grid.u_min == grid.u_max)

    n_var = 2 * n_bus
    c = np.zeros(n_var)
    c[:n_bus] = cost.h
    names = [f"u{b}.0" for b in grid.bus_ids] + [f"a{b}" for b in grid.bus_ids]

    eq = _RowStack()
    eq.add(np.arange(n_bus), np.ones(n_bus), -sums[0])
    eq.add(np.arange(n_bus, n_var), np.ones(n_bus), 1.0)
    for i in np.flatnonzero(pinned):
        eq.add([i], [1.0], grid.u_min[i])
        eq.add([n_bus + i], [1.0], 0.0)

    lin = _RowStack()
    soc = _RowStack()
    soc_cones: list[Cone] = []

    def bound_cone(head_cols, head_vals, head_rhs, tails):
        if tails:
            soc.add(head_cols, head_vals, head_rhs)
            for cols, vals, rhs in tails:
                soc.add(cols, vals, rhs)
            soc_cones.append(Cone("soc", 1 + len(tails)))
        else:
            lin.add(head_cols, head_vals, head_rhs)

    spread_u = chance.beta_gen * sigma_tot
    for i in np.flatnonzero(~pinned):
        tails = [([n_bus + i], [-spread_u], 0.0)] if spread_u > 0.0 else []
        if np.isfinite(grid.u_max[i]):
            bound_cone([i], [1.0], grid.u_max[i], tails)
        if np.isfinite(grid.u_min[i]):
            bound_cone([i], [-1.0], -grid.u_min[i], tails)

    beta_l = chance.beta_line
    bus_cols = np.arange(n_bus)
    alpha_cols = np.arange(n_bus, n_var)
    flows = problem.ptdf.matrix @ d_cols
    for k in range(grid.n_line):
        if not (np.isfinite(grid.line_hi[k]) or np.isfinite(grid.line_lo[k])):
            continue
        phi = problem.ptdf.matrix[k]
        tails = []
        if beta_l > 0.0:
            for l in active:
                scale = beta_l * math.sqrt(gammas[l - 1])
                tails.append((alpha_cols, scale * sums[l] * phi, scale * flows[k, l]))
        if np.isfinite(grid.line_hi[k]):
            bound_cone(bus_cols, phi, grid.line_hi[k] - flows[k, 0], tails)
        if np.isfinite(grid.line_lo[k]):
            bound_cone(bus_cols, -phi, flows[k, 0] - grid.line_lo[k], tails)

    n_rows = len(eq) + len(lin) + len(soc)
    dense = n_var + n_rows <= _DENSE_LIMIT
    A, b = _materialize([eq], n_var, dense)
    G, h = _materialize([lin, soc], n_var, dense)
    cones = ([Cone("nonneg", len(lin))] if len(lin) else []) + soc_cones
    return ConicProblem(c=c, A=A, b=b, G=G, h=h, cones=tuple(cones), var_names=tuple(names))


def reference_coefficients(problem: CcOpfProblem, x: np.ndarray) -> np.ndarray:
    """Expand a participation-factor solution into policy coefficients.

    Returns the (n_bus, L+1) matrix with mean x[:N] and degree-l column
    ``-alpha * 1'd_l``, the expansion of u0 - alpha * 1'(d - d0).
    """
    x = np.asarray(x, dtype=float).ravel()
    n_bus, n_terms = problem.n_bus, problem.n_terms
    if x.size != 2 * n_bus:
        raise FormulationError(f"reference solution has {x.size} entries, expected {2 * n_bus}")
    sums = problem.demand_columns().sum(axis=0)
    coeffs = np.zeros((n_bus, n_terms))
    coeffs[:, 0] = x[:n_bus]
    for l in range(1, n_terms):
        coeffs[:, l] = -x[n_bus:] * sums[l]
    return coeffs
