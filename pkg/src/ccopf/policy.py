"""Affine feedback policies built from solved coefficient blocks.

A policy maps a germ realization to generator set points, u = u0 + U psi(xi).
Because demand follows the same basis, the policy can be inverted: observing a
demand realization pins down the germ (when the demand columns have full rank)
and therefore the control action.  Everything here is solver-free, so exported
policies can be re-evaluated by lightweight consumers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .formulation import CcOpfProblem
from .stochastics import Germ, MultivariateBasis, build_germ, tensorize

__all__ = [
    "Policy",
    "PolicyError",
    "PolicyWarning",
    "ClosedFormUnavailable",
    "build_policy",
    "recover_germ",
    "coordinate_buses",
    "policy_in_demand_coordinates",
    "violation_probability_closed_form",
    "save_policy",
    "load_policy",
]

_RANK_RTOL = 1e-10
_RESIDUAL_TOL = 1e-8
_SUPPORT_SLACK = 1e-9


class PolicyError(ValueError):
    """Raised for inconsistent policy data or failed germ recovery."""


class PolicyWarning(UserWarning):
    """Non-fatal recovery diagnostics, e.g. out-of-support germ values."""


class ClosedFormUnavailable(PolicyError):
    """No closed-form probability exists; callers should fall back to sampling."""


@dataclass(frozen=True)
class Policy:
    """Affine control policy u(xi) = u0 + U psi(xi) over a fixed germ basis.

    The demand expansion (d0, D) that produced the policy travels with it so
    realized demands can be mapped back to germ values, and the affine map
    psi = a + b * xi is stored explicitly (b holds the diagonal).
    """

    bus_ids: tuple[int, ...]
    u0: np.ndarray
    U: np.ndarray
    basis: MultivariateBasis
    d0: np.ndarray
    D: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        n = len(self.bus_ids)
        L = self.basis.size
        u0 = np.asarray(self.u0, dtype=float)
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        d0 = np.asarray(self.d0, dtype=float)
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if u0.shape != (n,) or d0.shape != (n,):
            raise PolicyError(f"expected {n}-vectors for u0 and d0, got {u0.shape} and {d0.shape}")
        if U.shape != (n, L) or D.shape != (n, L):
            raise PolicyError(f"coefficient blocks must be {n}x{L}, got {U.shape} and {D.shape}")
        if a.shape != (L,) or b.shape != (L,):
            raise PolicyError(f"germ map must have {L} components, got {a.shape} and {b.shape}")
        for name, arr in (("u0", u0), ("U", U), ("d0", d0), ("D", D)):
            if not np.all(np.isfinite(arr)):
                raise PolicyError(f"{name} has non-finite entries")
        resid = np.abs(u0.sum() + d0.sum())
        resid = max(resid, float(np.max(np.abs(U.sum(axis=0) + D.sum(axis=0)), initial=0.0)))
        if resid > 1e-6:
            raise PolicyError(f"coefficients violate power balance by {resid:.3e}")
        object.__setattr__(self, "bus_ids", tuple(int(v) for v in self.bus_ids))
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "d0", d0)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_sources(self) -> int:
        return self.basis.size

    def bus_index(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(int(bus_id))
        except ValueError:
            raise PolicyError(f"unknown bus id {bus_id}") from None

    def coefficients(self) -> np.ndarray:
        """Joint (N, L+1) block [u0 | U], matching the solver's layout."""
        return np.column_stack([self.u0, self.U])

    def mean(self) -> np.ndarray:
        return self.u0.copy()

    def std(self) -> np.ndarray:
        """Per-bus standard deviation of the injected power."""
        return np.sqrt((self.U**2 * self.basis.gammas).sum(axis=1))

    def evaluate(self, xi) -> np.ndarray:
        """Control action at germ samples; (L,) -> (N,), (m, L) -> (m, N)."""
        xi = np.asarray(xi, dtype=float)
        psi = self.basis.evaluate_psi(xi)
        out = self.u0 + psi @ self.U.T
        return out[0] if xi.ndim == 1 else out

    def demand(self, xi) -> np.ndarray:
        """Demand realization at germ samples, same shape rules as evaluate."""
        xi = np.asarray(xi, dtype=float)
        psi = self.basis.evaluate_psi(xi)
        out = self.d0 + psi @ self.D.T
        return out[0] if xi.ndim == 1 else out


def build_policy(problem: CcOpfProblem, coeffs: np.ndarray) -> Policy:
    """Turn a solved coefficient block (N, L+1) into a Policy.

    Interior-point coefficients satisfy per-term power balance only to solver
    tolerance; the residual of each term is spread uniformly over the buses
    whose injections are actual decision variables, making balance exact.
    Buses pinned by coinciding bounds are left untouched.
    """
    grid = problem.grid
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    if coeffs.shape != (problem.n_bus, problem.n_terms):
        raise PolicyError(
            f"coefficient block {coeffs.shape} does not match "
            f"{problem.n_bus} buses and {problem.n_terms} terms")
    d_cols = problem.demand_columns()
    free = ~(np.isfinite(grid.u_min) & (grid.u_min == grid.u_max))
    fixed = coeffs.copy()
    residuals = coeffs.sum(axis=0) + d_cols.sum(axis=0)
    if free.any():
        fixed[free] -= residuals / free.sum()
    elif np.max(np.abs(residuals)) > 1e-6:
        raise PolicyError("all buses pinned but power balance fails; instance is inconsistent")
    a, b = problem.demand.basis.germ_map()
    return Policy(bus_ids=grid.bus_ids, u0=fixed[:, 0], U=fixed[:, 1:],
                  basis=problem.demand.basis, d0=d_cols[:, 0], D=d_cols[:, 1:],
                  a=a, b=b)


def recover_germ(policy: Policy, demand: np.ndarray,
                 residual_tol: float = _RESIDUAL_TOL) -> np.ndarray:
    """Germ realization consistent with an observed demand vector.

    Solves D diag(b) xi = demand - d0 - D a in the least-squares sense.  Rank
    deficiency (relative tolerance 1e-10) and residuals above ``residual_tol``
    raise; recovered values outside a germ's support only warn, since slightly
    off-model measurements should still produce a control action.
    """
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (policy.n_bus,):
        raise PolicyError(f"demand vector must have shape ({policy.n_bus},), got {demand.shape}")
    M = policy.D * policy.b
    rhs = demand - policy.d0 - policy.D @ policy.a
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    if s[0] == 0.0 or s[-1] <= _RANK_RTOL * s[0]:
        raise PolicyError(
            "demand columns are rank deficient; singular values "
            + np.array2string(s, precision=3))
    xi = vt.T @ ((u.T @ rhs) / s)
    residual = float(np.linalg.norm(M @ xi - rhs))
    if residual > residual_tol:
        raise PolicyError(
            f"demand is inconsistent with the uncertainty model (residual {residual:.3e})")
    for j, germ in enumerate(policy.basis.components):
        lo, hi = germ.support
        if xi[j] < lo - _SUPPORT_SLACK or xi[j] > hi + _SUPPORT_SLACK:
            warnings.warn(
                f"recovered germ {j} value {xi[j]:.6g} lies outside support "
                f"[{lo:.6g}, {hi:.6g}]", PolicyWarning, stacklevel=2)
    return xi


def coordinate_buses(policy: Policy) -> tuple[int, ...]:
    """One observation bus per source, chosen to maximize total leverage.

    The assignment maximizes the sum of |D| entries over distinct buses, so
    the selected square subsystem is as well conditioned as a row choice can
    make it.
    """
    weight = np.abs(policy.D.T)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    order = np.argsort(rows)
    return tuple(policy.bus_ids[c] for c in cols[order])


def policy_in_demand_coordinates(policy: Policy, buses=None) -> tuple[np.ndarray, np.ndarray]:
    """Express the policy as u = intercept + slope @ d[buses].

    ``buses`` selects one observed demand coordinate per source (defaults to
    ``coordinate_buses``).  The square map from germ values to those demands
    must be invertible; rank deficiency raises with the singular values.
    """
    if buses is None:
        buses = coordinate_buses(policy)
    rows = [policy.bus_index(bid) for bid in buses]
    if len(rows) != policy.n_sources:
        raise PolicyError(f"need {policy.n_sources} coordinate buses, got {len(rows)}")
    M = policy.D[rows, :]
    u, s, vt = np.linalg.svd(M)
    if s[0] == 0.0 or s[-1] <= _RANK_RTOL * s[0]:
        raise PolicyError(
            "selected demand coordinates do not determine the germ; singular values "
            + np.array2string(s, precision=3))
    slope = policy.U @ (vt.T @ np.diag(1.0 / s) @ u.T)
    intercept = policy.u0 - slope @ policy.d0[rows]
    return intercept, slope


def violation_probability_closed_form(policy: Policy, bus: int, bound: float) -> float:
    """Exact P(u_bus <= bound) for a single-source policy.

    The control at one bus is affine in the lone germ, so the probability is
    one germ CDF evaluation.  Policies with several sources have no closed
    form; ``ClosedFormUnavailable`` tells the caller to sample instead.
    """
    if policy.n_sources != 1:
        raise ClosedFormUnavailable(
            f"policy depends on {policy.n_sources} sources; use a Monte Carlo estimate")
    i = policy.bus_index(bus)
    slope = float(policy.U[i, 0] * policy.b[0])
    base = float(policy.u0[i] + policy.U[i, 0] * policy.a[0])
    bound = float(bound)
    if abs(slope) <= 1e-14 * max(1.0, abs(base), abs(bound)):
        return 1.0 if base <= bound else 0.0
    germ = policy.basis.components[0]
    p = float(germ.cdf((bound - base) / slope))
    return p if slope > 0.0 else 1.0 - p


def _germ_descriptor(germ: Germ) -> dict:
    if germ.kind == "custom":
        name = germ.params[0] if germ.params else None
        if name == "half_sine":
            return {"kind": "half_sine"}
        raise PolicyError(f"custom germ {name!r} has no named construction and cannot be exported")
    if germ.kind == "beta":
        a, b = germ.params
        return {"kind": "beta", "a": a, "b": b}
    if germ.kind == "gamma":
        (p,) = germ.params
        return {"kind": "gamma", "p": p}
    return {"kind": germ.kind}


def _germ_from_descriptor(data: dict) -> Germ:
    params = {k: v for k, v in data.items() if k != "kind"}
    return build_germ(data["kind"], **params)


def policy_to_dict(policy: Policy) -> dict:
    """JSON-ready form: coefficients, demand reference, germ descriptors."""
    return {
        "format": "ccopf-policy",
        "bus_ids": list(policy.bus_ids),
        "u0": policy.u0.tolist(),
        "U": policy.U.tolist(),
        "d0": policy.d0.tolist(),
        "D": policy.D.tolist(),
        "germs": [_germ_descriptor(g) for g in policy.basis.components],
        "germ_map": {"const": policy.a.tolist(), "slope": policy.b.tolist()},
    }


def policy_from_dict(data: dict) -> Policy:
    if data.get("format") != "ccopf-policy":
        raise PolicyError(f"not a policy document (format={data.get('format')!r})")
    try:
        basis = tensorize([_germ_from_descriptor(g) for g in data["germs"]])
        germ_map = data["germ_map"]
        return Policy(bus_ids=tuple(data["bus_ids"]),
                      u0=np.array(data["u0"], dtype=float),
                      U=np.array(data["U"], dtype=float),
                      d0=np.array(data["d0"], dtype=float),
                      D=np.array(data["D"], dtype=float),
                      a=np.array(germ_map["const"], dtype=float),
                      b=np.array(germ_map["slope"], dtype=float))
    except KeyError as exc:
        raise PolicyError(f"policy document is missing {exc}") from exc


def save_policy(policy: Policy, path) -> None:
    """Write a policy to a JSON file."""
    Path(path).write_text(json.dumps(policy_to_dict(policy), indent=2) + "\n")


def load_policy(path) -> Policy:
    """Read a policy back; inverse of save_policy."""
    return policy_from_dict(json.loads(Path(path).read_text()))
