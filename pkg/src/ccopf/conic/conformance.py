"""Random cone programs whose optimum is certified by construction.

Every instance carries a primal-dual pair built to satisfy the optimality
conditions exactly, with all feasibility and complementarity margins O(1),
so a solver can be checked against a known objective without trusting any
other solver.  The construction:

1. Sample the cone layout, a full-row-rank equality matrix A, and the
   intended optimizer x*.
2. Steer the leading row of each cone block of G so that g = -G dx lies
   deep inside the cone for a unit null-space direction dx; then
   x* + dx is strictly feasible whatever slack the next steps choose.
3. Choose each block's state at the optimum: deeply active (zero slack,
   interior multiplier), facet active (slack and multiplier on opposite
   rays of the cone boundary), or inactive (interior slack, zero
   multiplier).  States are drawn so the active multiplier coordinates
   match the free primal coordinates exactly, which makes both the
   optimizer and the multiplier unique.
4. Build the dual deep-interior pair first and read the cost off it, so
   strict dual feasibility holds by construction.
5. Solve for the active multipliers by least squares steered toward
   interior targets, retrying until every margin clears a fixed floor.

Complementary supports are disjoint per block, so the duality gap at
(x*, y*, z*) is exactly zero and the reference objective is c'x*.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lstsq, null_space

from .problem import Cone, ConicProblem

__all__ = ["ReferenceInstance", "random_instance"]


@dataclass(frozen=True)
class ReferenceInstance:
    """A cone program with its certified optimum attached."""

    problem: ConicProblem
    objective: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray


def _cone_layout(rng, n):
    """Blocks covering at least n + 1 rows, mixing orthant and SOC."""
    cones, total = [], 0
    while total < n + 1:
        if rng.random() < 0.35:
            cones.append(("nonneg", 1))
        else:
            cones.append(("soc", int(rng.integers(2, 6))))
        total += cones[-1][1]
    return cones, total


def _interior_point(rng, dim):
    """Random point at least distance 1 from the cone boundary."""
    if dim == 1:
        return np.array([1.0 + rng.random()])
    u = rng.normal(size=dim - 1)
    u *= rng.random() / np.linalg.norm(u)
    return np.concatenate([[1.0 + rng.random()], u])


def _pick_states(rng, cones, target):
    """Assign block states with active multiplier coordinates == target."""
    states = ["off"] * len(cones)

    def dofs():
        return sum(dim if st == "deep" else 1 if st == "facet" else 0
                   for (_, dim), st in zip(cones, states))

    for i in rng.permutation(len(cones)):
        kind, dim = cones[i]
        room = target - dofs()
        if room <= 0:
            break
        if kind == "nonneg":
            states[i] = "deep"
        elif dim <= room and rng.random() < 0.5:
            states[i] = "deep"
        else:
            states[i] = "facet"
    while dofs() < target:
        off = [i for i, st in enumerate(states) if st == "off"]
        if not off:
            break
        i = off[int(rng.integers(len(off)))]
        states[i] = "deep" if cones[i][0] == "nonneg" else "facet"
    return states if dofs() == target else None


def random_instance(rng: np.random.Generator) -> ReferenceInstance:
    """Draw one solvable instance with a certified optimal objective."""
    for _ in range(200):
        inst = _try_instance(rng)
        if inst is not None:
            return inst
    raise RuntimeError("instance construction exhausted its retries")


def _try_instance(rng):
    n = int(rng.integers(4, 12))
    p = int(rng.integers(1, n - 2))
    cones, m = _cone_layout(rng, n)

    A = rng.normal(size=(p, n))
    if np.linalg.matrix_rank(A) < p:
        return None
    x_star = rng.normal(size=n)

    basis = null_space(A)
    dx = basis @ rng.normal(size=basis.shape[1])
    dx /= np.linalg.norm(dx)

    # Strict primal feasibility: make g = -G dx deep interior per block,
    # so x* + dx keeps margin >= 1 regardless of the slack chosen below.
    G = rng.normal(size=(m, n))
    g = -G @ dx
    at = 0
    for kind, dim in cones:
        gb = g[at:at + dim]
        need = (np.linalg.norm(gb[1:]) if dim > 1 else 0.0) + 1.0
        if gb[0] < need:
            # raising G[at] along -dx raises g[at] by the same amount
            G[at] -= (need - gb[0]) * dx
            g[at] = need
        at += dim

    states = _pick_states(rng, cones, n - p)
    if states is None:
        return None

    # Strict dual feasibility: pick the interior pair first, then set the
    # cost to balance it exactly.
    zhat = np.empty(m)
    at = 0
    for kind, dim in cones:
        zhat[at:at + dim] = _interior_point(rng, dim)
        at += dim
    y_tilde = rng.normal(size=p)
    w = A.T @ y_tilde + G.T @ zhat
    c = -w

    # Active multipliers solve A'y + G_act' z_act = w.  Solving for the
    # deviation from interior targets steers the least-squares answer
    # toward points with usable margins.
    cols, targets, layout, facets = [A.T], [], [], {}
    at = 0
    for (kind, dim), st in zip(cones, states):
        if st == "deep":
            cols.append(G[at:at + dim].T)
            goal = np.zeros(dim)
            goal[0] = 1.5
            targets.append(goal)
            layout.append(("deep", at, dim))
        elif st == "facet":
            v = rng.normal(size=dim - 1)
            v /= np.linalg.norm(v)
            facets[at] = v
            cols.append((G[at:at + dim].T @ np.concatenate([[1.0], -v]))[:, None])
            targets.append(np.array([1.0]))
            layout.append(("facet", at, dim))
        at += dim
    M = np.hstack(cols)
    goal = np.concatenate(targets) if targets else np.zeros(0)
    r = w - A.T @ y_tilde - M[:, p:] @ goal
    shift, *_ = lstsq(M, r)
    if np.linalg.norm(M @ shift - r) > 1e-9 * max(1.0, np.linalg.norm(r)):
        return None
    y_star = y_tilde + shift[:p]
    coef = goal + shift[p:]

    z_star = np.zeros(m)
    k = 0
    for st, at, dim in layout:
        if st == "deep":
            zb = coef[k:k + dim]
            k += dim
            margin = zb[0] - (np.linalg.norm(zb[1:]) if dim > 1 else 0.0)
            if margin < 0.1:
                return None
            z_star[at:at + dim] = zb
        else:
            rho = coef[k]
            k += 1
            if rho < 0.1:
                return None
            z_star[at:at + dim] = rho * np.concatenate([[1.0], -facets[at]])

    s_star = np.zeros(m)
    at = 0
    for (kind, dim), st in zip(cones, states):
        if st == "off":
            s_star[at:at + dim] = _interior_point(rng, dim)
        elif st == "facet":
            rho = 0.5 + 1.5 * rng.random()
            s_star[at:at + dim] = rho * np.concatenate([[1.0], facets[at]])
        at += dim

    problem = ConicProblem(
        c=c, A=A, b=A @ x_star, G=G, h=G @ x_star + s_star,
        cones=tuple(Cone(kind, dim) for kind, dim in cones),
    )
    if abs(s_star @ z_star) > 1e-9:
        return None
    return ReferenceInstance(problem=problem, objective=float(c @ x_star),
                             x=x_star, y=y_star, z=z_star, s=s_star)
