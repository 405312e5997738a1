"""Network model: case loading, validation, and injection-to-flow sensitivities.

Sign conventions: bus injections are net generation, so demand entries are
negative for consumption.  Lines are oriented from ``from_bus`` to ``to_bus``;
a positive flow runs in that direction.  All quantities are per-unit.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Grid", "Ptdf", "GridError", "load_case", "load_matpower", "compute_ptdf"]


class GridError(ValueError):
    """Raised for malformed or physically inconsistent case data."""


@dataclass(frozen=True)
class Grid:
    """Static network data for a DC dispatch problem.

    Arrays are indexed by internal bus position 0..n_bus-1; ``bus_ids`` maps
    positions back to the case file's bus numbers.  Non-generator buses carry
    u_min = u_max = 0.
    """

    bus_ids: tuple[int, ...]
    from_bus: np.ndarray
    to_bus: np.ndarray
    reactance: np.ndarray
    line_lo: np.ndarray
    line_hi: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    cost_h: np.ndarray
    cost_H_diag: np.ndarray
    nominal_demand: np.ndarray
    slack_bus: int
    name: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_line(self) -> int:
        return len(self.from_bus)

    @property
    def is_generator(self) -> np.ndarray:
        return (self.u_min != 0.0) | (self.u_max != 0.0)

    @property
    def generator_buses(self) -> np.ndarray:
        return np.flatnonzero(self.is_generator)

    def bus_index(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise GridError(f"unknown bus id {bus_id}") from None


def _as_float(value, default=None):
    if value is None:
        return default
    return float(value)


def _bound(value, sign):
    # None in a case file means unbounded on that side.
    if value is None:
        return sign * np.inf
    return float(value)


def load_case(source) -> Grid:
    """Load a case from JSON (path, JSON text, or an already-parsed dict).

    Schema: ``buses`` [{id, demand_nominal}], ``lines`` [{from, to, reactance,
    limit}], ``generators`` [{bus, u_min, u_max, cost_h, cost_H_diag}], and an
    optional ``slack_bus``.  A scalar line limit is symmetric; null means
    unlimited.  Falls back to the MATPOWER reader for ``.m`` paths.
    """
    name = ""
    if isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        if path.suffix == ".m":
            return load_matpower(path)
        if path.exists():
            text = path.read_text()
            name = path.stem
        else:
            text = str(source)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GridError(f"could not parse case JSON: {exc}") from exc
    return _grid_from_dict(data, name=data.get("name", name))


def _grid_from_dict(data, name="") -> Grid:
    try:
        buses = data["buses"]
        lines = data["lines"]
        generators = data["generators"]
    except KeyError as exc:
        raise GridError(f"case is missing required section {exc}") from exc

    bus_ids = [int(b["id"]) for b in buses]
    if len(set(bus_ids)) != len(bus_ids):
        raise GridError("duplicate bus ids in case")
    index = {bid: i for i, bid in enumerate(bus_ids)}
    n = len(bus_ids)

    demand = np.zeros(n)
    for b in buses:
        demand[index[int(b["id"])]] = _as_float(b.get("demand_nominal"), 0.0)

    n_l = len(lines)
    from_bus = np.zeros(n_l, dtype=int)
    to_bus = np.zeros(n_l, dtype=int)
    reactance = np.zeros(n_l)
    line_lo = np.full(n_l, -np.inf)
    line_hi = np.full(n_l, np.inf)
    for k, ln in enumerate(lines):
        for end in ("from", "to"):
            if int(ln[end]) not in index:
                raise GridError(f"line {k} references unknown bus {ln[end]}")
        from_bus[k] = index[int(ln["from"])]
        to_bus[k] = index[int(ln["to"])]
        reactance[k] = float(ln["reactance"])
        limit = ln.get("limit")
        if limit is None:
            continue
        if isinstance(limit, (list, tuple)):
            line_lo[k] = _bound(limit[0], -1)
            line_hi[k] = _bound(limit[1], +1)
        else:
            line_hi[k] = float(limit)
            line_lo[k] = -float(limit)

    u_min = np.zeros(n)
    u_max = np.zeros(n)
    cost_h = np.zeros(n)
    cost_H = np.zeros(n)
    seen = set()
    for g in generators:
        bid = int(g["bus"])
        if bid not in index:
            raise GridError(f"generator references unknown bus {bid}")
        if bid in seen:
            raise GridError(f"more than one generator at bus {bid}; aggregate them first")
        seen.add(bid)
        i = index[bid]
        u_min[i] = _bound(g.get("u_min"), -1)
        u_max[i] = _bound(g.get("u_max"), +1)
        cost_h[i] = _as_float(g.get("cost_h"), 0.0)
        cost_H[i] = _as_float(g.get("cost_H_diag"), 0.0)

    slack = data.get("slack_bus")
    if slack is not None:
        if int(slack) not in index:
            raise GridError(f"slack bus {slack} is not a bus of the case")
        slack = index[int(slack)]
    else:
        gens = sorted(seen)
        if not gens:
            raise GridError("case has no generators")
        slack = index[gens[0]]

    grid = Grid(
        bus_ids=tuple(bus_ids),
        from_bus=from_bus,
        to_bus=to_bus,
        reactance=reactance,
        line_lo=line_lo,
        line_hi=line_hi,
        u_min=u_min,
        u_max=u_max,
        cost_h=cost_h,
        cost_H_diag=cost_H,
        nominal_demand=demand,
        slack_bus=int(slack),
        name=str(name),
    )
    validate_grid(grid)
    return grid


_MP_MATRIX = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_MP_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([0-9.eE+-]+)\s*;")


def _matpower_tables(text: str) -> tuple[dict, float]:
    tables = {}
    for m in _MP_MATRIX.finditer(text):
        rows = []
        for line in m.group(2).splitlines():
            line = line.split("%")[0].strip().rstrip(";")
            if not line:
                continue
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        if rows:
            width = max(len(r) for r in rows)
            tables[m.group(1)] = np.array([r + [0.0] * (width - len(r)) for r in rows])
    base = 100.0
    for m in _MP_SCALAR.finditer(text):
        if m.group(1) == "baseMVA":
            base = float(m.group(2))
    return tables, base


def load_matpower(path) -> Grid:
    """Read the bus/branch/gen/gencost subset of a MATPOWER case file.

    Only what the DC model needs is interpreted: Pd, branch reactance and
    RATE_A (0 meaning unlimited), generator Pmin/Pmax, and polynomial costs up
    to degree two.  Costs are converted so they apply to per-unit injections.
    Out-of-service branches and generators are skipped.
    """
    path = Path(path)
    tables, base = _matpower_tables(path.read_text())
    for req in ("bus", "branch", "gen"):
        if req not in tables:
            raise GridError(f"{path.name} has no mpc.{req} table")
    bus = tables["bus"]
    branch = tables["branch"]
    gen = tables["gen"]
    gencost = tables.get("gencost")

    bus_ids = [int(r[0]) for r in bus]
    index = {bid: i for i, bid in enumerate(bus_ids)}
    n = len(bus_ids)
    demand = np.array([-r[2] / base for r in bus])

    rows = [r for r in branch if len(r) < 11 or r[10] != 0.0]
    from_bus = np.array([index[int(r[0])] for r in rows], dtype=int)
    to_bus = np.array([index[int(r[1])] for r in rows], dtype=int)
    reactance = np.array([r[3] for r in rows])
    rate = np.array([r[5] if len(r) > 5 else 0.0 for r in rows]) / base
    line_hi = np.where(rate > 0.0, rate, np.inf)
    line_lo = -line_hi

    u_min = np.zeros(n)
    u_max = np.zeros(n)
    cost_h = np.zeros(n)
    cost_H = np.zeros(n)
    seen = set()
    for k, r in enumerate(gen):
        if len(r) > 7 and r[7] == 0.0:
            continue
        bid = int(r[0])
        if bid in seen:
            raise GridError(f"more than one in-service generator at bus {bid}")
        seen.add(bid)
        i = index[bid]
        u_max[i] = r[8] / base
        u_min[i] = r[9] / base
        if gencost is not None and k < len(gencost):
            c = gencost[k]
            if int(c[0]) != 2:
                raise GridError(f"generator {k}: only polynomial cost model 2 is supported")
            ncost = int(c[3])
            coeffs = c[4:4 + ncost]
            c2 = coeffs[-3] if ncost >= 3 else 0.0
            c1 = coeffs[-2] if ncost >= 2 else 0.0
            cost_H[i] = 2.0 * c2 * base * base
            cost_h[i] = c1 * base

    slack_rows = [i for i, r in enumerate(bus) if int(r[1]) == 3]
    if slack_rows:
        slack = slack_rows[0]
    else:
        slack = index[min(seen)] if seen else 0

    grid = Grid(
        bus_ids=tuple(bus_ids),
        from_bus=from_bus,
        to_bus=to_bus,
        reactance=reactance,
        line_lo=line_lo,
        line_hi=line_hi,
        u_min=u_min,
        u_max=u_max,
        cost_h=cost_h,
        cost_H_diag=cost_H,
        nominal_demand=demand,
        slack_bus=int(slack),
        name=path.stem,
    )
    validate_grid(grid)
    return grid


def validate_grid(grid: Grid) -> None:
    """Check structural invariants; raises GridError naming the offender."""
    n = grid.n_bus
    if n == 0:
        raise GridError("case has no buses")
    for k in range(grid.n_line):
        if grid.reactance[k] <= 0.0:
            raise GridError(f"line {k} has non-positive reactance {grid.reactance[k]}")
        if grid.from_bus[k] == grid.to_bus[k]:
            raise GridError(f"line {k} connects bus {grid.from_bus[k]} to itself")
    bad = np.flatnonzero(grid.u_min > grid.u_max)
    if bad.size:
        raise GridError(f"bus {grid.bus_ids[bad[0]]}: u_min exceeds u_max")
    bad = np.flatnonzero(grid.line_lo > grid.line_hi)
    if bad.size:
        raise GridError(f"line {bad[0]}: lower flow limit exceeds upper")
    if not (0 <= grid.slack_bus < n):
        raise GridError(f"slack bus index {grid.slack_bus} out of range")
    # Connectivity via breadth-first search over the line list.
    adjacency = [[] for _ in range(n)]
    for f, t in zip(grid.from_bus, grid.to_bus):
        adjacency[f].append(t)
        adjacency[t].append(f)
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        for nb in adjacency[stack.pop()]:
            if not seen[nb]:
                seen[nb] = True
                stack.append(nb)
    if not seen.all():
        missing = grid.bus_ids[int(np.flatnonzero(~seen)[0])]
        raise GridError(f"network is not connected: bus {missing} is unreachable")


@dataclass(frozen=True)
class Ptdf:
    """Injection-to-line-flow sensitivities.

    The stored matrix is centred so each row sums to zero: a uniform
    injection shift moves no flow, and the matrix is identical for every
    slack choice.  On balanced injections it agrees with the classical
    slack-referenced construction it is derived from.
    """

    matrix: np.ndarray
    slack_bus: int

    def flows(self, injections: np.ndarray) -> np.ndarray:
        """Line flows for one injection vector or a (m, n_bus) batch."""
        return np.asarray(injections, dtype=float) @ self.matrix.T


def compute_ptdf(grid: Grid, slack_bus: int | None = None) -> Ptdf:
    """Build the PTDF from the reduced nodal susceptance matrix.

    The slack row/column of the susceptance matrix is deleted, the remainder
    inverted, and the result pre-multiplied by the branch
    susceptance-incidence map; the slack column is zero by construction and
    the rows are then centred (see Ptdf).
    """
    if slack_bus is None:
        slack_bus = grid.slack_bus
    n, n_l = grid.n_bus, grid.n_line
    if not (0 <= slack_bus < n):
        raise GridError(f"slack bus index {slack_bus} out of range")

    b = 1.0 / grid.reactance
    incidence = np.zeros((n_l, n))
    incidence[np.arange(n_l), grid.from_bus] += 1.0
    incidence[np.arange(n_l), grid.to_bus] -= 1.0
    bf = incidence * b[:, None]          # branch susceptance-incidence map
    bbus = incidence.T @ bf

    keep = [i for i in range(n) if i != slack_bus]
    reduced = bbus[np.ix_(keep, keep)]
    try:
        inv = np.linalg.inv(reduced)
    except np.linalg.LinAlgError as exc:
        raise GridError("susceptance matrix is singular; is the network connected?") from exc

    phi = np.zeros((n_l, n))
    phi[:, keep] = bf[:, keep] @ inv
    phi -= phi.mean(axis=1, keepdims=True)
    return Ptdf(matrix=phi, slack_bus=int(slack_bus))
