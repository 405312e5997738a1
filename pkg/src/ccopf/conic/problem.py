"""Standard-form cone program container and its JSON interchange format.

A problem is  min c'x  s.t.  Ax = b,  s = h - Gx,  s in K,
where K is a product of nonnegative-orthant segments and second-order cones
laid out contiguously over the rows of G in the order of ``cones``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = ["Cone", "ConicProblem", "Solution", "ConicError"]

_KINDS = ("nonneg", "soc")


class ConicError(ValueError):
    """Raised for malformed cone programs."""


@dataclass(frozen=True)
class Cone:
    """One cone block: its kind and its number of rows."""

    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConicError(f"unknown cone kind {self.kind!r}")
        if self.dim < 1:
            raise ConicError(f"cone dimension must be positive, got {self.dim}")


def _as_matrix(mat, rows, cols, name):
    if sp.issparse(mat):
        mat = mat.tocsr()
    else:
        mat = np.asarray(mat, dtype=float)
        if mat.size == 0:
            mat = mat.reshape(rows, cols)
        if mat.ndim != 2:
            raise ConicError(f"{name} must be a matrix")
    if mat.shape != (rows, cols):
        raise ConicError(f"{name} has shape {mat.shape}, expected {(rows, cols)}")
    return mat


@dataclass(frozen=True)
class ConicProblem:
    """Immutable cone program.  Matrices may be dense arrays or CSR sparse."""

    c: np.ndarray
    A: object
    b: np.ndarray
    G: object
    h: np.ndarray
    cones: tuple[Cone, ...]
    var_names: tuple[str, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        h = np.asarray(self.h, dtype=float).ravel()
        n, p, m = c.size, b.size, h.size
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "A", _as_matrix(self.A, p, n, "A"))
        object.__setattr__(self, "G", _as_matrix(self.G, m, n, "G"))
        object.__setattr__(self, "cones", tuple(self.cones))
        total = sum(cone.dim for cone in self.cones)
        if total != m:
            raise ConicError(f"cone dimensions sum to {total}, but G has {m} rows")
        if self.var_names:
            names = tuple(str(v) for v in self.var_names)
            if len(names) != n:
                raise ConicError(f"{len(names)} variable names for {n} variables")
            object.__setattr__(self, "var_names", names)
        for arr, name in ((c, "c"), (b, "b"), (h, "h")):
            if not np.all(np.isfinite(arr)):
                raise ConicError(f"{name} has non-finite entries")

    @property
    def n_var(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.b.size

    @property
    def n_cone_rows(self) -> int:
        return self.h.size

    def cone_offsets(self) -> list[tuple[str, int, int]]:
        """(kind, start, dim) per cone block, in row order."""
        out, at = [], 0
        for cone in self.cones:
            out.append((cone.kind, at, cone.dim))
            at += cone.dim
        return out

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x)

    def to_json(self) -> str:
        """Serialize with matrices in coordinate-triplet form."""

        def triplets(mat):
            coo = sp.coo_matrix(mat)
            return {
                "shape": list(coo.shape),
                "rows": coo.row.tolist(),
                "cols": coo.col.tolist(),
                "vals": coo.data.tolist(),
            }

        payload = {
            "c": self.c.tolist(),
            "b": self.b.tolist(),
            "h": self.h.tolist(),
            "A": triplets(self.A),
            "G": triplets(self.G),
            "cones": [[cone.kind, cone.dim] for cone in self.cones],
            "var_names": list(self.var_names),
        }
        return json.dumps(payload)

    @staticmethod
    def from_json(source) -> "ConicProblem":
        if isinstance(source, (str, Path)) and Path(str(source)).exists():
            text = Path(source).read_text()
        else:
            text = str(source)
        data = json.loads(text)

        def build(entry, sparse):
            shape = tuple(entry["shape"])
            coo = sp.coo_matrix(
                (entry["vals"], (entry["rows"], entry["cols"])), shape=shape
            )
            return coo.tocsr() if sparse else coo.toarray()

        n = len(data["c"])
        sparse = n > 1000
        return ConicProblem(
            c=np.array(data["c"]),
            A=build(data["A"], sparse),
            b=np.array(data["b"]),
            G=build(data["G"], sparse),
            h=np.array(data["h"]),
            cones=tuple(Cone(k, d) for k, d in data["cones"]),
            var_names=tuple(data.get("var_names", ())),
        )

    def dump(self, path) -> None:
        Path(path).write_text(self.to_json())


@dataclass(frozen=True)
class Solution:
    """Solver output.

    ``status`` is one of optimal, infeasible, unbounded, max_iter.  On
    optimal, ``kkt_residuals`` = (primal, dual, gap) report the achieved
    accuracy, normally at the solve tolerance and never more than a small
    factor above it.  On infeasible/unbounded, ``certificate`` holds the
    normalized ray ((y, z) or (x, s) stacked respectively) proving it.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str
    objective: float
    kkt_residuals: tuple[float, float, float]
    iterations: int
    certificate: np.ndarray | None = None
    info: dict = field(default_factory=dict)
