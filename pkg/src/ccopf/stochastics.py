"""Scalar germs, degree-one orthogonal polynomials, and affine chaos expansions.

Every uncertain quantity in this package is written as an affine combination

    x = x0 + sum_l  x_l * psi_l(xi_l)

where each ``psi_l`` is the degree-one orthogonal polynomial of one scalar germ
``xi_l`` and the germs are mutually independent.  Affine expansions are exact
for affine functions of the germs, so no truncation error enters anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special as sp

__all__ = [
    "Germ",
    "MultivariateBasis",
    "AffinePce",
    "StochasticsError",
    "build_germ",
    "tensorize",
    "inner_product",
    "sample_germ",
    "moments",
]

DEFAULT_QUAD_NODES = 64
_CUSTOM_TABLE_SIZE = 4096


class StochasticsError(ValueError):
    """Raised for invalid germ definitions or inconsistent expansions."""


def _half_sine_density(x):
    return 0.5 * math.pi * np.sin(math.pi * np.clip(x, 0.0, 1.0))


def _half_sine_cdf(x):
    return 0.5 * (1.0 - np.cos(math.pi * np.clip(x, 0.0, 1.0)))


@dataclass(frozen=True)
class Germ:
    """One scalar germ together with its degree-one orthogonal polynomial.

    The polynomial is stored in affine form ``psi1(xi) = psi1_const +
    psi1_slope * xi``.  ``gamma1 = <psi1, psi1>`` is the squared norm under
    the germ's probability measure; the constant polynomial psi0 = 1 always
    has norm one.
    """

    kind: str
    params: tuple = ()
    psi1_const: float = 0.0
    psi1_slope: float = 1.0
    gamma1: float = 1.0
    mean: float = 0.0
    var: float = 1.0
    support: tuple[float, float] = (-math.inf, math.inf)
    # Private callables; None means "derive from kind".
    _density: Callable | None = field(default=None, repr=False, compare=False)
    _cdf: Callable | None = field(default=None, repr=False, compare=False)
    _icdf_table: tuple | None = field(default=None, repr=False, compare=False)

    # -- polynomial -------------------------------------------------------

    def psi1(self, xi):
        """Evaluate the degree-one basis polynomial at germ samples."""
        return self.psi1_const + self.psi1_slope * np.asarray(xi, dtype=float)

    # -- probability ------------------------------------------------------

    def cdf(self, x):
        """Cumulative distribution of the germ itself."""
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian_standard":
            return sp.ndtr(x)
        if self.kind == "uniform_01":
            return np.clip(x, 0.0, 1.0)
        if self.kind == "beta":
            a, b = self.params
            return sp.betainc(a, b, np.clip(x, 0.0, 1.0))
        if self.kind == "gamma":
            (p,) = self.params
            return sp.gammainc(p, np.maximum(x, 0.0))
        if self._cdf is not None:
            return np.asarray(self._cdf(x), dtype=float)
        lo, hi = self.support
        grid, cum = self._icdf_table
        return np.interp(x, grid, cum, left=0.0, right=1.0)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian_standard":
            return rng.standard_normal(size)
        if self.kind == "uniform_01":
            return rng.random(size)
        if self.kind == "beta":
            a, b = self.params
            return rng.beta(a, b, size)
        if self.kind == "gamma":
            (p,) = self.params
            return rng.gamma(p, 1.0, size)
        # Custom germ: inverse-CDF lookup on a fixed table, linear interpolation.
        grid, cum = self._icdf_table
        u = rng.random(size)
        return np.interp(u, cum, grid)

    def quadrature(self, n: int = DEFAULT_QUAD_NODES):
        """Gauss nodes and weights for the germ's probability measure.

        Weights sum to one; polynomials up to degree 2n-1 integrate exactly
        for the canonical families.
        """
        if self.kind == "gaussian_standard":
            x, w = sp.roots_hermitenorm(n)
            return x, w / math.sqrt(2.0 * math.pi)
        if self.kind == "uniform_01":
            x, w = np.polynomial.legendre.leggauss(n)
            return 0.5 * (x + 1.0), 0.5 * w
        if self.kind == "beta":
            a, b = self.params
            x, w = sp.roots_jacobi(n, b - 1.0, a - 1.0)
            total = 2.0 ** (a + b - 1.0) * sp.beta(a, b)
            return 0.5 * (x + 1.0), w / total
        if self.kind == "gamma":
            (p,) = self.params
            x, w = sp.roots_genlaguerre(n, p - 1.0)
            return x, w / sp.gamma(p)
        lo, hi = self.support
        x, w = np.polynomial.legendre.leggauss(n)
        nodes = 0.5 * (hi - lo) * (x + 1.0) + lo
        weights = 0.5 * (hi - lo) * w * self._density(nodes)
        return nodes, weights


def _custom_icdf_table(density, lo, hi, size=_CUSTOM_TABLE_SIZE):
    """Cumulative table for sampling and CDF evaluation of a custom germ.

    Composite Gauss-Legendre on each of ``size`` panels; the cumulative sums
    are renormalized so the last entry is exactly one.
    """
    edges = np.linspace(lo, hi, size + 1)
    gx, gw = np.polynomial.legendre.leggauss(8)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = mid[:, None] + half[:, None] * gx[None, :]
    panel = (half[:, None] * gw[None, :] * density(nodes)).sum(axis=1)
    cum = np.concatenate([[0.0], np.cumsum(panel)])
    if cum[-1] <= 0.0:
        raise StochasticsError("custom density integrates to a non-positive value")
    cum /= cum[-1]
    return edges, cum


def build_germ(kind: str, **params) -> Germ:
    """Construct a germ by family name.

    Families: ``gaussian_standard``, ``uniform_01``, ``beta`` (a, b on [0, 1]),
    ``gamma`` (shape p, weight x**(p-1)*exp(-x)), ``half_sine`` (density
    pi/2*sin(pi*x) on [0, 1]), and ``custom`` (density callable plus support;
    mean/variance integrated numerically unless given).
    """
    if kind == "gaussian_standard":
        return Germ(kind, psi1_const=0.0, psi1_slope=1.0, gamma1=1.0,
                    mean=0.0, var=1.0, support=(-math.inf, math.inf))
    if kind == "uniform_01":
        # Shifted Legendre, degree one: 2*xi - 1.
        return Germ(kind, psi1_const=-1.0, psi1_slope=2.0, gamma1=1.0 / 3.0,
                    mean=0.5, var=1.0 / 12.0, support=(0.0, 1.0))
    if kind == "beta":
        a = float(params.pop("a"))
        b = float(params.pop("b"))
        if params or a <= 0.0 or b <= 0.0:
            raise StochasticsError(f"invalid beta germ parameters: a={a}, b={b}, extra={params}")
        # Jacobi, degree one, mapped to [0, 1]: (a+b)*xi - a.
        mean = a / (a + b)
        var = a * b / ((a + b) ** 2 * (a + b + 1.0))
        gamma1 = a * b / (a + b + 1.0)
        return Germ(kind, params=(a, b), psi1_const=-a, psi1_slope=a + b,
                    gamma1=gamma1, mean=mean, var=var, support=(0.0, 1.0))
    if kind == "gamma":
        p = float(params.pop("p"))
        if params or p <= 0.0:
            raise StochasticsError(f"invalid gamma germ parameter: p={p}, extra={params}")
        # Generalized Laguerre, degree one: p - xi.
        return Germ(kind, params=(p,), psi1_const=p, psi1_slope=-1.0,
                    gamma1=p, mean=p, var=p, support=(0.0, math.inf))
    if kind == "half_sine":
        var = 0.25 - 2.0 / math.pi**2
        table = _custom_icdf_table(_half_sine_density, 0.0, 1.0)
        return Germ("custom", params=("half_sine",), psi1_const=-0.5,
                    psi1_slope=1.0, gamma1=var, mean=0.5, var=var,
                    support=(0.0, 1.0), _density=_half_sine_density,
                    _cdf=_half_sine_cdf, _icdf_table=table)
    if kind == "custom":
        density = params.pop("density")
        lo, hi = params.pop("support")
        mean = params.pop("mean", None)
        var = params.pop("var", None)
        cdf = params.pop("cdf", None)
        name = params.pop("name", "custom")
        if params:
            raise StochasticsError(f"unknown custom germ options: {sorted(params)}")
        if not math.isfinite(lo) or not math.isfinite(hi) or hi <= lo:
            raise StochasticsError(f"custom germ needs a bounded support, got ({lo}, {hi})")
        x, w = np.polynomial.legendre.leggauss(256)
        nodes = 0.5 * (hi - lo) * (x + 1.0) + lo
        weights = 0.5 * (hi - lo) * w * np.asarray(density(nodes), dtype=float)
        total = weights.sum()
        if abs(total - 1.0) > 1e-6:
            raise StochasticsError(f"custom density mass is {total:.6g}, expected 1 within 1e-6")
        if mean is None:
            mean = float(weights @ nodes) / total
        if var is None:
            var = float(weights @ (nodes - mean) ** 2) / total
        if var <= 0.0:
            raise StochasticsError("custom germ has non-positive variance")
        table = _custom_icdf_table(density, lo, hi)
        return Germ("custom", params=(name,), psi1_const=-float(mean), psi1_slope=1.0,
                    gamma1=float(var), mean=float(mean), var=float(var),
                    support=(float(lo), float(hi)), _density=density, _cdf=cdf,
                    _icdf_table=table)
    raise StochasticsError(f"unknown germ kind: {kind!r}")


@dataclass(frozen=True)
class MultivariateBasis:
    """Tensorized affine basis {1, psi_1(xi_1), ..., psi_L(xi_L)}.

    One degree-one polynomial per independent germ; L equals the number of
    germs.  ``norms`` holds the squared norms (1, gamma_1, ..., gamma_L).
    """

    components: tuple[Germ, ...]

    @property
    def size(self) -> int:
        """Number of non-constant basis polynomials (= number of germs)."""
        return len(self.components)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([g.gamma1 for g in self.components])

    @property
    def norms(self) -> np.ndarray:
        return np.concatenate([[1.0], self.gammas])

    def germ_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Affine map psi = a + B xi with B diagonal (returned as a vector)."""
        a = np.array([g.psi1_const for g in self.components])
        b = np.array([g.psi1_slope for g in self.components])
        return a, b

    def evaluate_psi(self, xi: np.ndarray) -> np.ndarray:
        """Degree-one polynomial values, one column per germ.

        ``xi`` has shape (m, L) or (L,); the constant polynomial is implicit.
        """
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[1] != self.size:
            raise StochasticsError(
                f"germ sample has {xi.shape[1]} columns, basis has {self.size} germs")
        a, b = self.germ_map()
        return a + b * xi

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((count, self.size))
        for j, germ in enumerate(self.components):
            out[:, j] = germ.sample(rng, count)
        return out

    def gram(self, n_nodes: int = DEFAULT_QUAD_NODES) -> np.ndarray:
        """Numerically integrated Gram matrix of {1, psi_1, ..., psi_L}.

        Independence factorizes every cross moment, so each entry reduces to
        per-germ Gauss quadrature; the result should be diag(1, gamma_1, ...).
        """
        L = self.size
        first = np.empty(L)   # E[psi_l]
        second = np.empty(L)  # E[psi_l^2]
        for j, germ in enumerate(self.components):
            x, w = germ.quadrature(n_nodes)
            vals = germ.psi1(x)
            first[j] = w @ vals
            second[j] = w @ vals**2
        gram = np.outer(np.concatenate([[1.0], first]), np.concatenate([[1.0], first]))
        gram[np.arange(1, L + 1), np.arange(1, L + 1)] = second
        return gram


def tensorize(components: Sequence[Germ]) -> MultivariateBasis:
    """Bundle independent germs into one multivariate affine basis."""
    comps = tuple(components)
    if not comps:
        raise StochasticsError("cannot tensorize an empty list of germs")
    if not all(isinstance(g, Germ) for g in comps):
        raise StochasticsError("tensorize expects Germ instances")
    return MultivariateBasis(comps)


@dataclass(frozen=True)
class AffinePce:
    """Affine chaos expansion x = x0 + X psi over a multivariate basis.

    ``x0`` has shape (n,), ``coeffs`` has shape (n, L).
    """

    x0: np.ndarray
    coeffs: np.ndarray
    basis: MultivariateBasis

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if coeffs.shape != (x0.shape[0], self.basis.size):
            raise StochasticsError(
                f"coefficient block {coeffs.shape} does not match "
                f"dimension {x0.shape[0]} and basis size {self.basis.size}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    def mean(self) -> np.ndarray:
        return self.x0.copy()

    def cov(self) -> np.ndarray:
        return (self.coeffs * self.basis.gammas) @ self.coeffs.T

    def evaluate(self, xi: np.ndarray) -> np.ndarray:
        """Realize the expansion at germ samples; shape (m, n)."""
        psi = self.basis.evaluate_psi(xi)
        return self.x0 + psi @ self.coeffs.T


def moments(pce: AffinePce) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance matrix of an affine expansion."""
    return pce.mean(), pce.cov()


def inner_product(f: Callable, g: Callable, germ: Germ,
                  n_nodes: int = DEFAULT_QUAD_NODES) -> float:
    """Gauss-quadrature inner product <f, g> under one germ's measure."""
    x, w = germ.quadrature(n_nodes)
    return float(w @ (np.asarray(f(x), dtype=float) * np.asarray(g(x), dtype=float)))


def sample_germ(basis: MultivariateBasis, count: int, seed) -> np.ndarray:
    """Draw (count, L) germ samples; ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return basis.sample(count, rng)
