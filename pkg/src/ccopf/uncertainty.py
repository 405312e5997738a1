"""Uncertain demand assembly: per-source declarations to a joint affine expansion.

Each source is one independent scalar random variable with a participation
pattern over buses.  Assembling a list of sources yields the expansion
d = d0 + D @ psi with one basis column per source, so means, covariances,
and samples of the full demand vector come from the expansion alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Grid, GridError
from .stochastics import AffinePce, Germ, build_germ, tensorize

__all__ = [
    "UncertaintySource",
    "DemandPce",
    "UncertaintyError",
    "assemble_demand",
    "gaussian_pm15_spec",
    "beta_pm15_spec",
    "source_from_spec",
    "load_uncertainty",
]


class UncertaintyError(ValueError):
    """Raised for invalid source declarations."""


@dataclass(frozen=True)
class UncertaintySource:
    """One independent scalar uncertainty and its footprint on the buses.

    ``pattern`` maps a unit fluctuation of the source to bus injections;
    ``offset`` is this source's contribution to the mean demand on top of
    the grid's nominal vector.  ``coeff1`` is the degree-one expansion
    coefficient of the scalar source variable in its own germ basis, so the
    demand-expansion column for this source is ``coeff1 * pattern``.
    """

    id: str
    germ: Germ
    coeff1: float
    pattern: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        pattern = np.asarray(self.pattern, dtype=float)
        offset = np.asarray(self.offset, dtype=float)
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "offset", offset)
        if pattern.ndim != 1 or offset.shape != pattern.shape:
            raise UncertaintyError(f"source {self.id}: pattern/offset must be equal-length vectors")
        if not np.all(np.isfinite(pattern)):
            raise UncertaintyError(f"source {self.id}: pattern has non-finite entries")
        if not np.any(pattern):
            raise UncertaintyError(f"source {self.id}: pattern is identically zero")

    @property
    def variance(self) -> float:
        """Variance of the scalar source variable."""
        return self.coeff1 ** 2 * self.germ.gamma1


@dataclass(frozen=True)
class DemandPce:
    """Affine expansion of the uncontrollable bus-power vector.

    ``pce`` has one column per source, in the order of ``sources``; column
    ``l`` belongs to ``sources[l]``.
    """

    pce: AffinePce
    sources: tuple[UncertaintySource, ...]

    @property
    def d0(self) -> np.ndarray:
        return self.pce.x0

    @property
    def coeffs(self) -> np.ndarray:
        return self.pce.coeffs

    @property
    def basis(self):
        return self.pce.basis

    @property
    def n_sources(self) -> int:
        return len(self.sources)


def assemble_demand(grid: Grid, sources: list[UncertaintySource]) -> DemandPce:
    """Combine sources into one expansion over the tensorized germ basis."""
    if not sources:
        raise UncertaintyError("no uncertainty sources given")
    ids = [s.id for s in sources]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise UncertaintyError(f"duplicate source id {dup!r}")
    n = grid.n_bus
    d0 = grid.nominal_demand.copy()
    coeffs = np.zeros((n, len(sources)))
    for col, src in enumerate(sources):
        if src.pattern.shape != (n,):
            raise UncertaintyError(f"source {src.id}: pattern length {src.pattern.size} != {n} buses")
        if src.variance <= 0.0:
            raise UncertaintyError(f"source {src.id} has zero variance")
        d0 += src.offset
        coeffs[:, col] = src.coeff1 * src.pattern
    basis = tensorize([s.germ for s in sources])
    return DemandPce(pce=AffinePce(x0=d0, coeffs=coeffs, basis=basis), sources=tuple(sources))


def gaussian_pm15_spec(nominal: float) -> dict:
    """Gaussian spec whose 3-sigma band spans +/-15 % of the nominal value."""
    if nominal == 0.0:
        raise UncertaintyError("pm15 rule needs a nonzero nominal value")
    return {"family": "gaussian", "mean": float(nominal), "sigma": 0.05 * abs(nominal)}


def beta_pm15_spec(nominal: float, shape: tuple[float, float]) -> dict:
    """Beta spec supported on the +/-15 % band around the nominal value."""
    if nominal == 0.0:
        raise UncertaintyError("pm15 rule needs a nonzero nominal value")
    a, b = float(shape[0]), float(shape[1])
    if a <= 0.0 or b <= 0.0:
        raise UncertaintyError(f"beta shape parameters must be positive, got ({a}, {b})")
    lo, hi = sorted((0.85 * nominal, 1.15 * nominal))
    return {"family": "beta", "params": [a, b], "support": [lo, hi]}


def _scalar_expansion(spec: dict) -> tuple[Germ, float, float]:
    """Exact degree-one expansion (germ, mean, coeff1) of one scalar spec."""
    family = spec.get("family")
    if family == "gaussian":
        try:
            mean, sigma = float(spec["mean"]), float(spec["sigma"])
        except KeyError as exc:
            raise UncertaintyError(f"gaussian spec needs {exc}") from exc
        if sigma <= 0.0:
            raise UncertaintyError(f"gaussian spec has zero variance (sigma={sigma})")
        return build_germ("gaussian_standard"), mean, sigma

    try:
        lo, hi = (float(v) for v in spec["support"])
    except KeyError as exc:
        raise UncertaintyError(f"{family} spec needs a support interval") from exc
    if not hi > lo:
        raise UncertaintyError(f"empty support [{lo}, {hi}]")

    if family == "beta":
        a, b = (float(v) for v in spec.get("params", (np.nan, np.nan)))
        germ = build_germ("beta", a=a, b=b)
    elif family == "uniform":
        germ = build_germ("uniform_01")
    elif family == "custom":
        name = spec.get("params")
        if isinstance(name, (list, tuple)):
            name = name[0] if name else None
        if name != "half_sine":
            raise UncertaintyError(f"unknown custom density {name!r}")
        germ = build_germ("half_sine")
    else:
        raise UncertaintyError(f"unknown distribution family {family!r}")

    # Germ lives on its native interval; rescale it onto [lo, hi].
    alpha, beta_end = germ.support
    width = beta_end - alpha
    scale = (hi - lo) / width
    mean = lo + scale * (germ.mean - alpha)
    coeff1 = scale / germ.psi1_slope
    return germ, mean, coeff1


def source_from_spec(grid: Grid, entry: dict, default_id: str = "") -> UncertaintySource:
    """Resolve one sidecar entry against a grid.

    A ``bus`` entry replaces that bus's demand with the declared distribution;
    a ``pattern`` entry spreads an additive fluctuation over the matching
    buses.  ``rule: pm15`` derives the distribution from the bus's nominal
    demand; otherwise the spec's own parameters are used.
    """
    entry = dict(entry)
    rule = entry.get("rule", "explicit")
    src_id = str(entry.get("id", default_id))

    if "bus" in entry:
        bus_id = int(entry["bus"])
        i = grid.bus_index(bus_id)
        if rule == "pm15":
            nominal = grid.nominal_demand[i]
            if entry.get("family") == "gaussian":
                entry.update(gaussian_pm15_spec(nominal))
            elif entry.get("family") == "beta":
                entry.update(beta_pm15_spec(nominal, entry["params"]))
            else:
                lo, hi = sorted((0.85 * nominal, 1.15 * nominal))
                entry["support"] = [lo, hi]
        germ, mean, coeff1 = _scalar_expansion(entry)
        pattern = np.zeros(grid.n_bus)
        pattern[i] = 1.0
        offset = np.zeros(grid.n_bus)
        offset[i] = mean - grid.nominal_demand[i]
        return UncertaintySource(id=src_id or f"bus{bus_id}", germ=germ,
                                 coeff1=coeff1, pattern=pattern, offset=offset)

    if "pattern" in entry:
        kind = entry["pattern"]
        if kind != "all_load_buses":
            raise UncertaintyError(f"unknown pattern {kind!r}")
        loads = np.flatnonzero(grid.nominal_demand < 0.0)
        if loads.size == 0:
            raise UncertaintyError("pattern 'all_load_buses' matches no bus")
        if rule == "pm15":
            raise UncertaintyError("pm15 rule applies to single-bus sources only")
        germ, mean, coeff1 = _scalar_expansion(entry)
        pattern = np.zeros(grid.n_bus)
        pattern[loads] = 1.0 / loads.size
        return UncertaintySource(id=src_id or kind, germ=germ, coeff1=coeff1,
                                 pattern=pattern, offset=mean * pattern)

    raise UncertaintyError("source entry needs either 'bus' or 'pattern'")


def load_uncertainty(source, grid: Grid) -> list[UncertaintySource]:
    """Read an uncertainty sidecar (path, JSON text, or parsed list/dict)."""
    if isinstance(source, (list, tuple)):
        entries = list(source)
    else:
        if isinstance(source, dict):
            data = source
        else:
            path = Path(source)
            text = path.read_text() if path.exists() else str(source)
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise UncertaintyError(f"could not parse uncertainty JSON: {exc}") from exc
        entries = data["sources"] if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise UncertaintyError("uncertainty spec must be a list of source entries")
    return [source_from_spec(grid, e, default_id=f"source{k}") for k, e in enumerate(entries)]
