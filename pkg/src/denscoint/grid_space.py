"""
Discretized Bayes Hilbert space on a compact interval.

Densities are stored by their unit-integral representative on a uniform
grid, clr images by nodal values with zero quadrature integral.  All
integrals use the composite trapezoid rule, so that the clr demeaning and the
inner product share one quadrature and the clr map is an exact isometry of
the discrete spaces.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from denscoint.errors import DensityOverflowError, DimensionError, DomainNonPositive

__all__ = [
    "Grid",
    "Density",
    "ClrFunction",
    "integrate",
    "normalize",
    "clr",
    "clr_inv",
    "perturb",
    "power",
    "inverse",
    "difference",
    "inner_product",
    "norm",
    "uniform",
    "save_function",
    "load_function",
]

# smallest nodal value accepted as a density
POSITIVITY_FLOOR = 1e-300
CLIP = 700.0
CLIP_TOL = 1e-8
UNIT_TOL = 1e-10
ZERO_MEAN_TOL = 1e-10


@dataclass(frozen=True)
class Grid:
    """Uniform grid on ``[lower, upper]`` with trapezoid weights.

    Grids compare equal when their endpoints and size agree.
    """

    lower: float
    upper: float
    n: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.upper > self.lower:
            raise DimensionError(f"upper ({self.upper}) must exceed lower ({self.lower})")
        if int(self.n) != self.n or self.n < 3:
            raise DimensionError(f"grid needs n >= 3 nodes, got {self.n}")
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        object.__setattr__(self, "n", int(self.n))
        nodes = np.linspace(self.lower, self.upper, self.n)
        h = (self.upper - self.lower) / (self.n - 1)
        weights = np.full(self.n, h)
        weights[0] = weights[-1] = h / 2
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def default(cls) -> "Grid":
        return cls(-3.0, 3.0, 601)

    @property
    def measure(self) -> float:
        """Total mass of the reference measure, ``upper - lower``."""
        return self.upper - self.lower

    @property
    def spacing(self) -> float:
        return (self.upper - self.lower) / (self.n - 1)

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(float(d["lower"]), float(d["upper"]), int(d["n"]))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path) -> "Grid":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_values(g, grid: Grid | None) -> tuple[np.ndarray, Grid | None]:
    if isinstance(g, (Density, ClrFunction)):
        if grid is not None and grid != g.grid:
            raise DimensionError("function lives on a different grid")
        return g.values, g.grid
    return np.asarray(g, dtype=float), grid


def integrate(g, grid: Grid | None = None) -> float:
    """Trapezoid approximation of ``∫ g dλ`` over the grid interval.

    Parameters
    ----------
    g : Density, ClrFunction or array_like
        Nodal values.  Raw arrays need ``grid``.
    grid : Grid, optional
        Required for raw arrays; checked against ``g.grid`` otherwise.
    """
    values, grid = _as_values(g, grid)
    if grid is None:
        raise DimensionError("a grid is required to integrate raw values")
    if values.shape[-1] != grid.n:
        raise DimensionError(f"expected {grid.n} values, got {values.shape[-1]}")
    return values @ grid.weights


def _freeze(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.flags.writeable = False
    return arr


class Density:
    """Unit-integral positive function on a grid (an element of B²(λ))."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values, check: bool = True):
        values = _freeze(values)
        if values.shape != (grid.n,):
            raise DimensionError(f"expected {grid.n} values, got shape {values.shape}")
        if check:
            _check_positive(values)
            total = integrate(values, grid)
            if abs(total - 1.0) > UNIT_TOL:
                raise DomainNonPositive(f"density integrates to {total!r}, not 1")
        self.grid = grid
        self.values = values

    def __repr__(self):
        return f"Density(grid={self.grid!r})"

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes


class ClrFunction:
    """Zero-integral function on a grid (an element of the centred L² space).

    Supports ``+``, ``-`` and scalar ``*`` so clr-coordinates can be
    manipulated directly.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values, check: bool = True):
        values = _freeze(values)
        if values.shape != (grid.n,):
            raise DimensionError(f"expected {grid.n} values, got shape {values.shape}")
        if check:
            mean = integrate(values, grid)
            scale = max(1.0, float(np.max(np.abs(values), initial=0.0)) * grid.measure)
            if abs(mean) > ZERO_MEAN_TOL * scale:
                raise DimensionError(f"clr function integrates to {mean!r}, not 0")
        self.grid = grid
        self.values = values

    @classmethod
    def centered(cls, grid: Grid, values) -> "ClrFunction":
        """Subtract the λ-mean of ``values`` and wrap the result."""
        values = np.asarray(values, dtype=float)
        return cls(grid, values - integrate(values, grid) / grid.measure)

    @classmethod
    def zeros(cls, grid: Grid) -> "ClrFunction":
        return cls(grid, np.zeros(grid.n))

    def __repr__(self):
        return f"ClrFunction(grid={self.grid!r})"

    def _other(self, other):
        if not isinstance(other, ClrFunction):
            return NotImplemented
        if other.grid != self.grid:
            raise DimensionError("clr functions live on different grids")
        return other.values

    def __add__(self, other):
        v = self._other(other)
        if v is NotImplemented:
            return v
        return ClrFunction(self.grid, self.values + v, check=False)

    def __sub__(self, other):
        v = self._other(other)
        if v is NotImplemented:
            return v
        return ClrFunction(self.grid, self.values - v, check=False)

    def __neg__(self):
        return ClrFunction(self.grid, -self.values, check=False)

    def __mul__(self, a):
        if not np.isscalar(a):
            return NotImplemented
        return ClrFunction(self.grid, float(a) * self.values, check=False)

    __rmul__ = __mul__


def _check_positive(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise DomainNonPositive("density has non-finite values")
    if np.any(values <= POSITIVITY_FLOOR):
        bad = int(np.argmin(values))
        raise DomainNonPositive(f"density value {values[bad]!r} at node {bad} is not positive")


def normalize(raw, grid: Grid) -> Density:
    """Divide positive values by their integral."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (grid.n,):
        raise DimensionError(f"expected {grid.n} values, got shape {raw.shape}")
    _check_positive(raw)
    return Density(grid, raw / integrate(raw, grid))


def _log_values(f: Density) -> np.ndarray:
    _check_positive(f.values)
    return np.log(f.values)


def _demean(values: np.ndarray, grid: Grid) -> np.ndarray:
    return values - integrate(values, grid) / grid.measure


def clr(f: Density) -> ClrFunction:
    """Centered log-ratio: ``log f`` minus its λ-mean."""
    return ClrFunction(f.grid, _demean(_log_values(f), f.grid))


def _exp_normalize(values: np.ndarray, grid: Grid) -> Density:
    # clipping at ±700 keeps exp finite; only a visible change is an error
    clipped = np.clip(values, -CLIP, CLIP)
    out = np.exp(clipped - clipped.max())
    out /= integrate(out, grid)
    if np.any(clipped != values):
        exact = np.exp(values - values.max())
        exact /= integrate(exact, grid)
        if np.max(np.abs(exact - out)) > CLIP_TOL:
            raise DensityOverflowError("clipping clr values at ±700 changed the density")
    if np.any(out <= POSITIVITY_FLOOR) or not np.all(np.isfinite(out)):
        raise DensityOverflowError("exponentiated clr function underflows on the grid")
    return Density(grid, out, check=False)


def clr_inv(g, grid: Grid | None = None) -> Density:
    """Inverse clr: the normalized exponential.

    Inputs whose integral is not zero are demeaned first, which selects the
    canonical representative of the class.
    """
    values, grid = _as_values(g, grid)
    if grid is None:
        raise DimensionError("a grid is required for raw values")
    if values.shape != (grid.n,):
        raise DimensionError(f"expected {grid.n} values, got shape {values.shape}")
    if abs(integrate(values, grid)) > ZERO_MEAN_TOL:
        values = _demean(values, grid)
    return _exp_normalize(values, grid)


def _same_grid(f, g) -> Grid:
    if f.grid != g.grid:
        raise DimensionError("densities live on different grids")
    return f.grid


def perturb(f: Density, g: Density) -> Density:
    """Perturbation ``f ⊕ g``: normalized pointwise product."""
    grid = _same_grid(f, g)
    return _exp_normalize(_log_values(f) + _log_values(g), grid)


def power(a: float, f: Density) -> Density:
    """Powering ``a ⊙ f``: normalized pointwise power."""
    return _exp_normalize(float(a) * _log_values(f), f.grid)


def inverse(f: Density) -> Density:
    """``⊖f``, the additive inverse under perturbation."""
    return power(-1.0, f)


def difference(f: Density, g: Density) -> Density:
    """``f ⊖ g``."""
    grid = _same_grid(f, g)
    return _exp_normalize(_log_values(f) - _log_values(g), grid)


def inner_product(f: Density, g: Density) -> float:
    _same_grid(f, g)
    return integrate(clr(f).values * clr(g).values, f.grid)


def norm(f: Union[Density, ClrFunction]) -> float:
    v = clr(f).values if isinstance(f, Density) else f.values
    return float(np.sqrt(integrate(v * v, f.grid)))


def uniform(grid: Grid) -> Density:
    return Density(grid, np.full(grid.n, 1.0 / grid.measure), check=False)


def save_function(obj: Union[Density, ClrFunction], path, grid_json=None) -> None:
    """Write ``x,value`` CSV and, optionally, the grid metadata JSON."""
    path = Path(path)
    data = np.column_stack([obj.grid.nodes, obj.values])
    np.savetxt(path, data, delimiter=",", header="x,value", comments="", fmt="%.17g")
    if grid_json is not None:
        obj.grid.to_json(grid_json)


def load_function(path, kind: str = "density", grid: Grid | None = None):
    """Read a ``x,value`` CSV back into a Density or ClrFunction.

    Without ``grid`` the grid is rebuilt from the first and last node.
    """
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise DimensionError(f"{path}: expected two columns x,value")
    if grid is None:
        grid = Grid(data[0, 0], data[-1, 0], data.shape[0])
    elif data.shape[0] != grid.n:
        raise DimensionError(f"{path}: {data.shape[0]} rows for a {grid.n}-node grid")
    if kind == "density":
        return Density(grid, data[:, 1])
    if kind == "clr":
        return ClrFunction(grid, data[:, 1])
    raise ValueError(f"unknown kind {kind!r}")
