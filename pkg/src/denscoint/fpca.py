"""
Functional principal components of clr-transformed density series.

Eigenproblems are solved in the frame ``W^{1/2} V W^{-1/2}`` restricted to
zero-integral functions, so eigenfunctions are orthonormal under the
quadrature inner product and never pick up the constant direction.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg

from denscoint.errors import DimensionError, NumericalError, RankError
from denscoint.grid_space import ClrFunction, Density, Grid, clr, clr_inv, perturb, power, inverse
from denscoint.operators import LinearMap, OrthonormalBasis

__all__ = [
    "ClrSeries",
    "EigenSystem",
    "AttractorEstimate",
    "empirical_cov",
    "eigenpairs",
    "estimate_attractor",
    "attractor_to_density_space",
    "mean_density",
    "perturbation_curves",
    "DEFAULT_K",
]

DEFAULT_K = 25
ROW_MEAN_TOL = 1e-8
RANK_RTOL = 1e-10


class ClrSeries:
    """``T`` clr images on a common grid, stored as a ``(T, n)`` array."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values, check: bool = True):
        values = np.array(values, dtype=float, ndmin=2)
        if values.ndim != 2 or values.shape[1] != grid.n:
            raise DimensionError(f"expected a (T, {grid.n}) array, got {values.shape}")
        if values.shape[0] < 2:
            raise DimensionError("a series needs at least two periods")
        if check:
            means = values @ grid.weights
            scale = np.maximum(1.0, np.abs(values).max(axis=1) * grid.measure)
            bad = np.nonzero(np.abs(means) > ROW_MEAN_TOL * scale)[0]
            if bad.size:
                raise DimensionError(f"row {bad[0]} integrates to {means[bad[0]]!r}, not 0")
        values.flags.writeable = False
        self.grid = grid
        self.values = values

    @classmethod
    def from_functions(cls, rows: Sequence[ClrFunction]) -> "ClrSeries":
        grid = rows[0].grid
        if any(r.grid != grid for r in rows):
            raise DimensionError("rows live on different grids")
        return cls(grid, np.array([r.values for r in rows]))

    @classmethod
    def from_densities(cls, densities: Sequence[Density]) -> "ClrSeries":
        return cls.from_functions([clr(f) for f in densities])

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.T

    def __getitem__(self, t) -> ClrFunction:
        return ClrFunction(self.grid, self.values[t], check=False)

    def mean(self) -> ClrFunction:
        return ClrFunction(self.grid, self.values.mean(axis=0), check=False)


class EigenSystem(NamedTuple):
    """Eigenvalues in decreasing order and matching orthonormal eigenfunctions."""

    eigenvalues: np.ndarray
    eigenfunctions: OrthonormalBasis

    def __len__(self):
        return self.eigenvalues.size


def empirical_cov(S: ClrSeries, demean: bool = True) -> LinearMap:
    """``T⁻¹ Σ (f_t - f̄) ⊗ (f_t - f̄)`` as a nodal matrix.

    With ``demean=False`` the sample mean is not removed (second-moment
    operator).
    """
    X = S.values - S.values.mean(axis=0) if demean else S.values
    M = X.T @ (X * S.grid.weights) / S.T
    return LinearMap(S.grid, M, check=False)


def _complement_frame(grid: Grid) -> np.ndarray:
    """Orthonormal ``n x (n-1)`` columns spanning the symmetrized
    zero-integral subspace (orthogonal complement of ``W^{1/2} 1``)."""
    s = np.sqrt(grid.weights)
    Q, _ = np.linalg.qr(np.column_stack([s, np.eye(grid.n)[:, : grid.n - 1]]))
    return Q[:, 1:]


def _fix_signs(F: np.ndarray) -> np.ndarray:
    # first coordinate of clearly nonzero size is made positive
    for row in F:
        big = np.nonzero(np.abs(row) > 1e-8 * np.abs(row).max())[0]
        if big.size and row[big[0]] < 0:
            row *= -1
    return F


def eigenpairs(V: LinearMap, k: int | None = None) -> EigenSystem:
    """Leading ``k`` eigenpairs of a self-adjoint PSD map on zero-integral
    functions.

    At most ``n - 1`` pairs exist.  Tiny negative eigenvalues from rounding
    are set to zero.
    """
    grid = V.grid
    k = min(DEFAULT_K, grid.n) if k is None else int(k)
    if not 1 <= k <= grid.n:
        raise DimensionError(f"k must be in [1, {grid.n}], got {k}")
    k = min(k, grid.n - 1)
    S = V.symmetrized()
    S = 0.5 * (S + S.T)
    Q = _complement_frame(grid)
    try:
        vals, vecs = linalg.eigh(Q.T @ S @ Q, subset_by_index=[grid.n - 1 - k, grid.n - 2])
    except (linalg.LinAlgError, ValueError) as err:
        raise NumericalError(f"eigen solver failed: {err}") from err
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], Q @ vecs[:, order]
    scale = max(abs(vals[0]), np.abs(S).max() * 1e-16, np.finfo(float).tiny)
    resid = np.linalg.norm(S @ vecs - vecs * vals, axis=0)
    if np.any(resid > 1e-8 * scale):
        raise NumericalError(f"eigen residual {resid.max():.3g} above tolerance")
    F = _fix_signs((vecs / np.sqrt(grid.weights)[:, None]).T.copy())
    vals = np.where(vals < 0, 0.0, vals)
    return EigenSystem(vals, OrthonormalBasis(grid, F))


class AttractorEstimate(NamedTuple):
    basis: OrthonormalBasis
    projector: LinearMap
    eigensystem: EigenSystem

    @property
    def cointegrating_projector(self) -> LinearMap:
        """``I - P̂``, projection onto the estimated cointegrating space."""
        return LinearMap.identity(self.basis.grid) - self.projector


def estimate_attractor(S: ClrSeries, r: int, k: int | None = None, demean: bool = True) -> AttractorEstimate:
    """Span of the ``r`` leading eigenfunctions and its orthogonal projector.

    ``r`` equal to the number of nodes (or to the full dimension ``n - 1``
    of the zero-integral space) returns the whole space with the identity
    projector.  Otherwise ``r`` beyond the numerical rank raises RankError.
    """
    grid = S.grid
    if not 1 <= r <= grid.n:
        raise DimensionError(f"r must be in [1, {grid.n}], got {r}")
    V = empirical_cov(S, demean=demean)
    if r >= grid.n - 1:
        E = eigenpairs(V, grid.n - 1)
        return AttractorEstimate(E.eigenfunctions, LinearMap.identity(grid), E)
    E = eigenpairs(V, max(r, min(DEFAULT_K, grid.n) if k is None else k))
    zeta = E.eigenvalues
    if zeta[0] <= 0 or zeta[r - 1] <= RANK_RTOL * zeta[0]:
        rank = int(np.sum(zeta > RANK_RTOL * zeta[0])) if zeta[0] > 0 else 0
        raise RankError(f"r = {r} exceeds the numerical rank {rank} of the covariance")
    basis = OrthonormalBasis(grid, E.eigenfunctions.matrix[:r], check=False)
    return AttractorEstimate(basis, basis.projector(), E)


def attractor_to_density_space(basis: OrthonormalBasis) -> list:
    """``clr⁻¹`` of every basis function."""
    return [clr_inv(f) for f in basis]


def mean_density(S: ClrSeries) -> Density:
    """Sample mean in the Bayes space, ``clr⁻¹`` of the mean clr image."""
    return clr_inv(S.mean())


def perturbation_curves(
    mean: Density, eigenvalue: float, direction: ClrFunction, c: float = 1.0
) -> tuple[Density, Density]:
    """``f̄ ⊕ (cζ ⊙ clr⁻¹v)`` and ``f̄ ⊖ (cζ ⊙ clr⁻¹v)``."""
    shift = power(c * eigenvalue, clr_inv(direction))
    return perturb(mean, shift), perturb(mean, inverse(shift))
