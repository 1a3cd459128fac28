"""
Seedable simulation of density-valued autoregressive and integrated processes.

Innovations are smooth random densities ``clr⁻¹(scale · P_m B̄)`` where ``B̄``
is a demeaned Brownian bridge mapped onto the grid interval and ``P_m`` the
orthogonal projection onto zero-integral polynomials of degree at most ``m``.

All processes are iterated in clr coordinates.  Because innovations live in an
``m``-dimensional space, trajectories are propagated in the smallest subspace
that contains the innovation span and the initial values and is invariant
under the autoregressive coefficients; for the usual low-rank examples this
turns ``n x n`` products into products of size ``d x d`` with ``d`` around 50.

Random numbers come from numpy's PCG64 seeded by
``SeedSequence(seed, spawn_key=(stream, rep))``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.polynomial import legendre

from denscoint.errors import ConfigError, DensityOverflowError, DimensionError
from denscoint.grid_space import ClrFunction, Density, Grid, clr, clr_inv, normalize
from denscoint.operators import (
    LinearMap,
    OrthonormalBasis,
    fourier_basis_clr,
    gram_schmidt,
)

__all__ = [
    "RngSeed",
    "InnovationConfig",
    "ARConfig",
    "ClrPaths",
    "brownian_bridge",
    "rescale_demean_bridge",
    "poly_basis",
    "poly_project",
    "draw_innovation",
    "draw_innovation_coefficients",
    "innovation_covariance",
    "simulate_arp",
    "simulate_arp_paths",
    "simulate_i1_ma",
    "sample_density",
    "sample_panel",
    "paper_basis",
    "truncated_normal",
    "paper_ar1_config",
    "stationary_config",
    "random_walk_config",
    "PRESETS",
]

DEFAULT_STEPS = 1024
SUBSPACE_TOL = 1e-10
MA_CAP = 2000


@dataclass(frozen=True)
class RngSeed:
    """Seed plus stream id; ``generator(rep)`` gives an independent stream
    for every replication index."""

    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.stream) < 0:
            raise ConfigError(f"stream id must be nonnegative, got {self.stream}")

    def sequence(self, rep: int = 0) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream), int(rep)))

    def generator(self, rep: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.sequence(rep)))


def _as_seed(seed) -> RngSeed:
    if isinstance(seed, RngSeed):
        return seed
    return RngSeed(0 if seed is None else int(seed))


@dataclass(frozen=True)
class InnovationConfig:
    """Smooth innovation law ``clr⁻¹(scale · P_m B̄)``.

    ``scale = 0`` is accepted and gives the uniform density.
    """

    scale: float = 0.3
    m: int = 10
    grid: Grid = Grid.default()
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ConfigError(f"scale must be nonnegative, got {self.scale}")
        if not 1 <= int(self.m) <= 20:
            raise ConfigError(f"polynomial order must be in [1, 20], got {self.m}")
        if self.m >= self.grid.n - 1:
            raise ConfigError(f"polynomial order {self.m} too large for {self.grid.n} nodes")
        if int(self.steps) < 2:
            raise ConfigError("bridge needs at least 2 steps")


def brownian_bridge(steps: int = DEFAULT_STEPS, seed=None, size: int | None = None) -> np.ndarray:
    """Standard Brownian bridge at ``k / steps``, ``k = 0..steps``.

    Returns shape ``(steps + 1,)``, or ``(size, steps + 1)`` when ``size`` is
    given.  Both endpoints are exactly zero.
    """
    if steps < 2:
        raise ConfigError("bridge needs at least 2 steps")
    gen = _as_seed(seed).generator()
    out = _bridges(gen, 1 if size is None else size, steps)
    return out[0] if size is None else out


def _bridges(gen: np.random.Generator, count: int, steps: int) -> np.ndarray:
    W = np.zeros((count, steps + 1))
    np.cumsum(gen.standard_normal((count, steps)) / np.sqrt(steps), axis=1, out=W[:, 1:])
    r = np.arange(steps + 1) / steps
    return W - r * W[:, -1:]


@functools.lru_cache(maxsize=32)
def _interp_matrix(grid: Grid, steps: int) -> np.ndarray:
    # linear interpolation from the bridge mesh k/steps to the rescaled grid nodes
    pos = (grid.nodes - grid.lower) / grid.measure * steps
    j = np.minimum(np.floor(pos).astype(int), steps - 1)
    frac = pos - j
    L = np.zeros((grid.n, steps + 1))
    rows = np.arange(grid.n)
    L[rows, j] = 1 - frac
    L[rows, j + 1] += frac
    L.flags.writeable = False
    return L


def rescale_demean_bridge(B, grid: Grid) -> ClrFunction:
    """Map a bridge path on ``[0, 1]`` affinely onto the grid interval and
    subtract its mean, ``B((u - lower)/λ(K)) - ∫₀¹ B``."""
    B = np.asarray(B, dtype=float)
    return ClrFunction.centered(grid, _interp_matrix(grid, B.size - 1) @ B)


@functools.lru_cache(maxsize=32)
def poly_basis(grid: Grid, m: int) -> OrthonormalBasis:
    """Orthonormal basis of zero-integral polynomials of degree 1..m."""
    if m < 1:
        raise ConfigError("m must be at least 1")
    xi = 2 * (grid.nodes - grid.lower) / grid.measure - 1
    seed = [ClrFunction.centered(grid, legendre.legval(xi, np.eye(m + 1)[k])) for k in range(1, m + 1)]
    return gram_schmidt(seed)


def poly_project(g: ClrFunction, m: int) -> ClrFunction:
    """Orthogonal projection onto zero-integral polynomials of degree ≤ m."""
    P = poly_basis(g.grid, m)
    return ClrFunction(g.grid, P.coefficients(g) @ P.matrix, check=False)


@functools.lru_cache(maxsize=32)
def _coefficient_map(grid: Grid, m: int, steps: int) -> np.ndarray:
    # bridge values -> coefficients of P_m B̄ in poly_basis; the basis has zero
    # integral, so demeaning the bridge does not change the coefficients
    P = poly_basis(grid, m)
    K = (P.matrix * grid.weights) @ _interp_matrix(grid, steps)
    K.flags.writeable = False
    return K


def draw_innovation_coefficients(cfg: InnovationConfig, gen: np.random.Generator, count: int) -> np.ndarray:
    """``(count, m)`` coefficients of ``scale · P_m B̄`` in ``poly_basis``."""
    K = _coefficient_map(cfg.grid, cfg.m, cfg.steps)
    return cfg.scale * (_bridges(gen, count, cfg.steps) @ K.T)


def innovation_covariance(cfg: InnovationConfig) -> np.ndarray:
    """Exact ``m x m`` covariance of the innovation coefficients.

    Uses the discrete bridge covariance ``min(s, t) - s t``.
    """
    r = np.arange(cfg.steps + 1) / cfg.steps
    cov_b = np.minimum.outer(r, r) - np.outer(r, r)
    K = _coefficient_map(cfg.grid, cfg.m, cfg.steps)
    return cfg.scale**2 * K @ cov_b @ K.T


def draw_innovation(cfg: InnovationConfig, seed=None) -> Density:
    """One innovation density; distinct streams give independent draws."""
    c = draw_innovation_coefficients(cfg, _as_seed(seed).generator(), 1)[0]
    return clr_inv(c @ poly_basis(cfg.grid, cfg.m).matrix, cfg.grid)


@dataclass(frozen=True)
class ARConfig:
    """``(f_t ⊖ μ) = A_1(f_{t-1} ⊖ μ) ⊕ ... ⊕ A_p(f_{t-p} ⊖ μ) ⊕ ε_t``.

    ``coefficients`` act on clr coordinates.  ``initial`` holds
    ``f_0, f_{-1}, ..., f_{1-p}``.  ``mean`` defaults to the uniform density,
    which gives the plain law of motion without centring.
    """

    coefficients: tuple
    initial: tuple
    innovation: InnovationConfig
    T: int
    mean: Density | None = None

    def __post_init__(self):
        coefs = tuple(self.coefficients)
        init = tuple(self.initial)
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "initial", init)
        if int(self.T) < 1:
            raise ConfigError(f"horizon T must be at least 1, got {self.T}")
        if not coefs:
            raise ConfigError("at least one coefficient is required")
        if len(init) != len(coefs):
            raise ConfigError(f"need {len(coefs)} initial densities, got {len(init)}")
        grid = self.innovation.grid
        others = list(coefs) + list(init) + ([self.mean] if self.mean is not None else [])
        if any(o.grid != grid for o in others):
            raise DimensionError("coefficients, initial values and innovations use different grids")

    @property
    def grid(self) -> Grid:
        return self.innovation.grid

    @property
    def order(self) -> int:
        return len(self.coefficients)


def _orth(Y: np.ndarray, tol: float) -> np.ndarray:
    norms = np.linalg.norm(Y, axis=0)
    # rounding-level columns (e.g. clr of a uniform start) carry no direction
    keep = norms > tol * max(norms.max(initial=0.0), 1.0)
    Y = Y[:, keep] / norms[keep]
    if Y.shape[1] == 0:
        return Y
    U, s, _ = np.linalg.svd(Y, full_matrices=False)
    return U[:, s > tol * s[0]]


def _invariant_subspace(grid: Grid, maps: Sequence[np.ndarray], seeds: np.ndarray) -> np.ndarray:
    """Rows of an orthonormal basis of the smallest subspace containing the
    seed rows and invariant under ``maps``."""
    s = np.sqrt(grid.weights)
    Q = _orth((seeds * s).T, SUBSPACE_TOL)
    sym = [(s[:, None] * A) / s[None, :] for A in maps]
    # new directions count only above rounding noise of the maps themselves
    floor = SUBSPACE_TOL * max([1.0] + [np.linalg.norm(A, 2) for A in sym])
    while Q.shape[1] < grid.n - 1:
        Z = np.hstack([A @ Q for A in sym])
        Z -= Q @ (Q.T @ Z)
        Z -= Q @ (Q.T @ Z)
        U, sv, _ = np.linalg.svd(Z, full_matrices=False)
        new = U[:, sv > floor]
        if new.shape[1] == 0:
            break
        Q = np.linalg.qr(np.hstack([Q, new]))[0]
    B = (Q / s[:, None]).T
    # remove the rounding-level constant component, then re-orthonormalize
    B = B - np.outer(B @ grid.weights, np.ones(grid.n)) / grid.measure
    return gram_schmidt(list(B), grid=grid).matrix


class ClrPaths(NamedTuple):
    """Trajectories in a reduced orthonormal coordinate system.

    ``clr f_t = offset + coords[rep, t] @ basis.matrix``.
    """

    basis: OrthonormalBasis
    coords: np.ndarray
    offset: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.basis.grid

    def clr_values(self, rep: int = 0) -> np.ndarray:
        return self.offset + self.coords[rep] @ self.basis.matrix

    def scores(self, directions) -> np.ndarray:
        """Inner products of ``clr f_t - offset`` with each direction.

        ``directions`` is an OrthonormalBasis or a ``(k, n)`` array; returns
        an array of shape ``(reps, T, k)``.
        """
        D = directions.matrix if isinstance(directions, OrthonormalBasis) else np.atleast_2d(directions)
        return self.coords @ ((self.basis.matrix * self.grid.weights) @ D.T)

    def densities(self, rep: int = 0) -> list:
        out = []
        for t, row in enumerate(self.clr_values(rep)):
            try:
                out.append(clr_inv(row, self.grid))
            except DensityOverflowError as err:
                raise DensityOverflowError(f"{err} (time index t={t + 1})") from err
        return out


def simulate_arp_paths(cfg: ARConfig, seed=None, reps: int = 1) -> ClrPaths:
    """Simulate ``reps`` independent trajectories ``f_1..f_T``.

    Replication ``i`` draws its innovations from ``seed.generator(i)``, so
    results do not depend on how replications are batched.
    """
    seed = _as_seed(seed)
    grid, p, T = cfg.grid, cfg.order, int(cfg.T)
    inn = cfg.innovation
    Phi = poly_basis(grid, inn.m).matrix
    offset = np.zeros(grid.n) if cfg.mean is None else clr(cfg.mean).values
    x0 = np.array([clr(f).values - offset for f in cfg.initial])
    B = _invariant_subspace(grid, [A.matrix for A in cfg.coefficients], np.vstack([Phi, x0]))
    Bw = B * grid.weights
    A_red = [Bw @ A.matrix @ B.T for A in cfg.coefficients]
    G = Bw @ Phi.T
    d = B.shape[0]

    coords = np.empty((reps, T, d))
    hist = [np.tile(Bw @ x, (reps, 1)) for x in x0]  # y_{t-1}, ..., y_{t-p}
    eps = np.empty((reps, T, d))
    for i in range(reps):
        eps[i] = draw_innovation_coefficients(inn, seed.generator(i), T) @ G.T
    for t in range(T):
        y = eps[:, t].copy()
        for k in range(p):
            y += hist[k] @ A_red[k].T
        coords[:, t] = y
        hist = [y] + hist[:-1]
    return ClrPaths(OrthonormalBasis(grid, B, check=False), coords, offset)


def simulate_arp(cfg: ARConfig, seed=None) -> list:
    """Densities ``f_1, ..., f_T`` of one trajectory.

    Raises DensityOverflowError, with the offending time index, when a clr
    value cannot be exponentiated.
    """
    return simulate_arp_paths(cfg, seed, reps=1).densities(0)


def sample_density(f: Density, size: int, gen: np.random.Generator) -> np.ndarray:
    """Draw ``size`` observations from ``f`` by inverting its grid CDF.

    The CDF is the cumulative trapezoid rule, interpolated linearly, so
    draws follow ``f`` up to the grid resolution.
    """
    grid = f.grid
    cell = 0.5 * (f.values[1:] + f.values[:-1]) * grid.spacing
    cdf = np.concatenate([[0.0], np.cumsum(cell)])
    cdf /= cdf[-1]
    return np.interp(gen.random(size), cdf, grid.nodes)


def sample_panel(densities: Sequence[Density], size: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Cross-sections of ``size`` draws from each density.

    Returns period labels ``1..T`` and the draws, both flattened.  Period
    ``t`` uses ``seed.generator(t)``.
    """
    seed = _as_seed(seed)
    x = np.concatenate([sample_density(f, size, seed.generator(t)) for t, f in enumerate(densities, 1)])
    return np.repeat(np.arange(1, len(densities) + 1), size), x


def _ma_coefficients(coefficients, grid: Grid, k_max: int | None) -> list:
    if callable(coefficients):
        cap = MA_CAP if k_max is None else int(k_max)
        coefs = [coefficients(k) for k in range(cap + 1)]
    else:
        coefs = list(coefficients)
        if k_max is not None:
            coefs = coefs[: int(k_max) + 1]
    if not coefs:
        raise ConfigError("MA representation needs at least N_0")
    mats = []
    for k, N in enumerate(coefs):
        M = np.zeros((grid.n, grid.n)) if N is None else np.asarray(N.matrix if isinstance(N, LinearMap) else N)
        if M.shape != (grid.n, grid.n):
            raise DimensionError(f"N_{k} has shape {M.shape}")
        if not np.all(np.isfinite(M)):
            raise ConfigError(f"N_{k} has non-finite entries")
        mats.append(M)
    # Frobenius norms of the symmetrized matrices bound the operator norms
    s = np.sqrt(grid.weights)
    weighted = np.array([k * np.linalg.norm((s[:, None] * M) / s[None, :]) for k, M in enumerate(mats)])
    total = weighted.sum()
    if not np.isfinite(total):
        raise ConfigError("MA coefficients are not summable")
    if total == 0:
        return mats[:1]
    tail = np.cumsum(weighted[::-1])[::-1]  # tail[k] = sum_{j >= k} j ||N_j||
    if callable(coefficients) and k_max is None:
        recent = weighted[len(weighted) // 2 :].sum()
        if recent > 1e-8 * total:
            raise ConfigError(
                f"k-weighted norms of the MA coefficients do not decay within {MA_CAP} lags"
            )
    keep = len(mats)
    below = np.nonzero(tail < 1e-8 * total)[0]
    if below.size:
        keep = max(1, int(below[0]))
    return mats[:keep]


def simulate_i1_ma(
    coefficients,
    T: int,
    seed=None,
    innovation: InnovationConfig | None = None,
    initial: Density | None = None,
    k_max: int | None = None,
    as_clr: bool = False,
):
    """I(1) process with ``Δf_t = ⊕_k N_k ε_{t-k}``, built from its
    Beveridge-Nelson form ``f_t = (f_0 ⊖ ν_0) ⊕ N(1)ξ_t ⊕ ν_t``.

    Parameters
    ----------
    coefficients : sequence of LinearMap, or callable ``k -> LinearMap``
        The ``N_k`` in clr coordinates.  Trailing lags whose k-weighted
        norms carry less than 1e-8 of the total are dropped.
    T : int
    seed : RngSeed or int
    innovation : InnovationConfig, optional
    initial : Density, optional
        ``f_0``; uniform by default.
    k_max : int, optional
        Hard truncation lag.
    as_clr : bool
        Return the ``(T, n)`` clr array instead of densities.
    """
    innovation = innovation or InnovationConfig()
    grid = innovation.grid
    if int(T) < 1:
        raise ConfigError("T must be at least 1")
    mats = _ma_coefficients(coefficients, grid, k_max)
    K = len(mats) - 1
    Phi = poly_basis(grid, innovation.m).matrix
    c = draw_innovation_coefficients(innovation, _as_seed(seed).generator(), T + K + 1)
    # c[j] is the innovation at time j - K, for j = 0..T+K
    N1 = sum(mats) @ Phi.T
    tails = []
    acc = np.zeros((grid.n, grid.n))
    for k in range(K - 1, -1, -1):
        acc = acc - mats[k + 1]
        tails.append(acc @ Phi.T)
    tails = tails[::-1]  # tails[k] = Ň_k Φ', Ň_k = -Σ_{j>k} N_j

    def nu(t):
        out = np.zeros((np.size(t), grid.n))
        for k, M in enumerate(tails):
            out += c[np.asarray(t) - k + K] @ M.T
        return out

    ts = np.arange(1, T + 1)
    f0 = np.zeros(grid.n) if initial is None else clr(initial).values
    xi = np.cumsum(c[K + 1 :], axis=0)
    X = f0 - nu(np.array([0]))[0] + xi @ N1.T + nu(ts)
    X -= np.outer(X @ grid.weights, np.ones(grid.n)) / grid.measure
    if as_clr:
        return X
    out = []
    for t, row in enumerate(X):
        try:
            out.append(clr_inv(row, grid))
        except DensityOverflowError as err:
            raise DensityOverflowError(f"{err} (time index t={t + 1})") from err
    return out


# --- presets -----------------------------------------------------------------


def truncated_normal(grid: Grid) -> Density:
    """Standard normal density truncated to the grid interval."""
    return normalize(np.exp(-grid.nodes**2 / 2), grid)


def paper_basis(grid: Grid, J: int = 40) -> OrthonormalBasis:
    """Gram-Schmidt of ``(clr e_1, u_2, ..., u_J)`` with ``e_1`` the Cauchy(0, 0.25)
    density and ``u_j`` the trigonometric basis."""
    if J > grid.n // 2:
        raise ConfigError(f"J = {J} needs at least {2 * J} grid nodes")
    e1 = normalize(1.0 / (1.0 + (grid.nodes / 0.25) ** 2), grid)
    u = fourier_basis_clr(grid, J)
    return gram_schmidt([clr(e1)] + [u[j] for j in range(1, J)])


def _diagonal_config(eigs, T, m, scale, grid, J, steps) -> ARConfig:
    grid = grid or Grid.default()
    basis = paper_basis(grid, J)
    g = truncated_normal(grid)
    Psi = LinearMap.diagonal_in(basis, eigs(np.arange(1, J + 1)))
    inn = InnovationConfig(scale=scale, m=m, grid=grid, steps=steps)
    return ARConfig((Psi,), (g,), inn, T, mean=g)


def paper_ar1_config(T=1000, m=10, scale=0.3, grid=None, J=40, steps=DEFAULT_STEPS) -> ARConfig:
    """AR(1) around the truncated normal ``g`` with ``Ψ = Σ 2^{1-j} <·, e_j> e_j``.

    ``Ψ`` is truncated to ``J`` basis functions and the process starts at
    ``f_0 = g``.  The attractor is spanned by ``clr e_1``.
    """
    return _diagonal_config(lambda j: 2.0 ** (1 - j), T, m, scale, grid, J, steps)


def stationary_config(T=1000, m=10, scale=0.3, grid=None, J=40, steps=DEFAULT_STEPS) -> ARConfig:
    """Same as :func:`paper_ar1_config` with eigenvalues halved (spectral radius 1/2)."""
    return _diagonal_config(lambda j: 2.0 ** (-j), T, m, scale, grid, J, steps)


def random_walk_config(T=1000, m=10, scale=0.3, grid=None, steps=DEFAULT_STEPS) -> ARConfig:
    """``f_t = f_{t-1} ⊕ ε_t`` started at the truncated normal."""
    grid = grid or Grid.default()
    g = truncated_normal(grid)
    inn = InnovationConfig(scale=scale, m=m, grid=grid, steps=steps)
    return ARConfig((LinearMap.identity(grid),), (g,), inn, T, mean=g)


PRESETS: dict[str, Callable[..., ARConfig]] = {
    "paper-ar1": paper_ar1_config,
    "stationary": stationary_config,
    "random-walk": random_walk_config,
}
