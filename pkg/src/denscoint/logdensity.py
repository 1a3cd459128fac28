"""
Weighted local-likelihood estimation of log-densities.

At an evaluation point ``x`` with bandwidth ``h`` the local objective is

    ℒ(α) = Σ w_i W((X_i - x)/h) Q(X_i - x; α) - n ∫ W((u - x)/h) exp Q(u - x; α) du,

with ``Q(u; α) = α₀ + α₁u`` and the tricube kernel ``W``.  The integral runs
over ``[x - h, x + h] ∩ K`` with a 65-point trapezoid rule.  The data terms do
not depend on ``α``, so Newton iterations only recompute the integral.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.interpolate import PchipInterpolator

from denscoint.errors import (
    BandwidthSelectionFailed,
    ConfigError,
    DegenerateData,
    DenscointError,
    EmptyWindow,
    EstimationError,
    FormatError,
    NotConverged,
)
from denscoint.grid_space import ClrFunction, Density, Grid, normalize

__all__ = [
    "CrossSection",
    "LocalFit",
    "LogDensityEstimate",
    "BandwidthChoice",
    "tricube",
    "weighted_percentile",
    "local_loglik",
    "fit_local",
    "fit_mesh",
    "estimate_logdensity",
    "default_bandwidth",
    "select_bandwidth",
]

QUAD_NODES = 65
MESH = 101
GRAD_TOL = 1e-8
MAX_ITER = 100
KERNEL_AT_ZERO = 70.0 / 81.0


class CrossSection:
    """Observations ``X_i`` of one period with design weights summing to ``n``."""

    __slots__ = ("t", "x", "w")

    def __init__(self, x, w=None, t: int = 0):
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            raise FormatError(f"period {t} has no observations")
        if not np.all(np.isfinite(x)):
            raise FormatError(f"period {t} has non-finite observations")
        if w is None:
            w = np.ones(x.size)
        w = np.asarray(w, dtype=float).ravel()
        if w.shape != x.shape:
            raise FormatError(f"period {t}: {x.size} observations but {w.size} weights")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise FormatError(f"period {t} has non-positive weights")
        order = np.argsort(x, kind="stable")
        self.t = int(t)
        self.x = x[order]
        self.w = w[order] * (x.size / w.sum())
        self.x.flags.writeable = False
        self.w.flags.writeable = False

    @property
    def n(self) -> int:
        return self.x.size

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"CrossSection(t={self.t}, n={self.n})"


def tricube(u):
    """``70/81 (1 - |u|³)³`` on ``|u| < 1``, zero outside."""
    u = np.abs(np.asarray(u, dtype=float))
    out = np.where(u < 1, KERNEL_AT_ZERO * np.clip(1 - u**3, 0, None) ** 3, 0.0)
    return out[()] if out.ndim == 0 else out


def weighted_percentile(x, w, q):
    """Percentiles (0-100) of the weighted empirical distribution with
    midpoint plotting positions; unit weights give Hazen's rule."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    pos = (np.cumsum(w) - 0.5 * w) / w.sum()
    return np.interp(np.asarray(q, dtype=float) / 100.0, pos, x)


def _support(x, h, support):
    lo, hi = x - h, x + h
    if support is not None:
        lo, hi = np.maximum(lo, support[0]), np.minimum(hi, support[1])
    return lo, hi


def _support_bounds(support):
    if support is None:
        return None
    if isinstance(support, Grid):
        return (support.lower, support.upper)
    lo, hi = support
    return (float(lo), float(hi))


def _data_terms(cs: CrossSection, x: np.ndarray, h: float):
    """``S0 = Σ w W``, ``S1 = Σ w W d`` and the in-window counts."""
    lo = np.searchsorted(cs.x, x - h, side="right")
    hi = np.searchsorted(cs.x, x + h, side="left")
    S0 = np.zeros(x.size)
    S1 = np.zeros(x.size)
    for j in range(x.size):
        d = cs.x[lo[j] : hi[j]] - x[j]
        k = cs.w[lo[j] : hi[j]] * tricube(d / h)
        S0[j] = k.sum()
        S1[j] = k @ d
    return S0, S1, hi - lo


class _Quadrature(NamedTuple):
    d: np.ndarray  # (M, nodes) offsets u - x
    kw: np.ndarray  # kernel times trapezoid weights


def _quadrature(x: np.ndarray, h: float, support, nodes: int) -> _Quadrature:
    lo, hi = _support(x, h, support)
    s = np.linspace(0.0, 1.0, nodes)
    u = lo[:, None] + (hi - lo)[:, None] * s
    tw = np.full(nodes, 1.0 / (nodes - 1))
    tw[0] = tw[-1] = 0.5 / (nodes - 1)
    d = u - x[:, None]
    return _Quadrature(d, tricube(d / h) * tw * (hi - lo)[:, None])


def _moments(quad: _Quadrature, a0, a1):
    e = quad.kw * np.exp(np.asarray(a0)[..., None] + np.asarray(a1)[..., None] * quad.d)
    return e.sum(axis=-1), (e * quad.d).sum(axis=-1), (e * quad.d**2).sum(axis=-1)


def local_loglik(cs: CrossSection, x: float, h: float, alpha, support=None, nodes: int = QUAD_NODES):
    """Local objective, gradient and Hessian in ``(α₀, α₁)``.

    ``support`` (a Grid or ``(lower, upper)``) truncates the integral to
    ``K``.  Returns ``(value, gradient, hessian)``.
    """
    if not h > 0:
        raise ConfigError(f"bandwidth must be positive, got {h}")
    xs = np.array([float(x)])
    S0, S1, _ = _data_terms(cs, xs, h)
    quad = _quadrature(xs, h, _support_bounds(support), nodes)
    a0, a1 = float(alpha[0]), float(alpha[1])
    I0, I1, I2 = (v[0] for v in _moments(quad, [a0], [a1]))
    n = cs.n
    value = S0[0] * a0 + S1[0] * a1 - n * I0
    grad = np.array([S0[0] - n * I0, S1[0] - n * I1])
    hess = -n * np.array([[I0, I1], [I1, I2]])
    return value, grad, hess


class LocalFit(NamedTuple):
    x: float
    alpha0: float
    alpha1: float
    converged: bool
    iterations: int
    gradient_norm: float


class _MeshFit(NamedTuple):
    alpha: np.ndarray  # (M, 2)
    iterations: np.ndarray
    grad_norm: np.ndarray
    converged: np.ndarray
    I: np.ndarray  # (M, 3) moments at the solution


def _newton(cs, x, h, support, nodes, max_iter, tol) -> _MeshFit:
    S0, S1, counts = _data_terms(cs, x, h)
    quad = _quadrature(x, h, support, nodes)
    n = cs.n
    M = x.size
    empty = (counts == 0) | (S0 <= 0)
    # start from the local constant fit
    I0_flat = quad.kw.sum(axis=1)
    a0 = np.where(empty, 0.0, np.log(np.where(empty, 1.0, S0) / (n * I0_flat)))
    a1 = np.zeros(M)
    obj = lambda b0, b1, m0: S0 * b0 + S1 * b1 - n * m0
    I0, I1, I2 = _moments(quad, a0, a1)
    iters = np.zeros(M, dtype=int)
    # gradient tolerance relative to the size of the data term
    scale = np.maximum(1.0, S0)
    active = ~empty
    for _ in range(max_iter):
        g0, g1 = S0 - n * I0, S1 - n * I1
        gn = np.hypot(g0, g1)
        active &= gn >= tol * scale
        if not active.any():
            break
        det = n * (I0 * I2 - I1**2)
        safe = np.where(det > 0, det, 1.0)
        # Newton direction -H⁻¹g with H = -n [[I0, I1], [I1, I2]]
        d0 = np.where(active, (I2 * g0 - I1 * g1) / safe, 0.0)
        d1 = np.where(active, (I0 * g1 - I1 * g0) / safe, 0.0)
        base = obj(a0, a1, I0)
        step = np.ones(M)
        accepted = ~active
        for _ in range(40):
            t0, t1 = a0 + step * d0, a1 + step * d1
            with np.errstate(over="ignore", invalid="ignore"):
                m0, m1, m2 = _moments(quad, t0, t1)
                new = obj(t0, t1, m0)
            ok = (~accepted) & np.isfinite(new) & (new >= base - 1e-12 * np.abs(base))
            a0, a1 = np.where(ok, t0, a0), np.where(ok, t1, a1)
            I0, I1, I2 = np.where(ok, m0, I0), np.where(ok, m1, I1), np.where(ok, m2, I2)
            accepted |= ok
            if accepted.all():
                break
            step = np.where(accepted, step, step / 2)
        iters += active
        if not accepted.all():
            active &= accepted
    g0, g1 = S0 - n * I0, S1 - n * I1
    gn = np.hypot(g0, g1)
    conv = (~empty) & (gn < tol * scale)
    alpha = np.column_stack([a0, a1])
    alpha[empty] = np.nan
    return _MeshFit(alpha, iters, gn, conv, np.column_stack([I0, I1, I2]))


def fit_local(
    cs: CrossSection,
    x: float,
    h: float,
    support=None,
    nodes: int = QUAD_NODES,
    max_iter: int = MAX_ITER,
    tol: float = GRAD_TOL,
) -> LocalFit:
    """Maximize the local objective by Newton's method with step halving.

    Convergence means ``|∇ℒ| < tol · max(1, Σ w_i W_i)``.
    """
    if not h > 0:
        raise ConfigError(f"bandwidth must be positive, got {h}")
    xs = np.array([float(x)])
    res = _newton(cs, xs, h, _support_bounds(support), nodes, max_iter, tol)
    if np.isnan(res.alpha[0, 0]):
        raise EmptyWindow(f"no observation within ({x - h:.6g}, {x + h:.6g})")
    if not res.converged[0]:
        raise NotConverged(
            f"local fit at x={x:.6g} stopped after {res.iterations[0]} iterations "
            f"with gradient norm {res.grad_norm[0]:.3g}"
        )
    return LocalFit(float(x), res.alpha[0, 0], res.alpha[0, 1], True, int(res.iterations[0]), float(res.grad_norm[0]))


def fit_mesh(cs, mesh, h, support=None, nodes=QUAD_NODES, max_iter=MAX_ITER, tol=GRAD_TOL) -> _MeshFit:
    """Fits at every mesh point at once (no error checking)."""
    return _newton(cs, np.asarray(mesh, dtype=float), h, _support_bounds(support), nodes, max_iter, tol)


@dataclass
class LogDensityEstimate:
    grid: Grid
    g: np.ndarray  # ĝ on the grid
    clr: ClrFunction
    density: Density
    mesh: np.ndarray
    alpha: np.ndarray
    bandwidth: float
    influence: np.ndarray = field(repr=False)  # W(0)[(nJ)⁻¹]₀₀ on the mesh
    interpolant: PchipInterpolator = field(repr=False)

    def log_density_at(self, x) -> np.ndarray:
        """``log f̂`` at arbitrary points inside the grid interval."""
        log_norm = np.log(np.exp(self.g - self.g.max()) @ self.grid.weights) + self.g.max()
        return self.interpolant(np.clip(x, self.grid.lower, self.grid.upper)) - log_norm


def estimate_logdensity(
    cs: CrossSection,
    grid: Grid,
    h: float,
    mesh: int = MESH,
    nodes: int = QUAD_NODES,
) -> LogDensityEstimate:
    """Local-likelihood estimate of the log-density on ``grid``.

    Fits on ``mesh`` equally spaced points of the grid interval and
    interpolates ``ĝ = α̂₀`` with a monotone cubic (PCHIP).
    """
    if not h > 0:
        raise ConfigError(f"bandwidth must be positive, got {h}")
    if mesh < 2:
        raise ConfigError("mesh needs at least 2 points")
    pts = np.linspace(grid.lower, grid.upper, mesh)
    res = _newton(cs, pts, h, (grid.lower, grid.upper), nodes, MAX_ITER, GRAD_TOL)
    empty = np.isnan(res.alpha[:, 0])
    if empty.any():
        raise EstimationError(
            f"empty kernel window at {int(empty.sum())} mesh points with h={h:.6g}; widen h or re-truncate",
            pts[empty].tolist(),
        )
    if not res.converged.all():
        bad = ~res.converged
        raise EstimationError(
            f"local fits did not converge at {int(bad.sum())} mesh points with h={h:.6g}",
            pts[bad].tolist(),
        )
    interp = PchipInterpolator(pts, res.alpha[:, 0])
    g = interp(grid.nodes)
    dens = normalize(np.exp(g - g.max()), grid)
    c = ClrFunction.centered(grid, g)
    I0, I1, I2 = res.I.T
    infl = KERNEL_AT_ZERO * I2 / (cs.n * (I0 * I2 - I1**2))
    return LogDensityEstimate(grid, g, c, dens, pts, res.alpha, float(h), infl, interp)


def default_bandwidth(cs: CrossSection) -> float:
    """``[q(99) - q(1)] n^{-1/5}`` with weighted percentiles."""
    if cs.n < 10:
        raise DegenerateData(f"period {cs.t}: need at least 10 observations, got {cs.n}")
    q1, q99 = weighted_percentile(cs.x, cs.w, [1, 99])
    if not q99 > q1:
        raise DegenerateData(f"period {cs.t}: 1st and 99th percentiles coincide")
    return float((q99 - q1) * cs.n ** (-0.2))


class BandwidthChoice(NamedTuple):
    h: float
    candidates: np.ndarray
    gbic: np.ndarray
    loglik: np.ndarray
    dof: np.ndarray
    base: float


def gbic(cs: CrossSection, est: LogDensityEstimate) -> tuple[float, float, float]:
    """``(GBIC, log-likelihood, degrees of freedom)`` of a fitted estimate.

    The log-likelihood is ``Σ w_i log f̂(X_i)`` for the normalized estimate;
    the degrees of freedom are ``Σ w_i infl(X_i)`` with the local influence
    interpolated from the mesh.
    """
    ll = float(cs.w @ est.log_density_at(cs.x))
    dof = float(cs.w @ np.interp(cs.x, est.mesh, est.influence))
    return -2 * ll + dof * np.log(cs.n), ll, dof


def select_bandwidth(
    cs: CrossSection,
    grid: Grid,
    candidates: int = 11,
    mesh: int = MESH,
    nodes: int = QUAD_NODES,
) -> BandwidthChoice:
    """Minimize GBIC over equally spaced ``h`` in ``[0.75 b, 1.25 b]``."""
    b = default_bandwidth(cs)
    hs = np.linspace(0.75 * b, 1.25 * b, candidates)
    crit = np.full(candidates, np.inf)
    lls = np.full(candidates, np.nan)
    dofs = np.full(candidates, np.nan)
    for i, h in enumerate(hs):
        try:
            est = estimate_logdensity(cs, grid, h, mesh, nodes)
            crit[i], lls[i], dofs[i] = gbic(cs, est)
        except DenscointError:
            continue
    if not np.isfinite(crit).any():
        raise BandwidthSelectionFailed(
            f"period {cs.t}: no bandwidth in [{hs[0]:.4g}, {hs[-1]:.4g}] produced an estimate"
        )
    return BandwidthChoice(float(hs[np.argmin(crit)]), hs, crit, lls, dofs, b)
