"""
Operators on the discretized clr space and polynomial operator pencils.

Operators are plain ``n x n`` matrices acting on nodal clr values.  The
discrete inner product is ``<f, g> = f' W g`` with ``W`` the diagonal of
trapezoid weights, so adjoints, orthogonal projections, kernels and operator
norms are all computed in the symmetrized frame ``W^{1/2} A W^{-1/2}`` where
that inner product becomes the Euclidean one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from denscoint.errors import (
    DegenerateBasis,
    DimensionError,
    Indeterminate,
    NotI1,
    NotSingular,
    NumericalError,
)
from denscoint.grid_space import ClrFunction, Grid, integrate

__all__ = [
    "LinearMap",
    "OrthonormalBasis",
    "OperatorPencil",
    "apply",
    "adjoint",
    "gram_schmidt",
    "fourier_basis_clr",
    "pencil_eval",
    "companion_matrix",
    "spectrum_check_stationary",
    "i1_condition_check",
    "residue_n1",
    "pole_order_estimate",
    "orthogonal_projection",
    "oblique_projection",
]

KERNEL_RTOL = 1e-8
INVERTIBILITY_RTOL = 1e-8


def _sqrt_w(grid: Grid) -> np.ndarray:
    return np.sqrt(grid.weights)


def _vec(g, grid: Grid) -> np.ndarray:
    if isinstance(g, ClrFunction):
        if g.grid != grid:
            raise DimensionError("function lives on a different grid")
        return g.values
    v = np.asarray(g)
    if v.shape != (grid.n,):
        raise DimensionError(f"expected {grid.n} values, got shape {v.shape}")
    return v


class LinearMap:
    """Bounded operator on the discretized space, stored as a nodal matrix.

    Parameters
    ----------
    grid : Grid
    matrix : array_like
        ``n x n`` real or complex matrix acting on nodal clr values.
    weighted : bool
        The matrix represents an operator under the quadrature inner product.
    check : bool
        Verify that zero-integral inputs are mapped to zero-integral outputs.
    """

    __slots__ = ("grid", "matrix", "weighted")

    def __init__(self, grid: Grid, matrix, weighted: bool = True, check: bool = True):
        matrix = np.array(matrix)
        if not np.iscomplexobj(matrix):
            matrix = matrix.astype(float)
        if matrix.shape != (grid.n, grid.n):
            raise DimensionError(f"expected a {grid.n}x{grid.n} matrix, got {matrix.shape}")
        matrix.flags.writeable = False
        self.grid = grid
        self.matrix = matrix
        self.weighted = weighted
        if check:
            drift = self.mean_leak()
            if drift > 1e-9 * max(1.0, self.norm()):
                raise DimensionError(
                    f"map does not preserve zero-integral functions (leak {drift:.3g})"
                )

    def __repr__(self):
        return f"LinearMap(grid={self.grid!r})"

    # --- constructors -------------------------------------------------
    @classmethod
    def identity(cls, grid: Grid) -> "LinearMap":
        return cls(grid, np.eye(grid.n), check=False)

    @classmethod
    def zero(cls, grid: Grid) -> "LinearMap":
        return cls(grid, np.zeros((grid.n, grid.n)), check=False)

    @classmethod
    def rank_one(cls, u, v) -> "LinearMap":
        """The map ``f -> <f, u> v``."""
        grid = u.grid
        return cls(grid, np.outer(_vec(v, grid), grid.weights * _vec(u, grid)))

    @classmethod
    def diagonal_in(cls, basis: "OrthonormalBasis", values: Sequence[float]) -> "LinearMap":
        """``f -> sum_j values[j] <f, u_j> u_j`` for an orthonormal family."""
        values = np.asarray(values, dtype=float)
        U = basis.matrix[: len(values)]
        return cls(basis.grid, (U.T * values) @ (U * basis.grid.weights))

    @classmethod
    def restricted(cls, grid: Grid, matrix) -> "LinearMap":
        """Compress an arbitrary matrix to ``P0 M P0``, with ``P0`` the
        orthogonal projection onto zero-integral functions."""
        P0 = centering_matrix(grid)
        return cls(grid, P0 @ np.asarray(matrix) @ P0)

    # --- algebra ------------------------------------------------------
    def _check(self, other: "LinearMap") -> None:
        if other.grid != self.grid:
            raise DimensionError("maps live on different grids")

    def __add__(self, other):
        if not isinstance(other, LinearMap):
            return NotImplemented
        self._check(other)
        return LinearMap(self.grid, self.matrix + other.matrix, check=False)

    def __sub__(self, other):
        if not isinstance(other, LinearMap):
            return NotImplemented
        self._check(other)
        return LinearMap(self.grid, self.matrix - other.matrix, check=False)

    def __neg__(self):
        return LinearMap(self.grid, -self.matrix, check=False)

    def __mul__(self, a):
        if not np.isscalar(a):
            return NotImplemented
        return LinearMap(self.grid, a * self.matrix, check=False)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, LinearMap):
            self._check(other)
            return LinearMap(self.grid, self.matrix @ other.matrix, check=False)
        return NotImplemented

    # --- frames -------------------------------------------------------
    def symmetrized(self) -> np.ndarray:
        """``W^{1/2} A W^{-1/2}``; Euclidean geometry there is the quadrature one."""
        s = _sqrt_w(self.grid)
        return (s[:, None] * self.matrix) / s[None, :]

    @classmethod
    def from_symmetrized(cls, grid: Grid, M, check: bool = False) -> "LinearMap":
        s = _sqrt_w(grid)
        return cls(grid, (np.asarray(M) / s[:, None]) * s[None, :], check=check)

    def norm(self) -> float:
        """Operator norm under the quadrature inner product."""
        return float(np.linalg.norm(self.symmetrized(), 2))

    def mean_leak(self) -> float:
        """Largest output integral over unit-norm zero-integral inputs."""
        w = self.grid.weights
        row = w @ self.matrix
        row = row - (row.sum() / self.grid.measure) * w
        return float(np.linalg.norm(row / _sqrt_w(self.grid)))

    def real(self) -> "LinearMap":
        return LinearMap(self.grid, np.real(self.matrix), check=False)


def centering_matrix(grid: Grid) -> np.ndarray:
    """Matrix of ``f -> f - (1/λ(K)) ∫ f dλ``."""
    return np.eye(grid.n) - np.outer(np.ones(grid.n), grid.weights) / grid.measure


def apply(A: LinearMap, g: ClrFunction) -> ClrFunction:
    """Apply ``A`` to ``g``; removes integral drift above 1e-12."""
    if g.grid != A.grid:
        raise DimensionError("map and function live on different grids")
    out = A.matrix @ g.values
    if np.iscomplexobj(out):
        if np.max(np.abs(out.imag), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(out))):
            raise DimensionError("complex map produced a complex output")
        out = out.real
    drift = integrate(out, g.grid)
    if abs(drift) > 1e-12:
        out = out - drift / g.grid.measure
    return ClrFunction(g.grid, out, check=False)


def adjoint(A: LinearMap) -> LinearMap:
    """``W^{-1} A^H W``, the adjoint under the quadrature inner product."""
    w = A.grid.weights
    M = (A.matrix.conj().T * w[None, :]) / w[:, None]
    return LinearMap(A.grid, M, weighted=A.weighted, check=False)


class OrthonormalBasis:
    """Family of clr functions, orthonormal under the quadrature inner product."""

    __slots__ = ("grid", "matrix")

    def __init__(self, grid: Grid, functions, check: bool = True):
        if isinstance(functions, np.ndarray):
            M = np.array(functions, dtype=float, ndmin=2)
        else:
            M = np.array([_vec(f, grid) for f in functions], dtype=float, ndmin=2)
        if M.size == 0:
            M = np.zeros((0, grid.n))
        if M.shape[1] != grid.n:
            raise DimensionError(f"basis functions need {grid.n} values")
        M.flags.writeable = False
        self.grid = grid
        self.matrix = M
        if check and len(self):
            err = np.max(np.abs(self.gram() - np.eye(len(self))))
            if err > 1e-8:
                raise DegenerateBasis(f"family is not orthonormal (Gram error {err:.3g})")

    def __len__(self):
        return self.matrix.shape[0]

    def __getitem__(self, j) -> ClrFunction:
        return ClrFunction(self.grid, self.matrix[j], check=False)

    def __iter__(self):
        return (self[j] for j in range(len(self)))

    def gram(self) -> np.ndarray:
        return (self.matrix * self.grid.weights) @ self.matrix.T

    def projector(self) -> LinearMap:
        return LinearMap.diagonal_in(self, np.ones(len(self)))

    def coefficients(self, g) -> np.ndarray:
        """Inner products ``<g, u_j>``; ``g`` may be a (..., n) array."""
        v = g.values if isinstance(g, ClrFunction) else np.asarray(g)
        return (v * self.grid.weights) @ self.matrix.T


def gram_schmidt(seed: Iterable, grid: Grid | None = None, tol: float = 1e-10) -> OrthonormalBasis:
    """Orthonormalize ``seed`` in order under the quadrature inner product.

    Each vector is orthogonalized twice against its predecessors.  A residual
    whose norm falls below ``tol`` times the input norm raises DegenerateBasis.
    """
    seed = list(seed)
    if grid is None:
        if not seed or not isinstance(seed[0], ClrFunction):
            raise DimensionError("a grid is required for raw seed vectors")
        grid = seed[0].grid
    w = grid.weights
    out: list[np.ndarray] = []
    for j, f in enumerate(seed):
        v = np.array(_vec(f, grid), dtype=float)
        size = np.sqrt(v @ (w * v))
        for _ in range(2):
            for u in out:
                v -= (u @ (w * v)) * u
        pivot = np.sqrt(v @ (w * v))
        if size == 0 or pivot < tol * size:
            raise DegenerateBasis(f"seed function {j} is (nearly) dependent on its predecessors")
        out.append(v / pivot)
    return OrthonormalBasis(grid, np.array(out) if out else np.zeros((0, grid.n)))


def fourier_basis_clr(grid: Grid, m: int) -> OrthonormalBasis:
    """First ``m`` non-constant trigonometric functions on the grid interval.

    Ordered ``cos(1), sin(1), cos(2), sin(2), ...`` with period ``λ(K)``,
    scaled to unit quadrature norm.
    """
    if m < 1:
        raise DimensionError("m must be positive")
    if m > grid.n / 2:
        raise DimensionError(f"m = {m} exceeds the Nyquist limit n/2 = {grid.n / 2}")
    L = grid.measure
    phase = 2 * np.pi * (grid.nodes - grid.lower) / L
    rows = []
    for j in range(m):
        k = j // 2 + 1
        trig = np.cos if j % 2 == 0 else np.sin
        rows.append(np.sqrt(2.0 / L) * trig(k * phase))
    M = np.array(rows)
    M /= np.sqrt((M * M) @ grid.weights)[:, None]
    return OrthonormalBasis(grid, M)


@dataclass(frozen=True)
class OperatorPencil:
    """``A(z) = I - z A_1 - ... - z^p A_p``."""

    coefficients: tuple

    def __post_init__(self):
        coefs = tuple(self.coefficients)
        if not coefs:
            raise DimensionError("a pencil needs at least one coefficient")
        grid = coefs[0].grid
        if any(c.grid != grid for c in coefs):
            raise DimensionError("pencil coefficients live on different grids")
        object.__setattr__(self, "coefficients", coefs)

    @property
    def order(self) -> int:
        return len(self.coefficients)

    @property
    def grid(self) -> Grid:
        return self.coefficients[0].grid

    def __call__(self, z) -> LinearMap:
        return pencil_eval(self, z)

    def derivative(self, z) -> LinearMap:
        """``A'(z) = -sum_k k z^{k-1} A_k``."""
        n = self.grid.n
        M = np.zeros((n, n), dtype=complex if np.iscomplexobj(z) else float)
        for k, A in enumerate(self.coefficients, start=1):
            M = M - k * z ** (k - 1) * A.matrix
        return LinearMap(self.grid, M, check=False)


def pencil_eval(P: OperatorPencil, z) -> LinearMap:
    z = complex(z)
    if z.imag == 0:
        z = z.real
    M = np.eye(P.grid.n, dtype=complex if isinstance(z, complex) else float)
    for k, A in enumerate(P.coefficients, start=1):
        M = M - z**k * A.matrix
    return LinearMap(P.grid, M, check=False)


def companion_matrix(P: OperatorPencil) -> np.ndarray:
    """Block companion matrix of the Markovian (stacked AR(1)) form."""
    n, p = P.grid.n, P.order
    C = np.zeros((n * p, n * p), dtype=np.result_type(*[A.matrix for A in P.coefficients]))
    for k, A in enumerate(P.coefficients):
        C[:n, k * n : (k + 1) * n] = A.matrix
    if p > 1:
        C[n:, : n * (p - 1)] = np.eye(n * (p - 1))
    return C


class SpectrumCheck(NamedTuple):
    stationary: bool
    witness: complex


def spectrum_check_stationary(P: OperatorPencil, radius: float = 1 + 1e-6) -> SpectrumCheck:
    """Check that every point of the pencil spectrum lies outside ``|z| <= 1``.

    Spectrum points of the pencil are reciprocals of the nonzero companion
    eigenvalues, so the check is that the companion spectral radius is below
    ``1 / radius``.  The witness is the companion eigenvalue of largest
    modulus.
    """
    if radius <= 1:
        raise ValueError("radius must exceed 1")
    try:
        eig = np.linalg.eigvals(companion_matrix(P))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"companion eigenvalues failed: {exc}") from exc
    witness = complex(eig[np.argmax(np.abs(eig))])
    return SpectrumCheck(bool(abs(witness) < 1.0 / radius), witness)


class I1Check(NamedTuple):
    kernel_dim: int
    satisfied: bool
    singular_values: np.ndarray


def _kernel_split(A1: np.ndarray, rtol: float):
    U, s, Vh = np.linalg.svd(A1)
    rank = int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0
    return U, s, Vh, rank


def _i1_parts(P: OperatorPencil, rtol: float):
    A1 = P(1.0).symmetrized()
    U, s, Vh, rank = _kernel_split(A1, rtol)
    if rank == P.grid.n:
        raise NotSingular(f"A(1) is invertible (smallest singular value {s[-1]:.3g})")
    V0 = Vh[rank:].conj().T
    U0 = U[:, rank:]
    D = P.derivative(1.0).symmetrized()
    return U, rank, V0, U0, D


def i1_condition_check(P: OperatorPencil, rtol: float = KERNEL_RTOL) -> I1Check:
    """Check invertibility of ``(I - P) A'(1)`` restricted to ``ker A(1)``.

    ``P`` is the orthogonal projection onto ``ran A(1)``; the restricted map
    is expressed in orthonormal coordinates of ``ker A(1)`` and of the
    orthogonal complement of the range, giving an ``r x r`` matrix.
    """
    _, rank, V0, U0, D = _i1_parts(P, rtol)
    M = U0.conj().T @ D @ V0
    sv = np.linalg.svd(M, compute_uv=False)
    ok = bool(sv.size and sv[0] > 0 and sv[-1] > INVERTIBILITY_RTOL * sv[0])
    return I1Check(V0.shape[1], ok, sv)


def orthogonal_projection(A: LinearMap, rtol: float = KERNEL_RTOL) -> LinearMap:
    """Orthogonal projection onto ``ran A``."""
    U, _, _, rank = _kernel_split(A.symmetrized(), rtol)
    Ur = U[:, :rank]
    return LinearMap.from_symmetrized(A.grid, Ur @ Ur.conj().T)


def oblique_projection(A: LinearMap, mix, rtol: float = KERNEL_RTOL) -> LinearMap:
    """A non-orthogonal projection onto ``ran A``: ``P + P X (I - P)``.

    ``mix`` is any ``n x n`` matrix ``X`` (nodal frame).
    """
    Pm = orthogonal_projection(A, rtol).matrix
    I = np.eye(A.grid.n)
    return LinearMap(A.grid, Pm + Pm @ np.asarray(mix) @ (I - Pm), check=False)


def residue_n1(P: OperatorPencil, projection: LinearMap | None = None, rtol: float = KERNEL_RTOL) -> LinearMap:
    """Residue of ``A(z)^{-1}`` at ``z = 1`` for an I(1) pencil.

    Returns ``-[(I - P) A'(1)|ker A(1)]^{-1} (I - P)`` where ``P`` is
    ``projection`` (any projection onto ``ran A(1)``) or, by default, the
    orthogonal one.
    """
    U, rank, V0, U0, D = _i1_parts(P, rtol)
    r = V0.shape[1]
    if projection is None:
        C, L = U0, U0.conj().T
    else:
        Ps = projection.symmetrized()
        A1 = P(1.0).symmetrized()
        scale = max(1.0, np.linalg.norm(Ps, 2))
        if np.linalg.norm(Ps @ Ps - Ps, 2) > 1e-8 * scale:
            raise ValueError("projection is not idempotent")
        if np.linalg.norm(Ps @ A1 - A1, 2) > 1e-8 * scale * max(1.0, np.linalg.norm(A1, 2)):
            raise ValueError("projection does not fix ran A(1)")
        Uc, sc, Vch = np.linalg.svd(np.eye(P.grid.n) - Ps)
        if int(np.sum(sc > rtol * sc[0])) != r:
            raise ValueError("projection range has the wrong dimension")
        C = Uc[:, :r] * sc[:r]
        L = Vch[:r]
    M = L @ D @ V0
    sv = np.linalg.svd(M, compute_uv=False)
    if not (sv[0] > 0 and sv[-1] > INVERTIBILITY_RTOL * sv[0]):
        raise NotI1("(I - P) A'(1) restricted to ker A(1) is not invertible")
    N = -V0 @ np.linalg.solve(M, L)
    if np.max(np.abs(N.imag), initial=0.0) < 1e-12 * max(1.0, np.max(np.abs(N))):
        N = N.real
    return LinearMap.from_symmetrized(P.grid, N)


def pole_order_estimate(P: OperatorPencil, rtol: float = KERNEL_RTOL, powers=range(2, 7)) -> int:
    """Order of the pole of ``A(z)^{-1}`` at 1 from its growth rate.

    Fits the log-log slope of ``||A(z)^{-1}||`` against ``1 - z`` along
    ``z = 1 - 10^{-k}``.
    """
    _i1_parts(P, rtol)
    gaps = np.array([10.0 ** (-k) for k in powers])
    norms = []
    for gap in gaps:
        s = np.linalg.svd(P(1.0 - gap).symmetrized(), compute_uv=False)
        norms.append(1.0 / s[-1])
    slope = np.polyfit(np.log(gaps), np.log(norms), 1)[0]
    d = -slope
    if abs(d - round(d)) > 0.2 or round(d) < 1:
        raise Indeterminate(f"growth exponent {d:.3f} is not close to an integer")
    return int(round(d))
