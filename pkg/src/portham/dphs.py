"""Discretized 1-D distributed port-Hamiltonian structure.

The continuous object is the evolution law

    x_t(t, z) = (P1 d/dz + (P0 - G0)) e(x(t, z)),      z in [a, b],

where ``e = dH/dx`` is the co-energy field of an energy functional H,
P1 is symmetric, P0 skew-symmetric and G0 symmetric positive
semidefinite.  This module holds the uniform grid, the constant
structure matrices, second-order finite-difference application of the
structure operator, the boundary port variables, boundary input/output
maps and the quadrature pieces of the energy balance

    dH/dt = -integral(e^T G0 e) + y^T u.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

ALGEBRAIC_TOL = 1e-10
SYMMETRY_TOL = 1e-12


class DimensionError(ValueError):
    """Shapes of fields/matrices are inconsistent."""


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid on [a, b] with at least three points."""

    a: float
    b: float
    n_points: int

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"grid needs a < b, got a={self.a}, b={self.b}")
        if self.n_points < 3:
            raise ValueError(f"grid needs n_points >= 3, got {self.n_points}")

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.n_points - 1)

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def z(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_points)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_points, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


@dataclass(frozen=True)
class StructureMatrices:
    """Constant operators (P1, P0, G0) of the structure operator.

    P1 must be symmetric, P0 skew-symmetric and G0 symmetric PSD; the
    constructor rejects violations.  Indefiniteness of P1 is only
    warned about: physically meaningful instances (e.g. open-channel
    flow) pair a symmetric indefinite P1 with a first-order transport
    structure.
    """

    p1: np.ndarray
    p0: np.ndarray
    g0: np.ndarray

    def __post_init__(self):
        p1 = np.atleast_2d(np.asarray(self.p1, dtype=float))
        p0 = np.atleast_2d(np.asarray(self.p0, dtype=float))
        g0 = np.atleast_2d(np.asarray(self.g0, dtype=float))
        n = p1.shape[0]
        for name, m in (("p1", p1), ("p0", p0), ("g0", g0)):
            if m.shape != (n, n):
                raise DimensionError(f"{name} must be {n}x{n}, got {m.shape}")
        if np.abs(p1 - p1.T).max() >= SYMMETRY_TOL:
            raise ValueError("p1 must be symmetric")
        if np.abs(p0 + p0.T).max() >= SYMMETRY_TOL:
            raise ValueError("p0 must be skew-symmetric")
        if np.abs(g0 - g0.T).max() >= SYMMETRY_TOL:
            raise ValueError("g0 must be symmetric")
        g0_eigs = np.linalg.eigvalsh(g0)
        if g0_eigs.min() < -SYMMETRY_TOL:
            raise ValueError(f"g0 must be PSD, min eigenvalue {g0_eigs.min():.3e}")
        if np.linalg.eigvalsh(p1).min() <= 0:
            warnings.warn("p1 is not positive definite", stacklevel=2)
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "g0", g0)

    @property
    def n(self) -> int:
        return self.p1.shape[0]


@dataclass(frozen=True)
class StateField:
    """Distributed state sampled on a grid, shape (n_points, n)."""

    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != self.grid.n_points:
            raise DimensionError(
                f"state values must be (n_points, n) with n_points="
                f"{self.grid.n_points}, got {v.shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BoundaryPort:
    """Boundary flow/effort pair (f, e) in R^n each."""

    f_bnd: np.ndarray
    e_bnd: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f_bnd, dtype=float).ravel()
        e = np.asarray(self.e_bnd, dtype=float).ravel()
        if f.shape != e.shape:
            raise DimensionError("flow and effort must have the same length")
        if not (np.isfinite(f).all() and np.isfinite(e).all()):
            raise ValueError("boundary port entries must be finite")
        object.__setattr__(self, "f_bnd", f)
        object.__setattr__(self, "e_bnd", e)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.f_bnd, self.e_bnd])


@dataclass(frozen=True)
class TraceSelector:
    """One input/output component as a signed co-energy trace.

    ``sign * e[component]`` evaluated at the endpoint ``end`` ('a' or 'b').
    """

    sign: float
    component: int
    end: str

    def __post_init__(self):
        if self.end not in ("a", "b"):
            raise ValueError(f"end must be 'a' or 'b', got {self.end!r}")


@dataclass(frozen=True)
class BoundaryIoMatrices:
    """Input/output maps u = W (f; e), y = W_tilde (f; e).

    When built from trace selectors the selector lists are kept so that
    a simulator can enforce the input definition directly on co-energy
    traces.
    """

    w: np.ndarray
    w_tilde: np.ndarray
    u_selectors: tuple = field(default=None)
    y_selectors: tuple = field(default=None)

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        wt = np.atleast_2d(np.asarray(self.w_tilde, dtype=float))
        if w.shape != wt.shape or w.shape[1] != 2 * w.shape[0]:
            raise DimensionError(
                f"W and W_tilde must both be n x 2n, got {w.shape}, {wt.shape}"
            )
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "w_tilde", wt)

    @property
    def n(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class IoValidationReport:
    """Per-condition residuals for a boundary input/output pair."""

    residual_wsw: float
    residual_wswt: float
    residual_wtswt: float
    rank_w: int
    rank_w_tilde: int
    stacked_invertible: bool
    tol: float

    @property
    def passed(self) -> bool:
        n_ok = self.rank_w == self.rank_w_tilde
        return (
            max(self.residual_wsw, self.residual_wswt, self.residual_wtswt) < self.tol
            and self.stacked_invertible
            and n_ok
        )


def boundary_port(e_at_b, e_at_a, s: StructureMatrices) -> BoundaryPort:
    """Boundary port (f, e) from co-energy traces at the two endpoints.

    f = P1 (e(b) - e(a)) / sqrt(2),  e = (e(b) + e(a)) / sqrt(2).
    """
    e_b = np.asarray(e_at_b, dtype=float).ravel()
    e_a = np.asarray(e_at_a, dtype=float).ravel()
    if e_b.shape != (s.n,) or e_a.shape != (s.n,):
        raise DimensionError(f"traces must have length {s.n}")
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    return BoundaryPort(
        f_bnd=inv_sqrt2 * (s.p1 @ (e_b - e_a)),
        e_bnd=inv_sqrt2 * (e_b + e_a),
    )


def port_map(s: StructureMatrices) -> np.ndarray:
    """The 2n x 2n matrix mapping stacked traces (e(b); e(a)) to (f; e)."""
    n = s.n
    eye = np.eye(n)
    return np.block([[s.p1, -s.p1], [eye, eye]]) / np.sqrt(2.0)


def sigma_matrix(n: int) -> np.ndarray:
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, eye], [eye, zero]])


def validate_io_matrices(m: BoundaryIoMatrices, tol: float = ALGEBRAIC_TOL) -> IoValidationReport:
    """Check the compatibility conditions of a boundary input/output pair.

    Required: W Sigma W^T = 0, W Sigma W_tilde^T = I, W_tilde Sigma
    W_tilde^T = 0 with Sigma = [[0, I], [I, 0]], both maps full rank and
    the stacked 2n x 2n matrix invertible.
    """
    n = m.n
    sig = sigma_matrix(n)
    stacked = np.vstack([m.w, m.w_tilde])
    try:
        cond_ok = np.linalg.cond(stacked) < 1.0 / np.finfo(float).eps
    except np.linalg.LinAlgError:
        cond_ok = False
    return IoValidationReport(
        residual_wsw=float(np.abs(m.w @ sig @ m.w.T).max()),
        residual_wswt=float(np.abs(m.w @ sig @ m.w_tilde.T - np.eye(n)).max()),
        residual_wtswt=float(np.abs(m.w_tilde @ sig @ m.w_tilde.T).max()),
        rank_w=int(np.linalg.matrix_rank(m.w)),
        rank_w_tilde=int(np.linalg.matrix_rank(m.w_tilde)),
        stacked_invertible=bool(cond_ok),
        tol=tol,
    )


def boundary_io(port: BoundaryPort, m: BoundaryIoMatrices):
    """Evaluate input and output, u = W (f; e) and y = W_tilde (f; e)."""
    fe = port.stacked()
    if fe.shape != (2 * m.n,):
        raise DimensionError(f"port has length {fe.shape[0]}, expected {2 * m.n}")
    return m.w @ fe, m.w_tilde @ fe


def _selector_matrix(selectors, n: int) -> np.ndarray:
    """Rows picking signed trace components out of (e(b); e(a))."""
    mat = np.zeros((len(selectors), 2 * n))
    for i, sel in enumerate(selectors):
        offset = 0 if sel.end == "b" else n
        mat[i, offset + sel.component] = sel.sign
    return mat


def io_from_trace_selectors(u_selectors, y_selectors, s: StructureMatrices) -> BoundaryIoMatrices:
    """Build (W, W_tilde) so that u and y equal the given signed traces.

    Each selector names one co-energy component at one endpoint; the
    returned pair should be checked with :func:`validate_io_matrices`
    (not every selector combination yields a power-conjugate pair).
    """
    if len(u_selectors) != s.n or len(y_selectors) != s.n:
        raise DimensionError(f"need exactly {s.n} selectors for u and for y")
    r_inv = np.linalg.inv(port_map(s))
    w = _selector_matrix(u_selectors, s.n) @ r_inv
    w_tilde = _selector_matrix(y_selectors, s.n) @ r_inv
    return BoundaryIoMatrices(
        w=w, w_tilde=w_tilde,
        u_selectors=tuple(u_selectors), y_selectors=tuple(y_selectors),
    )


def evaluate_selectors(selectors, e_field: np.ndarray) -> np.ndarray:
    """Signed trace values of a co-energy field, one per selector."""
    out = np.empty(len(selectors))
    for i, sel in enumerate(selectors):
        row = -1 if sel.end == "b" else 0
        out[i] = sel.sign * e_field[row, sel.component]
    return out


def spatial_derivative(field: np.ndarray, grid: SpatialGrid,
                       closure: str = "one-sided-2") -> np.ndarray:
    """d/dz of a gridded field with 2nd-order central stencils inside.

    ``closure`` picks the endpoint rows: "one-sided-2" uses 2nd-order
    one-sided stencils (most accurate pointwise); "sbp" uses 1st-order
    one-sided rows, which together with trapezoidal quadrature satisfy
    summation by parts, so discrete integration by parts (and with it the
    discrete energy/Casimir balance of a simulation) is exact.  Works on
    (n_points,) or (n_points, n) arrays.
    """
    f = np.asarray(field, dtype=float)
    if f.shape[0] != grid.n_points:
        raise DimensionError("field length does not match the grid")
    h = grid.h
    d = np.empty_like(f)
    d[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
    if closure == "one-sided-2":
        d[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
        d[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * h)
    elif closure == "sbp":
        d[0] = (f[1] - f[0]) / h
        d[-1] = (f[-1] - f[-2]) / h
    else:
        raise ValueError(f"unknown closure {closure!r}")
    return d


def derivative_matrix(grid: SpatialGrid, closure: str = "one-sided-2") -> np.ndarray:
    """Dense matrix representation of :func:`spatial_derivative`."""
    m = grid.n_points
    h = grid.h
    d = np.zeros((m, m))
    for j in range(1, m - 1):
        d[j, j - 1] = -0.5 / h
        d[j, j + 1] = 0.5 / h
    if closure == "one-sided-2":
        d[0, :3] = np.array([-1.5, 2.0, -0.5]) / h
        d[-1, -3:] = np.array([0.5, -2.0, 1.5]) / h
    elif closure == "sbp":
        d[0, :2] = np.array([-1.0, 1.0]) / h
        d[-1, -2:] = np.array([-1.0, 1.0]) / h
    else:
        raise ValueError(f"unknown closure {closure!r}")
    return d


def apply_structure_operator(e_field: np.ndarray, s: StructureMatrices,
                             grid: SpatialGrid,
                             closure: str = "one-sided-2") -> np.ndarray:
    """Apply (P1 d/dz + (P0 - G0)) to a co-energy field, pointwise in z."""
    e = np.asarray(e_field, dtype=float)
    if e.shape != (grid.n_points, s.n):
        raise DimensionError(
            f"co-energy field must be ({grid.n_points}, {s.n}), got {e.shape}"
        )
    de = spatial_derivative(e, grid, closure=closure)
    return de @ s.p1.T + e @ (s.p0 - s.g0).T


def structure_operator_matrix(s: StructureMatrices, grid: SpatialGrid,
                              closure: str = "one-sided-2") -> np.ndarray:
    """The structure operator as a dense matrix on stacked fields.

    Stacking is z-major: a field e with rows e(z_j) becomes the vector
    [e(z_0); e(z_1); ...], so the matrix is kron(D, P1) + kron(I, P0 - G0).
    """
    d = derivative_matrix(grid, closure=closure)
    eye = np.eye(grid.n_points)
    return np.kron(d, s.p1) + np.kron(eye, s.p0 - s.g0)


def integrate_profile(values: np.ndarray, grid: SpatialGrid) -> float:
    """Trapezoidal integral of a scalar profile over [a, b]."""
    return float(grid.trapezoid_weights() @ np.asarray(values, dtype=float))


def dissipated_power(e_field: np.ndarray, s: StructureMatrices,
                     grid: SpatialGrid) -> float:
    """Trapezoidal quadrature of integral(e^T G0 e) over the domain."""
    e = np.asarray(e_field, dtype=float)
    integrand = np.einsum("ji,ik,jk->j", e, s.g0, e)
    return integrate_profile(integrand, grid)
