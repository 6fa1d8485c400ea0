"""Boundary control by interconnection.

A finite-dimensional port-Hamiltonian controller is coupled to the
boundary port of the distributed system.  Casimir invariants of the
form  C_i = gamma_i^T x_c + Psi_i(x)  tie the controller state to the
plant state; a modified passive output compensates the distributed
dissipation so that energy can be shaped along dissipative directions
as well.  This module holds the controller, the Casimir machinery
(PDE residual, matching conditions, values), the dissipation
feedthrough, the modified output and the robust energy-decrement
ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dphs import (
    BoundaryIoMatrices,
    DimensionError,
    SpatialGrid,
    StateField,
    StructureMatrices,
    apply_structure_operator,
    integrate_profile,
    port_map,
)

SKEW_TOL = 1e-12
CASIMIR_PDE_TOL = 1e-6
MATCHING_TOL = 1e-8


class SingularConfigurationError(ValueError):
    """G_c^T gamma vanished; the output correction is undefined."""


@dataclass(frozen=True)
class QuadraticControllerEnergy:
    """Controller Hamiltonian 0.5 sum xi_i (x_i - x*_i)^2 - linear^T x_c."""

    xi: np.ndarray
    x_star: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).ravel()
        x_star = np.asarray(self.x_star, dtype=float).ravel()
        linear = np.asarray(self.linear, dtype=float).ravel()
        if not (xi.shape == x_star.shape == linear.shape):
            raise DimensionError("xi, x_star and linear must share a length")
        if (xi < 0).any():
            raise ValueError("quadratic weights xi must be >= 0")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "x_star", x_star)
        object.__setattr__(self, "linear", linear)

    def value(self, x_c: np.ndarray) -> float:
        d = np.asarray(x_c, dtype=float) - self.x_star
        return float(0.5 * self.xi @ d**2 - self.linear @ np.asarray(x_c, dtype=float))

    def gradient(self, x_c: np.ndarray) -> np.ndarray:
        return self.xi * (np.asarray(x_c, dtype=float) - self.x_star) - self.linear

    def hessian(self, x_c: np.ndarray = None) -> np.ndarray:
        return np.diag(self.xi)


@dataclass(frozen=True)
class ControllerPhs:
    """Finite-dimensional PHS controller x_c' = J_c dH_c/dx_c + G_c u_c."""

    j_c: np.ndarray
    g_c: np.ndarray
    x_c: np.ndarray
    hc: QuadraticControllerEnergy

    def __post_init__(self):
        j_c = np.atleast_2d(np.asarray(self.j_c, dtype=float))
        g_c = np.atleast_2d(np.asarray(self.g_c, dtype=float))
        x_c = np.asarray(self.x_c, dtype=float).ravel()
        n_c = x_c.shape[0]
        if j_c.shape != (n_c, n_c) or g_c.shape != (n_c, n_c):
            raise DimensionError("J_c and G_c must be n_c x n_c")
        if np.abs(j_c + j_c.T).max() >= SKEW_TOL:
            raise ValueError("J_c must be skew-symmetric")
        object.__setattr__(self, "j_c", j_c)
        object.__setattr__(self, "g_c", g_c)
        object.__setattr__(self, "x_c", x_c)

    @property
    def n_c(self) -> int:
        return self.x_c.shape[0]

    def energy(self) -> float:
        return self.hc.value(self.x_c)

    def energy_gradient(self) -> np.ndarray:
        return self.hc.gradient(self.x_c)


def controller_rhs(c: ControllerPhs, x_c: np.ndarray, u_c: np.ndarray) -> np.ndarray:
    return c.j_c @ c.hc.gradient(x_c) + c.g_c @ u_c


def controller_step(c: ControllerPhs, u_c: np.ndarray, dt: float):
    """One explicit RK4 step of the controller with u_c held constant.

    Returns the advanced controller and the natural output
    y_c = G_c^T dH_c/dx_c at the new state.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u_c = np.asarray(u_c, dtype=float).ravel()
    x = c.x_c
    k1 = controller_rhs(c, x, u_c)
    k2 = controller_rhs(c, x + 0.5 * dt * k1, u_c)
    k3 = controller_rhs(c, x + 0.5 * dt * k2, u_c)
    k4 = controller_rhs(c, x + dt * k3, u_c)
    x_new = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    advanced = replace(c, x_c=x_new)
    return advanced, c.g_c.T @ c.hc.gradient(x_new)


@dataclass(frozen=True)
class CasimirSpec:
    """Casimir candidates C_i = gamma[:, i]^T x_c + Psi_i(x).

    Each Psi_i is a linear functional of the state; ``psi_gradients``
    stores its (state-independent) functional derivative sampled on the
    grid, shape (n_casimirs, n_points, n).  Values are evaluated with
    trapezoidal quadrature.
    """

    gamma: np.ndarray
    psi_gradients: np.ndarray
    grid: SpatialGrid

    def __post_init__(self):
        gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        psi = np.asarray(self.psi_gradients, dtype=float)
        if psi.ndim != 3 or psi.shape[1] != self.grid.n_points:
            raise DimensionError(
                "psi_gradients must be (n_casimirs, n_points, n), got "
                f"{psi.shape}")
        if gamma.shape[1] != psi.shape[0]:
            raise DimensionError("one gamma column per Casimir required")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "psi_gradients", psi)

    @property
    def n_casimirs(self) -> int:
        return self.psi_gradients.shape[0]

    def psi_values(self, state: StateField) -> np.ndarray:
        """Psi_i(x) = integral sum_d dPsi_i/dx_d * x_d dz, per Casimir."""
        w = self.grid.trapezoid_weights()
        return np.einsum("j,ijd,jd->i", w, self.psi_gradients, state.values)

    def boundary_traces(self, i: int) -> np.ndarray:
        """Stacked traces (dPsi_i/dx(b); dPsi_i/dx(a)) of one Casimir."""
        return np.concatenate([self.psi_gradients[i, -1], self.psi_gradients[i, 0]])


@dataclass(frozen=True)
class PassiveOutputConfig:
    """Feedthrough of the modified passive output: S with decomposition
    S = (dissipation-dependent part) + S', S' symmetric PSD."""

    s_matrix: np.ndarray
    s_prime: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.s_matrix, dtype=float))
        sp = np.atleast_2d(np.asarray(self.s_prime, dtype=float))
        if np.abs(sp - sp.T).max() >= SKEW_TOL:
            raise ValueError("S' must be symmetric")
        if np.linalg.eigvalsh(sp).min() < -SKEW_TOL:
            raise ValueError("S' must be PSD")
        object.__setattr__(self, "s_matrix", s)
        object.__setattr__(self, "s_prime", sp)


@dataclass(frozen=True)
class CasimirPdeReport:
    """Residuals of P1 d/dz(dPsi/dx) + (P0 - G0) dPsi/dx per Casimir."""

    residuals: np.ndarray
    tol: float = CASIMIR_PDE_TOL

    @property
    def passed(self) -> bool:
        return bool((self.residuals < self.tol).all())


def check_casimir_pde(cs: CasimirSpec, s: StructureMatrices,
                      grid: SpatialGrid) -> CasimirPdeReport:
    """Evaluate the structural PDE each Psi must satisfy; max-norm residual."""
    residuals = np.empty(cs.n_casimirs)
    for i in range(cs.n_casimirs):
        r = apply_structure_operator(cs.psi_gradients[i], s, grid)
        residuals[i] = np.abs(r).max()
    return CasimirPdeReport(residuals=residuals)


def _casimir_gains(cs: CasimirSpec, c: ControllerPhs):
    """Vectors g_i = G_c^T gamma_i, rejecting vanishing ones."""
    gains = c.g_c.T @ cs.gamma
    norms = np.linalg.norm(gains, axis=0)
    if (norms < 1e-14).any():
        raise SingularConfigurationError("G_c^T gamma = 0 for some Casimir")
    return gains, norms


def compute_feedthrough(cs: CasimirSpec, c: ControllerPhs, s: StructureMatrices,
                        grid: SpatialGrid, s_prime=None) -> PassiveOutputConfig:
    """Dissipation feedthrough of the modified output.

    Sums, over Casimirs, g_i (integral dPsi_i^T G0 dPsi_i dz) g_i^T
    normalized by (b - a) |g_i|^4, plus the free PSD term S'.
    """
    if s_prime is None:
        s_prime = np.zeros((c.n_c, c.n_c))
    gains, norms = _casimir_gains(cs, c)
    total = np.array(s_prime, dtype=float, copy=True)
    for i in range(cs.n_casimirs):
        dpsi = cs.psi_gradients[i]
        integrand = np.einsum("jd,de,je->j", dpsi, s.g0, dpsi)
        integral = integrate_profile(integrand, grid)
        g = gains[:, i]
        total += np.outer(g, g) * integral / (grid.length * norms[i] ** 4)
    return PassiveOutputConfig(s_matrix=total, s_prime=np.asarray(s_prime, dtype=float))


def passive_output(y: np.ndarray, u: np.ndarray, e_field: np.ndarray,
                   cs: CasimirSpec, c: ControllerPhs, s: StructureMatrices,
                   poc: PassiveOutputConfig, grid: SpatialGrid) -> np.ndarray:
    """Modified output ybar = y + S u + dissipation correction.

    The correction is 2 g_i / |g_i|^2 times integral(dPsi_i^T G0 e) dz,
    summed over Casimirs, where ``e_field`` is the co-energy of the
    energy functional the controller was designed for.
    """
    gains, norms = _casimir_gains(cs, c)
    ybar = np.asarray(y, dtype=float) + poc.s_matrix @ np.asarray(u, dtype=float)
    for i in range(cs.n_casimirs):
        integrand = np.einsum("jd,de,je->j", cs.psi_gradients[i], s.g0, e_field)
        integral = integrate_profile(integrand, grid)
        ybar = ybar + 2.0 * gains[:, i] / norms[i] ** 2 * integral
    return ybar


@dataclass(frozen=True)
class MatchingReport:
    """Residuals of the two controller/Casimir matching conditions."""

    residual_structure: np.ndarray
    residual_gain: np.ndarray
    tol: float = MATCHING_TOL

    @property
    def passed(self) -> bool:
        return bool(
            (self.residual_structure < self.tol).all()
            and (self.residual_gain < self.tol).all()
        )


def check_matching_conditions(cs: CasimirSpec, c: ControllerPhs,
                              poc: PassiveOutputConfig, m: BoundaryIoMatrices,
                              s: StructureMatrices) -> MatchingReport:
    """Per-Casimir residuals of

        (J_c + G_c S G_c^T) gamma_i + G_c W_tilde R (dPsi_i traces) = 0
        G_c^T gamma_i + W R (dPsi_i traces) = 0

    with R the boundary-port map.
    """
    r = port_map(s)
    res1 = np.empty(cs.n_casimirs)
    res2 = np.empty(cs.n_casimirs)
    for i in range(cs.n_casimirs):
        traces = cs.boundary_traces(i)
        gamma_i = cs.gamma[:, i]
        c1 = (c.j_c + c.g_c @ poc.s_matrix @ c.g_c.T) @ gamma_i \
            + c.g_c @ (m.w_tilde @ (r @ traces))
        c2 = c.g_c.T @ gamma_i + m.w @ (r @ traces)
        res1[i] = np.abs(c1).max()
        res2[i] = np.abs(c2).max()
    return MatchingReport(residual_structure=res1, residual_gain=res2)


def casimir_values(cs: CasimirSpec, state: StateField, x_c: np.ndarray) -> np.ndarray:
    """C_i = gamma_i^T x_c + Psi_i(x)."""
    return cs.gamma.T @ np.asarray(x_c, dtype=float) + cs.psi_values(state)


def controller_reference_on_leaf(cs: CasimirSpec, x_eq: StateField,
                                 x0: StateField, x_c0: np.ndarray) -> np.ndarray:
    """Controller state reached at the plant equilibrium on the invariant
    leaf through (x0, x_c0).

    Solves gamma^T x_c* + Psi(x_eq) = gamma^T x_c0 + Psi(x0); requires a
    square invertible gamma.  Shaping the closed-loop energy around this
    x_c* places its constrained minimum at the equilibrium.
    """
    gamma = cs.gamma
    if gamma.shape[0] != gamma.shape[1]:
        raise DimensionError("leaf reference needs a square gamma")
    rhs = cs.psi_values(x0) - cs.psi_values(x_eq)
    return np.asarray(x_c0, dtype=float) + np.linalg.solve(gamma.T, rhs)


@dataclass(frozen=True)
class RobustnessLedger:
    """Coefficients of the robust energy-decrement bound.

    With dissipation coercive at level ``lam`` on its active subspace, a
    model-error budget ``eta_bar`` holding with probability at least
    ``confidence``, and a Young-inequality split ``epsilon`` in
    (0, 2 lam), the closed-loop energy rate is bounded by

        dH_d/dt <= -(lam - epsilon/2) |e|^2 + eta_bar^2 / (2 epsilon).
    """

    lam: float
    epsilon: float
    eta_bar: float
    confidence: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.epsilon < 2 * self.lam:
            raise ValueError(
                f"epsilon must lie in (0, 2*lam) = (0, {2 * self.lam}), "
                f"got {self.epsilon}")
        if self.eta_bar < 0:
            raise ValueError("eta_bar must be >= 0")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")

    @property
    def decrement_coeff(self) -> float:
        return self.lam - 0.5 * self.epsilon

    @property
    def offset(self) -> float:
        return self.eta_bar**2 / (2.0 * self.epsilon)


def coercivity_on_range(g0: np.ndarray, tol: float = 1e-12) -> float:
    """Smallest eigenvalue of G0 restricted to its own range.

    For a PSD G0 this is the smallest nonzero eigenvalue (0 if G0 = 0):
    the dissipation is coercive at this level on the subspace it acts on,
    which is the quantity the decrement audit uses.
    """
    eigs = np.linalg.eigvalsh(np.asarray(g0, dtype=float))
    active = eigs[eigs > tol]
    return float(active.min()) if active.size else 0.0


def energy_rate_bound(r: RobustnessLedger, e_field_norm_sq: float) -> float:
    """Upper bound on dH_d/dt given the squared co-energy norm."""
    return -r.decrement_coeff * e_field_norm_sq + r.offset
