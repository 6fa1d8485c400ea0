"""Open-channel (shallow-water) benchmark.

A rectangular channel of unit width with state x = (q, p): water level q
and kinetic momentum density p.  The structure pairs an antidiagonal
transport operator with linear friction on the momentum component, and
the energy density

    0.5 * (q p^2 + exp(-(p - p_center)^2) + g q^2)

carries a turbulence-style term that is treated as unknown by the
learning pipeline; the remaining terms form the known prior.  Boundary
actuation commands the flow at the left gate and the pressure at the
right gate.  This module provides the true energy model, equilibria,
the channel's built-in Casimir pair and the fully wired boundary
controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import learn
from .control import (
    CasimirSpec,
    ControllerPhs,
    PassiveOutputConfig,
    QuadraticControllerEnergy,
    check_casimir_pde,
    check_matching_conditions,
    compute_feedthrough,
    controller_reference_on_leaf,
)
from .dphs import (
    BoundaryIoMatrices,
    SpatialGrid,
    StateField,
    StructureMatrices,
    TraceSelector,
    integrate_profile,
    io_from_trace_selectors,
    validate_io_matrices,
)
from .sim import (
    ClosedLoopSystem,
    PlantModel,
    StateGuardError,
    invert_co_energy_point,
)

DRY_FLOOR = 1e-6

PRESSURE = 0  # co-energy component indices
FLOW = 1


@dataclass(frozen=True)
class SweParams:
    """Channel geometry, friction, gravity and controller targets.

    The desired steady state carries flow ``q_bar`` everywhere and
    pressure ``p_bar`` at the downstream gate; for that pair to be
    reachable with a wet channel, ``p_bar`` must exceed
    1.5 (g q_bar)^(2/3).
    """

    length_l: float = 1.0
    d: float = 0.5
    g: float = 9.81
    delta_center: float = 5.0
    q_bar: float = 0.2
    p_bar: float = 10.0
    xi1: float = 0.5
    xi2: float = 0.5

    def __post_init__(self):
        if self.length_l <= 0:
            raise ValueError("channel length must be positive")
        if self.d < 0:
            raise ValueError("friction coefficient must be >= 0")
        if self.g <= 0:
            raise ValueError("gravity must be positive")
        if self.xi1 < 0 or self.xi2 < 0:
            raise ValueError("controller gains must be >= 0")


class ChannelEnergy:
    """True energy model of the channel, including the hidden term."""

    def __init__(self, params: SweParams):
        self.params = params

    def _split(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x[:, 0], x[:, 1]

    def density(self, x) -> np.ndarray:
        q, p = self._split(x)
        c = self.params.delta_center
        return 0.5 * (q * p**2 + np.exp(-((p - c) ** 2)) + self.params.g * q**2)

    def gradient(self, x) -> np.ndarray:
        q, p = self._split(x)
        c = self.params.delta_center
        bump = np.exp(-((p - c) ** 2))
        pressure = 0.5 * p**2 + self.params.g * q
        flow = q * p - (p - c) * bump
        return np.stack([pressure, flow], axis=1)

    def hessian(self, x) -> np.ndarray:
        q, p = self._split(x)
        c = self.params.delta_center
        bump = np.exp(-((p - c) ** 2))
        h = np.empty((q.shape[0], 2, 2))
        h[:, 0, 0] = self.params.g
        h[:, 0, 1] = h[:, 1, 0] = p
        h[:, 1, 1] = q + bump * (2.0 * (p - c) ** 2 - 1.0)
        return h


class KnownChannelEnergy:
    """Known part of the density, 0.5 (q p^2 + g q^2); the prior mean for
    density learning.  Serializes by name for model round-trips."""

    kind = "channel-known-density"

    def __init__(self, g: float):
        self.g = g

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q, p = x[:, 0], x[:, 1]
        return 0.5 * (q * p**2 + self.g * q**2)

    def gradient(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q, p = x[:, 0], x[:, 1]
        return np.stack([0.5 * p**2 + self.g * q, q * p], axis=1)

    def hessian(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q, p = x[:, 0], x[:, 1]
        h = np.empty((x.shape[0], 2, 2))
        h[:, 0, 0] = self.g
        h[:, 0, 1] = h[:, 1, 0] = p
        h[:, 1, 1] = q
        return h

    def config(self) -> dict:
        return {"kind": self.kind, "g": self.g}


learn.register_prior_mean(KnownChannelEnergy.kind,
                          lambda cfg: KnownChannelEnergy(g=cfg["g"]))


def energy_density(q, p, params: SweParams):
    """Pointwise true energy density (scalar- and array-friendly)."""
    out = ChannelEnergy(params).density(np.stack(np.broadcast_arrays(
        np.asarray(q, dtype=float), np.asarray(p, dtype=float)), axis=-1).reshape(-1, 2))
    return out[0] if np.isscalar(q) and np.isscalar(p) else out.reshape(np.shape(q))

def co_energy_pair(q, p, params: SweParams):
    """Pointwise true co-energy (pressure, flow)."""
    grad = ChannelEnergy(params).gradient(np.stack(np.broadcast_arrays(
        np.asarray(q, dtype=float), np.asarray(p, dtype=float)), axis=-1).reshape(-1, 2))
    if np.isscalar(q) and np.isscalar(p):
        return float(grad[0, 0]), float(grad[0, 1])
    shape = np.shape(np.broadcast_arrays(q, p)[0])
    return grad[:, 0].reshape(shape), grad[:, 1].reshape(shape)


def make_structure(params: SweParams) -> StructureMatrices:
    p1 = np.array([[0.0, -1.0], [-1.0, 0.0]])
    p0 = np.zeros((2, 2))
    g0 = np.diag([0.0, params.d])
    return StructureMatrices(p1=p1, p0=p0, g0=g0)


def gate_io(s: StructureMatrices) -> BoundaryIoMatrices:
    """Actuated pair: input (flow at the left gate, pressure at the right
    gate), output (pressure left, negative flow right)."""
    u_sel = (TraceSelector(1.0, FLOW, "a"), TraceSelector(1.0, PRESSURE, "b"))
    y_sel = (TraceSelector(1.0, PRESSURE, "a"), TraceSelector(-1.0, FLOW, "b"))
    return io_from_trace_selectors(u_sel, y_sel, s)


def closed_channel_io(s: StructureMatrices) -> BoundaryIoMatrices:
    """Reflecting pair: both inputs are boundary flows, so u = 0 walls the
    channel in and the only energy exchange is internal dissipation."""
    u_sel = (TraceSelector(1.0, FLOW, "a"), TraceSelector(1.0, FLOW, "b"))
    y_sel = (TraceSelector(1.0, PRESSURE, "a"), TraceSelector(-1.0, PRESSURE, "b"))
    return io_from_trace_selectors(u_sel, y_sel, s)


def wet_channel_guard(values: np.ndarray):
    q_min = values[:, 0].min()
    if q_min < DRY_FLOOR:
        raise StateGuardError(
            f"dry channel: min water level {q_min:.3e} < {DRY_FLOOR}")


def build_plant(params: SweParams, grid: SpatialGrid,
                energy_model=None, io: Optional[BoundaryIoMatrices] = None) -> PlantModel:
    """Assemble the channel as a simulatable plant.

    ``energy_model`` defaults to the true :class:`ChannelEnergy`; passing
    a learned surrogate yields the model-world plant instead.
    """
    model = energy_model if energy_model is not None else ChannelEnergy(params)
    s = make_structure(params)
    return PlantModel(
        grid=grid,
        structure=s,
        io=io if io is not None else gate_io(s),
        co_energy=model.gradient,
        co_jacobian=model.hessian,
        density=model.density,
        state_guard=wet_channel_guard,
        newton_floor=(0, DRY_FLOOR),
    )


@dataclass(frozen=True)
class EquilibriumProfile:
    """Desired steady co-energy targets and the matching state profile."""

    state: StateField
    pressure: np.ndarray
    flow: np.ndarray


def equilibrium_targets(params: SweParams, grid: SpatialGrid):
    """Steady-state co-energy profiles: constant flow q_bar and pressure
    rising upstream against the friction gradient."""
    z = grid.z
    pressure = params.q_bar * params.d * (grid.b - z) + params.p_bar
    flow = np.full_like(z, params.q_bar)
    return pressure, flow


def equilibrium_profile(params: SweParams, grid: SpatialGrid,
                        energy_model=None) -> EquilibriumProfile:
    """Recover the state profile whose co-energy matches the steady
    targets, pointwise damped Newton with a wet-channel floor."""
    model = energy_model if energy_model is not None else ChannelEnergy(params)
    pressure, flow = equilibrium_targets(params, grid)
    co_point = lambda x: model.gradient(x[None, :])[0]
    jac_point = lambda x: model.hessian(x[None, :])[0]
    guess = np.array([params.p_bar / params.g,
                      params.q_bar * params.g / params.p_bar])
    values = np.empty((grid.n_points, 2))
    for j in range(grid.n_points):
        target = np.array([pressure[j], flow[j]])
        values[j] = invert_co_energy_point(
            target, co_point, jac_point, guess, floor=(0, DRY_FLOOR),
            context=f"at grid point {j} (z={grid.z[j]:.4g})")
        guess = values[j]  # warm start along the channel
    return EquilibriumProfile(state=StateField(grid=grid, values=values),
                              pressure=pressure, flow=flow)


def channel_casimirs(params: SweParams, grid: SpatialGrid) -> CasimirSpec:
    """The channel's two invariants: a friction-weighted level/momentum
    functional and the stored volume, paired with gamma = -I."""
    z = grid.z
    psi = np.zeros((2, grid.n_points, 2))
    psi[0, :, 0] = params.d * (grid.b - z)
    psi[0, :, 1] = 1.0
    psi[1, :, 0] = 1.0
    return CasimirSpec(gamma=-np.eye(2), psi_gradients=psi, grid=grid)


def swe_controller(params: SweParams, x_c_star: np.ndarray,
                   x_c0: np.ndarray) -> ControllerPhs:
    return ControllerPhs(
        j_c=np.array([[0.0, 1.0], [-1.0, 0.0]]),
        g_c=np.eye(2),
        x_c=np.asarray(x_c0, dtype=float),
        hc=QuadraticControllerEnergy(
            xi=np.array([params.xi1, params.xi2]),
            x_star=np.asarray(x_c_star, dtype=float),
            linear=np.array([params.q_bar, params.p_bar]),
        ),
    )


def passive_output_gate_form(y, u, flow_field, params: SweParams,
                             grid: SpatialGrid) -> np.ndarray:
    """Channel-specific closed form of the modified output:

        ybar = y - (2 D integral(flow) dz, 0) + [[D L, 0], [0, 0]] u.

    Used as the independent cross-check of the general construction.
    """
    correction = 2.0 * params.d * integrate_profile(flow_field, grid)
    s_gate = np.array([[params.d * grid.length, 0.0], [0.0, 0.0]])
    return np.asarray(y, dtype=float) - np.array([correction, 0.0]) + s_gate @ np.asarray(u, dtype=float)


class WiringError(RuntimeError):
    """A structural check failed while assembling the closed loop."""


@dataclass(frozen=True)
class SweClosedLoop:
    """Wired closed loop plus the design artifacts behind it."""

    loop: ClosedLoopSystem
    equilibrium: EquilibriumProfile
    x_c_star: np.ndarray
    x_c0: np.ndarray
    io_report: object
    casimir_report: object
    matching_report: object


def build_closed_loop(params: SweParams, grid: SpatialGrid, x0: StateField,
                      design_model=None, plant_energy=None,
                      x_c0=None, s_prime=None, check: bool = True) -> SweClosedLoop:
    """Wire the boundary-controlled channel.

    ``design_model`` is the energy model the controller is built from
    (true model when None); ``plant_energy`` the model the plant actually
    evolves under.  The controller reference is placed on the Casimir
    leaf through (x0, x_c0) so the shaped energy attains its constrained
    minimum at the steady profile.  Structural checks (IO pair, Casimir
    PDE, matching conditions) abort the wiring on failure unless
    ``check`` is disabled.
    """
    design = design_model if design_model is not None else ChannelEnergy(params)
    s = make_structure(params)
    io = gate_io(s)
    plant = build_plant(params, grid, energy_model=plant_energy, io=io)
    casimirs = channel_casimirs(params, grid)
    x_c0 = np.zeros(2) if x_c0 is None else np.asarray(x_c0, dtype=float)

    equilibrium = equilibrium_profile(params, grid, energy_model=design)
    x_c_star = controller_reference_on_leaf(casimirs, equilibrium.state, x0, x_c0)
    controller = swe_controller(params, x_c_star, x_c0)
    output_cfg = compute_feedthrough(casimirs, controller, s, grid, s_prime=s_prime)

    io_report = validate_io_matrices(io)
    casimir_report = check_casimir_pde(casimirs, s, grid)
    matching_report = check_matching_conditions(casimirs, controller, output_cfg, io, s)
    if check:
        if not io_report.passed:
            raise WiringError(f"boundary IO pair failed validation: {io_report}")
        if not casimir_report.passed:
            raise WiringError(
                f"Casimir PDE residuals too large: {casimir_report.residuals}")
        if not matching_report.passed:
            raise WiringError(
                "matching conditions failed: structure residuals "
                f"{matching_report.residual_structure}, gain residuals "
                f"{matching_report.residual_gain}")

    loop = ClosedLoopSystem(
        plant=plant,
        controller=controller,
        casimirs=casimirs,
        output_cfg=output_cfg,
        design_co_energy=design.gradient,
        design_density=design.density,
    )
    return SweClosedLoop(
        loop=loop,
        equilibrium=equilibrium,
        x_c_star=x_c_star,
        x_c0=x_c0,
        io_report=io_report,
        casimir_report=casimir_report,
        matching_report=matching_report,
    )
