"""Stationary-frame model of a synchronous machine on an infinite bus.

The machine is a round rotor with constant field current and no damper
circuit.  Balanced three-phase quantities are complex space vectors in the
stationary (alpha-beta) frame with the Clarke convention, so positive
rotation is counterclockwise.  The state is (theta, omega, I):

    J domega/dt = -K omega + Tm - Te        Te = -lam Re{conj(I) j e^{j theta}}
    dtheta/dt   = omega
    L dI/dt     = -R I - E + V              E  = lam j omega e^{j theta}

with the stiff-bus voltage V(t) = v_mag e^{j (omega_s t + bus_phase0)}.

theta is stored unwrapped so integrators see a smooth variable; every
derived quantity depends on it only through the unit phasor xi = e^{j theta},
and the angle is reduced mod 2*pi inside :func:`embed` only.

In per-unit mode the equations are used verbatim with per-unit parameter
values and per-unit time (one bus period is 2*pi/omega_s time units); the
base frequency enters only the certificate's eta scaling.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

MODE_SI = "si"
MODE_PER_UNIT = "per_unit"

#: Relative tolerance for membership of the embedded-state manifold.
TOL_MANIFOLD = 1e-9


class ManifoldViolation(ValueError):
    """An embedded state is too far off the unit-phasor manifold."""


def _require(cond: bool, what: str) -> None:
    if not cond:
        raise ValueError(f"invalid parameter: {what}")


@dataclass(frozen=True)
class MachineParams:
    """Physical constants of the machine.

    J    inertia, K frequency-droop (damping) coefficient, Tm mechanical
    torque, L stator inductance, R stator resistance, lam field flux
    magnitude.  All strictly positive.
    """

    J: float
    K: float
    Tm: float
    L: float
    R: float
    lam: float

    def __post_init__(self) -> None:
        _require(self.J > 0, "J > 0")
        _require(self.K > 0, "K > 0")
        _require(self.Tm > 0, "Tm > 0")
        _require(self.L > 0, "L > 0")
        _require(self.R > 0, "R > 0")
        _require(self.lam > 0, "lambda > 0")


@dataclass(frozen=True)
class GridParams:
    """Infinite-bus constants: frequency, space-vector magnitude, phase at t=0."""

    omega_s: float
    v_mag: float
    bus_phase0: float = 0.0

    def __post_init__(self) -> None:
        _require(self.omega_s > 0, "omega_s > 0")
        _require(self.v_mag > 0, "v_mag > 0")

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.omega_s


@dataclass(frozen=True)
class UnitSystem:
    """Unit convention: plain SI, or per-unit with a time-scaling base frequency.

    omega_base is used only where a per-unit quantity multiplies a time
    derivative (the certificate's eta terms); it is ignored in SI mode.
    """

    mode: str = MODE_SI
    omega_base: float = 1.0

    def __post_init__(self) -> None:
        _require(self.mode in (MODE_SI, MODE_PER_UNIT), "mode in {si, per_unit}")
        if self.mode == MODE_PER_UNIT:
            _require(self.omega_base > 0, "omega_base > 0")

    @property
    def eta_scale(self) -> float:
        """Factor converting eta to the value used in dissipation terms."""
        return self.omega_base if self.mode == MODE_PER_UNIT else 1.0


@dataclass(frozen=True)
class PhysicalState:
    """Rotor angle (rad, unwrapped), rotor frequency, complex stator current."""

    theta: float
    omega: float
    current: complex

    def __post_init__(self) -> None:
        if not (
            math.isfinite(self.theta)
            and math.isfinite(self.omega)
            and cmath.isfinite(self.current)
        ):
            raise ValueError("state fields must be finite")


@dataclass(frozen=True)
class StateDerivative:
    dtheta: float
    domega: float
    dcurrent: complex


@dataclass(frozen=True)
class EmbeddedState:
    """Angle-embedded coordinates s = (j*omega*xi, xi, I) in a common frame.

    s2 is the rotor unit phasor relative to the reference phase, s1 = j*omega*s2
    and s3 is the current in the same frame.  Valid states satisfy ||s2|| = 1
    and s1/(j*s2) real, both within TOL_MANIFOLD.
    """

    s1: complex
    s2: complex
    s3: complex

    def validate(self, tol: float = TOL_MANIFOLD) -> None:
        if abs(abs(self.s2) - 1.0) > tol:
            raise ManifoldViolation(f"||s2|| = {abs(self.s2)!r} is not 1")
        ratio = self.s1 / (1j * self.s2)
        if abs(ratio.imag) > tol * max(1.0, abs(ratio)):
            raise ManifoldViolation(f"s1/(j s2) = {ratio!r} is not real")

    @property
    def omega(self) -> float:
        """Rotor frequency recovered from the embedding."""
        return (self.s1 / (1j * self.s2)).real


def bus_voltage(t, grid: GridParams):
    """Bus space vector v_mag * exp(j*(omega_s*t + bus_phase0)); accepts arrays."""
    return grid.v_mag * np.exp(1j * (grid.omega_s * t + grid.bus_phase0))


def rhs_components(t, theta, omega, current, m: MachineParams, grid: GridParams):
    """Right-hand side of the machine equations as (dtheta, domega, dcurrent).

    Works elementwise on numpy arrays so the integrator can batch initial
    conditions; scalars pass through unchanged.
    """
    xi = np.exp(1j * theta)
    te = -m.lam * np.real(np.conj(current) * (1j * xi))
    emf_ = m.lam * 1j * omega * xi
    v = bus_voltage(t, grid)
    domega = (-m.K * omega + m.Tm - te) / m.J
    dcurrent = (-m.R * current - emf_ + v) / m.L
    return omega, domega, dcurrent


def electrical_torque(state: PhysicalState, m: MachineParams) -> float:
    """Air-gap torque Te = -lam * Re{conj(I) j e^{j theta}}."""
    xi = cmath.exp(1j * state.theta)
    return -m.lam * (state.current.conjugate() * 1j * xi).real


def emf(state: PhysicalState, m: MachineParams) -> complex:
    """Electromotive force E = lam * j * omega * e^{j theta}."""
    return m.lam * 1j * state.omega * cmath.exp(1j * state.theta)


def dynamics_rhs(
    t: float, state: PhysicalState, m: MachineParams, grid: GridParams
) -> StateDerivative:
    dtheta, domega, dcurrent = rhs_components(
        t, state.theta, state.omega, state.current, m, grid
    )
    return StateDerivative(float(dtheta), float(domega), complex(dcurrent))


def terminal_power(current: complex, voltage: complex) -> tuple[float, float]:
    """Real and reactive power delivered at the terminal.

    The current convention is inward, so exported power carries a minus sign:
    P = -Re{conj(I) V}, Q = -Im{conj(I) V}.
    """
    s = np.conj(current) * voltage
    return -np.real(s), -np.imag(s)


def embed(state: PhysicalState, reference_phase: float) -> EmbeddedState:
    """Embed a physical state on the unit-phasor manifold.

    The angle difference is reduced with IEEE remainder so the embedding is
    exactly 2*pi-periodic in theta; s1 is constructed from s2, never
    independently, which keeps the manifold invariants tight by construction.
    """
    ang = math.remainder(state.theta - reference_phase, math.tau)
    s2 = complex(math.cos(ang), math.sin(ang))
    s1 = 1j * state.omega * s2
    s3 = state.current * cmath.exp(-1j * reference_phase)
    return EmbeddedState(s1=s1, s2=s2, s3=s3)


def embed_at(state: PhysicalState, t: float, grid: GridParams) -> EmbeddedState:
    """Embed relative to the bus-synchronous frame at time t."""
    return embed(state, grid.omega_s * t + grid.bus_phase0)
