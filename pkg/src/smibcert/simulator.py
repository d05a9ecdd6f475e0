"""Trajectory integration, Lyapunov monitoring and basin sampling.

The integrator works on the real state y = (theta, omega, Re I, Im I); the
unit phasor xi = e^{j theta} is always derived, never integrated, so there is
no manifold drift to correct.  A fixed-step classic Runge-Kutta scheme is the
default; an adaptive Dormand-Prince scheme (scipy's RK45) is available for
stiff parameter sets.  Batched initial conditions share one vectorized
right-hand side, which is what makes Monte-Carlo basin sampling affordable.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .certificate import (
    Certificate,
    DELTA_MARGIN_FRACTION,
    Verdict,
    balance_inequality_check,
    balance_tolerance,
    storage_coefficient,
    storage_local,
)
from .model import GridParams, MachineParams, PhysicalState, UnitSystem
from .steady_state import SteadyState

RK4_FIXED = "rk4"
RK45_ADAPTIVE = "rk45"

#: Orbit-distance threshold below which a trajectory counts as converged.
CONVERGENCE_DISTANCE = 1e-4


class StepUnderflow(RuntimeError):
    """Adaptive integration drove the step size below the resolvable floor."""


class NonFinite(RuntimeError):
    """The state blew up during integration."""


class CertificateRequired(ValueError):
    """The operation needs a CertifiedROA certificate."""


class SoundnessViolation(RuntimeError):
    """An initial condition inside the certified sublevel set failed to converge."""


@dataclass(frozen=True)
class SimOptions:
    """Integration options; times are in model time units (per-unit time when
    the parameters are per-unit)."""

    step: float
    duration: float
    method: str = RK4_FIXED
    rel_tol: float = 1e-9
    abs_tol: float = 1e-11
    record_storage: bool = False
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.step <= 0 or self.duration <= 0:
            raise ValueError("step and duration must be positive")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.method not in (RK4_FIXED, RK45_ADAPTIVE):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution: strictly increasing times and aligned state series."""

    times: np.ndarray
    thetas: np.ndarray
    omegas: np.ndarray
    currents: np.ndarray
    storage: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.times)

    def state(self, i: int) -> PhysicalState:
        return PhysicalState(
            theta=float(self.thetas[i]),
            omega=float(self.omegas[i]),
            current=complex(self.currents[i]),
        )

    def sliced(self, stop: int) -> "Trajectory":
        return Trajectory(
            times=self.times[:stop],
            thetas=self.thetas[:stop],
            omegas=self.omegas[:stop],
            currents=self.currents[:stop],
            storage=None if self.storage is None else self.storage[:stop],
        )

    def to_csv(self, path) -> None:
        """Write t, theta, omega, re_I, im_I[, S] with a mandatory header row."""
        cols = ["t", "theta", "omega", "re_I", "im_I"]
        series = [self.times, self.thetas, self.omegas, self.currents.real, self.currents.imag]
        if self.storage is not None:
            cols.append("S")
            series.append(self.storage)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for row in zip(*series):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


@dataclass(frozen=True)
class MonitorReport:
    """Lyapunov-decrease summary along a recorded trajectory."""

    monotone: bool
    max_increase: float
    tol_mono: float
    max_violation: float
    tol_diss: float
    first_exit_time: float | None
    n_inside: int


@dataclass(frozen=True)
class BasinBox:
    """Half-widths of the sampling box in (phi, domega, Re z, Im z)."""

    phi: float = 0.5
    domega: float = 0.2
    re_z: float = 0.05
    im_z: float = 0.05


@dataclass(frozen=True)
class BasinReport:
    """Outcome of Monte-Carlo sampling around a certified steady state."""

    n_samples: int
    n_in_sublevel: int
    n_converged_of_in_sublevel: int
    n_converged_total: int
    failures: list
    initial_coords: np.ndarray
    in_sublevel: np.ndarray
    converged: np.ndarray
    final_distance: np.ndarray

    def raise_if_unsound(self) -> None:
        if self.failures:
            raise SoundnessViolation(
                f"{len(self.failures)} in-sublevel samples failed to converge"
            )


def _rk4_step(t, y_theta, y_omega, y_cur, h, m, grid):
    from .model import rhs_components

    k1 = rhs_components(t, y_theta, y_omega, y_cur, m, grid)
    k2 = rhs_components(
        t + 0.5 * h,
        y_theta + 0.5 * h * k1[0],
        y_omega + 0.5 * h * k1[1],
        y_cur + 0.5 * h * k1[2],
        m,
        grid,
    )
    k3 = rhs_components(
        t + 0.5 * h,
        y_theta + 0.5 * h * k2[0],
        y_omega + 0.5 * h * k2[1],
        y_cur + 0.5 * h * k2[2],
        m,
        grid,
    )
    k4 = rhs_components(
        t + h, y_theta + h * k3[0], y_omega + h * k3[1], y_cur + h * k3[2], m, grid
    )
    th = y_theta + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    om = y_omega + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    cu = y_cur + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return th, om, cu


def integrate(
    initial: PhysicalState,
    m: MachineParams,
    grid: GridParams,
    opts: SimOptions,
    reference: SteadyState | None = None,
    t0: float = 0.0,
) -> Trajectory:
    """Integrate the machine equations from `initial` over opts.duration.

    With record_storage set (and a reference steady state supplied) the
    returned trajectory carries the storage series S(t) evaluated with
    opts.eta.  In adaptive mode opts.step is the output sampling interval;
    the internal step is error-controlled.
    """
    if opts.method == RK4_FIXED:
        n = max(1, int(round(opts.duration / opts.step)))
        h = opts.duration / n
        times = np.linspace(t0, t0 + opts.duration, n + 1)
        thetas = np.empty(n + 1)
        omegas = np.empty(n + 1)
        currents = np.empty(n + 1, dtype=complex)
        th, om, cu = initial.theta, initial.omega, initial.current
        thetas[0], omegas[0], currents[0] = th, om, cu
        for i in range(n):
            th, om, cu = _rk4_step(times[i], th, om, cu, h, m, grid)
            thetas[i + 1], omegas[i + 1], currents[i + 1] = th, om, cu
        if not (np.all(np.isfinite(thetas)) and np.all(np.isfinite(omegas)) and np.all(np.isfinite(currents))):
            raise NonFinite("state blew up during fixed-step integration")
    else:
        from scipy.integrate import solve_ivp

        def rhs(t, y):
            from .model import rhs_components

            dth, dom, dcur = rhs_components(t, y[0], y[1], y[2] + 1j * y[3], m, grid)
            return [dth, dom, dcur.real, dcur.imag]

        n = max(1, int(round(opts.duration / opts.step)))
        times = np.linspace(t0, t0 + opts.duration, n + 1)
        sol = solve_ivp(
            rhs,
            (t0, float(times[-1])),
            [initial.theta, initial.omega, initial.current.real, initial.current.imag],
            method="RK45",
            t_eval=times,
            rtol=opts.rel_tol,
            atol=opts.abs_tol,
        )
        if not sol.success:
            if "step size" in (sol.message or "").lower():
                raise StepUnderflow(sol.message)
            raise NonFinite(sol.message or "adaptive integration failed")
        thetas, omegas = sol.y[0], sol.y[1]
        currents = sol.y[2] + 1j * sol.y[3]
        if not np.all(np.isfinite(sol.y)):
            raise NonFinite("state blew up during adaptive integration")

    storage = None
    if opts.record_storage:
        if reference is None:
            raise ValueError("record_storage requires a reference steady state")
        storage = storage_series(
            times, thetas, omegas, currents, reference, grid, opts.eta, m
        )
    return Trajectory(times=times, thetas=thetas, omegas=omegas, currents=currents, storage=storage)


def storage_series(
    times: np.ndarray,
    thetas: np.ndarray,
    omegas: np.ndarray,
    currents: np.ndarray,
    ss: SteadyState,
    grid: GridParams,
    eta: float,
    m: MachineParams,
) -> np.ndarray:
    """Vectorized storage S(t) of a sampled trajectory against the steady orbit."""
    phase = grid.omega_s * times + grid.bus_phase0
    s2 = np.exp(1j * (thetas - phase))
    s1 = 1j * omegas * s2
    s3 = currents * np.exp(-1j * phase)
    wb = ss.omega_bar
    coeff = storage_coefficient(ss, eta, m)
    return (
        0.5 * m.J * np.abs(s1 - 1j * wb * ss.xi_bar) ** 2
        + 0.5 * m.L * np.abs(s3 - ss.i_bar) ** 2
        + 0.5 * coeff * np.abs(s2 - ss.xi_bar) ** 2
    )


def orbit_distance(
    times, thetas, omegas, currents, ss: SteadyState, grid: GridParams
):
    """Phase-invariant distance to the steady orbit; elementwise on arrays.

    d = sqrt(||xi conj(xi_orbit) - 1||^2 + (w - wb)^2 + ||I e^{-j phase} - i_bar||^2)
    """
    phase = grid.omega_s * np.asarray(times) + grid.bus_phase0
    dxi = np.exp(1j * (np.asarray(thetas) - phase)) * np.conj(ss.xi_bar) - 1.0
    dcur = np.asarray(currents) * np.exp(-1j * phase) - ss.i_bar
    return np.sqrt(
        np.abs(dxi) ** 2 + (np.asarray(omegas) - ss.omega_bar) ** 2 + np.abs(dcur) ** 2
    )


def lyapunov_monitor(
    traj: Trajectory,
    ss: SteadyState,
    cert: Certificate,
    m: MachineParams,
    grid: GridParams,
    units: UnitSystem,
) -> MonitorReport:
    """Check monotone storage decay and the dissipation inequality.

    Samples outside the certified frequency half-line are reported via
    first_exit_time and excluded from the checks; nothing is guaranteed out
    there and nothing is asserted.
    """
    if traj.storage is None:
        raise ValueError("trajectory must carry a recorded storage series")
    if cert.rho is None:
        raise ValueError("certificate carries no decay radius")
    wb = ss.omega_bar
    threshold = wb - cert.rho + DELTA_MARGIN_FRACTION * cert.rho
    outside = np.nonzero(traj.omegas <= threshold)[0]
    if outside.size:
        stop = int(outside[0])
        first_exit_time = float(traj.times[stop])
        inside = traj.sliced(stop)
        inside = Trajectory(
            times=inside.times,
            thetas=inside.thetas,
            omegas=inside.omegas,
            currents=inside.currents,
            storage=traj.storage[:stop],
        )
    else:
        first_exit_time = None
        inside = traj

    s = inside.storage
    if s is None or len(s) < 4:
        return MonitorReport(
            monotone=True,
            max_increase=0.0,
            tol_mono=0.0,
            max_violation=math.nan,
            tol_diss=math.nan,
            first_exit_time=first_exit_time,
            n_inside=0 if s is None else len(s),
        )

    h = float(np.median(np.diff(inside.times)))
    s_scale = float(np.max(np.abs(s)))
    # Allowance for integrator error in the sampled states: fourth-order global
    # error for the fixed-step scheme, tolerance-level error for the adaptive one.
    tol_mono = 1e-8 * float(s[0]) + (h**4 + 1e3 * np.finfo(float).eps) * s_scale
    increments = np.diff(s)
    max_increase = float(np.max(increments)) if increments.size else 0.0

    max_violation = balance_inequality_check(inside, ss, cert.eta, m, grid, units)
    tol_diss = balance_tolerance(inside.times, s)
    return MonitorReport(
        monotone=max_increase <= tol_mono,
        max_increase=max_increase,
        tol_mono=tol_mono,
        max_violation=max_violation,
        tol_diss=tol_diss,
        first_exit_time=first_exit_time,
        n_inside=len(s),
    )


def _local_coords(
    state: PhysicalState, t: float, ss: SteadyState, grid: GridParams
) -> tuple[float, float, complex]:
    """(phi, domega, z) of a state relative to the steady orbit at time t."""
    phase = grid.omega_s * t + grid.bus_phase0
    phi = math.remainder(state.theta - phase - ss.delta, math.tau)
    domega = state.omega - ss.omega_bar
    z = state.current * np.exp(-1j * phase) - ss.i_bar
    return phi, domega, complex(z)


def sublevel_membership(
    state: PhysicalState,
    t: float,
    ss: SteadyState,
    cert: Certificate,
    m: MachineParams,
    grid: GridParams,
    n_segment: int = 64,
) -> bool:
    """Conservative membership test for the certified sublevel component.

    True iff the straight segment from the steady state to `state` in local
    coordinates stays strictly below the sublevel threshold at n_segment
    points (endpoints included).  This under-approximates the connected
    component, which keeps the attraction guarantee sound.
    """
    if cert.verdict is not Verdict.CERTIFIED_ROA:
        raise CertificateRequired("sublevel membership needs a CertifiedROA certificate")
    phi, domega, z = _local_coords(state, t, ss, grid)
    u = np.linspace(0.0, 1.0, n_segment)
    s_vals = storage_local(u * phi, u * domega, u * z, ss, cert.eta, m)
    return bool(np.all(s_vals < cert.roa_level))


def _integrate_batch(
    coords: np.ndarray,
    ss: SteadyState,
    m: MachineParams,
    grid: GridParams,
    h: float,
    n_steps: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Fixed-step RK4 on a batch of local-coordinate offsets; returns final state."""
    phase0 = grid.bus_phase0
    theta = ss.delta + phase0 + coords[:, 0]
    omega = ss.omega_bar + coords[:, 1]
    cur = (ss.i_bar + coords[:, 2] + 1j * coords[:, 3]) * np.exp(1j * phase0)
    t = 0.0
    for i in range(n_steps):
        theta, omega, cur = _rk4_step(t, theta, omega, cur, h, m, grid)
        t = (i + 1) * h
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(omega)) and np.all(np.isfinite(cur))):
        raise NonFinite("a basin sample blew up; shrink the box or the step")
    return theta, omega, cur, t


def basin_sample(
    ss: SteadyState,
    cert: Certificate,
    m: MachineParams,
    grid: GridParams,
    units: UnitSystem,
    n: int,
    seed: int,
    box: BasinBox,
    horizon_periods: float = 160.0,
    step_periods: float = 1e-3,
) -> BasinReport:
    """Sample the box around the steady state and test certified convergence.

    Every draw is simulated for the horizon; membership in the (conservative)
    sublevel component is decided analytically from the initial coordinates.
    Draws happen up front from one seeded generator, so the report does not
    depend on how work is scheduled; SMIB_THREADS caps worker threads.
    """
    if cert.verdict is not Verdict.CERTIFIED_ROA:
        raise CertificateRequired("basin sampling needs a CertifiedROA certificate")
    rng = np.random.default_rng(seed)
    half = np.array([box.phi, box.domega, box.re_z, box.im_z])
    coords = rng.uniform(-1.0, 1.0, size=(n, 4)) * half

    u = np.linspace(0.0, 1.0, 64)
    member = np.empty(n, dtype=bool)
    for i in range(n):
        s_vals = storage_local(
            u * coords[i, 0],
            u * coords[i, 1],
            u * (coords[i, 2] + 1j * coords[i, 3]),
            ss,
            cert.eta,
            m,
        )
        member[i] = bool(np.all(s_vals < cert.roa_level))

    period = grid.period
    h = step_periods * period
    n_steps = max(1, int(round(horizon_periods * period / h)))

    workers = max(1, int(os.environ.get("SMIB_THREADS", "1")))
    chunks = np.array_split(np.arange(n), min(workers, n))

    def run(idx: np.ndarray):
        th, om, cu, t_end = _integrate_batch(coords[idx], ss, m, grid, h, n_steps)
        return idx, orbit_distance(t_end, th, om, cu, ss, grid)

    final_distance = np.empty(n)
    if workers == 1 or len(chunks) == 1:
        for idx in chunks:
            if idx.size:
                i, d = run(idx)
                final_distance[i] = d
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, d in pool.map(run, [c for c in chunks if c.size]):
                final_distance[i] = d

    converged = final_distance < CONVERGENCE_DISTANCE
    failures = [tuple(coords[i]) for i in range(n) if member[i] and not converged[i]]
    return BasinReport(
        n_samples=n,
        n_in_sublevel=int(np.sum(member)),
        n_converged_of_in_sublevel=int(np.sum(member & converged)),
        n_converged_total=int(np.sum(converged)),
        failures=failures,
        initial_coords=coords,
        in_sublevel=member,
        converged=converged,
        final_distance=final_distance,
    )
