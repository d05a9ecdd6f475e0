"""Existence and computation of synchronous steady states.

A synchronous steady state is a periodic motion with omega = omega_s,
constant current magnitude and current phase rotating at omega_s.  Writing
theta(t) = omega_s*t + bus_phase0 + delta and I(t) = i_bar * e^{j(omega_s*t
+ bus_phase0)}, the stator equation becomes algebraic,

    i_bar(delta) = (v_mag - j*lam*omega_s*e^{j delta}) / (R + j*omega_s*L),

and the remaining unknown delta solves the torque balance

    g(delta) = Tm - K*omega_s - Te(delta) = 0.

g is a sinusoid plus a constant, so there are 0, 1 or 2 roots in
[-pi, pi); the closed-form indicator

    P = [-lam^2*omega_s*R + (Tm - K*omega_s)(L^2*omega_s^2 + R^2)]
        / [lam * v_mag * sqrt(L^2*omega_s^2 + R^2)]

decides which: two steady states for |P| < 1, one for |P| = 1, none for
|P| > 1.  v_mag here is the bus space-vector magnitude, the same quantity
that drives the stator equation.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .model import GridParams, MachineParams, terminal_power

#: Half-width of the |P| = 1 band treated as the tangency (single-root) case.
TOL_BOUNDARY = 1e-9

#: Default number of scan cells over [-pi, pi).
SCAN_CELLS = 720


class CountMismatch(RuntimeError):
    """Root scan found a different number of roots than the indicator predicts."""


@dataclass(frozen=True)
class SteadyState:
    """One synchronous steady state, fully resolved.

    delta is the rotor phase offset against the bus phase, xi_bar = e^{j delta},
    i_bar the current phasor in the synchronously rotating bus frame.  The
    cached inner products re_ixi = Re{conj(i_bar) xi_bar} and re_ijxi =
    Re{conj(i_bar) j xi_bar} are the quantities the stability certificate
    feeds on.
    """

    omega_bar: float
    delta: float
    xi_bar: complex
    i_bar: complex
    p_bar: float
    q_bar: float
    re_ixi: float
    re_ijxi: float

    @property
    def i_mag(self) -> float:
        return abs(self.i_bar)


@dataclass(frozen=True)
class ExistenceReport:
    """Indicator value and the implied number of synchronous steady states."""

    p_script: float
    count: int


def existence_indicator(
    m: MachineParams, grid: GridParams, tol_boundary: float = TOL_BOUNDARY
) -> ExistenceReport:
    """Evaluate the closed-form indicator and classify the root count."""
    w = grid.omega_s
    z2 = m.L * m.L * w * w + m.R * m.R
    p = (-m.lam * m.lam * w * m.R + (m.Tm - m.K * w) * z2) / (
        m.lam * grid.v_mag * math.sqrt(z2)
    )
    if abs(abs(p) - 1.0) <= tol_boundary:
        count = 1
    elif abs(p) < 1.0:
        count = 2
    else:
        count = 0
    return ExistenceReport(p_script=p, count=count)


def _current_phasor(delta, m: MachineParams, grid: GridParams):
    """Steady stator solution in the rotating bus frame; elementwise on arrays."""
    w = grid.omega_s
    return (grid.v_mag - 1j * m.lam * w * np.exp(1j * delta)) / (m.R + 1j * w * m.L)


def _torque_balance(delta, m: MachineParams, grid: GridParams):
    """g(delta) = Tm - K*omega_s - Te(delta); elementwise on arrays."""
    w = grid.omega_s
    i_ph = _current_phasor(delta, m, grid)
    te = -m.lam * np.real(np.conj(i_ph) * (1j * np.exp(1j * delta)))
    return m.Tm - m.K * w - te


def _bisect(g, lo: float, hi: float, tol: float) -> float:
    glo = g(lo)
    if glo == 0.0:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) <= tol or hi - lo <= 4.0 * math.ulp(mid):
            return mid
        if (gm > 0) == (glo > 0):
            lo, glo = mid, gm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _wrap_pi(x: float) -> float:
    """Wrap into [-pi, pi)."""
    y = math.remainder(x, math.tau)
    return -math.pi if y == math.pi else y


def _analytic_roots(m: MachineParams, grid: GridParams, p: float) -> list[float]:
    """Closed-form roots of the torque balance, used when the scan misses.

    g(delta) = const - amp*sin(delta + phi_z) with amp = lam*v_mag/|Z|, so the
    roots are asin(P) - phi_z and pi - asin(P) - phi_z.  Only needed for
    near-tangent pairs closer together than one scan cell.
    """
    w = grid.omega_s
    phi_z = math.atan2(w * m.L, m.R)
    s = math.asin(max(-1.0, min(1.0, p)))
    return [_wrap_pi(s - phi_z), _wrap_pi(math.pi - s - phi_z)]


def solve_steady_states(
    m: MachineParams,
    grid: GridParams,
    n_cells: int = SCAN_CELLS,
    tol_boundary: float = TOL_BOUNDARY,
) -> list[SteadyState]:
    """Find every synchronous steady state, sorted by delta.

    Roots of the torque balance are located by a uniform scan over [-pi, pi)
    with bisection refinement to |g| <= 1e-12*max(Tm, K*omega_s).  The
    tangency case |P| ~ 1 is located by minimizing |g|.  A near-tangent pair
    that falls inside a single scan cell is recovered from the closed form
    and polished; a genuine disagreement with the indicator raises
    CountMismatch.
    """
    report = existence_indicator(m, grid, tol_boundary)
    g = lambda d: float(_torque_balance(d, m, grid))
    scale = max(m.Tm, m.K * grid.omega_s)
    tol = 1e-12 * scale

    if report.count == 0:
        return []

    grid_pts = np.linspace(-math.pi, math.pi, n_cells + 1)
    gv = _torque_balance(grid_pts, m, grid)

    if report.count == 1:
        # Double root: g touches zero, no sign change to bisect on.
        i = int(np.argmin(np.abs(gv)))
        lo = grid_pts[max(i - 1, 0)]
        hi = grid_pts[min(i + 1, n_cells)]
        res = minimize_scalar(lambda d: abs(g(d)), bounds=(lo, hi), method="bounded")
        roots = [float(res.x)]
        if abs(g(roots[0])) > math.sqrt(tol_boundary) * scale:
            raise CountMismatch(
                f"tangency root residual {abs(g(roots[0])):.3e} too large"
            )
        return [_build(r, m, grid) for r in roots]

    roots: list[float] = []
    for i in range(n_cells):
        a, b = float(grid_pts[i]), float(grid_pts[i + 1])
        ga, gb = float(gv[i]), float(gv[i + 1])
        if ga == 0.0:
            roots.append(a)
        elif ga * gb < 0.0:
            roots.append(_bisect(g, a, b, tol))

    if len(roots) < report.count:
        # Near-tangent pair inside one cell: seed from the closed form, then
        # polish on g itself so the result is still a root of the scanned
        # function, not of the rearranged one.
        roots = []
        for seed in _analytic_roots(m, grid, report.p_script):
            res = minimize_scalar(
                lambda d: abs(g(d)),
                bounds=(seed - 2 * math.pi / n_cells, seed + 2 * math.pi / n_cells),
                method="bounded",
            )
            r = float(res.x)
            if abs(g(r)) <= math.sqrt(tol_boundary) * scale:
                roots.append(r)
        roots = sorted(set(roots))

    if len(roots) != report.count:
        raise CountMismatch(
            f"scan found {len(roots)} roots, indicator predicts {report.count} "
            f"(P = {report.p_script:.6g})"
        )
    return [_build(r, m, grid) for r in sorted(roots)]


def _build(delta: float, m: MachineParams, grid: GridParams) -> SteadyState:
    xi = cmath.exp(1j * delta)
    i_bar = complex(_current_phasor(delta, m, grid))
    # Phasors share the bus rotation, so power is evaluated at matching phase.
    p_bar, q_bar = terminal_power(i_bar, complex(grid.v_mag))
    return SteadyState(
        omega_bar=grid.omega_s,
        delta=delta,
        xi_bar=xi,
        i_bar=i_bar,
        p_bar=float(p_bar),
        q_bar=float(q_bar),
        re_ixi=(i_bar.conjugate() * xi).real,
        re_ijxi=(i_bar.conjugate() * 1j * xi).real,
    )


def steady_residual(ss: SteadyState, m: MachineParams, grid: GridParams) -> float:
    """Violation of both steady-state balances (0 for an exact steady state).

    Returns max of the torque-balance residual |Tm - K*omega_s - Te| and the
    stator residual ||(R + j*omega_s*L) i_bar + j*lam*omega_s*xi_bar - v_mag||.
    """
    w = grid.omega_s
    te = -m.lam * (ss.i_bar.conjugate() * 1j * ss.xi_bar).real
    torque = abs(m.Tm - m.K * w - te)
    stator = abs((m.R + 1j * w * m.L) * ss.i_bar + 1j * m.lam * w * ss.xi_bar - grid.v_mag)
    return max(torque, stator)
