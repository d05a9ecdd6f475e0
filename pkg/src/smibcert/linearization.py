"""Linearization of the machine dynamics about a synchronous steady state.

In the synchronously rotating frame the dynamics are autonomous.  We use the
real coordinates

    z = [theta - omega_bar*t - bus_phase0,  omega,
         Re{conj(I) e^{j omega_bar t}},  Im{conj(I) e^{j omega_bar t}}],

in which a synchronous steady state is a fixed point.  The Jacobian is
computed by central finite differences of the transformed vector field and
its four eigenvalues by a characteristic-polynomial solver sized exactly for
this problem.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .model import GridParams, MachineParams, PhysicalState, rhs_components
from .steady_state import SteadyState


class NotAutonomous(RuntimeError):
    """The rotating-frame field changed between evaluation times."""


class ConvergenceFailure(RuntimeError):
    """Eigenvalue polish did not reach the residual bound."""


@dataclass(frozen=True)
class LinearizationResult:
    """4x4 Jacobian and its eigenvalues, sorted by (real, imag) ascending."""

    jacobian: np.ndarray
    eigenvalues: np.ndarray


def rotating_coords(
    state: PhysicalState, t: float, ss: SteadyState, grid: GridParams
) -> np.ndarray:
    """Map a physical state at time t to the rotating-frame coordinates z."""
    w = ss.omega_bar
    rot = np.conj(state.current) * cmath.exp(1j * w * t)
    return np.array(
        [state.theta - w * t - grid.bus_phase0, state.omega, rot.real, rot.imag]
    )


def _z_state(z: np.ndarray, t: float, grid: GridParams, w: float) -> PhysicalState:
    """Inverse of rotating_coords."""
    cur = complex(z[2], z[3]).conjugate() * cmath.exp(1j * w * t)
    return PhysicalState(
        theta=float(z[0]) + w * t + grid.bus_phase0, omega=float(z[1]), current=cur
    )


def _z_field(
    z: np.ndarray, t: float, m: MachineParams, grid: GridParams, w: float
) -> np.ndarray:
    """Rotating-frame vector field dz/dt evaluated through the physical model."""
    st = _z_state(z, t, grid, w)
    dtheta, domega, dcur = rhs_components(t, st.theta, st.omega, st.current, m, grid)
    # d/dt (conj(I) e^{jwt}) = conj(dI/dt) e^{jwt} + j w conj(I) e^{jwt}
    rot = cmath.exp(1j * w * t)
    dw_rot = np.conj(dcur) * rot + 1j * w * st.current.conjugate() * rot
    return np.array([dtheta - w, domega, dw_rot.real, dw_rot.imag])


def jacobian_at(
    ss: SteadyState, m: MachineParams, grid: GridParams, fd_step: float = 1e-6
) -> np.ndarray:
    """Central-difference Jacobian of the rotating-frame field at the steady state.

    The field is autonomous only at synchronous frequency, so each probe is
    evaluated at two distinct times and the results must agree to 1e-9; a
    larger mismatch raises NotAutonomous.
    """
    w = ss.omega_bar
    rot0 = ss.i_bar.conjugate()
    z0 = np.array([ss.delta, w, rot0.real, rot0.imag])
    t_probe = (0.0, 0.37 * 2.0 * math.pi / w)

    def field(z: np.ndarray) -> np.ndarray:
        f0 = _z_field(z, t_probe[0], m, grid, w)
        f1 = _z_field(z, t_probe[1], m, grid, w)
        scale = max(1.0, float(np.max(np.abs(f0))))
        if np.max(np.abs(f0 - f1)) > 1e-9 * scale:
            raise NotAutonomous(
                f"rotating-frame field differs across times by {np.max(np.abs(f0 - f1)):.3e}"
            )
        return f0

    jac = np.empty((4, 4))
    for i in range(4):
        h = fd_step * max(1.0, abs(z0[i]))
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        jac[:, i] = (field(zp) - field(zm)) / (2.0 * h)
    return jac


def linearize(ss: SteadyState, m: MachineParams, grid: GridParams) -> LinearizationResult:
    jac = jacobian_at(ss, m, grid)
    return LinearizationResult(jacobian=jac, eigenvalues=eig4(jac))


def _charpoly(a: np.ndarray) -> np.ndarray:
    """Characteristic polynomial coefficients by the Faddeev-LeVerrier recursion.

    Returns [1, c1, c2, c3, c4] with det(lambda*I - A) = lambda^4 + c1*lambda^3
    + c2*lambda^2 + c3*lambda + c4.
    """
    n = a.shape[0]
    coeffs = np.empty(n + 1)
    coeffs[0] = 1.0
    mk = np.array(a, dtype=float)
    for k in range(1, n + 1):
        ck = -np.trace(mk) / k
        coeffs[k] = ck
        if k < n:
            mk = a @ (mk + ck * np.eye(n))
    return coeffs


def _polyval_dval(coeffs: np.ndarray, x: complex) -> tuple[complex, complex]:
    """Horner evaluation of p(x) and p'(x)."""
    p = complex(coeffs[0])
    dp = 0.0 + 0.0j
    for c in coeffs[1:]:
        dp = dp * x + p
        p = p * x + c
    return p, dp


def eig4(a: np.ndarray, max_polish: int = 50) -> np.ndarray:
    """Eigenvalues of a real 4x4 matrix, sorted by (real, imag) ascending.

    Faddeev-LeVerrier gives the characteristic polynomial; its roots come from
    the quartic's companion matrix and are Newton-polished on the polynomial
    until |det(A - lambda*I)| <= 1e-8 * max(1, ||A||_F^4).
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (4, 4):
        raise ValueError("eig4 expects a 4x4 real matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("eig4 expects finite entries")
    coeffs = _charpoly(a)
    roots = np.roots(coeffs)
    bound = 1e-8 * max(1.0, float(np.linalg.norm(a)) ** 4)

    polished = []
    for lam in roots:
        lam = complex(lam)
        p, dp = _polyval_dval(coeffs, lam)
        it = 0
        while abs(p) > bound and it < max_polish:
            if abs(dp) <= 1e3 * np.finfo(float).tiny:
                break  # multiple root: Newton step undefined, keep the estimate
            lam = lam - p / dp
            p, dp = _polyval_dval(coeffs, lam)
            it += 1
        if abs(p) > bound:
            raise ConvergenceFailure(
                f"eigenvalue polish stalled at residual {abs(p):.3e} (bound {bound:.3e})"
            )
        polished.append(lam)

    out = np.array(polished, dtype=complex)
    order = np.lexsort((out.imag, out.real))
    return out[order]
