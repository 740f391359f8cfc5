"""Fixed-point (Z-bus) power flow and voltage-magnitude sensitivities.

Injections use the load convention: positive ``p``/``q`` is consumption, so a
PV node exporting power has negative ``p``.  The state vector used throughout
the package stacks them as ``z = [p; q]`` (length ``2n``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100
FINITE_DIFFERENCE = "finite_difference"
LINEARIZATION = "fixed_point_linearization"


class PowerFlowError(RuntimeError):
    """Power flow did not converge (extreme loading) or produced non-finite values."""


@dataclass(frozen=True, eq=False)
class InjectionVector:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p and q must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("injections must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_state(cls, z):
        z = np.asarray(z, dtype=float)
        n = z.size // 2
        return cls(z[:n], z[n:])

    @property
    def z(self):
        return np.concatenate([self.p, self.q])

    @property
    def s(self):
        return self.p + 1j * self.q


@dataclass(frozen=True, eq=False)
class VoltageSolution:
    v_complex: np.ndarray
    v_mag: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    """``h[:, :n] = d|v|/dp`` and ``h[:, n:] = d|v|/dq`` at ``operating_point``."""

    h: np.ndarray
    operating_point: InjectionVector
    method: str
    v_mag: np.ndarray | None = None


def _as_injection(s):
    if isinstance(s, InjectionVector):
        return s
    return InjectionVector.from_state(s)


def power_mismatch(model, v, s):
    """Consumed power implied by ``v`` minus the requested injection ``s``."""
    current = model.y_ll @ v + model.y_l0 @ model.slack_voltage
    return -v * np.conj(current) - s


def solve_power_flow(model, s, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, v_start=None):
    """Solve ``v = g(p, q)`` by the Z-bus fixed-point iteration.

    Parameters
    ----------
    model : FeederModel
    s : InjectionVector or array_like
        Injections, or a stacked state ``[p; q]``.
    tol : float
        Infinity-norm power mismatch (per-unit) at which to stop.
    max_iter : int
        Maximum number of fixed-point updates.
    v_start : array_like, optional
        Warm start.  Defaults to the no-load voltage.

    Returns
    -------
    VoltageSolution

    Raises
    ------
    PowerFlowError
        If the mismatch is still above ``tol`` after ``max_iter`` updates.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = _as_injection(s)
    if s.p.size != model.n:
        raise ValueError(f"expected {model.n} injections, got {s.p.size}")
    load = s.s
    w = model._v_noload
    v = w.copy() if v_start is None else np.array(v_start, dtype=complex)
    residual = np.inf
    for k in range(max_iter + 1):
        with np.errstate(all="ignore"):
            residual = float(np.max(np.abs(power_mismatch(model, v, load))))
        if not np.isfinite(residual):
            break
        if residual <= tol:
            return VoltageSolution(v, np.abs(v), k, residual)
        if k == max_iter:
            break
        with np.errstate(all="ignore"):
            v = w - model.solve_ll(np.conj(load / v))
    raise PowerFlowError(
        f"power flow did not converge in {max_iter} iterations (mismatch {residual:.3e} pu)"
    )


def _linearized_sensitivity(model, sol, s):
    # Implicit derivative of v = w - Z conj(S / v) at the solved point:
    #   dv - A conj(dv) = -B conj(dS),  A = Z diag(conj(S)/conj(v)^2), B = Z diag(1/conj(v))
    n = model.n
    v = sol.v_complex
    vc = np.conj(v)
    a = model.solve_ll(np.diag(np.conj(s.s) / vc**2))
    b = model.solve_ll(np.diag(1.0 / vc))
    eye = np.eye(n)
    m = np.block([[eye - a.real, -a.imag], [-a.imag, eye + a.real]])
    rhs = np.hstack([-b, 1j * b])
    sol_ri = np.linalg.solve(m, np.vstack([rhs.real, rhs.imag]))
    dv_re, dv_im = sol_ri[:n], sol_ri[n:]
    return (v.real[:, None] * dv_re + v.imag[:, None] * dv_im) / sol.v_mag[:, None]


def _finite_difference_sensitivity(model, s, sol, delta, tol, max_iter):
    n = model.n
    z = s.z
    h = np.empty((n, 2 * n))
    for k in range(2 * n):
        zp, zm = z.copy(), z.copy()
        zp[k] += delta
        zm[k] -= delta
        vp = solve_power_flow(model, zp, tol, max_iter, v_start=sol.v_complex).v_mag
        vm = solve_power_flow(model, zm, tol, max_iter, v_start=sol.v_complex).v_mag
        h[:, k] = (vp - vm) / (2 * delta)
    return h


def jacobian_vm(model, s, method=LINEARIZATION, delta=1e-5, solution=None, tol=DEFAULT_TOL,
                max_iter=DEFAULT_MAX_ITER):
    """Sensitivity of node voltage magnitudes to ``[p; q]``.

    ``fixed_point_linearization`` differentiates the fixed-point equation at
    the solved voltage (one ``2n x 2n`` real solve); ``finite_difference``
    uses central differences with step ``delta`` (``4n`` power-flow solves).
    """
    s = _as_injection(s)
    sol = solution if solution is not None else solve_power_flow(model, s, tol, max_iter)
    if method == LINEARIZATION:
        h = _linearized_sensitivity(model, sol, s)
    elif method == FINITE_DIFFERENCE:
        h = _finite_difference_sensitivity(model, s, sol, delta, tol, max_iter)
    else:
        raise ValueError(f"unknown sensitivity method {method!r}")
    return SensitivityMatrix(h, s, method, sol.v_mag)


def measurement_function(model, s, meters, solution=None):
    """Evaluate ``h(z)`` for every meter in ``meters`` (in meter order)."""
    s = _as_injection(s)
    sol = solution if solution is not None else solve_power_flow(model, s)
    return meters.evaluate(s.z, sol.v_mag)
