"""State estimators over nodal power injections ``z = [p; q]``.

Four algorithms share one measurement model:

* ``gn``  - batch Gauss-Newton, Jacobian refreshed every iteration;
* ``go``  - gradient descent iterated to convergence on each batch;
* ``gd``  - one gradient step per full batch;
* ``sgd`` - one stochastic step per partial batch (the arrived meters only).

Zero-injection nodes are held at exactly zero by projection after every
update, so only load-node coordinates are free.  Between exact power-flow
solves the online methods refresh voltages through the cached sensitivity
``v = v_ref + S (z - z_ref)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .linear import RankDeficientError, _cholesky
from .measurement import PSEUDO_P, PSEUDO_Q
from .powerflow import PowerFlowError, jacobian_vm, solve_power_flow

log = logging.getLogger(__name__)

ALGORITHMS = ("gn", "go", "gd", "sgd")
MAX_STEP_HALVINGS = 20


@dataclass(frozen=True)
class EstimatorConfig:
    algorithm: str = "sgd"
    stepsize: float | str = "auto"
    jacobian_refresh: int = 300
    exact_voltage_refresh: str = "every_K"
    voltage_refresh_interval: int = 50
    tol: float = 1e-6
    max_iter: int = 100
    name: str | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.stepsize != "auto" and not (isinstance(self.stepsize, (int, float)) and self.stepsize >= 0):
            raise ValueError("stepsize must be 'auto' or a non-negative number")
        if self.exact_voltage_refresh not in ("always", "every_K"):
            raise ValueError("exact_voltage_refresh must be 'always' or 'every_K'")
        if self.jacobian_refresh < 1 or self.voltage_refresh_interval < 1:
            raise ValueError("refresh intervals must be >= 1")
        if self.tol <= 0 or self.max_iter < 0:
            raise ValueError("need tol > 0 and max_iter >= 0")

    @property
    def label(self):
        return self.name or self.algorithm

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown estimator options {sorted(extra)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class EstimatorState:
    """Estimate plus the cached linearization it steps with."""

    z: np.ndarray
    v_mag: np.ndarray
    v_complex: np.ndarray
    h_cache: object  # SensitivityMatrix
    jacobian: np.ndarray
    z_ref: np.ndarray
    v_ref: np.ndarray
    stepsize: float
    config: EstimatorConfig = field(default_factory=EstimatorConfig)
    last_objective: float = np.nan
    step_count: int = 0
    iterations: int = 0
    converged: bool = True
    fonc_residual: float = np.nan
    rejected_steps: int = 0


def free_mask(model):
    """Coordinates of ``z`` not pinned by zero-injection constraints."""
    load = model.is_load
    return np.concatenate([load, load])


def project(model, z):
    z = np.array(z, dtype=float)
    z[~free_mask(model)] = 0.0
    return z


def default_initial_estimate(model, meters, pseudo_values):
    """Pseudo-measurement values on load nodes, zero elsewhere."""
    z = np.zeros(2 * model.n)
    pseudo_values = np.asarray(pseudo_values, dtype=float)
    for kind in (PSEUDO_P, PSEUDO_Q):
        ids = meters.ids_of(kind)
        z[meters.state_col[ids]] = pseudo_values[ids]
    return project(model, z)


def auto_stepsize(model, meters, jacobian, factor=0.5):
    """``factor / lambda_max`` of the gain matrix over free coordinates."""
    free = free_mask(model)
    rows = meters.sampleable_ids
    hf = jacobian[np.ix_(rows, np.flatnonzero(free))]
    gain = hf.T @ (meters.weight[rows, None] * hf)
    return factor / float(scipy.linalg.eigvalsh(gain)[-1])


def initial_state(model, meters, z0, config=None, stepsize=None):
    """Linearize at ``z0`` and build a fresh :class:`EstimatorState`."""
    config = config or EstimatorConfig()
    z0 = project(model, z0)
    sol = solve_power_flow(model, z0)
    sens = jacobian_vm(model, z0, solution=sol)
    jac = meters.jacobian(sens)
    if stepsize is None:
        stepsize = auto_stepsize(model, meters, jac) if config.stepsize == "auto" else float(config.stepsize)
    return EstimatorState(z=z0, v_mag=sol.v_mag, v_complex=sol.v_complex, h_cache=sens, jacobian=jac,
                          z_ref=z0.copy(), v_ref=sol.v_mag.copy(), stepsize=float(stepsize), config=config)


def _rows(batch):
    return batch.meter_ids


def wls_objective(z, batch, meters, model):
    """``1/2 (y - h(z))^T W (y - h(z))`` over the meters in ``batch``."""
    sol = solve_power_flow(model, z)
    rows = _rows(batch)
    r = batch.values - meters.evaluate(z, sol.v_mag, rows)
    return 0.5 * float(r @ (meters.weight[rows] * r))


def wls_gradient(z, batch, meters, model, h=None):
    """``H_s^T W_s (h_s(z) - y)`` over the meters in ``batch``.

    ``h`` is a cached :class:`SensitivityMatrix` or full ``m x 2n`` measurement
    Jacobian; when omitted the sensitivity is computed at ``z``.
    """
    sol = solve_power_flow(model, z)
    if h is None:
        h = jacobian_vm(model, z, solution=sol)
    jac = h if isinstance(h, np.ndarray) else meters.jacobian(h)
    if jac.shape != (meters.m, 2 * model.n):
        raise ValueError(f"Jacobian has shape {jac.shape}, expected {(meters.m, 2 * model.n)}")
    rows = _rows(batch)
    r = meters.evaluate(z, sol.v_mag, rows) - batch.values
    return jac[rows].T @ (meters.weight[rows] * r)


# --- Gauss-Newton -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussNewtonResult:
    z: np.ndarray
    iterations: int
    converged: bool
    fonc_residual: float
    gain_norm: float


def gauss_newton(linearize, y, weights, z0, free=None, tol=1e-8, max_iter=50):
    """Generic Gauss-Newton for ``min 1/2 (y - h(z))^T W (y - h(z))``.

    ``linearize(z)`` returns ``(h(z), H(z))``.  Coordinates outside ``free``
    stay at their ``z0`` values.  ``iterations`` counts updates whose
    infinity norm exceeded ``tol``.
    """
    z = np.array(z0, dtype=float)
    free = np.ones(z.size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    cols = np.flatnonzero(free)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    iterations = 0
    converged = False
    for k in range(max_iter + 1):
        hz, jac = linearize(z)
        hf = jac[:, cols]
        gain = hf.T @ (w[:, None] * hf)
        factor = _cholesky(gain)
        step = scipy.linalg.cho_solve(factor, hf.T @ (w * (y - hz)))
        if np.max(np.abs(step), initial=0.0) <= tol:
            z[cols] += step
            converged = True
            break
        if k == max_iter:
            break
        z[cols] += step
        iterations += 1
    hz, jac = linearize(z)
    hf = jac[:, cols]
    fonc = float(np.max(np.abs(hf.T @ (w * (y - hz))), initial=0.0))
    gain_norm = float(np.max(np.sum(np.abs(hf.T @ (w[:, None] * hf)), axis=1), initial=0.0))
    return GaussNewtonResult(z, iterations, converged, fonc, gain_norm)


def gauss_newton_solve(model, meters, batch, z0, tol=1e-8, max_iter=50, config=None):
    """Batch Gauss-Newton on a full batch; returns an :class:`EstimatorState`.

    A non-converged run is flagged (``converged=False``) and still returned.
    Raises :class:`RankDeficientError` for a singular gain matrix.
    """
    if batch.m_t != meters.m:
        raise ValueError("Gauss-Newton needs a full batch")
    config = config or EstimatorConfig(algorithm="gn", tol=tol, max_iter=max_iter)
    # virtual rows only touch pinned coordinates
    rows = meters.sampleable_ids
    cache = {}

    def linearize(z):
        sol = solve_power_flow(model, z, v_start=cache.get("v"))
        sens = jacobian_vm(model, z, solution=sol)
        cache.update(v=sol.v_complex, sol=sol, sens=sens)
        return meters.evaluate(z, sol.v_mag, rows), meters.jacobian(sens, rows)

    pos = np.searchsorted(batch.meter_ids, rows)
    res = gauss_newton(linearize, batch.values[pos], meters.weight[rows], project(model, z0),
                       free=free_mask(model), tol=tol, max_iter=max_iter)
    if not res.converged:
        log.warning("Gauss-Newton stopped after %d iterations without converging", res.iterations)
    sol, sens = cache["sol"], cache["sens"]
    return EstimatorState(z=res.z, v_mag=sol.v_mag, v_complex=sol.v_complex, h_cache=sens,
                          jacobian=meters.jacobian(sens), z_ref=res.z.copy(), v_ref=sol.v_mag.copy(),
                          stepsize=0.0, config=config, step_count=res.iterations,
                          iterations=res.iterations, converged=res.converged,
                          fonc_residual=res.fonc_residual)


# --- gradient methods ---------------------------------------------------------


def _refresh(state, z_new, model, meters):
    """Voltage (and possibly Jacobian) refresh after an update; may raise PowerFlowError."""
    cfg = state.config
    count = state.step_count + 1
    refresh_jac = count % cfg.jacobian_refresh == 0
    exact = refresh_jac or cfg.exact_voltage_refresh == "always" or (
        count % cfg.voltage_refresh_interval == 0)
    if not exact:
        v_mag = state.v_ref + state.h_cache.h @ (z_new - state.z_ref)
        return replace(state, z=z_new, v_mag=v_mag, step_count=count)
    sol = solve_power_flow(model, z_new, v_start=state.v_complex)
    updates = dict(z=z_new, v_mag=sol.v_mag, v_complex=sol.v_complex, z_ref=z_new.copy(),
                   v_ref=sol.v_mag.copy(), step_count=count)
    if refresh_jac:
        sens = jacobian_vm(model, z_new, solution=sol)
        updates.update(h_cache=sens, jacobian=meters.jacobian(sens))
    return replace(state, **updates)


def _gradient_step(state, batch, meters, model):
    rows = _rows(batch)
    r = meters.evaluate(state.z, state.v_mag, rows) - batch.values
    wr = meters.weight[rows] * r
    grad = state.jacobian[rows].T @ wr
    objective = 0.5 * float(wr @ r)
    eta = state.stepsize
    rejected = 0
    for _ in range(MAX_STEP_HALVINGS + 1):
        z_new = project(model, state.z - eta * grad)
        try:
            new = _refresh(state, z_new, model, meters)
        except PowerFlowError as exc:
            rejected += 1
            eta *= 0.5
            log.warning("step %d rejected (%s); retrying with stepsize %.3g", state.step_count + 1, exc, eta)
            continue
        return replace(new, last_objective=objective, rejected_steps=state.rejected_steps + rejected)
    raise PowerFlowError(f"step {state.step_count + 1}: power flow failed after {rejected} stepsize halvings")


def online_gd_step(state, batch, meters, model):
    """One gradient step on a full batch from the previous estimate."""
    if batch.m_t != meters.m:
        raise ValueError(f"online GD needs a full batch ({meters.m} meters), got {batch.m_t}")
    return _gradient_step(state, batch, meters, model)


def online_sgd_step(state, batch, meters, model):
    """One stochastic gradient step using only the meters present in ``batch``."""
    return _gradient_step(state, batch, meters, model)


def _exact_refresh(state, model):
    sol = solve_power_flow(model, state.z, v_start=state.v_complex)
    return replace(state, v_mag=sol.v_mag, v_complex=sol.v_complex, z_ref=state.z.copy(), v_ref=sol.v_mag.copy())


def _is_exact(state):
    return np.array_equal(state.z, state.z_ref)


def converged_gd_solve(model, meters, batch, start, tol=None, max_iter=None, config=None):
    """Gradient descent on one full batch until ``||dz||_inf <= tol``.

    ``start`` is an :class:`EstimatorState` (warm start) or a state vector.
    Convergence is only accepted for a step taken from exactly solved
    voltages, and the returned voltages are exact.
    """
    if batch.m_t != meters.m:
        raise ValueError("converged gradient descent needs a full batch")
    if isinstance(start, EstimatorState):
        state = start
    else:
        state = initial_state(model, meters, start, config or EstimatorConfig(algorithm="go"))
    tol = state.config.tol if tol is None else tol
    max_iter = state.config.max_iter if max_iter is None else max_iter
    converged = False
    k = 0
    while k < max_iter:
        exact = _is_exact(state)
        new = _gradient_step(state, batch, meters, model)
        k += 1
        small = np.max(np.abs(new.z - state.z), initial=0.0) <= tol
        state = new
        if small and exact:
            converged = True
            break
        if small:
            state = _exact_refresh(state, model)
    if not _is_exact(state):
        state = _exact_refresh(state, model)
    return replace(state, iterations=k, converged=converged)
