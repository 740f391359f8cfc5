"""Linearized (convex) WLS: closed-form oracle, stochastic dynamics and the
steady-state tracking bound.

The bound for constant-stepsize stochastic gradient tracking of a strongly
convex quadratic reads::

    limit E||z_t - z*_t||^2  <=  (eta^2 sigma_f2 + eta^2 delta1 + delta_z) / (2 eta tau1)

with ``tau1`` the smallest gain-matrix eigenvalue, ``sigma_f2`` a bound on the
mean squared stochastic gradient, ``delta1`` a bound on the squared gap between
nonlinear and linearized gradients, and ``delta_z`` the optimizer drift per
step.  It requires ``0 < eta <= 1 / (2 tau1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class LinearWlsProblem:
    """``min 1/2 (y - H z)^T W (y - H z)`` with diagonal ``W`` given as a vector."""

    h_matrix: np.ndarray
    w: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.h_matrix, dtype=float))
        w = np.asarray(self.w, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if w.size != h.shape[0] or y.size != h.shape[0]:
            raise ValueError(f"H has {h.shape[0]} rows but w has {w.size} and y has {y.size}")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "h_matrix", h)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "y", y)

    @property
    def m(self):
        return self.h_matrix.shape[0]

    @property
    def dim(self):
        return self.h_matrix.shape[1]

    @property
    def gain(self):
        h = self.h_matrix
        return h.T @ (self.w[:, None] * h)

    def gradient(self, z):
        h = self.h_matrix
        return h.T @ (self.w * (h @ z - self.y))

    def objective(self, z):
        r = self.y - self.h_matrix @ z
        return 0.5 * float(r @ (self.w * r))


def _cholesky(gain):
    try:
        factor = scipy.linalg.cho_factor(gain, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError(f"gain matrix is not positive definite: {exc}") from None
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 1e-10 * diag.max():
        raise RankDeficientError("gain matrix is numerically rank deficient")
    return factor


def linear_wls_closed_form(problem):
    """Exact minimizer ``(H^T W H)^{-1} H^T W y``.

    Solved as least squares on ``W^{1/2} H`` rather than through the normal
    equations, which square the condition number.
    """
    _cholesky(problem.gain)  # rank check only
    s = np.sqrt(problem.w)
    z, *_ = scipy.linalg.lstsq(s[:, None] * problem.h_matrix, s * problem.y)
    return z


def subset_gradient(z, problem, subset):
    """Stochastic gradient ``H_s^T W_s (H_s z - y_s)`` over the rows in ``subset``."""
    rows = np.asarray(subset, dtype=int)
    h = problem.h_matrix[rows]
    return h.T @ (problem.w[rows] * (h @ z - problem.y[rows]))


def linear_sgd_dynamics_step(z, problem, subset, eta):
    return np.asarray(z, dtype=float) - eta * subset_gradient(z, problem, subset)


@dataclass(frozen=True)
class BoundParameters:
    tau1: float
    sigma_f2: float
    delta1: float
    delta_z: float
    eta: float

    def __post_init__(self):
        for name in ("tau1", "sigma_f2", "delta1", "delta_z", "eta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")


def theorem1_bound(params):
    """Steady-state mean squared tracking error bound.

    Raises ``ValueError`` unless ``0 < eta <= 1 / (2 tau1)``.
    """
    eta, tau1 = params.eta, params.tau1
    if not (tau1 > 0 and 0 < eta <= 1.0 / (2.0 * tau1)):
        raise ValueError(f"stepsize {eta:g} violates 0 < eta <= 1/(2 tau1) = {0.5 / tau1 if tau1 else np.inf:g}")
    num = eta**2 * params.sigma_f2 + eta**2 * params.delta1 + params.delta_z
    return num / (2.0 * eta * tau1)


def estimate_bound_constants(problems, iterates, subsets, eta, nonlinear_gradient=None):
    """Measure the bound constants on a sample.

    Parameters
    ----------
    problems : sequence of LinearWlsProblem
        Linearized problem at each sampled time (a single entry for a static
        scenario).
    iterates : array_like, shape (N, dim)
        States at which gradients are sampled.
    subsets : array_like of bool, shape (N, m)
        Arrival mask paired with each iterate; evaluated against
        ``problems[min(k, len(problems) - 1)]`` for sample ``k`` when
        ``len(problems) == N``, otherwise against ``problems[-1]``.
    eta : float
    nonlinear_gradient : callable, optional
        ``f(z, mask) -> gradient`` of the nonlinear model.  Without it the
        model is taken as linear and ``delta1 = 0``.

    Returns
    -------
    BoundParameters
        ``tau1`` = min smallest gain eigenvalue over ``problems``;
        ``sigma_f2`` = max observed squared stochastic-gradient norm;
        ``delta1`` = max observed squared nonlinear/linear gradient gap;
        ``delta_z`` = max optimizer drift between consecutive problems.
    """
    problems = list(problems)
    iterates = np.atleast_2d(np.asarray(iterates, dtype=float))
    masks = np.atleast_2d(np.asarray(subsets, dtype=bool))
    if not problems or iterates.shape[0] == 0:
        raise ValueError("empty sample")
    if masks.shape[0] != iterates.shape[0]:
        raise ValueError("need one subset mask per iterate")
    tau1 = min(float(scipy.linalg.eigvalsh(p.gain)[0]) for p in problems)
    optima = [linear_wls_closed_form(p) for p in problems]
    drift = max((float(np.linalg.norm(b - a)) for a, b in zip(optima, optima[1:])), default=0.0)

    per_sample = len(problems) == iterates.shape[0] and len(problems) > 1
    sigma_f2 = 0.0
    delta1 = 0.0
    groups = range(len(problems)) if per_sample else [None]
    for g in groups:
        prob = problems[g] if g is not None else problems[-1]
        sel = slice(g, g + 1) if g is not None else slice(None)
        z, mask = iterates[sel], masks[sel]
        grads = stochastic_gradients(z, prob, mask)
        sigma_f2 = max(sigma_f2, float(np.max(np.sum(grads**2, axis=1))))
        if nonlinear_gradient is not None:
            for zi, mi, gi in zip(z, mask, grads):
                gap = np.asarray(nonlinear_gradient(zi, mi)) - gi
                delta1 = max(delta1, float(gap @ gap))
    return BoundParameters(tau1=tau1, sigma_f2=sigma_f2, delta1=delta1, delta_z=drift, eta=eta)


def stochastic_gradients(z, problem, masks):
    """Row-wise ``H_s^T W_s (H_s z - y_s)`` for stacked states and boolean masks."""
    h = problem.h_matrix
    r = (z @ h.T - problem.y) * problem.w * masks
    return r @ h


def uniform_masks(rng, count, m, m_t):
    """``count`` boolean masks, each selecting ``m_t`` of ``m`` rows uniformly."""
    keys = rng.random((count, m))
    order = np.argsort(keys, axis=1)[:, :m_t]
    masks = np.zeros((count, m), dtype=bool)
    np.put_along_axis(masks, order, True, axis=1)
    return masks


@dataclass(frozen=True, eq=False)
class BoundExperiment:
    params: BoundParameters
    bound: float
    mse: float
    z_star: np.ndarray
    mse_trace: np.ndarray
    burn_in_factor: float

    @property
    def holds(self):
        return self.mse <= self.bound


def run_bound_experiment(problem, m_t, eta, seeds=100, steps=10_000, trailing=2_000, z0=None, seed=0):
    """Run the linear stochastic dynamics on a static problem for many seeds.

    Every seed draws a uniform ``m_t``-subset of rows per step.  Returns the
    empirical steady-state ``E||z_t - z*||^2`` (mean over seeds and the last
    ``trailing`` steps), the constants measured on that trailing window, and
    the resulting bound.  ``burn_in_factor`` is the expected contraction
    ``(1 - eta (m_t/m) tau1)^(steps - trailing)`` of the initial error, a
    check that the window is past the transient.
    """
    if not 0 < trailing <= steps:
        raise ValueError("need 0 < trailing <= steps")
    rng = np.random.default_rng(seed)
    z_star = linear_wls_closed_form(problem)
    start = z_star if z0 is None else np.asarray(z0, dtype=float)
    z = np.tile(start, (seeds, 1))
    h, w, y = problem.h_matrix, problem.w, problem.y
    sq_err = np.empty((trailing, seeds))
    sigma_f2 = 0.0
    for t in range(steps):
        masks = uniform_masks(rng, seeds, problem.m, m_t)
        grads = ((z @ h.T - y) * w * masks) @ h
        if t >= steps - trailing:
            sigma_f2 = max(sigma_f2, float(np.max(np.einsum("ij,ij->i", grads, grads))))
        z = z - eta * grads
        if t >= steps - trailing:
            d = z - z_star
            sq_err[t - (steps - trailing)] = np.einsum("ij,ij->i", d, d)
    tau1 = float(scipy.linalg.eigvalsh(problem.gain)[0])
    params = BoundParameters(tau1=tau1, sigma_f2=sigma_f2, delta1=0.0, delta_z=0.0, eta=eta)
    burn = (1.0 - eta * (m_t / problem.m) * tau1) ** (steps - trailing)
    return BoundExperiment(params, theorem1_bound(params), float(sq_err.mean()), z_star,
                           sq_err.mean(axis=1), burn)
