import itertools

import numpy as np
import pytest
import scipy.linalg
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from odsse.estimators import gauss_newton
from odsse.linear import (
    BoundParameters,
    LinearWlsProblem,
    RankDeficientError,
    estimate_bound_constants,
    linear_sgd_dynamics_step,
    linear_wls_closed_form,
    run_bound_experiment,
    stochastic_gradients,
    subset_gradient,
    theorem1_bound,
    uniform_masks,
)


def random_problem(rng, dim, m):
    h = rng.standard_normal((m, dim))
    w = rng.uniform(0.5, 5.0, m)
    y = rng.standard_normal(m)
    return LinearWlsProblem(h, w, y)


@pytest.mark.parametrize(
    "h, w, y, expected",
    [
        (np.eye(2), [1, 1], [1, 2], [1, 2]),
        ([[1], [1]], [1, 1], [0, 2], [1]),
        ([[1], [1]], [3, 1], [0, 4], [1]),
    ],
)
def test_closed_form_examples(h, w, y, expected):
    np.testing.assert_allclose(linear_wls_closed_form(LinearWlsProblem(h, w, y)), expected, atol=1e-14)


def test_rank_deficient():
    with pytest.raises(RankDeficientError):
        linear_wls_closed_form(LinearWlsProblem([[1, 1], [2, 2]], [1, 1], [0, 1]))


def test_problem_validation():
    with pytest.raises(ValueError):
        LinearWlsProblem(np.eye(2), [1, 0], [0, 0])
    with pytest.raises(ValueError):
        LinearWlsProblem(np.eye(2), [1], [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(0, 40))
def test_gauss_newton_equals_closed_form(seed, dim, extra):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, dim, min(60, dim + extra))
    # beyond cond ~1e3 the forward error of any double-precision solve exceeds 1e-10
    assume(np.linalg.cond(np.sqrt(prob.w)[:, None] * prob.h_matrix) <= 1e3)
    res = gauss_newton(lambda z: (prob.h_matrix @ z, prob.h_matrix), prob.y, prob.w, np.zeros(dim),
                       tol=1e-9, max_iter=10)
    # one exact step; ill-conditioned draws may add one roundoff refinement
    assert res.converged and res.iterations <= 2
    np.testing.assert_allclose(res.z, linear_wls_closed_form(prob), rtol=0, atol=1e-10)


def test_gauss_newton_single_step_when_well_conditioned():
    prob = random_problem(np.random.default_rng(11), 5, 40)
    res = gauss_newton(lambda z: (prob.h_matrix @ z, prob.h_matrix), prob.y, prob.w, np.zeros(5), tol=1e-9)
    assert res.converged and res.iterations == 1


def test_gauss_newton_max_iter_zero_returns_start():
    prob = random_problem(np.random.default_rng(0), 3, 6)
    z0 = np.ones(3)
    res = gauss_newton(lambda z: (prob.h_matrix @ z, prob.h_matrix), prob.y, prob.w, z0, max_iter=0)
    assert not res.converged
    np.testing.assert_array_equal(res.z, z0)


def test_dynamics_examples():
    prob = random_problem(np.random.default_rng(1), 4, 10)
    z_star = linear_wls_closed_form(prob)
    full = np.arange(prob.m)
    np.testing.assert_allclose(linear_sgd_dynamics_step(z_star, prob, full, 0.01), z_star, atol=1e-12)
    z = np.ones(4)
    np.testing.assert_array_equal(linear_sgd_dynamics_step(z, prob, full, 0.0), z)


def test_full_subset_contraction_matches_spectral_radius():
    prob = random_problem(np.random.default_rng(2), 5, 12)
    g = prob.gain
    eta = 0.5 / scipy.linalg.eigvalsh(g)[-1]
    z_star = linear_wls_closed_form(prob)
    evals, evecs = scipy.linalg.eigh(g)
    k = np.argmax(np.abs(1 - eta * evals))  # slowest mode
    z = z_star + evecs[:, k]
    z_next = linear_sgd_dynamics_step(z, prob, np.arange(prob.m), eta)
    ratio = np.linalg.norm(z_next - z_star) / np.linalg.norm(z - z_star)
    rho = np.max(np.abs(1 - eta * evals))
    assert ratio == pytest.approx(rho, abs=1e-10)


@pytest.mark.parametrize("m", [2, 3, 4, 5, 6])
def test_scaled_unbiasedness_exact_enumeration(m):
    rng = np.random.default_rng(m)
    prob = random_problem(rng, 2, m)
    z = rng.standard_normal(2)
    full = subset_gradient(z, prob, np.arange(m))
    for m_t in range(1, m + 1):
        subsets = list(itertools.combinations(range(m), m_t))
        mean = np.mean([subset_gradient(z, prob, list(s)) for s in subsets], axis=0)
        np.testing.assert_allclose(mean, (m_t / m) * full, rtol=0, atol=1e-12)


def test_scaled_unbiasedness_monte_carlo():
    rng = np.random.default_rng(7)
    prob = random_problem(rng, 4, 30)
    z = rng.standard_normal(4)
    m_t, count = 6, 20_000
    grads = stochastic_gradients(np.tile(z, (count, 1)), prob, uniform_masks(rng, count, prob.m, m_t))
    mean, se = grads.mean(axis=0), grads.std(axis=0, ddof=1) / np.sqrt(count)
    assert np.all(np.abs(mean - m_t / prob.m * subset_gradient(z, prob, np.arange(prob.m))) <= 3 * se)


def test_bound_formula():
    p = BoundParameters(tau1=2.0, sigma_f2=3.0, delta1=0.0, delta_z=0.0, eta=0.1)
    assert theorem1_bound(p) == pytest.approx(0.1 * 3.0 / (2 * 2.0))
    assert theorem1_bound(BoundParameters(2.0, 0.0, 0.0, 0.0, 0.1)) == 0.0
    base = theorem1_bound(BoundParameters(2.0, 3.0, 1.0, 0.5, 0.1))
    doubled = theorem1_bound(BoundParameters(2.0, 3.0, 1.0, 1.0, 0.1))
    assert doubled - base == pytest.approx(0.5 / (2 * 0.1 * 2.0))
    full = (0.01 * 3.0 + 0.01 * 1.0 + 0.5) / (2 * 0.1 * 2.0)
    assert base == pytest.approx(full)


def test_bound_stepsize_condition():
    with pytest.raises(ValueError, match="stepsize"):
        theorem1_bound(BoundParameters(tau1=2.0, sigma_f2=1.0, delta1=0.0, delta_z=0.0, eta=0.3))
    with pytest.raises(ValueError):
        theorem1_bound(BoundParameters(tau1=2.0, sigma_f2=1.0, delta1=0.0, delta_z=0.0, eta=0.0))
    with pytest.raises(ValueError):
        BoundParameters(tau1=1.0, sigma_f2=-1.0, delta1=0.0, delta_z=0.0, eta=0.1)


def test_estimate_constants_static_linear():
    rng = np.random.default_rng(3)
    prob = random_problem(rng, 3, 8)
    iterates = rng.standard_normal((50, 3))
    masks = uniform_masks(rng, 50, 8, 3)
    params = estimate_bound_constants([prob], iterates, masks, eta=0.01)
    assert params.delta_z == 0.0 and params.delta1 == 0.0
    assert params.tau1 == pytest.approx(np.linalg.eigvalsh(prob.gain)[0], abs=1e-10)
    expected = max(float(np.sum(subset_gradient(z, prob, np.flatnonzero(mk)) ** 2)) for z, mk in zip(iterates, masks))
    assert params.sigma_f2 == pytest.approx(expected, rel=1e-12)


def test_estimate_constants_drift_and_gap():
    rng = np.random.default_rng(4)
    a = random_problem(rng, 2, 5)
    b = LinearWlsProblem(a.h_matrix, a.w, a.y + 0.1)
    iterates = rng.standard_normal((2, 2))
    masks = np.ones((2, 5), dtype=bool)
    drift = np.linalg.norm(linear_wls_closed_form(b) - linear_wls_closed_form(a))
    params = estimate_bound_constants([a, b], iterates, masks, eta=0.01,
                                      nonlinear_gradient=lambda z, mk: subset_gradient(z, b, np.flatnonzero(mk)) + 1.0)
    assert params.delta_z == pytest.approx(drift)
    assert params.delta1 > 0
    with pytest.raises(ValueError):
        estimate_bound_constants([], iterates, masks, 0.1)


def test_bound_experiment_small():
    prob = random_problem(np.random.default_rng(5), 3, 10)
    eta = 0.5 / np.linalg.eigvalsh(prob.gain)[-1]
    res = run_bound_experiment(prob, 2, eta, seeds=20, steps=3000, trailing=500)
    assert res.holds and res.burn_in_factor < 1e-3
    assert res.mse_trace.shape == (500,)
    half = run_bound_experiment(prob, 2, eta / 2, seeds=20, steps=3000, trailing=500)
    assert half.mse <= res.mse
