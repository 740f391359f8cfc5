"""Compare the steady-state SGD error on a static linearized problem with its bound."""

import numpy as np

from odsse.feeder import template
from odsse.linear import run_bound_experiment
from odsse.scenario import Scenario, static_linear_problem

problem, _ = static_linear_problem(Scenario(template("13node"), horizon=1))
eta = 0.5 / np.linalg.eigvalsh(problem.gain)[-1]
m_t = round(0.2 * problem.m)
for scale in (1.0, 0.5, 0.25):
    res = run_bound_experiment(problem, m_t, scale * eta, seeds=50, steps=10_000, trailing=2_000)
    print(f"eta={scale * eta:.3e}  empirical MSE={res.mse:.3e}  bound={res.bound:.3e}  holds={res.holds}")
