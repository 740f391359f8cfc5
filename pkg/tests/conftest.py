"""Shared fixtures and test-side oracles."""

import numpy as np
import pytest

from odsse.feeder import TEMPLATES, template
from odsse.powerflow import InjectionVector


@pytest.fixture(scope="session")
def feeders():
    return {name: template(name) for name in TEMPLATES}


@pytest.fixture(scope="session")
def f2(feeders):
    return feeders["2bus"]


@pytest.fixture(scope="session")
def f4(feeders):
    return feeders["4bus"]


@pytest.fixture(scope="session")
def f13(feeders):
    return feeders["13node"]


def newton_raphson(model, s, tol=1e-11, max_iter=50):
    """Rectangular Newton-Raphson on ``v conj(Y_LL v + Y_L0 v0) + S = 0``.

    Written independently of the fixed-point solver; used as its oracle.
    """
    s = s.s if isinstance(s, InjectionVector) else np.asarray(s)
    ybus = model.ybus
    n = model.n
    y, y0 = ybus[:n, :n], ybus[:n, n:]
    c = y0 @ model.slack_voltage
    v = model.v_noload.astype(complex).copy()
    for _ in range(max_iter):
        current = y @ v + c
        f = v * np.conj(current) + s
        if np.max(np.abs(f)) <= tol:
            return v
        # dF = diag(conj I) dv + diag(v) conj(Y) conj(dv)
        a = np.diag(np.conj(current))
        b = np.diag(v) @ np.conj(y)
        dx, dy = a + b, 1j * a - 1j * b
        jac = np.block([[dx.real, dy.real], [dx.imag, dy.imag]])
        step = np.linalg.solve(jac, -np.concatenate([f.real, f.imag]))
        v = v + step[:n] + 1j * step[n:]
        if np.max(np.abs(step)) <= 1e-12:
            return v
    raise RuntimeError("Newton-Raphson oracle did not converge")


def two_bus_vmag(v0, z, s):
    """Closed-form receiving-end |V| of a single line feeding load ``s``.

    ``|V|^4 + (2 Re(conj(z) s) - |v0|^2) |V|^2 + |z|^2 |s|^2 = 0``; returns
    ``None`` beyond the loadability limit (negative discriminant).
    """
    b = 2.0 * (z.real * s.real + z.imag * s.imag) - abs(v0) ** 2
    disc = b * b - 4.0 * abs(z) ** 2 * abs(s) ** 2
    if disc < 0:
        return None
    return np.sqrt((-b + np.sqrt(disc)) / 2.0)


def random_injection(model, rng, scale=1.0):
    """Feasible random injection: loads up to twice nominal, some PV export."""
    n = model.n
    p, q = np.zeros(n), np.zeros(n)
    loads = model.load_nodes
    if model.nominal_load is not None:
        base_p, base_q = model.nominal_load[:n][loads], model.nominal_load[n:][loads]
    else:
        base_p, base_q = np.full(loads.size, 0.05), np.full(loads.size, 0.02)
    p[loads] = scale * base_p * rng.uniform(-0.5, 2.0, loads.size)
    q[loads] = scale * base_q * rng.uniform(-0.5, 2.0, loads.size)
    return InjectionVector(p, q)
