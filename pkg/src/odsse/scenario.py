"""Synthetic load/PV trajectories and the online estimation loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimators as est
from .feeder import TEMPLATES, FeederModel, read_feeder, template
from .measurement import (
    PSEUDO_P,
    PSEUDO_Q,
    ArrivalPolicy,
    arrival_subset,
    build_meter_set,
    synthesize_batch,
)
from .linear import LinearWlsProblem
from .powerflow import InjectionVector, PowerFlowError, jacobian_vm, solve_power_flow

log = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0


class ScenarioError(RuntimeError):
    pass


# --- profiles -----------------------------------------------------------------


def diurnal_load(hour, shape="residential"):
    """Relative load level; ``flat`` is identically 1."""
    if shape == "flat":
        return np.ones_like(np.asarray(hour, dtype=float))
    if shape != "residential":
        raise ValueError(f"unknown diurnal shape {shape!r}")
    h = np.asarray(hour, dtype=float) % 24.0
    return 0.55 + 0.25 * np.exp(-((h - 9.0) / 2.5) ** 2) + 0.45 * np.exp(-((h - 19.0) / 3.0) ** 2)


def irradiance(hour, shape="bell", sunrise=6.0, sunset=18.0):
    """Clear-sky irradiance in [0, 1], zero outside ``[sunrise, sunset]``."""
    h = np.asarray(hour, dtype=float) % 24.0
    if shape == "none":
        return np.zeros_like(h)
    if shape != "bell":
        raise ValueError(f"unknown irradiance shape {shape!r}")
    x = np.clip((h - sunrise) / (sunset - sunrise), 0.0, 1.0)
    return np.where((x > 0) & (x < 1), np.sin(np.pi * x) ** 1.5, 0.0)


@dataclass(frozen=True, eq=False)
class ProfileSpec:
    """Per-node profile parameters (arrays of length ``n``, per-unit).

    ``p_i(t) = base_i d(t) (1 + a_i(t)) - pv_i r(t) max(0, 1 + c_i(t))`` and
    ``q_i(t) = base_i d(t) (1 + a_i(t)) tan(phi_i)`` where ``a`` and ``c`` are
    stationary AR(1) processes with standard deviations ``volatility`` and
    ``cloud_sigma``.
    """

    base_p: np.ndarray
    power_factor: np.ndarray
    pv_peak: np.ndarray
    volatility: float = 0.05
    ar_rho: float = 0.99
    cloud_sigma: float = 0.2
    cloud_rho: float = 0.95
    diurnal: str = "residential"
    irradiance: str = "bell"
    start_hour: float = 12.0
    dt_s: float = 1.0

    def __post_init__(self):
        base = np.asarray(self.base_p, dtype=float)
        pf = np.broadcast_to(np.asarray(self.power_factor, dtype=float), base.shape).copy()
        pv = np.broadcast_to(np.asarray(self.pv_peak, dtype=float), base.shape).copy()
        if np.any(base < 0):
            raise ValueError("base load levels must be non-negative")
        if np.any(pv < 0):
            raise ValueError("PV peaks must be non-negative")
        # |phi| >= 90 deg means power factor <= 0
        if np.any(pf <= 0) or np.any(pf > 1):
            raise ValueError("power factor must lie in (0, 1], i.e. |phi| < 90 degrees")
        for name in ("ar_rho", "cloud_rho"):
            if not -1 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (-1, 1)")
        if self.volatility < 0 or self.cloud_sigma < 0:
            raise ValueError("volatilities must be non-negative")
        diurnal_load(0.0, self.diurnal)
        irradiance(0.0, self.irradiance)
        object.__setattr__(self, "base_p", base)
        object.__setattr__(self, "power_factor", pf)
        object.__setattr__(self, "pv_peak", pv)

    @property
    def tan_phi(self):
        return np.sqrt(1.0 - self.power_factor**2) / self.power_factor

    def hour(self, t):
        return self.start_hour + t * self.dt_s / SECONDS_PER_HOUR

    def nominal_load(self, t):
        """Gross (PV-free) nominal load at step ``t``; scales pseudo sigma."""
        load = self.base_p * diurnal_load(self.hour(t), self.diurnal)
        return InjectionVector(load, load * self.tan_phi)

    def nominal(self, t):
        """Noise-free (historical) injection at step ``t``."""
        h = self.hour(t)
        load = self.base_p * diurnal_load(h, self.diurnal)
        p = load - self.pv_peak * irradiance(h, self.irradiance)
        return InjectionVector(p, load * self.tan_phi)


class ProfileGenerator:
    """Stateful sampler of :class:`ProfileSpec` trajectories, one step per call."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng
        n = spec.base_p.size
        self.t = 0
        self.ar = spec.volatility * rng.standard_normal(n)
        self.cloud = spec.cloud_sigma * rng.standard_normal(n)

    def _advance_noise(self):
        s = self.spec
        n = s.base_p.size
        self.ar = s.ar_rho * self.ar + s.volatility * math.sqrt(1 - s.ar_rho**2) * self.rng.standard_normal(n)
        self.cloud = s.cloud_rho * self.cloud + s.cloud_sigma * math.sqrt(1 - s.cloud_rho**2) * self.rng.standard_normal(n)

    def next(self):
        """Injection at the next step (``t = 1, 2, ...``)."""
        if self.t > 0:
            self._advance_noise()
        self.t += 1
        s = self.spec
        h = s.hour(self.t)
        load = s.base_p * diurnal_load(h, s.diurnal) * np.maximum(0.0, 1.0 + self.ar)
        pv = s.pv_peak * irradiance(h, s.irradiance) * np.maximum(0.0, 1.0 + self.cloud)
        return InjectionVector(load - pv, load * s.tan_phi)


def generate_profile(spec, horizon, rng):
    """``(p, q)`` arrays of shape ``(horizon, n)`` for steps ``1..horizon``."""
    gen = ProfileGenerator(spec, rng)
    rows = [gen.next() for _ in range(horizon)]
    return np.array([r.p for r in rows]), np.array([r.q for r in rows])


def profile_spec_from_config(cfg, model, rng):
    """Per-node :class:`ProfileSpec` from a scenario ``profile`` section.

    Base levels come from the feeder's nominal loads (scaled by
    ``load_scale``) or ``default_base_p_pu``; a random ``pv_fraction`` of load
    nodes gets PV with peak ``pv_peak_ratio`` times the node's base load.
    """
    cfg = dict(cfg or {})
    n = model.n
    loads = model.load_nodes
    base = np.zeros(n)
    pf = np.ones(n)
    if model.nominal_load is not None:
        nom_p, nom_q = model.nominal_load[:n], model.nominal_load[n:]
        base[loads] = nom_p[loads]
        with np.errstate(invalid="ignore", divide="ignore"):
            node_pf = np.where(nom_p > 0, nom_p / np.hypot(nom_p, nom_q), 1.0)
        pf[loads] = node_pf[loads]
    missing = loads[base[loads] <= 0]
    base[missing] = float(cfg.pop("default_base_p_pu", 0.1))
    base *= float(cfg.pop("load_scale", 1.0))
    if "power_factor" in cfg:
        pf[loads] = float(cfg.pop("power_factor"))
    elif model.nominal_load is None:
        pf[loads] = 0.95
    pv_fraction = float(cfg.pop("pv_fraction", 0.3))
    ratio = float(cfg.pop("pv_peak_ratio", 0.6))
    if not 0 <= pv_fraction <= 1:
        raise ValueError("pv_fraction must lie in [0, 1]")
    count = int(round(pv_fraction * loads.size))
    pv = np.zeros(n)
    if count:
        chosen = np.sort(rng.choice(loads, size=count, replace=False))
        pv[chosen] = ratio * base[chosen]
    return ProfileSpec(base_p=base, power_factor=pf, pv_peak=pv, **cfg)


# --- scenario -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    model: FeederModel
    horizon: int
    seed: int = 0
    profile: dict = field(default_factory=dict)
    meters: dict = field(default_factory=dict)
    arrival: ArrivalPolicy = field(default_factory=ArrivalPolicy)
    estimators: tuple = (est.EstimatorConfig(algorithm="go"), est.EstimatorConfig(algorithm="gd"),
                         est.EstimatorConfig(algorithm="sgd"))

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon_T must be >= 1")
        labels = [c.label for c in self.estimators]
        if len(set(labels)) != len(labels):
            raise ValueError(f"estimator names must be unique, got {labels}")
        unknown = set(self.meters) - {"voltage_fraction", "voltage_sigma_pu", "pseudo_rel_sigma",
                                       "pseudo_refresh", "pseudo_source", "noise"}
        if unknown:
            raise ValueError(f"unknown meter options {sorted(unknown)}")

    def with_seed(self, seed):
        return Scenario(self.model, self.horizon, seed, self.profile, self.meters, self.arrival, self.estimators)


def _resolve_feeder(ref, base_dir):
    path = Path(base_dir or ".") / ref
    if path.exists():
        return read_feeder(path)
    if ref in TEMPLATES:
        return template(ref)
    raise ScenarioError(f"feeder {ref!r} not found (neither a file nor one of {TEMPLATES})")


def scenario_from_dict(data, base_dir=None):
    """Build a :class:`Scenario` from a parsed scenario document.

    ``feeder`` is a path (relative to ``base_dir``) or a template name.
    """
    try:
        model = data["feeder"] if isinstance(data["feeder"], FeederModel) else _resolve_feeder(data["feeder"], base_dir)
        horizon = int(data["horizon_T"])
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing {exc.args[0]!r}") from None
    arrival = dict(data.get("arrival", {}))
    kind = arrival.pop("policy", "paper")
    configs = tuple(est.EstimatorConfig.from_dict(c) for c in data.get("estimators", [
        {"algorithm": "go"}, {"algorithm": "gd"}, {"algorithm": "sgd"}]))
    return Scenario(model=model, horizon=horizon, seed=int(data.get("seed", 0)),
                    profile=dict(data.get("profile", {})), meters=dict(data.get("meters", {})),
                    arrival=ArrivalPolicy(kind=kind, **arrival), estimators=configs)


def load_scenario(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse failure at line {exc.lineno}: {exc.msg}") from None
    return scenario_from_dict(data, base_dir=path.parent)


# --- trace --------------------------------------------------------------------


@dataclass(eq=False)
class RunTrace:
    """Per-step record of the truth and every estimator's output.

    Arrays are indexed ``[step, node]``; ``t`` runs from 1.
    """

    estimators: list
    node_labels: list = field(default_factory=list)
    t: list = field(default_factory=list)
    z_true: list = field(default_factory=list)
    v_true: list = field(default_factory=list)
    m_t: list = field(default_factory=list)
    v_est: dict = field(default_factory=dict)
    z_est: dict | None = None
    step_time: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.estimators:
            self.v_est.setdefault(name, [])
            self.step_time.setdefault(name, [])
            self.failures.setdefault(name, [])

    def __len__(self):
        return len(self.t)

    def array(self, what, name=None):
        data = getattr(self, what) if name is None else getattr(self, what)[name]
        return np.asarray(data, dtype=float)


class OnlineRun:
    """Resumable online estimation run.

    All estimators see the same truth, the same noisy full batch and the same
    arrival subset at every step; GN/GO/GD use the full batch and SGD only
    the arrived meters.
    """

    def __init__(self, scenario, log_states=False):
        self.scenario = scenario
        model = scenario.model
        self.model = model
        seq = np.random.SeedSequence(scenario.seed)
        placement, profile, pseudo, noise, arrival = (np.random.default_rng(s) for s in seq.spawn(5))
        self.rng_pseudo, self.rng_noise, self.rng_arrival = pseudo, noise, arrival
        self.spec = profile_spec_from_config(scenario.profile, model, placement)
        self.generator = ProfileGenerator(self.spec, profile)
        mcfg = scenario.meters
        self.meters = build_meter_set(
            model, placement,
            voltage_fraction=mcfg.get("voltage_fraction", 0.12),
            voltage_sigma=mcfg.get("voltage_sigma_pu", 0.01),
            pseudo_rel_sigma=mcfg.get("pseudo_rel_sigma", 0.5),
            nominal=self._mask_loads(self.spec.nominal_load(1).z),
        )
        try:
            # throwaway generator: checks the policy fits this meter set
            arrival_subset(self.meters, scenario.arrival, 1, np.random.default_rng(0))
        except ValueError as exc:
            raise ScenarioError(f"arrival policy: {exc}") from None
        self.noise = bool(mcfg.get("noise", True))
        self.pseudo_source = mcfg.get("pseudo_source", "nominal")
        if self.pseudo_source not in ("nominal", "truth"):
            raise ScenarioError("pseudo_source must be 'nominal' or 'truth'")
        self.pseudo_refresh = int(mcfg.get("pseudo_refresh", 0))
        self.pseudo_values = self._draw_pseudo(1) if self.pseudo_source == "nominal" else None
        z0 = est.default_initial_estimate(model, self.meters, self._draw_pseudo(1, consume=False)
                                          if self.pseudo_values is None else self.pseudo_values)
        self.states = {}
        for cfg in scenario.estimators:
            self.states[cfg.label] = est.initial_state(model, self.meters, z0, cfg)
        self.configs = {cfg.label: cfg for cfg in scenario.estimators}
        self.v_prev = None
        self.trace = RunTrace(list(self.configs), [model.node_label(i) for i in range(model.n)],
                              z_est={name: [] for name in self.configs} if log_states else None)

    def _mask_loads(self, z):
        return est.project(self.model, z)

    def _draw_pseudo(self, t, consume=True):
        """Pseudo readings: nominal profile at ``t`` plus one Gaussian draw."""
        meters = self.meters
        nominal = self._mask_loads(self.spec.nominal(t).z)
        values = np.full(meters.m, np.nan)
        ids = np.flatnonzero(np.isin(meters.kind, (PSEUDO_P, PSEUDO_Q)))
        noise = self.rng_pseudo.standard_normal(ids.size) if consume else np.zeros(ids.size)
        scale = meters.sigma[ids] if self.noise else 0.0
        values[ids] = nominal[meters.state_col[ids]] + scale * noise
        return values

    @property
    def t(self):
        return self.generator.t

    def step(self):
        model, meters = self.model, self.meters
        truth = self.generator.next()
        t = self.generator.t
        z_true = self._mask_loads(truth.z)
        try:
            sol = solve_power_flow(model, z_true, v_start=self.v_prev)
        except PowerFlowError as exc:
            raise ScenarioError(f"truth power flow failed at t={t}: {exc}") from exc
        self.v_prev = sol.v_complex
        if self.pseudo_values is not None and self.pseudo_refresh and t > 1 and (t - 1) % self.pseudo_refresh == 0:
            self.pseudo_values = self._draw_pseudo(t)
        batch = synthesize_batch(z_true, sol.v_mag, meters, self.rng_noise, t=t,
                                 pseudo_values=self.pseudo_values, noise=self.noise)
        subset = arrival_subset(meters, self.scenario.arrival, t, self.rng_arrival)
        partial = batch.restrict(subset)

        tr = self.trace
        tr.t.append(t)
        tr.z_true.append(z_true)
        tr.v_true.append(sol.v_mag)
        tr.m_t.append(int(np.count_nonzero(~meters.is_virtual[subset])))
        for name, cfg in self.configs.items():
            state = self.states[name]
            start = time.perf_counter()
            try:
                new = _estimator_update(cfg.algorithm, state, batch, partial, meters, model)
            except (PowerFlowError, np.linalg.LinAlgError, ValueError) as exc:
                elapsed = time.perf_counter() - start
                log.warning("estimator %s failed at t=%d: %s", name, t, exc)
                tr.failures[name].append((t, str(exc)))
                tr.v_est[name].append(np.full(model.n, np.nan))
                tr.step_time[name].append(elapsed)
                if tr.z_est is not None:
                    tr.z_est[name].append(np.full(2 * model.n, np.nan))
                continue
            elapsed = time.perf_counter() - start
            self.states[name] = new
            tr.v_est[name].append(new.v_mag)
            tr.step_time[name].append(elapsed)
            if tr.z_est is not None:
                tr.z_est[name].append(new.z)
        return t

    def advance(self, steps):
        for _ in range(steps):
            self.step()
        return self.trace

    def run(self):
        """Advance to the scenario horizon."""
        return self.advance(max(0, self.scenario.horizon - self.t))


def _estimator_update(algorithm, state, batch, partial, meters, model):
    cfg = state.config
    if algorithm == "gn":
        return est.gauss_newton_solve(model, meters, batch, state.z, tol=cfg.tol, max_iter=cfg.max_iter, config=cfg)
    if algorithm == "go":
        return est.converged_gd_solve(model, meters, batch, state)
    if algorithm == "gd":
        return est.online_gd_step(state, batch, meters, model)
    return est.online_sgd_step(state, partial, meters, model)


def run_online(scenario, log_states=False):
    """Run ``scenario`` for its full horizon and return the :class:`RunTrace`."""
    return OnlineRun(scenario, log_states=log_states).run()


def static_linear_problem(scenario):
    """Linearized WLS problem of ``scenario`` frozen at its nominal operating point.

    Rows are the non-virtual meters and columns the free (load) coordinates.
    Readings are the linear model at the nominal point plus one noise draw.
    Returns ``(LinearWlsProblem, z_nominal_free)``.
    """
    run = OnlineRun(scenario)
    model, meters = run.model, run.meters
    z_nom = run._mask_loads(run.spec.nominal_load(1).z)
    sens = jacobian_vm(model, z_nom)
    rows = meters.sampleable_ids
    cols = np.flatnonzero(est.free_mask(model))
    h = meters.jacobian(sens, rows)[:, cols]
    noise = run.rng_noise.standard_normal(rows.size) * meters.sigma[rows] if run.noise else 0.0
    y = h @ z_nom[cols] + noise
    return LinearWlsProblem(h, meters.weight[rows], y), z_nom[cols]
