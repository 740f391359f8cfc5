"""Command-line entry point: ``odsse <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure, 3 bound
violation (``verify-bound`` only).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.linalg

from . import estimators as est
from . import metrics
from .feeder import TEMPLATES, FeederError, read_feeder, template, template_text
from .linear import RankDeficientError, run_bound_experiment
from .measurement import PSEUDO_P, PSEUDO_Q, read_batch_csv
from .powerflow import InjectionVector, PowerFlowError, solve_power_flow
from .scenario import OnlineRun, ScenarioError, load_scenario, static_linear_problem

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_BOUND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser():
    p = _Parser(prog="odsse", description="Online distribution system state estimation simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an online estimation scenario")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--out-dir", required=True, type=Path)
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--log-states", action="store_true", help="also write estimated injections")

    pf = sub.add_parser("powerflow", help="solve one power flow")
    pf.add_argument("--feeder", required=True, help="feeder file or template name")
    pf.add_argument("--injections", required=True, type=Path)

    eb = sub.add_parser("estimate-batch", help="one-shot estimation from a measurement CSV")
    eb.add_argument("--feeder", required=True)
    eb.add_argument("--measurements", required=True, type=Path)
    eb.add_argument("--algorithm", choices=("gn", "go"), default="gn")

    gf = sub.add_parser("gen-feeder", help="write an embedded feeder template")
    gf.add_argument("--template", required=True, choices=TEMPLATES)
    gf.add_argument("--out", required=True, type=Path)

    vb = sub.add_parser("verify-bound", help="empirical check of the steady-state tracking bound")
    vb.add_argument("--scenario", required=True, type=Path)
    vb.add_argument("--seeds", type=int, default=100)
    return p


def _feeder(ref):
    path = Path(ref)
    if path.exists():
        return read_feeder(path)
    if ref in TEMPLATES:
        return template(ref)
    raise UsageError(f"feeder {ref!r} not found")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: parse failure at line {exc.lineno}: {exc.msg}") from None


def _scenario(path):
    if not Path(path).exists():
        raise UsageError(f"{path}: no such file")
    try:
        return load_scenario(path)
    except (ScenarioError, FeederError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def cmd_run(args, out):
    scenario = _scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    try:
        run = OnlineRun(scenario, log_states=args.log_states)
    except (ScenarioError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    trace = run.run()
    summary = metrics.summarize(trace)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_trace_csv(trace, args.out_dir / "trace.csv")
    metrics.write_summary_csv(summary, args.out_dir / "summary.csv")
    metrics.write_timing_csv(summary, args.out_dir / "timing.csv")
    metrics.write_error_csv(trace, summary, args.out_dir / "errors.csv")
    if args.log_states:
        _write_states(trace, args.out_dir / "states.csv")
    for name, m in summary.items():
        failed = len(trace.failures[name])
        print(f"{name}: avg_error={m.avg_error_per_node_pu:.3e} avg_max_error={m.avg_max_error_per_sample_pu:.3e} "
              f"avg_time={m.avg_step_time_s:.3e}s" + (f" failed_steps={failed}" if failed else ""), file=out)
    return EXIT_OK


def _write_states(trace, path):
    n = len(trace.node_labels)
    with open(path, "w") as fh:
        fh.write("t,estimator," + ",".join([f"p{i}" for i in range(n)] + [f"q{i}" for i in range(n)]) + "\n")
        for name, rows in trace.z_est.items():
            for t, z in zip(trace.t, rows):
                fh.write(f"{t},{name}," + ",".join(metrics.fmt(x) for x in z) + "\n")


def _injections(model, data):
    """Accept ``{"p": [...], "q": [...]}`` (per unit, node order) or
    ``[{"bus": .., "phase": .., "p": .., "q": ..}, ...]``."""
    if isinstance(data, dict) and "p" in data:
        return InjectionVector(data["p"], data.get("q", np.zeros(model.n)))
    if isinstance(data, dict) and "injections" in data:
        data = data["injections"]
    if not isinstance(data, list):
        raise UsageError("injections must be {'p': [...], 'q': [...]} or a list of bus/phase entries")
    p, q = np.zeros(model.n), np.zeros(model.n)
    for entry in data:
        try:
            i = model.node_index(int(entry["bus"]), entry["phase"])
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad injection entry {entry}: {exc}") from None
        p[i] += float(entry.get("p", 0.0))
        q[i] += float(entry.get("q", 0.0))
    return InjectionVector(p, q)


def cmd_powerflow(args, out):
    try:
        model = _feeder(args.feeder)
        inj = _injections(model, _read_json(args.injections))
    except (FeederError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if inj.p.size != model.n:
        raise UsageError(f"expected {model.n} injections, got {inj.p.size}")
    sol = solve_power_flow(model, inj)
    print(f"# converged in {sol.iterations} iterations, residual {sol.residual:.3e}", file=out)
    print("node,v_mag_pu,v_angle_deg", file=out)
    for i in range(model.n):
        print(f"{model.node_label(i)},{sol.v_mag[i]:.8f},{np.degrees(np.angle(sol.v_complex[i])):.6f}", file=out)
    return EXIT_OK


def cmd_estimate_batch(args, out):
    try:
        model = _feeder(args.feeder)
        meters, batches = read_batch_csv(args.measurements, model.n)
    except FileNotFoundError:
        raise UsageError(f"{args.measurements}: no such file") from None
    except (FeederError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    print("t,node,v_mag_pu,p_pu,q_pu,converged,iterations", file=out)
    ok = True
    for batch in batches:
        if batch.m_t != meters.m:
            raise UsageError(f"batch t={batch.t} is incomplete ({batch.m_t} of {meters.m} meters)")
        pseudo = np.full(meters.m, np.nan)
        ids = np.flatnonzero(np.isin(meters.kind, (PSEUDO_P, PSEUDO_Q)))
        pseudo[ids] = batch.values[np.searchsorted(batch.meter_ids, ids)]
        z0 = est.default_initial_estimate(model, meters, pseudo)
        if args.algorithm == "gn":
            state = est.gauss_newton_solve(model, meters, batch, z0)
        else:
            state = est.converged_gd_solve(model, meters, batch, z0, tol=1e-8, max_iter=100_000)
        ok &= state.converged
        for i in range(model.n):
            print(f"{batch.t},{model.node_label(i)},{state.v_mag[i]:.8f},{state.z[i]:.6e},{state.z[model.n + i]:.6e},"
                  f"{int(state.converged)},{state.iterations}", file=out)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_gen_feeder(args, out):
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(template_text(args.template))
    print(f"wrote {args.out}", file=out)
    return EXIT_OK


def cmd_verify_bound(args, out):
    scenario = _scenario(args.scenario)
    options = _read_json(args.scenario).get("bound", {})
    problem, _ = static_linear_problem(scenario)
    arrival = scenario.arrival
    m_t = arrival.m_t if arrival.kind == "uniform" else max(1, round(0.2 * problem.m))
    if not 0 < m_t <= problem.m:
        raise UsageError(f"m_t={m_t} outside 1..{problem.m}")
    eta = options.get("eta")
    if eta is None:
        eta = 0.5 / float(scipy.linalg.eigvalsh(problem.gain)[-1])
    res = run_bound_experiment(problem, m_t, float(eta), seeds=args.seeds,
                               steps=int(options.get("steps", 10_000)), trailing=int(options.get("trailing", 2_000)),
                               seed=scenario.seed)
    p = res.params
    print(f"m={problem.m} m_t={m_t} dim={problem.dim}", file=out)
    print(f"tau1={p.tau1:.6e} sigma_f2={p.sigma_f2:.6e} delta1={p.delta1:.6e} delta_z={p.delta_z:.6e} "
          f"eta={p.eta:.6e}", file=out)
    print(f"bound={res.bound:.6e} empirical_mse={res.mse:.6e} burn_in_factor={res.burn_in_factor:.3e}", file=out)
    print("PASS" if res.holds else "FAIL: empirical MSE exceeds the bound", file=out)
    return EXIT_OK if res.holds else EXIT_BOUND


COMMANDS = {
    "run": cmd_run,
    "powerflow": cmd_powerflow,
    "estimate-batch": cmd_estimate_batch,
    "gen-feeder": cmd_gen_feeder,
    "verify-bound": cmd_verify_bound,
}


def main(argv=None, out=None):
    out = out or sys.stdout
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PowerFlowError, RankDeficientError, ScenarioError, np.linalg.LinAlgError, OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
