"""Tracking metrics and CSV output for run traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .scenario import RunTrace

TRACE_PREFIX = "v_est_"
SUMMARY_COLUMNS = ("estimator", "avg_error_pu", "avg_max_error_pu")
TIMING_COLUMNS = ("estimator", "avg_step_time_s", "median_step_time_s")


def fmt(x):
    """Scientific notation, 6 significant digits."""
    return f"{x:.5e}"


@dataclass(frozen=True, eq=False)
class EstimatorMetrics:
    avg_step_time_s: float
    median_step_time_s: float
    avg_error_per_node_pu: float
    avg_max_error_per_sample_pu: float
    error_per_sample: np.ndarray
    running_avg_error: np.ndarray


class MetricsSummary(dict):
    """Mapping of estimator name to :class:`EstimatorMetrics`."""


def summarize(trace):
    """Average step time, mean |v_est - v_true| per node, and mean per-sample max.

    Steps where an estimator failed (NaN voltages) are left out of its
    averages.
    """
    if len(trace) == 0:
        raise ValueError("cannot summarize an empty trace")
    v_true = trace.array("v_true")
    summary = MetricsSummary()
    for name in trace.estimators:
        err = np.abs(trace.array("v_est", name) - v_true)
        ok = np.all(np.isfinite(err), axis=1)
        per_sample = np.full(err.shape[0], np.nan)
        per_sample[ok] = err[ok].mean(axis=1)
        max_sample = err[ok].max(axis=1) if ok.any() else np.array([np.nan])
        running = np.cumsum(np.where(ok, per_sample, 0.0)) / np.maximum(np.cumsum(ok), 1)
        times = np.asarray(trace.step_time.get(name, []), dtype=float)
        summary[name] = EstimatorMetrics(
            avg_step_time_s=float(times.mean()) if times.size else float("nan"),
            median_step_time_s=float(np.median(times)) if times.size else float("nan"),
            avg_error_per_node_pu=float(err[ok].mean()) if ok.any() else float("nan"),
            avg_max_error_per_sample_pu=float(max_sample.mean()),
            error_per_sample=per_sample,
            running_avg_error=running,
        )
    return summary


def write_trace_csv(trace, path):
    """Long-format trace: ``t, node, v_true, v_est_<name>...``."""
    names = list(trace.estimators)
    v_true = trace.array("v_true")
    est = [trace.array("v_est", name) for name in names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "node", "v_true"] + [TRACE_PREFIX + name for name in names])
        for k, t in enumerate(trace.t):
            for node in range(v_true.shape[1]):
                writer.writerow([t, node, fmt(v_true[k, node])] + [fmt(e[k, node]) for e in est])


def read_trace_csv(path):
    """Parse a trace CSV back into a :class:`RunTrace` (voltages only)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["t", "node", "v_true"]:
            raise ValueError(f"{path}: not a trace file (header {header[:3]})")
        names = [h[len(TRACE_PREFIX):] for h in header[3:]]
        rows = [r for r in reader if r]
    trace = RunTrace(names)
    if not rows:
        return trace
    data = np.array([[float(x) for x in r] for r in rows])
    ts = data[:, 0].astype(int)
    steps = np.unique(ts)
    n = int(data[:, 1].max()) + 1
    if data.shape[0] != steps.size * n:
        raise ValueError(f"{path}: ragged trace")
    block = data.reshape(steps.size, n, -1)
    trace.t.extend(int(t) for t in steps)
    trace.v_true.extend(block[:, :, 2])
    for k, name in enumerate(names):
        trace.v_est[name].extend(block[:, :, 3 + k])
    return trace


def write_summary_csv(summary, path):
    """One row per estimator: average error per node and average per-sample max."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for name, m in summary.items():
            writer.writerow([name, fmt(m.avg_error_per_node_pu), fmt(m.avg_max_error_per_sample_pu)])


def write_timing_csv(summary, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TIMING_COLUMNS)
        for name, m in summary.items():
            writer.writerow([name, fmt(m.avg_step_time_s), fmt(m.median_step_time_s)])


def write_error_csv(trace, summary, path):
    """Per-step mean error and its running average, one column pair per estimator."""
    names = list(summary)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [c for name in names for c in (f"err_{name}", f"running_{name}")])
        for k, t in enumerate(trace.t):
            row = [t]
            for name in names:
                row += [fmt(summary[name].error_per_sample[k]), fmt(summary[name].running_avg_error[k])]
            writer.writerow(row)


def read_summary_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {row["estimator"]: (float(row["avg_error_pu"]), float(row["avg_max_error_pu"])) for row in reader}
