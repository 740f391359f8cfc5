"""Meters, noisy measurement batches and asynchronous arrival subsets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

VOLTAGE = "voltage_mag"
PSEUDO_P = "pseudo_p"
PSEUDO_Q = "pseudo_q"
VIRTUAL_P = "virtual_p"
VIRTUAL_Q = "virtual_q"
KINDS = (VOLTAGE, PSEUDO_P, PSEUDO_Q, VIRTUAL_P, VIRTUAL_Q)

DEFAULT_VOLTAGE_SIGMA = 0.01
DEFAULT_PSEUDO_REL_SIGMA = 0.5
PSEUDO_SIGMA_FLOOR = 1e-3
VIRTUAL_SIGMA = 1e-6

POLICIES = ("paper", "uniform", "round_robin", "full")


class ObservabilityError(ValueError):
    pass


@dataclass(frozen=True)
class Meter:
    id: int
    kind: str
    node: int
    sigma: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown meter kind {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError(f"meter {self.id}: sigma must be positive")


@dataclass(frozen=True, eq=False)
class MeterSet:
    """Ordered meters; ``meters[i].id == i``.

    Arrays are precomputed for vectorized evaluation: ``state_col[i]`` is the
    column of ``z`` read by an injection meter (``-1`` for voltage meters).
    """

    meters: tuple[Meter, ...]
    n: int
    kind: np.ndarray = field(init=False, repr=False)
    node: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)
    weight: np.ndarray = field(init=False, repr=False)
    state_col: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for i, meter in enumerate(self.meters):
            if meter.id != i:
                raise ValueError(f"meter at position {i} has id {meter.id}")
            if not 0 <= meter.node < self.n:
                raise ValueError(f"meter {i}: node {meter.node} out of range")
        kind = np.array([m.kind for m in self.meters], dtype=object)
        node = np.array([m.node for m in self.meters], dtype=int)
        sigma = np.array([m.sigma for m in self.meters], dtype=float)
        col = np.full(len(self.meters), -1, dtype=int)
        is_p = np.isin(kind, (PSEUDO_P, VIRTUAL_P))
        is_q = np.isin(kind, (PSEUDO_Q, VIRTUAL_Q))
        col[is_p] = node[is_p]
        col[is_q] = node[is_q] + self.n
        set_ = object.__setattr__
        set_(self, "kind", kind)
        set_(self, "node", node)
        set_(self, "sigma", sigma)
        set_(self, "weight", 1.0 / sigma**2)
        set_(self, "state_col", col)

    @property
    def m(self):
        return len(self.meters)

    @property
    def is_voltage(self):
        return self.kind == VOLTAGE

    @property
    def is_virtual(self):
        return np.isin(self.kind, (VIRTUAL_P, VIRTUAL_Q))

    @property
    def voltage_ids(self):
        return np.flatnonzero(self.is_voltage)

    @property
    def voltage_nodes(self):
        return self.node[self.is_voltage]

    @property
    def sampleable_ids(self):
        """Meters subject to asynchronous arrival (everything but virtual)."""
        return np.flatnonzero(~self.is_virtual)

    def ids_of(self, kind):
        return np.flatnonzero(self.kind == kind)

    def evaluate(self, z, v_mag, rows=None):
        """``h(z)`` given the voltage magnitudes ``v_mag`` that go with ``z``."""
        rows = np.arange(self.m) if rows is None else np.asarray(rows, dtype=int)
        z = np.asarray(z, dtype=float)
        col = self.state_col[rows]
        volt = col < 0
        out = np.empty(rows.size)
        out[volt] = np.asarray(v_mag)[self.node[rows[volt]]]
        out[~volt] = z[col[~volt]]
        return out

    def jacobian(self, sens, rows=None):
        """Measurement Jacobian (``len(rows) x 2n``) from a voltage sensitivity."""
        rows = np.arange(self.m) if rows is None else np.asarray(rows, dtype=int)
        sens = getattr(sens, "h", sens)
        col = self.state_col[rows]
        out = np.zeros((rows.size, 2 * self.n))
        volt = col < 0
        out[volt] = sens[self.node[rows[volt]]]
        idx = np.flatnonzero(~volt)
        out[idx, col[idx]] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class MeasurementBatch:
    t: int
    values: np.ndarray
    meter_ids: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        ids = np.asarray(self.meter_ids, dtype=int)
        if values.shape != ids.shape:
            raise ValueError("values and meter_ids must align")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "meter_ids", ids)

    @property
    def m_t(self):
        return self.meter_ids.size

    def restrict(self, ids):
        """Sub-batch holding only ``ids`` (which must be present in this batch)."""
        ids = np.asarray(ids, dtype=int)
        pos = np.searchsorted(self.meter_ids, ids)
        if np.any(pos >= self.meter_ids.size) or np.any(self.meter_ids[np.minimum(pos, self.meter_ids.size - 1)] != ids):
            raise KeyError("subset contains meters missing from the batch")
        return MeasurementBatch(self.t, self.values[pos], ids)


def pseudo_sigma(nominal, rel_sigma=DEFAULT_PSEUDO_REL_SIGMA, floor=PSEUDO_SIGMA_FLOOR):
    return np.maximum(rel_sigma * np.abs(nominal), floor)


def observability_rank(model, meters):
    """Column rank of the full measurement Jacobian at the no-load point."""
    from .powerflow import jacobian_vm

    sens = jacobian_vm(model, np.zeros(2 * model.n))
    return int(np.linalg.matrix_rank(meters.jacobian(sens)))


def check_observability(model, meters):
    rank = observability_rank(model, meters)
    if rank < 2 * model.n:
        raise ObservabilityError(
            f"measurement set is not observable: Jacobian rank {rank} < {2 * model.n}"
        )
    return rank


def build_meter_set(model, rng, voltage_fraction=0.12, voltage_sigma=DEFAULT_VOLTAGE_SIGMA,
                    pseudo_rel_sigma=DEFAULT_PSEUDO_REL_SIGMA, nominal=None,
                    sigma_floor=PSEUDO_SIGMA_FLOOR, virtual_sigma=VIRTUAL_SIGMA):
    """Place meters on ``model``.

    Voltage meters go on a random ``ceil(voltage_fraction * n)`` nodes; every
    load node gets pseudo ``p`` and ``q`` meters with sigma
    ``pseudo_rel_sigma * |nominal|`` (floored at ``sigma_floor``); every other
    node gets virtual zero-injection meters.  Meter order: voltage (ascending
    node), pseudo p, pseudo q, virtual p, virtual q.

    Parameters
    ----------
    rng : numpy.random.Generator or int
    nominal : array_like, shape (2n,), optional
        Nominal ``[p; q]`` used to scale pseudo-measurement sigma.
    """
    if not 0 < voltage_fraction <= 1:
        raise ValueError("voltage_fraction must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    n = model.n
    nominal = np.zeros(2 * n) if nominal is None else np.asarray(nominal, dtype=float)
    count = min(n, math.ceil(voltage_fraction * n - 1e-9))
    vnodes = np.sort(rng.choice(n, size=count, replace=False))
    loads = model.load_nodes
    others = np.flatnonzero(~model.is_load)
    sig = pseudo_sigma(nominal, pseudo_rel_sigma, sigma_floor)
    spec = [(VOLTAGE, int(i), voltage_sigma) for i in vnodes]
    spec += [(PSEUDO_P, int(i), float(sig[i])) for i in loads]
    spec += [(PSEUDO_Q, int(i), float(sig[n + i])) for i in loads]
    spec += [(VIRTUAL_P, int(i), virtual_sigma) for i in others]
    spec += [(VIRTUAL_Q, int(i), virtual_sigma) for i in others]
    meters = MeterSet(tuple(Meter(k, *row) for k, row in enumerate(spec)), n)
    check_observability(model, meters)
    return meters


def synthesize_batch(z_true, v_true, meters, rng, t=0, pseudo_values=None, noise=True):
    """Full noisy batch: ``h(truth) + N(0, sigma^2)``; virtual meters read 0.

    One standard normal is drawn per meter whatever its kind, so subset
    batches taken from the same stream are restrictions of the full batch.
    ``pseudo_values`` (length ``m``) replaces the reading of pseudo meters,
    e.g. with values drawn once from a historical profile.  ``noise=False``
    still consumes the draws but adds nothing.
    """
    draws = rng.standard_normal(meters.m) * meters.sigma
    values = meters.evaluate(z_true, v_true)
    if noise:
        values = values + draws
    if pseudo_values is not None:
        pseudo = np.isin(meters.kind, (PSEUDO_P, PSEUDO_Q))
        values[pseudo] = np.asarray(pseudo_values)[pseudo]
    values[meters.is_virtual] = 0.0
    return MeasurementBatch(t, values, np.arange(meters.m))


@dataclass(frozen=True)
class ArrivalPolicy:
    """Which meters reach the estimator at each step.

    ``paper``: ``k_v`` voltage meters plus ``k_pq`` (pseudo p, pseudo q)
    pairs; ``uniform``: ``m_t`` non-virtual meters without replacement;
    ``round_robin``: the next ``m_t`` non-virtual meters in cyclic order;
    ``full``: everything.  Virtual meters are always included.
    """

    kind: str = "paper"
    k_v: int = 1
    k_pq: int = 3
    m_t: int | None = None

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown arrival policy {self.kind!r}")
        if self.kind in ("uniform", "round_robin") and (self.m_t is None or self.m_t < 0):
            raise ValueError(f"{self.kind} policy needs a non-negative m_t")
        if self.k_v < 0 or self.k_pq < 0:
            raise ValueError("k_v and k_pq must be non-negative")


def arrival_subset(meters, policy, t, rng):
    """Sorted meter ids received at step ``t``."""
    virtual = np.flatnonzero(meters.is_virtual)
    if policy.kind == "full":
        return np.arange(meters.m)
    if policy.kind == "paper":
        vids = meters.voltage_ids
        pids = meters.ids_of(PSEUDO_P)
        qids = meters.ids_of(PSEUDO_Q)
        if policy.k_v > vids.size:
            raise ValueError(f"k_v={policy.k_v} exceeds {vids.size} voltage meters")
        if policy.k_pq > pids.size:
            raise ValueError(f"k_pq={policy.k_pq} exceeds {pids.size} pseudo-measurement pairs")
        q_of = {int(meters.node[i]): int(i) for i in qids}
        chosen_v = rng.choice(vids, size=policy.k_v, replace=False)
        chosen_p = rng.choice(pids, size=policy.k_pq, replace=False)
        chosen_q = np.array([q_of[int(meters.node[i])] for i in chosen_p], dtype=int)
        picked = np.concatenate([chosen_v, chosen_p, chosen_q])
    else:
        pool = meters.sampleable_ids
        if policy.m_t > pool.size:
            raise ValueError(f"m_t={policy.m_t} exceeds {pool.size} non-virtual meters")
        if policy.kind == "uniform":
            picked = rng.choice(pool, size=policy.m_t, replace=False)
        else:
            start = (t * policy.m_t) % max(pool.size, 1)
            picked = pool[(start + np.arange(policy.m_t)) % pool.size]
    return np.unique(np.concatenate([picked.astype(int), virtual]))


BATCH_COLUMNS = ("t", "meter_id", "kind", "node", "value", "sigma")


def write_batch_csv(batches, meters, path):
    """Dump batches as ``t, meter_id, kind, node, value, sigma`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BATCH_COLUMNS)
        for batch in batches:
            for i, value in zip(batch.meter_ids, batch.values):
                meter = meters.meters[i]
                writer.writerow([batch.t, meter.id, meter.kind, meter.node, f"{value:.17g}", f"{meter.sigma:.17g}"])


def read_batch_csv(path, n):
    """Read a batch dump; returns ``(MeterSet, [MeasurementBatch, ...])``.

    Meters are rebuilt from the rows (ids must be contiguous from 0).
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(BATCH_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["t"]), int(row["meter_id"]), row["kind"].strip(), int(row["node"]),
                             float(row["value"]), float(row["sigma"])))
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no measurement rows")
    defs = {}
    for t, mid, kind, node, _, sigma in rows:
        prev = defs.setdefault(mid, (kind, node, sigma))
        if prev != (kind, node, sigma):
            raise ValueError(f"{path}: meter {mid} redefined at t={t}")
    if sorted(defs) != list(range(len(defs))):
        raise ValueError(f"{path}: meter ids must be contiguous from 0")
    meters = MeterSet(tuple(Meter(i, *defs[i]) for i in range(len(defs))), n)
    batches = []
    for t in sorted({r[0] for r in rows}):
        sel = sorted((r[1], r[4]) for r in rows if r[0] == t)
        batches.append(MeasurementBatch(t, [v for _, v in sel], [i for i, _ in sel]))
    return meters, batches
