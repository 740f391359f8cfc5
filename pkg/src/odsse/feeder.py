"""Multiphase feeder model and bus admittance assembly.

A feeder is a set of buses (bus 0 is the slack) joined by series-impedance
lines with up to three phases.  Every non-slack bus phase is a *node*; nodes
are numbered ``0..n-1`` by ascending bus id, then phase order ``a, b, c``.
Slack phases are numbered after the nodes, so the admittance matrix is laid
out as::

    ybus = [[Y_LL, Y_L0],
            [Y_0L, Y_00]]

with ``Y_LL`` of size ``n x n``.  All quantities are per-unit on
``(base_voltage, base_power)``; impedances given in ohms are divided by
``base_voltage**2 / base_power`` at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

PHASES = "abc"
DEFAULT_SLACK_ANGLES = {"a": 0.0, "b": -120.0, "c": 120.0}
TEMPLATES = ("2bus", "4bus", "13node")


class FeederError(ValueError):
    """Invalid feeder description; the message names the offending entry."""


def _normalize_phases(phases, where):
    if not isinstance(phases, str) or not phases:
        raise FeederError(f"{where}: phases must be a non-empty string, got {phases!r}")
    phases = phases.lower()
    if len(set(phases)) != len(phases) or any(p not in PHASES for p in phases) or len(phases) > 3:
        raise FeederError(f"{where}: invalid phase string {phases!r}")
    return "".join(p for p in PHASES if p in phases)


@dataclass(frozen=True)
class Bus:
    id: int
    phases: str
    is_slack: bool = False
    slack_voltage: tuple[complex, ...] | None = None


@dataclass(frozen=True)
class Node:
    bus_id: int
    phase: str
    index: int


@dataclass(frozen=True, eq=False)
class Line:
    """Series line; ``impedance`` is per-unit, ordered like ``phases``."""

    from_bus: int
    to_bus: int
    phases: str
    impedance: np.ndarray

    @property
    def admittance(self):
        y = np.linalg.inv(self.impedance)
        # exact symmetry: fl(a + b) == fl(b + a)
        return 0.5 * (y + y.T)


def assemble_ybus(buses, lines):
    """Assemble the bus admittance matrix.

    Parameters
    ----------
    buses : sequence of Bus
        Validated buses.  Bus 0 must be the slack.
    lines : sequence of Line
        Validated lines with per-unit impedances.

    Returns
    -------
    ybus : ndarray, complex, shape (n + s, n + s)
        Non-slack nodes first (ascending bus id, then phase), slack phases last.
    """
    index, _ = _index_nodes(buses)
    size = len(index)
    ybus = np.zeros((size, size), dtype=complex)
    for k, line in enumerate(lines):
        try:
            cond = np.linalg.cond(line.impedance)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > 1e12:
            raise FeederError(f"lines[{k}] ({line.from_bus}->{line.to_bus}): singular impedance matrix")
        y = line.admittance
        ii = [index[(line.from_bus, ph)] for ph in line.phases]
        jj = [index[(line.to_bus, ph)] for ph in line.phases]
        ybus[np.ix_(ii, ii)] += y
        ybus[np.ix_(jj, jj)] += y
        ybus[np.ix_(ii, jj)] -= y
        ybus[np.ix_(jj, ii)] -= y
    return ybus


def _index_nodes(buses):
    index = {}
    nodes = []
    for bus in sorted(buses, key=lambda b: b.id):
        if bus.is_slack:
            continue
        for ph in bus.phases:
            index[(bus.id, ph)] = len(nodes)
            nodes.append(Node(bus.id, ph, len(nodes)))
    n = len(nodes)
    slack = [b for b in buses if b.is_slack][0]
    for k, ph in enumerate(slack.phases):
        index[(slack.id, ph)] = n + k
    return index, nodes


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Immutable multiphase feeder with its assembled admittance matrix."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_voltage: float
    base_power: float
    load_nodes: np.ndarray
    nominal_load: np.ndarray | None = None
    nodes: tuple[Node, ...] = field(init=False)
    node_index_map: dict = field(init=False)
    ybus: np.ndarray = field(init=False)

    def __post_init__(self):
        index, nodes = _index_nodes(self.buses)
        set_ = object.__setattr__
        set_(self, "node_index_map", index)
        set_(self, "nodes", tuple(nodes))
        set_(self, "ybus", assemble_ybus(self.buses, self.lines))
        set_(self, "load_nodes", np.asarray(sorted(set(int(i) for i in self.load_nodes)), dtype=int))
        n = self.n
        y_ll = self.ybus[:n, :n]
        try:
            lu = scipy.linalg.lu_factor(y_ll, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise FeederError(f"Y_LL is singular: {exc}") from exc
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-12 * np.max(np.abs(y_ll)):
            raise FeederError("Y_LL is singular")
        set_(self, "_lu", lu)
        v0 = self.slack_voltage
        set_(self, "_v_noload", -scipy.linalg.lu_solve(lu, self.ybus[:n, n:] @ v0))

    # sizes and blocks

    @property
    def n(self):
        return len(self.nodes)

    @property
    def s(self):
        return self.ybus.shape[0] - self.n

    @property
    def slack_bus(self):
        return next(b for b in self.buses if b.is_slack)

    @property
    def slack_voltage(self):
        bus = self.slack_bus
        if bus.slack_voltage is not None:
            return np.asarray(bus.slack_voltage, dtype=complex)
        return np.exp(1j * np.deg2rad([DEFAULT_SLACK_ANGLES[p] for p in bus.phases]))

    @property
    def y_ll(self):
        return self.ybus[: self.n, : self.n]

    @property
    def y_l0(self):
        return self.ybus[: self.n, self.n :]

    @property
    def v_noload(self):
        """Node voltages with zero injections (slack voltage propagated)."""
        return self._v_noload.copy()

    @property
    def is_load(self):
        mask = np.zeros(self.n, dtype=bool)
        mask[self.load_nodes] = True
        return mask

    def solve_ll(self, rhs):
        """Solve ``Y_LL x = rhs`` with the cached LU factors."""
        return scipy.linalg.lu_solve(self._lu, rhs)

    def node_index(self, bus_id, phase):
        return node_index(self, bus_id, phase)

    def node_label(self, index):
        node = self.nodes[index]
        return f"{node.bus_id}.{node.phase}"


def node_index(model, bus_id, phase):
    """Contiguous index of the node at ``(bus_id, phase)``.

    Raises ``KeyError`` for unknown nodes and ``ValueError`` for slack phases.
    """
    if bus_id == model.slack_bus.id:
        raise ValueError(f"bus {bus_id} is the slack bus; its phases are not state nodes")
    try:
        return model.node_index_map[(bus_id, phase)]
    except KeyError:
        raise KeyError(f"no node at bus {bus_id} phase {phase!r}") from None


def node_of(model, index):
    """Inverse of :func:`node_index`: returns ``(bus_id, phase)``."""
    if not 0 <= index < model.n:
        raise KeyError(f"node index {index} out of range 0..{model.n - 1}")
    node = model.nodes[index]
    return node.bus_id, node.phase


def _matrix(value, size, where):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0 and size == 1:
        arr = arr.reshape(1, 1)
    if arr.shape != (size, size):
        raise FeederError(f"{where}: expected {size}x{size} matrix, got shape {arr.shape}")
    return arr


def feeder_from_dict(data):
    """Build a :class:`FeederModel` from a parsed feeder document."""
    if not isinstance(data, dict):
        raise FeederError("feeder document must be an object")
    try:
        vbase = float(data["base_voltage_v"])
        sbase = float(data["base_power_va"])
        raw_buses = data["buses"]
        raw_lines = data["lines"]
    except KeyError as exc:
        raise FeederError(f"missing top-level field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise FeederError(f"bad base values: {exc}") from None
    if vbase <= 0 or sbase <= 0:
        raise FeederError("base_voltage_v and base_power_va must be positive")
    zbase = vbase**2 / sbase

    buses = {}
    for k, raw in enumerate(raw_buses):
        where = f"buses[{k}]"
        try:
            bid = int(raw["id"])
        except (KeyError, TypeError, ValueError):
            raise FeederError(f"{where}: missing or invalid id") from None
        if bid in buses:
            raise FeederError(f"{where}: duplicate bus id {bid}")
        phases_in = raw.get("phases")
        phases = _normalize_phases(phases_in, where)
        slack = bool(raw.get("slack", False))
        vs = None
        if slack and raw.get("slack_voltage") is not None:
            sv = raw["slack_voltage"]
            if len(sv) != len(phases):
                raise FeederError(f"{where}: slack_voltage needs one [mag, angle] per phase")
            # listed in the phase-string order given in the file
            order = {p: i for i, p in enumerate(phases_in.lower())}
            vs = tuple(
                complex(sv[order[p]][0] * np.exp(1j * np.deg2rad(sv[order[p]][1]))) for p in phases
            )
        buses[bid] = Bus(bid, phases, slack, vs)

    slack_ids = [b.id for b in buses.values() if b.is_slack]
    if not slack_ids:
        raise FeederError("missing slack bus")
    if len(slack_ids) > 1:
        raise FeederError(f"more than one slack bus: {sorted(slack_ids)}")
    if slack_ids[0] != 0:
        raise FeederError(f"slack bus must be bus 0, got bus {slack_ids[0]}")

    lines = []
    seen = set()
    for k, raw in enumerate(raw_lines):
        where = f"lines[{k}]"
        try:
            f, t = int(raw["from"]), int(raw["to"])
        except (KeyError, TypeError, ValueError):
            raise FeederError(f"{where}: missing or invalid from/to") from None
        for b in (f, t):
            if b not in buses:
                raise FeederError(f"{where}: unknown bus {b}")
        if f == t:
            raise FeederError(f"{where}: line connects bus {f} to itself")
        key = frozenset((f, t))
        if key in seen:
            raise FeederError(f"{where}: duplicate line between buses {f} and {t}")
        seen.add(key)
        phases_in = str(raw.get("phases", "")).lower()
        phases = _normalize_phases(phases_in, where)
        for b in (f, t):
            missing = [p for p in phases if p not in buses[b].phases]
            if missing:
                raise FeederError(
                    f"{where}: phase mismatch, phase {''.join(missing)} not present on bus {b} "
                    f"(phases {buses[b].phases!r})"
                )
        size = len(phases)
        r = _matrix(raw.get("r_ohm", np.zeros((size, size))), size, f"{where}.r_ohm")
        x = _matrix(raw.get("x_ohm", np.zeros((size, size))), size, f"{where}.x_ohm")
        z = (r + 1j * x) / zbase
        perm = [phases_in.index(p) for p in phases]
        z = z[np.ix_(perm, perm)]
        if not np.allclose(z, z.T, rtol=1e-12, atol=1e-15):
            raise FeederError(f"{where}: impedance matrix is not symmetric")
        try:
            cond = np.linalg.cond(z)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > 1e12:
            raise FeederError(f"{where}: singular impedance matrix")
        lines.append(Line(f, t, phases, z))

    ids = sorted(buses)
    pos = {b: i for i, b in enumerate(ids)}
    if lines:
        rows = [pos[ln.from_bus] for ln in lines]
        cols = [pos[ln.to_bus] for ln in lines]
        adj = coo_matrix((np.ones(len(lines)), (rows, cols)), shape=(len(ids), len(ids)))
        ncomp, labels = connected_components(adj, directed=False)
    else:
        ncomp, labels = len(ids), np.arange(len(ids))
    if ncomp > 1:
        cut = [b for b in ids if labels[pos[b]] != labels[pos[0]]]
        raise FeederError(f"disconnected graph: buses {cut} are not reachable from the slack bus")

    bus_tuple = tuple(buses[b] for b in ids)
    index, nodes = _index_nodes(bus_tuple)
    n = len(nodes)
    if n == 0:
        raise FeederError("feeder has no non-slack nodes")

    raw_loads = data.get("load_nodes")
    nominal = np.zeros(2 * n)
    if raw_loads is None:
        load_idx = list(range(n))
    else:
        load_idx = []
        for k, raw in enumerate(raw_loads):
            where = f"load_nodes[{k}]"
            try:
                key = (int(raw["bus"]), str(raw["phase"]).lower())
            except (KeyError, TypeError, ValueError):
                raise FeederError(f"{where}: needs bus and phase") from None
            if key[0] == 0:
                raise FeederError(f"{where}: slack bus cannot carry a load node")
            if key not in index:
                raise FeederError(f"{where}: no node at bus {key[0]} phase {key[1]!r}")
            i = index[key]
            load_idx.append(i)
            # optional nominal load, used by the synthetic profile generator
            nominal[i] = float(raw.get("p_kw", 0.0)) * 1e3 / sbase
            nominal[n + i] = float(raw.get("q_kvar", 0.0)) * 1e3 / sbase
    return FeederModel(
        buses=bus_tuple,
        lines=tuple(lines),
        base_voltage=vbase,
        base_power=sbase,
        load_nodes=np.asarray(load_idx, dtype=int),
        nominal_load=nominal if np.any(nominal) else None,
    )


def load_feeder(text):
    """Parse a feeder document (JSON text) into a validated :class:`FeederModel`."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"parse failure at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return feeder_from_dict(data)


def read_feeder(path):
    return load_feeder(Path(path).read_text())


def template_text(name):
    """Text of an embedded feeder: ``2bus``, ``4bus`` or ``13node``."""
    if name not in TEMPLATES:
        raise KeyError(f"unknown feeder template {name!r}; choose from {TEMPLATES}")
    return resources.files("odsse").joinpath("feeders", f"{name}.json").read_text()


def template(name):
    return load_feeder(template_text(name))
