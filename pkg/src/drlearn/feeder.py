"""Radial feeder data model and LinDistFlow sensitivity matrices.

Power quantities (demands, generation, flows) are kept in MW / MVAr.
Impedances are per-unit on ``base_mva``; the voltage-drop equation divides
by the base so that squared voltages stay in p.u.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NODE_COLUMNS = ("id", "dP", "dQ", "gamma", "u_min", "u_max",
                "c2", "c1", "c0", "gP_min", "gP_max", "gQ_min", "gQ_max")
LINE_COLUMNS = ("up_node", "down_node", "R", "X", "S_max")
META_COLUMNS = ("base_mva", "u_root")
GEN_COLUMNS = NODE_COLUMNS[6:]


class FeederError(ValueError):
    """Raised when a feeder description is malformed or not a radial tree."""


@dataclass(frozen=True)
class GeneratorParams:
    c2: float
    c1: float
    c0: float
    gP_min: float
    gP_max: float
    gQ_min: float
    gQ_max: float

    def __post_init__(self):
        if self.c2 < 0:
            raise FeederError(f"generator c2 must be >= 0, got {self.c2}")
        if self.gP_min > self.gP_max:
            raise FeederError(f"gP_min {self.gP_min} > gP_max {self.gP_max}")
        if self.gQ_min > self.gQ_max:
            raise FeederError(f"gQ_min {self.gQ_min} > gQ_max {self.gQ_max}")

    def cost(self, g):
        return self.c2 * g**2 + self.c1 * g + self.c0


@dataclass(frozen=True)
class Node:
    id: int
    dP_forecast: float
    dQ_forecast: float
    gamma: float = 0.0
    u_min: float = 0.81
    u_max: float = 1.21
    generator: GeneratorParams | None = None

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise FeederError(f"node {self.id}: u_min {self.u_min} >= u_max {self.u_max}")
        if self.gamma < 0:
            raise FeederError(f"node {self.id}: gamma must be >= 0")
        if self.dP_forecast < 0:
            raise FeederError(f"node {self.id}: dP must be >= 0")


@dataclass(frozen=True)
class Line:
    up_node: int
    downstream_node: int
    R: float
    X: float
    S_max: float

    def __post_init__(self):
        if self.R < 0 or self.X < 0:
            raise FeederError(f"line to {self.downstream_node}: negative impedance")
        if not self.S_max > 0:
            raise FeederError(f"line to {self.downstream_node}: S_max must be > 0")


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Validated radial feeder. Node 0 is the substation (root).

    Lines are indexed by their downstream node, so line ``i`` (1..n) sits at
    row ``i - 1`` of every line-indexed array.
    """

    nodes: tuple[Node, ...]
    lines: tuple[Line, ...]
    base_mva: float = 1.0
    u_root: float = 1.0
    name: str = ""
    parent: np.ndarray = field(init=False, repr=False)
    children: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    A: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m = len(self.nodes)
        ids = [nd.id for nd in self.nodes]
        if sorted(ids) != list(range(m)):
            roots = ids.count(0)
            if roots != 1:
                raise FeederError(f"expected exactly one root node with id 0, found {roots}")
            raise FeederError(f"node ids must be 0..{m - 1} without gaps, got {sorted(ids)}")
        nodes = tuple(sorted(self.nodes, key=lambda nd: nd.id))
        object.__setattr__(self, "nodes", nodes)

        parent = np.full(m, -1, dtype=int)
        by_down: dict[int, Line] = {}
        for ln in self.lines:
            if ln.downstream_node not in range(m):
                raise FeederError(f"line {ln.up_node}->{ln.downstream_node}: unknown downstream node")
            if ln.up_node not in range(m):
                raise FeederError(f"line {ln.up_node}->{ln.downstream_node}: unknown upstream node")
            if ln.downstream_node == 0:
                raise FeederError(f"line {ln.up_node}->0: root node cannot be downstream of a line")
            if ln.downstream_node in by_down:
                prev = by_down[ln.downstream_node]
                raise FeederError(
                    f"node {ln.downstream_node} has two ancestors ({prev.up_node} and "
                    f"{ln.up_node}); topology contains a cycle")
            by_down[ln.downstream_node] = ln
            parent[ln.downstream_node] = ln.up_node
        missing = [i for i in range(1, m) if i not in by_down]
        if missing:
            raise FeederError(f"nodes {missing} are not connected by any line")
        lines = tuple(by_down[i] for i in range(1, m))
        object.__setattr__(self, "lines", lines)

        # every node must reach the root without revisiting a node
        for i in range(1, m):
            seen = {i}
            j = parent[i]
            while j != 0:
                if j in seen:
                    raise FeederError(f"cycle detected through node {j}")
                seen.add(j)
                j = parent[j]

        kids: list[list[int]] = [[] for _ in range(m)]
        for i in range(1, m):
            kids[parent[i]].append(i)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "children", tuple(tuple(k) for k in kids))
        object.__setattr__(self, "A", _build_path_matrix(parent))
        self.A.setflags(write=False)

    # sizes
    @property
    def m(self) -> int:
        return len(self.nodes)

    @property
    def n(self) -> int:
        return len(self.nodes) - 1

    # nodal arrays (length m)
    @property
    def dP(self) -> np.ndarray:
        return np.array([nd.dP_forecast for nd in self.nodes])

    @property
    def dQ(self) -> np.ndarray:
        return np.array([nd.dQ_forecast for nd in self.nodes])

    @property
    def gamma(self) -> np.ndarray:
        g = np.array([nd.gamma for nd in self.nodes])
        g[0] = 0.0
        return g

    @property
    def u_min(self) -> np.ndarray:
        return np.array([nd.u_min for nd in self.nodes])

    @property
    def u_max(self) -> np.ndarray:
        return np.array([nd.u_max for nd in self.nodes])

    # line arrays (length n, row i-1 is the line feeding node i)
    @property
    def R(self) -> np.ndarray:
        return np.array([ln.R for ln in self.lines])

    @property
    def X(self) -> np.ndarray:
        return np.array([ln.X for ln in self.lines])

    @property
    def S_max(self) -> np.ndarray:
        return np.array([ln.S_max for ln in self.lines])

    @property
    def generator_nodes(self) -> list[int]:
        """Non-root nodes that host a controllable generator."""
        return [nd.id for nd in self.nodes if nd.generator is not None and nd.id != 0]

    def ancestors(self, i: int) -> list[int]:
        out = []
        j = i
        while j != 0:
            j = int(self.parent[j])
            out.append(j)
        return out


def _build_path_matrix(parent: np.ndarray) -> np.ndarray:
    m = len(parent)
    A = np.zeros((m - 1, m))
    for j in range(1, m):
        k = j
        while k != 0:
            A[k - 1, j] = 1.0
            k = parent[k]
    return A


def path_matrix(model: FeederModel) -> np.ndarray:
    """Path-incidence matrix A (n x m): A[i-1, j] = 1 iff line i is on the root->j path."""
    return np.array(model.A)


def injection_shift(alpha, support=None, atol: float = 1e-9) -> np.ndarray:
    """C = alpha e^T - I, mapping nodal disturbances to nodal injection changes.

    ``support`` lists node indices allowed to carry a nonzero participation
    factor (root plus generator nodes). Columns of C always sum to zero.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1:
        raise ValueError("alpha must be a vector")
    if np.any(alpha < -atol):
        raise ValueError(f"participation factors must be >= 0, got {alpha}")
    if abs(alpha.sum() - 1.0) > 1e-6:
        raise ValueError(f"participation factors must sum to 1, got {alpha.sum()}")
    if support is not None:
        off = np.setdiff1d(np.arange(alpha.size), np.asarray(support, dtype=int))
        if np.any(np.abs(alpha[off]) > atol):
            raise ValueError(f"alpha is nonzero outside the generator support at nodes "
                             f"{off[np.abs(alpha[off]) > atol].tolist()}")
    m = alpha.size
    return np.outer(alpha, np.ones(m)) - np.eye(m)


def balancing_support(model: FeederModel) -> list[int]:
    return [0] + model.generator_nodes


def voltage_sensitivity_matrix(model: FeederModel, alpha) -> np.ndarray:
    """Rows T_i(alpha) for every non-root node i (n x m)."""
    C = injection_shift(alpha, balancing_support(model))
    A = model.A
    R = np.diag(model.R) / model.base_mva
    X = np.diag(model.X) / model.base_mva
    G = np.diag(model.gamma)
    inner = R @ A @ C + X @ A @ C @ G
    return -2.0 * A[:, 1:].T @ inner


def voltage_sensitivity(model: FeederModel, alpha, node: int) -> np.ndarray:
    """Row vector T_i(alpha): u_i changes by T_i @ eps under disturbance eps."""
    if node == 0:
        raise ValueError("root voltage is fixed; no sensitivity for node 0")
    if not 0 < node < model.m:
        raise ValueError(f"unknown node {node}")
    return voltage_sensitivity_matrix(model, alpha)[node - 1]


def flow_sensitivity(model: FeederModel, alpha) -> tuple[np.ndarray, np.ndarray]:
    """(A C, A C Gamma): active/reactive flow change per unit disturbance."""
    C = injection_shift(alpha, balancing_support(model))
    AC = model.A @ C
    return AC, AC @ np.diag(model.gamma)


def lindistflow(model: FeederModel, net_p, net_q):
    """Deterministic LinDistFlow solve by tree sweeps.

    ``net_p``/``net_q`` are nodal net demands (demand minus generation, MW).
    Returns (fP, fQ, u) with flows indexed by downstream node (length n) and
    squared voltages for all m nodes. Uses a backward/forward sweep rather
    than the path matrix so it can serve as an independent check.
    """
    net_p = np.asarray(net_p, dtype=float)
    net_q = np.asarray(net_q, dtype=float)
    m = model.m
    order = _bfs_order(model)
    fP = np.zeros(m)
    fQ = np.zeros(m)
    for i in reversed(order[1:]):
        fP[i] += net_p[i]
        fQ[i] += net_q[i]
        fP[model.parent[i]] += fP[i]
        fQ[model.parent[i]] += fQ[i]
    u = np.zeros(m)
    u[0] = model.u_root
    for i in order[1:]:
        ln = model.lines[i - 1]
        u[i] = u[model.parent[i]] - 2.0 * (ln.R * fP[i] + ln.X * fQ[i]) / model.base_mva
    return fP[1:], fQ[1:], u


def _bfs_order(model: FeederModel) -> list[int]:
    order = [0]
    k = 0
    while k < len(order):
        order.extend(model.children[order[k]])
        k += 1
    return order


def _float(row: dict, key: str, where: str, default: float | None = None) -> float:
    raw = (row.get(key) or "").strip()
    if raw == "":
        if default is None:
            raise FeederError(f"{where}: missing value for '{key}'")
        return default
    try:
        return float(raw)
    except ValueError:
        raise FeederError(f"{where}: cannot parse '{key}'={raw!r}") from None


def _read_table(path: Path, expected: tuple[str, ...]) -> list[dict]:
    if not path.exists():
        raise FeederError(f"missing file {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        if header != expected:
            raise FeederError(f"{path.name}: header {header} != expected {expected}")
        return list(reader)


def load_feeder(path) -> FeederModel:
    """Load a feeder directory holding ``nodes.csv``, ``lines.csv`` and ``meta.csv``."""
    path = Path(path)
    if not path.is_dir():
        raise FeederError(f"feeder path {path} is not a directory")
    meta_rows = _read_table(path / "meta.csv", META_COLUMNS)
    if len(meta_rows) != 1:
        raise FeederError("meta.csv must contain exactly one record")
    base_mva = _float(meta_rows[0], "base_mva", "meta.csv")
    u_root = _float(meta_rows[0], "u_root", "meta.csv", 1.0)
    if base_mva <= 0:
        raise FeederError("meta.csv: base_mva must be positive")

    nodes = []
    for k, row in enumerate(_read_table(path / "nodes.csv", NODE_COLUMNS), start=2):
        where = f"nodes.csv line {k}"
        try:
            nid = int(row["id"])
        except (TypeError, ValueError):
            raise FeederError(f"{where}: bad node id {row.get('id')!r}") from None
        gen_raw = [(row.get(c) or "").strip() for c in GEN_COLUMNS]
        gen = None
        if any(gen_raw):
            if not all(gen_raw):
                raise FeederError(f"{where}: generator columns must be all filled or all blank")
            gen = GeneratorParams(*(_float(row, c, where) for c in GEN_COLUMNS))
        nodes.append(Node(
            id=nid,
            dP_forecast=_float(row, "dP", where),
            dQ_forecast=_float(row, "dQ", where),
            gamma=_float(row, "gamma", where, 0.0),
            u_min=_float(row, "u_min", where),
            u_max=_float(row, "u_max", where),
            generator=gen,
        ))

    lines = []
    for k, row in enumerate(_read_table(path / "lines.csv", LINE_COLUMNS), start=2):
        where = f"lines.csv line {k}"
        try:
            up, down = int(row["up_node"]), int(row["down_node"])
        except (TypeError, ValueError):
            raise FeederError(f"{where}: bad node reference") from None
        lines.append(Line(up, down, _float(row, "R", where), _float(row, "X", where),
                          _float(row, "S_max", where, math.inf)))
    return FeederModel(tuple(nodes), tuple(lines), base_mva=base_mva, u_root=u_root,
                       name=path.name)


def _num(v) -> str:
    return repr(float(v))


def write_feeder(model: FeederModel, path) -> None:
    """Write ``model`` in the directory layout read by :func:`load_feeder`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with (path / "meta.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_COLUMNS)
        w.writerow([_num(model.base_mva), _num(model.u_root)])
    with (path / "nodes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NODE_COLUMNS)
        for nd in model.nodes:
            g = nd.generator
            gen = ["" for _ in GEN_COLUMNS] if g is None else [
                _num(g.c2), _num(g.c1), _num(g.c0), _num(g.gP_min), _num(g.gP_max),
                _num(g.gQ_min), _num(g.gQ_max)]
            w.writerow([nd.id, _num(nd.dP_forecast), _num(nd.dQ_forecast), _num(nd.gamma),
                        _num(nd.u_min), _num(nd.u_max), *gen])
    with (path / "lines.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LINE_COLUMNS)
        for ln in model.lines:
            w.writerow([ln.up_node, ln.downstream_node, _num(ln.R), _num(ln.X), _num(ln.S_max)])
