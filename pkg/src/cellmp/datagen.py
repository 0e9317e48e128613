"""Geometric-graph container, N-body trajectory simulator, and fixtures.

The JSON interchange format written by save_graph/load_graph is the single
on-disk representation of a geometric graph (schema version 1, see
graph_schema.json next to this file).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GeometricGraph",
    "Trajectory",
    "SchemaError",
    "simulate_nbody",
    "nbody_energy",
    "make_nbody_dataset",
    "skeleton_templates",
    "load_graph",
    "save_graph",
    "GRAPH_SCHEMA_VERSION",
]

GRAPH_SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Raised when a graph file violates the interchange schema.

    `pointer` is a JSON-pointer-style path to the offending field.
    """

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")


@dataclass
class GeometricGraph:
    """Node positions, optional velocities/features, and an undirected edge list.

    Edges are stored canonically: (small index, large index), sorted, with
    self-loops and duplicates rejected. `two_cells` mirrors the optional
    field of the JSON schema (vertex cycles earmarking rings).
    """

    positions: np.ndarray
    edges: list[tuple[int, int]] = field(default_factory=list)
    node_features: np.ndarray | None = None
    velocities: np.ndarray | None = None
    two_cells: list[list[int]] | None = None
    target: np.ndarray | None = None
    meta: dict | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise ValueError(f"positions must be (N, n), got shape {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        n = self.num_nodes
        canon = []
        seen = set()
        for e in self.edges:
            a, b = int(e[0]), int(e[1])
            if a == b:
                raise ValueError(f"self-loop edge ({a}, {b})")
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references a missing node (N={n})")
            a, b = (a, b) if a < b else (b, a)
            if (a, b) in seen:
                raise ValueError(f"duplicate edge ({a}, {b})")
            seen.add((a, b))
            canon.append((a, b))
        self.edges = sorted(canon)
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=np.float64)
            if self.velocities.shape != self.positions.shape:
                raise ValueError(
                    f"velocities shape {self.velocities.shape} does not match positions"
                )
            if not np.all(np.isfinite(self.velocities)):
                raise ValueError("velocities contain non-finite values")
        if self.node_features is not None:
            self.node_features = np.asarray(self.node_features, dtype=np.float64)
            if self.node_features.ndim != 2 or self.node_features.shape[0] != n:
                raise ValueError(
                    f"node_features must be (N, F), got shape {self.node_features.shape}"
                )
            if not np.all(np.isfinite(self.node_features)):
                raise ValueError("node_features contain non-finite values")
        if self.two_cells is not None:
            self.two_cells = [[int(v) for v in cyc] for cyc in self.two_cells]
            for cyc in self.two_cells:
                for v in cyc:
                    if not (0 <= v < n):
                        raise ValueError(f"two_cell vertex {v} references a missing node")
        if self.target is not None and not np.isscalar(self.target):
            self.target = np.asarray(self.target, dtype=np.float64)

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def copy(self) -> "GeometricGraph":
        return GeometricGraph(
            positions=self.positions.copy(),
            edges=list(self.edges),
            node_features=None if self.node_features is None else self.node_features.copy(),
            velocities=None if self.velocities is None else self.velocities.copy(),
            two_cells=None if self.two_cells is None else [list(c) for c in self.two_cells],
            target=None if self.target is None else np.copy(self.target),
            meta=None if self.meta is None else dict(self.meta),
        )


@dataclass
class Trajectory:
    """Initial graph plus the state after `steps` integration steps."""

    initial: GeometricGraph
    final_positions: np.ndarray
    final_velocities: np.ndarray
    charges: np.ndarray
    steps: int
    dt: float
    seed: int

    def __post_init__(self):
        if self.final_positions.shape != self.initial.positions.shape:
            raise ValueError("final positions shape mismatch")


# ---------------------------------------------------------------------------
# Charged-particle simulator (leapfrog, softened Coulomb-style force)
# ---------------------------------------------------------------------------

EPS_SOFT = 1e-3  # added to |r|^3 in the force denominator


def _accelerations(pos: np.ndarray, charges: np.ndarray, eps_soft: float) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]          # (N, N, n), x_i - x_j
    dist = np.linalg.norm(diff, axis=-1)              # (N, N)
    denom = dist**3 + eps_soft
    np.fill_diagonal(denom, 1.0)
    qq = charges[:, None] * charges[None, :]
    np.fill_diagonal(qq, 0.0)
    return np.sum(qq[:, :, None] * diff / denom[:, :, None], axis=1)


def _pair_potential(d: np.ndarray, eps_soft: float) -> np.ndarray:
    """Potential V(d) with V'(d) = -d / (d^3 + eps_soft).

    Closed form of -integral of s/(s^3 + a^3) with a = eps_soft^(1/3),
    shifted so V -> 0 as d -> infinity (Coulomb limit: V = 1/d).
    """
    a = eps_soft ** (1.0 / 3.0)
    g = (
        -np.log(d + a) / (3 * a)
        + np.log(d * d - a * d + a * a) / (6 * a)
        + np.arctan((2 * d - a) / (a * math.sqrt(3))) / (a * math.sqrt(3))
    )
    g_inf = (math.pi / 2) / (a * math.sqrt(3))
    return -(g - g_inf)


def nbody_energy(
    positions: np.ndarray,
    velocities: np.ndarray,
    charges: np.ndarray,
    eps_soft: float = EPS_SOFT,
) -> float:
    """Kinetic plus softened pair potential energy (unit masses)."""
    kinetic = 0.5 * float(np.sum(velocities**2))
    n = positions.shape[0]
    potential = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(positions[i] - positions[j]))
            potential += float(charges[i] * charges[j]) * float(_pair_potential(np.float64(d), eps_soft))
    return kinetic + potential


def simulate_nbody(
    n_particles: int = 5,
    steps: int = 1000,
    dt: float = 1e-3,
    seed: int = 0,
    velocity_scale: float = 0.5,
    eps_soft: float = EPS_SOFT,
) -> Trajectory:
    """Integrate charged particles with kick-drift-kick leapfrog.

    Charges are +-1 uniform, initial positions standard normal, velocities
    scaled normal. Deterministic per seed. Returns the state at step 0
    (as a fully connected GeometricGraph with node features [speed, charge])
    and the positions at step `steps`.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    rng = np.random.default_rng(seed)
    charges = rng.choice([-1.0, 1.0], size=n_particles)
    pos0 = rng.standard_normal((n_particles, 3))
    vel0 = velocity_scale * rng.standard_normal((n_particles, 3))

    pos = pos0.copy()
    vel = vel0.copy()
    acc = _accelerations(pos, charges, eps_soft)
    for _ in range(steps):
        vel = vel + 0.5 * dt * acc
        pos = pos + dt * vel
        acc = _accelerations(pos, charges, eps_soft)
        vel = vel + 0.5 * dt * acc

    speed = np.linalg.norm(vel0, axis=1)
    features = np.stack([speed, charges], axis=1)
    edges = [(i, j) for i in range(n_particles) for j in range(i + 1, n_particles)]
    initial = GeometricGraph(
        positions=pos0,
        edges=edges,
        node_features=features,
        velocities=vel0,
        target=pos.copy(),
        meta={"charges": charges.tolist(), "steps": steps, "dt": dt, "seed": seed},
    )
    return Trajectory(
        initial=initial,
        final_positions=pos,
        final_velocities=vel,
        charges=charges,
        steps=steps,
        dt=dt,
        seed=seed,
    )


def make_nbody_dataset(
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int = 0,
    n_particles: int = 5,
    steps: int = 1000,
    dt: float = 1e-3,
) -> tuple[list[Trajectory], list[Trajectory], list[Trajectory]]:
    """Three disjoint trajectory splits with per-sample seeds derived from `seed`."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("all split sizes must be >= 1")
    base = seed * 1_000_003
    splits = []
    offset = 0
    for size in (n_train, n_val, n_test):
        samples = [
            simulate_nbody(n_particles, steps, dt, seed=base + offset + i)
            for i in range(size)
        ]
        splits.append(samples)
        offset += size
    return tuple(splits)


def skeleton_templates() -> list[list[int]]:
    """Vertex cycles for the 31-node motion-capture skeleton lift."""
    return [
        [0, 3, 8],
        [6, 7, 8],
        [1, 2, 3],
        [24, 25, 26],
        [21, 22, 23],
        [7, 8, 2, 3],
        [24, 26, 17, 19],
        [25, 7, 18, 2],
        [6, 7, 8, 1, 2, 3],
    ]


# ---------------------------------------------------------------------------
# JSON interchange (canonical bytes: fixed key order, %.17g floats)
# ---------------------------------------------------------------------------

_KEY_ORDER = ["schema_version", "positions", "velocities", "node_features", "edges", "two_cells", "target", "meta"]


def _fmt_num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_json(value, out: list[str]):
    if isinstance(value, dict):
        out.append("{")
        for i, (k, v) in enumerate(value.items()):
            if i:
                out.append(", ")
            out.append(json.dumps(k))
            out.append(": ")
            _write_json(v, out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, v in enumerate(value):
            if i:
                out.append(", ")
            _write_json(v, out)
        out.append("]")
    elif isinstance(value, bool):
        out.append("true" if value else "false")
    elif value is None:
        out.append("null")
    elif isinstance(value, str):
        out.append(json.dumps(value))
    else:
        out.append(_fmt_num(value))


def canonical_json(doc: dict) -> str:
    out: list[str] = []
    _write_json(doc, out)
    return "".join(out) + "\n"


def save_graph(graph: GeometricGraph, path) -> None:
    """Write the canonical JSON representation (byte-stable round trips)."""
    doc: dict = {"schema_version": GRAPH_SCHEMA_VERSION, "positions": graph.positions.tolist()}
    if graph.velocities is not None:
        doc["velocities"] = graph.velocities.tolist()
    if graph.node_features is not None:
        doc["node_features"] = graph.node_features.tolist()
    doc["edges"] = [list(e) for e in graph.edges]
    if graph.two_cells is not None:
        doc["two_cells"] = [list(c) for c in graph.two_cells]
    if graph.target is not None:
        doc["target"] = graph.target.tolist() if isinstance(graph.target, np.ndarray) else graph.target
    if graph.meta is not None:
        doc["meta"] = graph.meta
    ordered = {k: doc[k] for k in _KEY_ORDER if k in doc}
    Path(path).write_text(canonical_json(ordered))


def _expect(doc, key, pointer, types, required=True):
    if key not in doc:
        if required:
            raise SchemaError(f"{pointer}/{key}", "missing required field")
        return None
    val = doc[key]
    if not isinstance(val, types):
        raise SchemaError(f"{pointer}/{key}", f"expected {types}, got {type(val).__name__}")
    return val


def _check_matrix(val, pointer, n_rows=None):
    if not isinstance(val, list) or not val or not all(isinstance(r, list) for r in val):
        raise SchemaError(pointer, "expected a non-empty list of rows")
    width = len(val[0])
    for i, row in enumerate(val):
        if len(row) != width:
            raise SchemaError(f"{pointer}/{i}", f"ragged row (expected width {width})")
        for j, x in enumerate(row):
            if not isinstance(x, (int, float)) or isinstance(x, bool) or not math.isfinite(x):
                raise SchemaError(f"{pointer}/{i}/{j}", "expected a finite number")
    if n_rows is not None and len(val) != n_rows:
        raise SchemaError(pointer, f"expected {n_rows} rows, got {len(val)}")
    return np.asarray(val, dtype=np.float64)


def load_graph(path) -> GeometricGraph:
    """Load and validate a graph file; schema violations raise SchemaError."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("", "top-level value must be an object")
    version = _expect(doc, "schema_version", "", int, required=False)
    if version is not None and version != GRAPH_SCHEMA_VERSION:
        raise SchemaError("/schema_version", f"unsupported version {version}")
    positions = _check_matrix(_expect(doc, "positions", "", list), "/positions")
    n = positions.shape[0]
    velocities = None
    if "velocities" in doc:
        velocities = _check_matrix(_expect(doc, "velocities", "", list), "/velocities", n_rows=n)
        if velocities.shape[1] != positions.shape[1]:
            raise SchemaError("/velocities", "dimension does not match positions")
    node_features = None
    if "node_features" in doc:
        node_features = _check_matrix(
            _expect(doc, "node_features", "", list), "/node_features", n_rows=n
        )
    raw_edges = _expect(doc, "edges", "", list, required=False) or []
    edges = []
    seen = set()
    for i, e in enumerate(raw_edges):
        if (
            not isinstance(e, list)
            or len(e) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in e)
        ):
            raise SchemaError(f"/edges/{i}", "expected a pair of integers")
        a, b = e
        if a == b:
            raise SchemaError(f"/edges/{i}", f"self-loop ({a}, {b})")
        if not (0 <= a < n and 0 <= b < n):
            raise SchemaError(f"/edges/{i}", f"node index out of range ({a}, {b})")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise SchemaError(f"/edges/{i}", f"duplicate edge {key}")
        seen.add(key)
        edges.append(key)
    two_cells = None
    if "two_cells" in doc:
        raw = _expect(doc, "two_cells", "", list)
        two_cells = []
        for i, cyc in enumerate(raw):
            if not isinstance(cyc, list) or len(cyc) < 3 or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in cyc
            ):
                raise SchemaError(f"/two_cells/{i}", "expected a list of >= 3 integers")
            for v in cyc:
                if not (0 <= v < n):
                    raise SchemaError(f"/two_cells/{i}", f"node index {v} out of range")
            two_cells.append(list(cyc))
    target = None
    if "target" in doc:
        raw = doc["target"]
        if isinstance(raw, (int, float)) and not isinstance(raw, bool):
            if not math.isfinite(raw):
                raise SchemaError("/target", "expected a finite number")
            target = np.float64(raw)
        elif isinstance(raw, list):
            target = _check_matrix(raw, "/target")
        else:
            raise SchemaError("/target", "expected a number or a matrix")
    meta = None
    if "meta" in doc:
        meta = _expect(doc, "meta", "", dict)
    try:
        return GeometricGraph(
            positions=positions,
            edges=edges,
            node_features=node_features,
            velocities=velocities,
            two_cells=two_cells,
            target=target,
            meta=meta,
        )
    except ValueError as exc:
        raise SchemaError("", str(exc)) from exc
