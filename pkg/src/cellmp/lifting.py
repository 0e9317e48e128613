"""Graph-to-complex lifting: ring detection, cliques, Vietoris-Rips, templates.

Rings are chordless (induced) cycles, found by canonical DFS path extension:
every cycle is discovered exactly once, rooted at its smallest vertex and
oriented toward the smaller of that vertex's two cycle neighbors.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .cells import CWComplex, build_complex, canonical_cycle
from .datagen import GeometricGraph

__all__ = [
    "LiftConfig",
    "lift_rings",
    "lift_cliques",
    "vietoris_rips",
    "template_lift",
    "apply_lift",
    "decouple",
]

_METHODS = ("chordless-cycles", "cliques", "vietoris-rips", "template")


@dataclass
class LiftConfig:
    method: str = "chordless-cycles"
    max_ring_size: int = 6
    vr_radius: float | None = None
    templates: list[list[int]] | None = None
    max_clique_dim: int = 2

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown lift method {self.method!r}, expected one of {_METHODS}")
        if self.method == "vietoris-rips":
            if self.vr_radius is None or self.vr_radius <= 0:
                raise ValueError("vietoris-rips lifting requires vr_radius > 0")
        elif self.vr_radius is not None:
            raise ValueError(f"vr_radius is only valid for vietoris-rips, not {self.method}")
        if self.method == "template":
            if not self.templates:
                raise ValueError("template lifting requires a non-empty templates list")
        elif self.templates is not None:
            raise ValueError(f"templates are only valid for the template method, not {self.method}")
        if not 3 <= self.max_ring_size <= 12:
            raise ValueError("max_ring_size must be in [3, 12]")

    def to_dict(self) -> dict:
        d = {"method": self.method, "max_ring_size": self.max_ring_size}
        if self.vr_radius is not None:
            d["vr_radius"] = self.vr_radius
        if self.templates is not None:
            d["templates"] = [list(t) for t in self.templates]
        if self.method == "cliques":
            d["max_clique_dim"] = self.max_clique_dim
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LiftConfig":
        return cls(**d)


def _adjacency(graph: GeometricGraph) -> list[set[int]]:
    adj = [set() for _ in range(graph.num_nodes)]
    for a, b in graph.edges:
        adj[a].add(b)
        adj[b].add(a)
    return adj


def lift_rings(graph: GeometricGraph, max_ring_size: int = 6) -> list[tuple[int, ...]]:
    """All chordless cycles of length 3..max_ring_size, canonical, sorted."""
    if not 3 <= max_ring_size <= 12:
        raise ValueError("max_ring_size must be in [3, 12]")
    adj = _adjacency(graph)
    found: list[tuple[int, ...]] = []

    def extend(path: list[int], on_path: set[int]):
        s, last = path[0], path[-1]
        for w in sorted(adj[last]):
            if w <= s or w in on_path:
                continue
            shared = adj[w] & on_path
            if s in adj[w]:
                # w can only close the cycle: anything longer would chord on (w, s)
                if shared == {last, s} and len(path) + 1 >= 3 and path[1] < w:
                    found.append(tuple(path) + (w,))
            elif shared == {last} and len(path) + 1 <= max_ring_size - 1:
                path.append(w)
                on_path.add(w)
                extend(path, on_path)
                on_path.remove(w)
                path.pop()

    for s in range(graph.num_nodes):
        for v in sorted(adj[s]):
            if v > s:
                extend([s, v], {s, v})
    return sorted(found)


def lift_cliques(graph: GeometricGraph, max_dim: int = 2) -> dict[int, list[tuple[int, ...]]]:
    """Cliques of size k+1 as k-simplices, for every k <= max_dim."""
    if max_dim > 3:
        raise ValueError("max_dim must be <= 3")
    adj = _adjacency(graph)
    out: dict[int, list[tuple[int, ...]]] = {0: [(i,) for i in range(graph.num_nodes)]}
    if max_dim >= 1:
        out[1] = [tuple(e) for e in graph.edges]
    if max_dim >= 2:
        triangles = []
        for a, b in graph.edges:
            for c in sorted(adj[a] & adj[b]):
                if c > b:
                    triangles.append((a, b, c))
        out[2] = sorted(triangles)
    if max_dim >= 3:
        tetra = []
        for a, b, c in out[2]:
            for d in sorted(adj[a] & adj[b] & adj[c]):
                if d > c:
                    tetra.append((a, b, c, d))
        out[3] = sorted(tetra)
    return out


def vietoris_rips(
    positions, radius: float, max_dim: int = 2
) -> tuple[GeometricGraph, dict[int, list[tuple[int, ...]]]]:
    """Radius graph (edge iff distance <= radius, inclusive) plus its cliques."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    edges = [
        (i, j)
        for i, j in itertools.combinations(range(n), 2)
        if np.linalg.norm(pos[i] - pos[j]) <= radius
    ]
    graph = GeometricGraph(positions=pos, edges=edges)
    return graph, lift_cliques(graph, max_dim)


def template_lift(graph: GeometricGraph, templates) -> list[tuple[int, ...]]:
    """Turn hand-picked vertex cycles into 2-cells, inserting missing edges.

    The graph's edge set is extended in place with any cycle edge it lacks.
    """
    cycles = [canonical_cycle(t) for t in templates]
    existing = set(graph.edges)
    for cyc in cycles:
        for i, a in enumerate(cyc):
            b = cyc[(i + 1) % len(cyc)]
            key = (min(a, b), max(a, b))
            if key not in existing:
                if not (0 <= a < graph.num_nodes and 0 <= b < graph.num_nodes):
                    raise ValueError(f"template edge ({a}, {b}) references a missing node")
                existing.add(key)
    graph.edges = sorted(existing)
    return sorted(set(cycles))


def apply_lift(graph: GeometricGraph, config: LiftConfig) -> tuple[GeometricGraph, list[tuple[int, ...]]]:
    """Run the configured lifting on a copy of `graph`.

    Returns the (possibly edge-extended) copy together with the 2-cell
    cycles. Clique and Vietoris-Rips lifting contribute their triangles as
    2-cells; Vietoris-Rips runs on the point positions and inserts any radius
    edges its triangles need.
    """
    work = graph.copy()
    if config.method == "chordless-cycles":
        cycles = lift_rings(work, config.max_ring_size)
    elif config.method == "cliques":
        cycles = [tuple(t) for t in lift_cliques(work, max_dim=2)[2]]
    elif config.method == "template":
        cycles = template_lift(work, config.templates)
    else:  # vietoris-rips
        vr_graph, simplices = vietoris_rips(work.positions, config.vr_radius, max_dim=2)
        cycles = [tuple(t) for t in simplices[2]]
        work.edges = sorted(set(work.edges) | set(vr_graph.edges))
    return work, cycles


def decouple(graph: GeometricGraph, lift: LiftConfig) -> tuple[GeometricGraph, CWComplex]:
    """Split a graph into a fully connected node graph and a lifted complex.

    The dense graph carries the same nodes/positions with every undirected
    pair as an edge; the complex keeps the original topology (plus the lifted
    2-cells) so higher-order messages stay sparse. The input is not mutated.
    """
    if graph.num_nodes < 2:
        raise ValueError("decoupling needs at least 2 nodes")
    lifted_graph, cycles = apply_lift(graph, lift)
    lifted = build_complex(lifted_graph, cycles)
    dense = graph.copy()
    n = dense.num_nodes
    dense.edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return dense, lifted
