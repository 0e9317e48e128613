"""Combinatorial CW complexes of rank <= 2 (nodes, edges, rings).

A complex stores ranked cells plus eagerly built adjacency caches for the
five relations used in message passing:

  * boundaries      B(s): cells of rank-1 on the rim of s
  * coboundaries    C(s): cells that s is a boundary of
  * lower adjacency: same-rank cells sharing a boundary (with the witness)
  * upper adjacency: same-rank cells sharing a co-boundary (with the witness)
  * point adjacency P(s): the 0-cells whose vertices make up s

Complexes are immutable after construction; reads are safe from any thread.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .datagen import GeometricGraph

__all__ = ["CellId", "Cell", "CWComplex", "build_complex", "canonical_cycle"]


class CellId(NamedTuple):
    rank: int
    index: int


@dataclass(frozen=True)
class Cell:
    id: CellId
    vertices: tuple[int, ...]
    boundary: tuple[CellId, ...]


def canonical_cycle(cycle) -> tuple[int, ...]:
    """Rotate so the smallest vertex leads; orient toward its smaller neighbor."""
    cyc = [int(v) for v in cycle]
    if len(cyc) < 3:
        raise ValueError(f"cycle needs >= 3 vertices, got {cyc}")
    if len(set(cyc)) != len(cyc):
        raise ValueError(f"cycle has repeated vertices: {cyc}")
    k = cyc.index(min(cyc))
    rotated = cyc[k:] + cyc[:k]
    if rotated[1] > rotated[-1]:
        rotated = [rotated[0]] + rotated[:0:-1]
    return tuple(rotated)


class CWComplex:
    """Ranked cells with consistent boundary incidence and adjacency caches."""

    def __init__(self, cells_by_rank: list[list[Cell]]):
        while cells_by_rank and not cells_by_rank[-1]:
            cells_by_rank = cells_by_rank[:-1]
        self._cells = tuple(tuple(group) for group in cells_by_rank)
        self._by_id: dict[CellId, Cell] = {}
        for rank, group in enumerate(self._cells):
            for idx, cell in enumerate(group):
                if cell.id != CellId(rank, idx):
                    raise ValueError(f"cell id {cell.id} inconsistent with position ({rank}, {idx})")
                self._by_id[cell.id] = cell
        self._validate()
        self._coboundary: dict[CellId, tuple[CellId, ...]] = {cid: () for cid in self._by_id}
        cob: dict[CellId, list[CellId]] = {cid: [] for cid in self._by_id}
        for cid, cell in self._by_id.items():
            for b in cell.boundary:
                cob[b].append(cid)
        for cid, lst in cob.items():
            self._coboundary[cid] = tuple(sorted(lst))
        self._lower = self._build_shared(via_boundary=True)
        self._upper = self._build_shared(via_boundary=False)
        self._points: dict[CellId, tuple[CellId, ...]] = {}
        for cid, cell in self._by_id.items():
            if cid.rank == 0:
                self._points[cid] = ()
            else:
                self._points[cid] = tuple(CellId(0, v) for v in sorted(set(cell.vertices)))

    def _validate(self):
        for cid, cell in self._by_id.items():
            for b in cell.boundary:
                if b.rank != cid.rank - 1:
                    raise ValueError(f"boundary {b} of {cid} has wrong rank")
                if b not in self._by_id:
                    raise ValueError(f"boundary {b} of {cid} does not exist")
            if cid.rank == 0:
                if cell.boundary or cell.vertices != (cid.index,):
                    raise ValueError(f"malformed 0-cell {cid}")
            elif cid.rank == 1:
                if len(cell.boundary) != 2:
                    raise ValueError(f"edge {cid} must have exactly 2 boundary nodes")
            elif cid.rank == 2:
                if len(cell.boundary) < 3:
                    raise ValueError(f"ring {cid} must have >= 3 boundary edges")
                self._check_single_cycle(cid, cell)
            bound_verts = set()
            for b in cell.boundary:
                bound_verts.update(self._by_id[b].vertices)
            if cid.rank >= 1 and bound_verts != set(cell.vertices):
                raise ValueError(f"vertices of {cid} do not match its boundary cells")

    def _check_single_cycle(self, cid: CellId, cell: Cell):
        """A ring's boundary edges must form exactly one closed cycle."""
        degree: dict[int, int] = {}
        for b in cell.boundary:
            for v in self._by_id[b].vertices:
                degree[v] = degree.get(v, 0) + 1
        if any(d != 2 for d in degree.values()) or len(degree) != len(cell.boundary):
            raise ValueError(f"boundary of {cid} is not a single closed cycle")
        adj: dict[int, list[int]] = {v: [] for v in degree}
        for b in cell.boundary:
            a, c = self._by_id[b].vertices
            adj[a].append(c)
            adj[c].append(a)
        start = next(iter(degree))
        seen = {start}
        stack = [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != len(degree):
            raise ValueError(f"boundary of {cid} is not a single closed cycle")

    def _build_shared(self, via_boundary: bool) -> dict[CellId, tuple[tuple[CellId, CellId], ...]]:
        pairs: dict[CellId, list[tuple[CellId, CellId]]] = {cid: [] for cid in self._by_id}
        if via_boundary:
            witness_of = {cid: self._by_id[cid].boundary for cid in self._by_id}
        else:
            # coboundary map is built before this is called for upper adjacency
            witness_of = self._coboundary
        for sigma in self._by_id:
            for delta in witness_of[sigma]:
                peers = (
                    self._coboundary[delta] if via_boundary else self._by_id[delta].boundary
                )
                for tau in peers:
                    if tau != sigma:
                        pairs[sigma].append((tau, delta))
        return {cid: tuple(sorted(lst)) for cid, lst in pairs.items()}

    # -- queries ----------------------------------------------------------

    def _get(self, cid: CellId) -> Cell:
        cell = self._by_id.get(CellId(*cid))
        if cell is None:
            raise KeyError(f"no such cell {tuple(cid)}")
        return cell

    def cell(self, cid: CellId) -> Cell:
        return self._get(cid)

    @property
    def max_rank(self) -> int:
        return len(self._cells) - 1

    def num_cells(self, rank: int) -> int:
        return len(self._cells[rank]) if 0 <= rank < len(self._cells) else 0

    def cells(self, rank: int) -> tuple[Cell, ...]:
        return self._cells[rank] if 0 <= rank < len(self._cells) else ()

    def all_ids(self):
        for group in self._cells:
            for cell in group:
                yield cell.id

    def boundaries(self, cid: CellId) -> list[CellId]:
        return list(self._get(cid).boundary)

    def coboundaries(self, cid: CellId) -> list[CellId]:
        self._get(cid)
        return list(self._coboundary[CellId(*cid)])

    def lower_adjacent(self, cid: CellId) -> list[tuple[CellId, CellId]]:
        """Same-rank cells sharing a boundary, one entry per (peer, witness)."""
        self._get(cid)
        return list(self._lower[CellId(*cid)])

    def upper_adjacent(self, cid: CellId) -> list[tuple[CellId, CellId]]:
        """Same-rank cells sharing a co-boundary, one entry per (peer, witness)."""
        self._get(cid)
        return list(self._upper[CellId(*cid)])

    def point_adjacency(self, cid: CellId) -> list[CellId]:
        """The 0-cells of cid's vertices; empty for 0-cells (self excluded)."""
        self._get(cid)
        return list(self._points[CellId(*cid)])

    def counts(self) -> tuple[int, ...]:
        return tuple(len(group) for group in self._cells)

    def __repr__(self):
        return f"CWComplex(counts={self.counts()})"


def build_complex(graph: GeometricGraph, two_cells=None) -> CWComplex:
    """Lift a geometric graph plus a set of vertex cycles into a CW complex.

    0-cells are the graph nodes, 1-cells the graph edges (smaller vertex
    first), 2-cells the given cycles. Every consecutive cycle pair must be
    an edge of the graph; a missing edge is an error naming that edge.
    Cycles with identical edge sets are deduplicated silently.
    """
    if two_cells is None:
        two_cells = graph.two_cells or []
    n = graph.num_nodes
    nodes = [Cell(CellId(0, i), (i,), ()) for i in range(n)]
    edge_list = sorted((min(a, b), max(a, b)) for a, b in graph.edges)
    edge_index = {e: i for i, e in enumerate(edge_list)}
    edges = [
        Cell(CellId(1, i), (a, b), (CellId(0, a), CellId(0, b)))
        for i, (a, b) in enumerate(edge_list)
    ]
    rings: list[Cell] = []
    seen_edge_sets: set[frozenset[int]] = set()
    for cycle in two_cells:
        canon = canonical_cycle(cycle)
        ring_edges = []
        for i, a in enumerate(canon):
            b = canon[(i + 1) % len(canon)]
            key = (min(a, b), max(a, b))
            if key not in edge_index:
                raise ValueError(f"cycle {list(canon)} uses missing edge ({key[0]}, {key[1]})")
            ring_edges.append(edge_index[key])
        edge_set = frozenset(ring_edges)
        if edge_set in seen_edge_sets:
            continue
        seen_edge_sets.add(edge_set)
        boundary = tuple(CellId(1, e) for e in sorted(ring_edges))
        rings.append(Cell(CellId(2, len(rings)), canon, boundary))
    return CWComplex([nodes, edges, rings])
