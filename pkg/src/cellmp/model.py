"""Cellular message passing network with E(n)-invariant conditioning.

A model is configured by a list of message types (sender rank, receiver
rank, adjacency kind). For each type and layer, messages are
mlp2([h_receiver + h_sender (+ h_witness) + invariants]) gated by a learned
sigmoid; cell updates concatenate the gated sums per type. Node positions
and velocities can be updated each layer from the node-node messages, in
which case the geometric invariants are recomputed per layer on the
autodiff tape so gradients flow through them.

The decoupled variant runs a dense node-node pass over the fully connected
graph plus a ring-to-node pass over point adjacency, keeping the message
count at |V|(|V|-1) + sum of ring sizes per layer.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tape, Var
from .cells import CWComplex, build_complex
from .datagen import GeometricGraph
from .invariants import (
    InvariantConfig,
    hull_volume_area,
    quickhull_2d,
    quickhull_3d,
)
from .optim import OptimizerState, adam_step, cosine_lr

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "CellNetwork",
    "Batch",
    "Sample",
    "TrainingDiverged",
    "default_message_pairs",
]


class TrainingDiverged(RuntimeError):
    pass


_KIND_RANKS = {
    "boundary": lambda sr, rr: sr == rr - 1,
    "coboundary": lambda sr, rr: sr == rr + 1,
    "upper": lambda sr, rr: sr == rr,
    "lower": lambda sr, rr: sr == rr,
    "point": lambda sr, rr: {sr, rr} == {0, 2},
    "dense": lambda sr, rr: sr == 0 and rr == 0,
}


def default_message_pairs(decoupled: bool) -> list[tuple[int, int, str]]:
    if decoupled:
        return [(0, 0, "dense"), (2, 0, "point")]
    return [
        (0, 0, "upper"),
        (0, 1, "boundary"),
        (1, 0, "coboundary"),
        (1, 1, "upper"),
        (1, 2, "boundary"),
        (2, 1, "coboundary"),
    ]


@dataclass
class ModelConfig:
    num_layers: int = 4
    hidden_width: int = 32
    message_pairs: list[tuple[int, int, str]] | None = None
    invariants: InvariantConfig = field(default_factory=InvariantConfig)
    position_update: bool = False
    velocity_input: bool = False
    decoupled: bool = False
    decoupled_split: float = 0.75  # fraction of parameters in the node branch
    ring_width: int | None = None  # decoupled ring-branch width; auto when None
    node_to_ring: bool = False  # decoupled: also send node->ring messages
    dropout: float = 0.0
    readout: str = "scalar"  # "scalar" | "positions"
    edge_gates: bool = True
    strip_higher_invariants: bool = False  # ablation: invariants only on node-node
    debug_leak_coordinates: bool = False  # negative control for the harness

    def __post_init__(self):
        if self.readout not in ("scalar", "positions"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.num_layers < 0 or self.hidden_width < 1:
            raise ValueError("num_layers must be >= 0 and hidden_width >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        pairs = self.pairs()
        for sr, rr, kind in pairs:
            if kind not in _KIND_RANKS:
                raise ValueError(f"unknown adjacency kind {kind!r}")
            if not _KIND_RANKS[kind](sr, rr):
                raise ValueError(f"kind {kind!r} cannot connect ranks {sr} -> {rr}")
        if self.decoupled:
            if (0, 0, "dense") not in pairs or not any(
                kind == "point" and rr == 0 for _, rr, kind in pairs
            ):
                raise ValueError(
                    "decoupled mode needs the dense node-node pass and ring->node point messages"
                )
        if self.position_update and not any(sr == 0 and rr == 0 for sr, rr, _ in pairs):
            raise ValueError("position updates need a node-node message type")
        if self.readout == "positions" and not self.position_update:
            raise ValueError("position readout needs position updates enabled")

    def pairs(self) -> list[tuple[int, int, str]]:
        if self.message_pairs is not None:
            return [tuple(p) for p in self.message_pairs]
        pairs = default_message_pairs(self.decoupled)
        if self.decoupled and self.node_to_ring:
            pairs.append((0, 2, "point"))
        return pairs

    def to_dict(self) -> dict:
        d = {
            "num_layers": self.num_layers,
            "hidden_width": self.hidden_width,
            "message_pairs": [list(p) for p in self.pairs()],
            "invariants": self.invariants.to_dict(),
            "position_update": self.position_update,
            "velocity_input": self.velocity_input,
            "decoupled": self.decoupled,
            "decoupled_split": self.decoupled_split,
            "ring_width": self.ring_width,
            "node_to_ring": self.node_to_ring,
            "dropout": self.dropout,
            "readout": self.readout,
            "edge_gates": self.edge_gates,
            "strip_higher_invariants": self.strip_higher_invariants,
            "debug_leak_coordinates": self.debug_leak_coordinates,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "invariants" in d and isinstance(d["invariants"], dict):
            d["invariants"] = InvariantConfig.from_dict(d["invariants"])
        if d.get("message_pairs") is not None:
            d["message_pairs"] = [tuple(p) for p in d["message_pairs"]]
        return cls(**d)


# ---------------------------------------------------------------------------
# Samples and batches
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One graph prepared for the model: complex, geometry, optional targets."""

    graph: GeometricGraph
    complex: CWComplex
    dense_edges: list[tuple[int, int]] | None = None  # decoupled node graph


@dataclass(eq=False)
class Batch:
    complex: CWComplex
    positions: np.ndarray
    node_features: np.ndarray
    velocities: np.ndarray | None
    graph_of_rank: dict[int, np.ndarray]
    num_graphs: int
    dense_pairs: np.ndarray | None  # (D, 2) directed pairs for the dense pass
    target: np.ndarray | None

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Batch":
        positions, features, velocities, edges, cycles = [], [], [], [], []
        dense_pairs = []
        targets = []
        offset = 0
        has_vel = all(s.graph.velocities is not None for s in samples)
        graph_nodes = []
        for gi, s in enumerate(samples):
            g = s.graph
            positions.append(g.positions)
            feats = g.node_features
            if feats is None:
                feats = np.ones((g.num_nodes, 1))
            features.append(feats)
            if has_vel:
                velocities.append(g.velocities)
            for a, b in [e.vertices for e in s.complex.cells(1)]:
                edges.append((a + offset, b + offset))
            for cell in s.complex.cells(2):
                cycles.append([v + offset for v in cell.vertices])
            if s.dense_edges is not None:
                for a, b in s.dense_edges:
                    dense_pairs.append((a + offset, b + offset))
                    dense_pairs.append((b + offset, a + offset))
            if g.target is not None:
                targets.append(np.asarray(g.target, dtype=np.float64))
            graph_nodes.append(np.full(g.num_nodes, gi))
            offset += g.num_nodes
        merged = GeometricGraph(positions=np.concatenate(positions), edges=edges)
        cx = build_complex(merged, cycles)
        node_graph = np.concatenate(graph_nodes)
        graph_of_rank = {0: node_graph}
        for rank in (1, 2):
            ids = [node_graph[cell.vertices[0]] for cell in cx.cells(rank)]
            graph_of_rank[rank] = np.asarray(ids, dtype=np.intp)
        target = None
        if len(targets) == len(samples) and targets:
            if targets[0].ndim == 0:
                target = np.asarray(targets)
            else:
                target = np.concatenate(targets)
        use_dense = any(s.dense_edges is not None for s in samples)
        return cls(
            complex=cx,
            positions=merged.positions,
            node_features=np.concatenate(features),
            velocities=np.concatenate(velocities) if has_vel and velocities else None,
            graph_of_rank=graph_of_rank,
            num_graphs=len(samples),
            dense_pairs=np.asarray(sorted(dense_pairs), dtype=np.intp) if use_dense else None,
            target=target,
        )


# ---------------------------------------------------------------------------
# Compiled topology (index arrays per message type)
# ---------------------------------------------------------------------------


@dataclass
class _TypePlan:
    sr: int
    rr: int
    kind: str
    send_idx: np.ndarray
    recv_idx: np.ndarray
    wit_idx: np.ndarray | None
    wit_rank: int | None
    schema: tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.send_idx)


@dataclass
class _Plan:
    types: list[_TypePlan]
    num_cells: dict[int, int]
    # geometry index arrays
    edges_ab: np.ndarray  # (E, 2) endpoint node indices
    cell_verts: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]  # flat, owner, count
    ring_pairs: np.ndarray  # (P, 3): ring, va, vb
    ring_edges: np.ndarray  # (Q, 2): ring, edge index
    ring_vert_lists: list[np.ndarray]
    nn_type: int | None  # index into types of the node-node pass
    nn_recv_count: np.ndarray | None  # (N, 1) messages received per node


def _build_plan(config: ModelConfig, batch: Batch, inv_cfg: InvariantConfig) -> _Plan:
    cx = batch.complex
    num_cells = {r: cx.num_cells(r) for r in range(3)}
    types: list[_TypePlan] = []
    nn_type = None
    for sr, rr, kind in config.pairs():
        send, recv, wit = [], [], []
        wit_rank = None
        if kind == "dense":
            # decoupled batches carry the fully connected pair list; otherwise
            # direct node-node messages run over the graph edges, both ways
            if batch.dense_pairs is not None:
                pairs = batch.dense_pairs
            else:
                und = [e.vertices for e in cx.cells(1)]
                pairs = sorted([(a, b) for a, b in und] + [(b, a) for a, b in und])
            for a, b in pairs:
                send.append(a)
                recv.append(b)
        elif kind == "boundary":
            for cell in cx.cells(rr):
                for tau in cx.boundaries(cell.id):
                    send.append(tau.index)
                    recv.append(cell.id.index)
        elif kind == "coboundary":
            for cell in cx.cells(rr):
                for tau in cx.coboundaries(cell.id):
                    send.append(tau.index)
                    recv.append(cell.id.index)
        elif kind in ("upper", "lower"):
            wit_rank = rr + 1 if kind == "upper" else rr - 1
            rel = cx.upper_adjacent if kind == "upper" else cx.lower_adjacent
            for cell in cx.cells(rr):
                for tau, delta in rel(cell.id):
                    send.append(tau.index)
                    recv.append(cell.id.index)
                    wit.append(delta.index)
        elif kind == "point":
            if sr == 2:  # ring -> node
                for ring in cx.cells(2):
                    for node in cx.point_adjacency(ring.id):
                        send.append(ring.id.index)
                        recv.append(node.index)
            else:  # node -> ring
                for ring in cx.cells(2):
                    for node in cx.point_adjacency(ring.id):
                        send.append(node.index)
                        recv.append(ring.id.index)
        schema = () if _stripped(config, sr, rr) else inv_cfg.schema(sr, rr, kind)
        tp = _TypePlan(
            sr=sr,
            rr=rr,
            kind=kind,
            send_idx=np.asarray(send, dtype=np.intp),
            recv_idx=np.asarray(recv, dtype=np.intp),
            wit_idx=np.asarray(wit, dtype=np.intp) if wit_rank is not None else None,
            wit_rank=wit_rank,
            schema=schema,
        )
        if sr == 0 and rr == 0 and nn_type is None:
            nn_type = len(types)
        types.append(tp)

    edges_ab = np.asarray(
        [cx.cell(c.id).vertices for c in cx.cells(1)], dtype=np.intp
    ).reshape(num_cells[1], 2)
    cell_verts = {}
    for r in range(3):
        flat, owner = [], []
        counts = []
        for cell in cx.cells(r):
            vs = sorted(set(cell.vertices))
            flat.extend(vs)
            owner.extend([cell.id.index] * len(vs))
            counts.append(len(vs))
        cell_verts[r] = (
            np.asarray(flat, dtype=np.intp),
            np.asarray(owner, dtype=np.intp),
            np.asarray(counts, dtype=np.float64),
        )
    ring_pairs, ring_edges = [], []
    ring_vert_lists = []
    for ring in cx.cells(2):
        vs = sorted(set(ring.vertices))
        ring_vert_lists.append(np.asarray(vs, dtype=np.intp))
        for i in range(len(vs)):
            for j in range(i + 1, len(vs)):
                ring_pairs.append((ring.id.index, vs[i], vs[j]))
        for eid in cx.boundaries(ring.id):
            ring_edges.append((ring.id.index, eid.index))
    nn_count = None
    if nn_type is not None:
        cnt = np.bincount(types[nn_type].recv_idx, minlength=batch.num_nodes).astype(np.float64)
        nn_count = cnt[:, None]
    return _Plan(
        types=types,
        num_cells=num_cells,
        edges_ab=edges_ab,
        cell_verts=cell_verts,
        ring_pairs=np.asarray(ring_pairs, dtype=np.intp).reshape(-1, 3),
        ring_edges=np.asarray(ring_edges, dtype=np.intp).reshape(-1, 2),
        ring_vert_lists=ring_vert_lists,
        nn_type=nn_type,
        nn_recv_count=nn_count,
    )


def _stripped(config: ModelConfig, sr: int, rr: int) -> bool:
    return config.strip_higher_invariants and not (sr == 0 and rr == 0)


def _ranks_used(config: ModelConfig) -> list[int]:
    """Ranks carrying hidden states: message endpoints plus upper/lower witnesses."""
    ranks = {0}
    for sr, rr, kind in config.pairs():
        ranks.update((sr, rr))
        if kind == "upper":
            ranks.add(rr + 1)
        elif kind == "lower":
            ranks.add(rr - 1)
    return sorted(ranks)


# ---------------------------------------------------------------------------
# Differentiable geometry (recomputed per layer when positions move)
# ---------------------------------------------------------------------------


class _GeomState:
    """Lazy per-layer geometric quantities as tape variables."""

    def __init__(self, tape: Tape, x: Var, plan: _Plan):
        self.tape = tape
        self.x = x
        self.plan = plan
        self._cache: dict[str, Var] = {}

    def _memo(self, key, builder) -> Var:
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    def edge_vectors(self) -> Var:
        def build():
            t, p = self.tape, self.plan
            a = ad.gather_rows(t, self.x, p.edges_ab[:, 0])
            b = ad.gather_rows(t, self.x, p.edges_ab[:, 1])
            return ad.sub(t, b, a)

        return self._memo("edge_vectors", build)

    def edge_lengths(self) -> Var:
        return self._memo("edge_lengths", lambda: ad.row_norm(self.tape, self.edge_vectors()))

    def centroids(self, rank: int) -> Var:
        def build():
            t, p = self.tape, self.plan
            flat, owner, counts = p.cell_verts[rank]
            gathered = ad.gather_rows(t, self.x, flat)
            summed = ad.segment_sum(t, gathered, owner, p.num_cells[rank])
            inv = np.zeros((p.num_cells[rank], 1))
            inv[counts > 0, 0] = 1.0 / counts[counts > 0]
            return ad.rowscale(t, summed, t.const(inv))

        return self._memo(f"centroid{rank}", build)

    def ring_radius(self) -> Var:
        def build():
            t, p = self.tape, self.plan
            if len(p.ring_pairs) == 0:
                return t.const(np.zeros((p.num_cells[2], 1)))
            a = ad.gather_rows(t, self.x, p.ring_pairs[:, 1])
            b = ad.gather_rows(t, self.x, p.ring_pairs[:, 2])
            dist = ad.row_norm(t, ad.sub(t, b, a))
            return ad.scale(t, ad.segment_max(t, dist, p.ring_pairs[:, 0], p.num_cells[2]), 0.5)

        return self._memo("ring_radius", build)

    def ring_perimeter(self) -> Var:
        def build():
            t, p = self.tape, self.plan
            if len(p.ring_edges) == 0:
                return t.const(np.zeros((p.num_cells[2], 1)))
            lengths = ad.gather_rows(t, self.edge_lengths(), p.ring_edges[:, 1])
            return ad.segment_sum(t, lengths, p.ring_edges[:, 0], p.num_cells[2])

        return self._memo("ring_perimeter", build)

    def hulls(self) -> tuple[Var, Var]:
        if "hull_volume" not in self._cache:
            vol, area = self._build_hulls()
            self._cache["hull_volume"] = vol
            self._cache["hull_area"] = area
        return self._cache["hull_volume"], self._cache["hull_area"]

    def _build_hulls(self) -> tuple[Var, Var]:
        t, p = self.tape, self.plan
        num_rings = p.num_cells[2]
        dim = self.x.value.shape[1]
        const_vol = np.zeros((num_rings, 1))
        const_area = np.zeros((num_rings, 1))
        pos = self.x.value
        fan_ring, fan_a, fan_b, fan_c = [], [], [], []  # 3-d tetra fans
        poly_ring, poly_a, poly_b = [], [], []  # 2-d triangle fans / hull edges
        hull_flat, hull_owner, hull_counts = [], [], np.zeros(num_rings)
        for ring_idx, verts in enumerate(p.ring_vert_lists):
            pts = pos[verts]
            if dim == 3:
                facets = quickhull_3d(pts)
                if facets is None:  # degenerate: fixed lower-dimensional measure
                    v, a = hull_volume_area(pts)
                    const_vol[ring_idx, 0] = v
                    const_area[ring_idx, 0] = a
                    continue
                hull_ids = sorted({v for tri in facets for v in tri})
                hull_flat.extend(verts[v] for v in hull_ids)
                hull_owner.extend([ring_idx] * len(hull_ids))
                hull_counts[ring_idx] = len(hull_ids)
                for ia, ib, ic in facets:
                    fan_ring.append(ring_idx)
                    fan_a.append(verts[ia])
                    fan_b.append(verts[ib])
                    fan_c.append(verts[ic])
            else:
                poly = quickhull_2d(pts)
                if len(poly) < 3:
                    v, a = hull_volume_area(pts)
                    const_vol[ring_idx, 0] = v
                    const_area[ring_idx, 0] = a
                    continue
                hull_flat.extend(verts[v] for v in poly)
                hull_owner.extend([ring_idx] * len(poly))
                hull_counts[ring_idx] = len(poly)
                for i in range(len(poly)):
                    poly_ring.append(ring_idx)
                    poly_a.append(verts[poly[i]])
                    poly_b.append(verts[poly[(i + 1) % len(poly)]])
        vol = t.const(const_vol)
        area = t.const(const_area)
        if not hull_flat:
            return vol, area
        hull_flat = np.asarray(hull_flat, dtype=np.intp)
        hull_owner = np.asarray(hull_owner, dtype=np.intp)
        gathered = ad.gather_rows(t, self.x, hull_flat)
        inv = np.zeros((num_rings, 1))
        inv[hull_counts > 0, 0] = 1.0 / hull_counts[hull_counts > 0]
        ref = ad.rowscale(t, ad.segment_sum(t, gathered, hull_owner, num_rings), t.const(inv))
        if dim == 3 and fan_ring:
            ring_ids = np.asarray(fan_ring, dtype=np.intp)
            pa = ad.gather_rows(t, self.x, np.asarray(fan_a, dtype=np.intp))
            pb = ad.gather_rows(t, self.x, np.asarray(fan_b, dtype=np.intp))
            pc = ad.gather_rows(t, self.x, np.asarray(fan_c, dtype=np.intp))
            refs = ad.gather_rows(t, ref, ring_ids)
            ea, eb, ec = ad.sub(t, pa, refs), ad.sub(t, pb, refs), ad.sub(t, pc, refs)
            tet = ad.scale(t, ad.abs_el(t, ad.det3_rows(t, ea, eb, ec)), 1.0 / 6.0)
            vol = ad.add(t, vol, ad.segment_sum(t, tet, ring_ids, num_rings))
            u, v = ad.sub(t, pb, pa), ad.sub(t, pc, pa)
            tri = ad.scale(t, ad.row_norm(t, ad.cross3_rows(t, u, v)), 0.5)
            area = ad.add(t, area, ad.segment_sum(t, tri, ring_ids, num_rings))
        elif dim == 2 and poly_ring:
            ring_ids = np.asarray(poly_ring, dtype=np.intp)
            pa = ad.gather_rows(t, self.x, np.asarray(poly_a, dtype=np.intp))
            pb = ad.gather_rows(t, self.x, np.asarray(poly_b, dtype=np.intp))
            refs = ad.gather_rows(t, ref, ring_ids)
            tri = ad.scale(
                t, ad.abs_el(t, ad.det2_rows(t, ad.sub(t, pa, refs), ad.sub(t, pb, refs))), 0.5
            )
            vol = ad.add(t, vol, ad.segment_sum(t, tri, ring_ids, num_rings))
            seg = ad.row_norm(t, ad.sub(t, pb, pa))
            area = ad.add(t, area, ad.segment_sum(t, seg, ring_ids, num_rings))
        return vol, area


def _invariant_matrix(tape: Tape, geom: _GeomState, tp: _TypePlan) -> Var | None:
    """Columns per schema name, matching invariants.compute_invariants."""
    if not tp.schema:
        return None
    t = tape
    cols: list[Var] = []
    counts: dict[str, int] = {}
    for name in tp.schema:
        occ = counts.get(name, 0)
        counts[name] = occ + 1
        if name == "node-distance":
            xs = ad.gather_rows(t, geom.x, tp.send_idx)
            xr = ad.gather_rows(t, geom.x, tp.recv_idx)
            cols.append(ad.row_norm(t, ad.sub(t, xs, xr)))
        elif name == "edge-length":
            sides = [(tp.sr, tp.send_idx), (tp.rr, tp.recv_idx)]
            edges = [(r, idx) for r, idx in sides if r == 1]
            _, idx = edges[min(occ, len(edges) - 1)]
            cols.append(ad.gather_rows(t, geom.edge_lengths(), idx))
        elif name == "midpoint-distance":
            ms = ad.gather_rows(t, geom.centroids(tp.sr), tp.send_idx)
            mr = ad.gather_rows(t, geom.centroids(tp.rr), tp.recv_idx)
            cols.append(ad.row_norm(t, ad.sub(t, ms, mr)))
        elif name in ("ring-radius", "ring-perimeter", "hull-volume", "hull-area"):
            ring_idx = tp.send_idx if tp.sr == 2 else tp.recv_idx
            if name == "ring-radius":
                src = geom.ring_radius()
            elif name == "ring-perimeter":
                src = geom.ring_perimeter()
            else:
                vol, ar = geom.hulls()
                src = vol if name == "hull-volume" else ar
            cols.append(ad.gather_rows(t, src, ring_idx))
        elif name == "node-to-ring-midpoint":
            node_idx = tp.send_idx if tp.sr == 0 else tp.recv_idx
            ring_idx = tp.send_idx if tp.sr == 2 else tp.recv_idx
            xn = ad.gather_rows(t, geom.x, node_idx)
            mc = ad.gather_rows(t, geom.centroids(2), ring_idx)
            cols.append(ad.row_norm(t, ad.sub(t, xn, mc)))
        elif name == "vertex-count":
            rank = max(tp.sr, tp.rr)
            idx = tp.send_idx if tp.sr == rank else tp.recv_idx
            _, _, vc = geom.plan.cell_verts[rank]
            counts_col = vc[idx][:, None] if rank > 0 else np.ones((tp.count, 1))
            cols.append(t.const(counts_col))
        elif name == "edge-angle":
            us = ad.gather_rows(t, geom.edge_vectors(), tp.send_idx)
            ur = ad.gather_rows(t, geom.edge_vectors(), tp.recv_idx)
            dot = ad.abs_el(t, ad.rowsum(t, ad.mul(t, us, ur)))
            ls = ad.gather_rows(t, geom.edge_lengths(), tp.send_idx)
            lr = ad.gather_rows(t, geom.edge_lengths(), tp.recv_idx)
            cols.append(ad.divide(t, dot, ad.mul(t, ls, lr)))
        else:
            raise ValueError(f"unknown invariant {name!r}")
    return cols[0] if len(cols) == 1 else ad.hconcat(t, cols)


# ---------------------------------------------------------------------------
# The network
# ---------------------------------------------------------------------------


@dataclass
class ForwardOut:
    tape: Tape
    prediction: Var  # (G,) scalars or (N, dim) positions
    positions: Var | None
    velocities: Var | None
    messages_per_layer: int


class CellNetwork:
    """Message passing network over a (possibly decoupled) cellular complex."""

    def __init__(self, config: ModelConfig, feature_dim: int, ambient_dim: int):
        if feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        self.config = config
        self.feature_dim = feature_dim
        self.ambient_dim = ambient_dim
        self.widths = self._resolve_widths()
        self.shapes = self._parameter_shapes()
        # weak keys: a dead batch can never alias a new one's cache slot
        self._plan_cache: "weakref.WeakKeyDictionary[Batch, _Plan]" = weakref.WeakKeyDictionary()

    # -- widths and parameters ---------------------------------------------

    def _resolve_widths(self) -> dict[int, int]:
        cfg = self.config
        widths = {r: cfg.hidden_width for r in range(3)}
        if cfg.decoupled:
            if cfg.ring_width is not None:
                widths[2] = cfg.ring_width
            else:
                widths[2] = self._auto_ring_width()
        return widths

    def _auto_ring_width(self) -> int:
        """Ring-branch width whose parameter share best matches the split."""
        cfg = self.config
        target = 1.0 - cfg.decoupled_split
        best_w, best_err = 1, float("inf")
        for w in range(1, max(2, 4 * cfg.hidden_width) + 1):
            widths = {0: cfg.hidden_width, 1: cfg.hidden_width, 2: w}
            shapes = self._parameter_shapes(widths)
            ring = sum(
                int(np.prod(shape)) for key, shape in shapes.items() if self._is_ring_key(key)
            )
            total = sum(int(np.prod(shape)) for shape in shapes.values())
            err = abs(ring / total - target)
            if err < best_err:
                best_w, best_err = w, err
        return best_w

    def _is_ring_key(self, key: str) -> bool:
        return "rank2" in key or "/2-" in key or "-2/" in key

    def parameter_split(self) -> tuple[int, int]:
        """(node-branch, ring-branch) parameter counts, reported at build."""
        ring = sum(
            int(np.prod(shape)) for key, shape in self.shapes.items() if self._is_ring_key(key)
        )
        total = sum(int(np.prod(shape)) for shape in self.shapes.values())
        return total - ring, ring

    def _msg_in_width(self, sr: int, rr: int, kind: str, widths=None) -> int:
        cfg = self.config
        widths = widths or self.widths
        width = widths[rr] + widths[sr]
        if kind in ("upper", "lower"):
            width += widths[rr + 1 if kind == "upper" else rr - 1]
        if not _stripped(cfg, sr, rr):
            width += len(cfg.invariants.schema(sr, rr, kind))
        if cfg.debug_leak_coordinates:
            width += self.ambient_dim
        return width

    def message_input_widths(self) -> dict[tuple[int, int, str], int]:
        return {
            (sr, rr, kind): self._msg_in_width(sr, rr, kind)
            for sr, rr, kind in self.config.pairs()
        }

    def _parameter_shapes(self, widths=None) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        widths = widths or getattr(self, "widths", None) or {r: cfg.hidden_width for r in range(3)}
        shapes: dict[str, tuple[int, ...]] = {}

        def add_dense(prefix, n_in, n_out, bias=True):
            shapes[f"{prefix}/W"] = (n_out, n_in)
            if bias:
                shapes[f"{prefix}/b"] = (n_out,)

        ranks_used = _ranks_used(cfg)
        for r in ranks_used:
            add_dense(f"embed/rank{r}", self.feature_dim, widths[r])
        for layer in range(cfg.num_layers):
            for sr, rr, kind in cfg.pairs():
                prefix = f"layer{layer}/msg/{kind}/{sr}-{rr}"
                n_in = self._msg_in_width(sr, rr, kind, widths)
                add_dense(f"{prefix}/lin1", n_in, widths[rr])
                add_dense(f"{prefix}/lin2", widths[rr], widths[rr])
                if cfg.edge_gates:
                    add_dense(f"layer{layer}/gate/{kind}/{sr}-{rr}", widths[rr], 1)
            recv_slots: dict[int, int] = {}
            for sr, rr, kind in cfg.pairs():
                recv_slots[rr] = recv_slots.get(rr, 0) + 1
            for rr, slots in sorted(recv_slots.items()):
                n_in = widths[rr] * (1 + slots)
                add_dense(f"layer{layer}/update/rank{rr}/lin1", n_in, widths[rr])
                add_dense(f"layer{layer}/update/rank{rr}/lin2", widths[rr], widths[rr])
            if cfg.position_update:
                add_dense(f"layer{layer}/phiv/lin1", widths[0], widths[0])
                add_dense(f"layer{layer}/phiv/lin2", widths[0], 1)
                add_dense(f"layer{layer}/phix", widths[0], 1, bias=False)
        if cfg.readout == "scalar":
            pool_ranks = [0] if cfg.decoupled else [0, 1, 2]
            for r in pool_ranks:
                add_dense(f"pre_readout/rank{r}/lin1", widths[r], widths[r])
                add_dense(f"pre_readout/rank{r}/lin2", widths[r], widths[r])
            total = sum(widths[r] for r in pool_ranks)
            add_dense("readout/lin1", total, cfg.hidden_width)
            add_dense("readout/lin2", cfg.hidden_width, 1)
        return shapes

    def init_params(self, seed: int = 0) -> Params:
        params = Params()
        for key, shape in self.shapes.items():
            if key.endswith("/W"):
                params.dense_init(key[:-2], shape[1], shape[0], seed, bias=False)
            elif key.endswith("/b"):
                params.add(key, np.zeros(shape))
            else:
                raise AssertionError(key)
        return params

    # -- forward -------------------------------------------------------------

    def plan_for(self, batch: Batch) -> _Plan:
        plan = self._plan_cache.get(batch)
        if plan is None:
            plan = _build_plan(self.config, batch, self.config.invariants)
            self._plan_cache[batch] = plan
        return plan

    def _initial_features(self, batch: Batch, plan: _Plan) -> dict[int, np.ndarray]:
        feats = {0: batch.node_features}
        for r in (1, 2):
            flat, owner, counts = plan.cell_verts[r]
            agg = np.zeros((plan.num_cells[r], batch.node_features.shape[1]))
            np.add.at(agg, owner, batch.node_features[flat])
            nz = counts > 0
            agg[nz] /= counts[nz][:, None]
            feats[r] = agg
        return feats

    def forward(
        self,
        params: Params,
        batch: Batch,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ForwardOut:
        cfg = self.config
        if cfg.velocity_input and batch.velocities is None:
            raise ValueError("model expects velocities but the batch has none")
        if training and cfg.dropout > 0.0 and rng is None:
            raise ValueError("training with dropout needs an rng")
        plan = self.plan_for(batch)
        tape = Tape()
        x = tape.const(batch.positions)
        v_init = tape.const(batch.velocities) if batch.velocities is not None else None

        feats = self._initial_features(batch, plan)
        ranks_used = _ranks_used(cfg)
        state: dict[int, Var] = {}
        for r in ranks_used:
            state[r] = ad.dense(tape, params, f"embed/rank{r}", tape.const(feats[r]))

        geom = _GeomState(tape, x, plan)
        velocities = None
        messages_per_layer = sum(tp.count for tp in plan.types)
        for layer in range(cfg.num_layers):
            if cfg.position_update and layer > 0:
                geom = _GeomState(tape, x, plan)  # positions moved: recompute invariants
            raw_nn = None
            agg: dict[int, list[Var]] = {rr: [] for _, rr, _ in cfg.pairs()}
            for ti, tp in enumerate(plan.types):
                prefix = f"layer{layer}/msg/{tp.kind}/{tp.sr}-{tp.rr}"
                hr = ad.gather_rows(tape, state[tp.rr], tp.recv_idx)
                hs = ad.gather_rows(tape, state[tp.sr], tp.send_idx)
                parts = [hr, hs]
                if tp.wit_rank is not None:
                    parts.append(ad.gather_rows(tape, state[tp.wit_rank], tp.wit_idx))
                inv = _invariant_matrix(tape, geom, tp)
                if inv is not None:
                    parts.append(inv)
                if cfg.debug_leak_coordinates:
                    if tp.rr == 0:
                        leak = ad.gather_rows(tape, x, tp.recv_idx)
                    else:
                        leak = ad.gather_rows(tape, geom.centroids(tp.rr), tp.recv_idx)
                    parts.append(leak)
                m = ad.mlp2(tape, params, prefix, ad.hconcat(tape, parts))
                if training and cfg.dropout > 0.0:
                    m = ad.dropout(tape, m, cfg.dropout, rng)
                if ti == plan.nn_type:
                    raw_nn = m
                if cfg.edge_gates:
                    gate = ad.sigmoid(
                        tape, ad.dense(tape, params, f"layer{layer}/gate/{tp.kind}/{tp.sr}-{tp.rr}", m)
                    )
                    m = ad.rowscale(tape, m, gate)
                agg[tp.rr].append(ad.segment_sum(tape, m, tp.recv_idx, plan.num_cells[tp.rr]))
            for rr in sorted(agg.keys()):
                parts = [state[rr]] + agg[rr]
                u = ad.dense(tape, params, f"layer{layer}/update/rank{rr}/lin1", ad.hconcat(tape, parts))
                u = ad.dense(tape, params, f"layer{layer}/update/rank{rr}/lin2", ad.swish(tape, u))
                if training and cfg.dropout > 0.0:
                    u = ad.dropout(tape, u, cfg.dropout, rng)
                state[rr] = u
            if cfg.position_update:
                nn = plan.types[plan.nn_type]
                phix = ad.dense(tape, params, f"layer{layer}/phix", raw_nn, bias=False)
                xi = ad.gather_rows(tape, x, nn.recv_idx)
                xj = ad.gather_rows(tape, x, nn.send_idx)
                contrib = ad.rowscale(tape, ad.sub(tape, xi, xj), phix)
                summed = ad.segment_sum(tape, contrib, nn.recv_idx, batch.num_nodes)
                cnorm = np.ones((batch.num_nodes, 1))
                nz = plan.nn_recv_count[:, 0] > 0
                cnorm[nz, 0] = 1.0 / plan.nn_recv_count[nz, 0]
                vel = ad.rowscale(tape, summed, tape.const(cnorm))
                if cfg.velocity_input:
                    phiv = ad.dense(
                        tape,
                        params,
                        f"layer{layer}/phiv/lin2",
                        ad.swish(tape, ad.dense(tape, params, f"layer{layer}/phiv/lin1", state[0])),
                    )
                    vel = ad.add(tape, vel, ad.rowscale(tape, v_init, phiv))
                x = ad.add(tape, x, vel)
                velocities = vel

        if cfg.readout == "positions":
            prediction = x
        else:
            pool_ranks = [0] if cfg.decoupled else [0, 1, 2]
            pooled = []
            for r in pool_ranks:
                if r in state and plan.num_cells[r] > 0:
                    pre = ad.dense(
                        tape,
                        params,
                        f"pre_readout/rank{r}/lin2",
                        ad.swish(tape, ad.dense(tape, params, f"pre_readout/rank{r}/lin1", state[r])),
                    )
                    pooled.append(
                        ad.segment_sum(tape, pre, batch.graph_of_rank[r], batch.num_graphs)
                    )
                else:
                    pooled.append(tape.const(np.zeros((batch.num_graphs, self.widths[r]))))
            cat = ad.hconcat(tape, pooled) if len(pooled) > 1 else pooled[0]
            out = ad.dense(
                tape, params, "readout/lin2", ad.swish(tape, ad.dense(tape, params, "readout/lin1", cat))
            )
            prediction = out
        return ForwardOut(
            tape=tape,
            prediction=prediction,
            positions=x if cfg.position_update else None,
            velocities=velocities,
            messages_per_layer=messages_per_layer,
        )

    # -- losses ---------------------------------------------------------------

    def loss(
        self,
        params: Params,
        batch: Batch,
        training: bool = False,
        rng: np.random.Generator | None = None,
        loss_kind: str = "mse",
        target_shift: float = 0.0,
        target_scale: float = 1.0,
    ) -> tuple[Var, ForwardOut]:
        if batch.target is None:
            raise ValueError("batch has no targets")
        out = self.forward(params, batch, training=training, rng=rng)
        tape = out.tape
        if self.config.readout == "positions":
            target = tape.const(batch.target)
            diff = ad.sub(tape, out.prediction, target)
            loss = ad.mean_all(tape, ad.mul(tape, diff, diff))
            if loss_kind == "mae":
                loss = ad.mean_all(tape, ad.abs_el(tape, diff))
        else:
            norm = (np.asarray(batch.target, dtype=np.float64) - target_shift) / target_scale
            target = tape.const(norm[:, None])
            diff = ad.sub(tape, out.prediction, target)
            if loss_kind == "mae":
                loss = ad.mean_all(tape, ad.abs_el(tape, diff))
            else:
                loss = ad.mean_all(tape, ad.mul(tape, diff, diff))
        return loss, out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-12
    schedule: str = "constant"  # "constant" | "cosine"
    lr_min: float = 0.0
    loss: str = "mse"  # "mse" | "mae"
    normalize_targets: bool = False  # mean/MAD normalization (property tasks)
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    params: Params
    loss_history: list[float]
    val_history: list[float]
    target_shift: float
    target_scale: float


def _metric(model: CellNetwork, params: Params, batches, tconf: TrainConfig, shift, scl) -> float:
    total, count = 0.0, 0
    for batch in batches:
        loss, _ = model.loss(
            params, batch, loss_kind=tconf.loss, target_shift=shift, target_scale=scl
        )
        n = batch.num_graphs
        total += float(loss.value) * n
        count += n
    return total / max(count, 1)


def train(
    model: CellNetwork,
    samples: list[Sample],
    tconf: TrainConfig,
    val_samples: list[Sample] | None = None,
    params: Params | None = None,
) -> TrainResult:
    """Seeded mini-batch training; deterministic given (samples, tconf, seed).

    Samples are partitioned into fixed batches once (seeded shuffle); the
    batch visit order is reshuffled every epoch. Raises TrainingDiverged on
    the first non-finite loss, naming the first offending tape entry.
    """
    if not samples:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(tconf.seed)
    if params is None:
        params = model.init_params(tconf.seed)
    state = OptimizerState(
        lr=tconf.lr,
        beta1=tconf.beta1,
        beta2=tconf.beta2,
        eps=tconf.eps,
        weight_decay=tconf.weight_decay,
    )
    shift, scl = 0.0, 1.0
    if tconf.normalize_targets and model.config.readout == "scalar":
        targets = np.asarray([float(s.graph.target) for s in samples])
        shift = float(np.mean(targets))
        mad = float(np.mean(np.abs(targets - shift)))
        scl = mad if mad > 0 else 1.0

    order = rng.permutation(len(samples))
    batches = [
        Batch.from_samples([samples[i] for i in order[k : k + tconf.batch_size]])
        for k in range(0, len(samples), tconf.batch_size)
    ]
    val_batches = None
    if val_samples:
        val_batches = [
            Batch.from_samples(val_samples[k : k + tconf.batch_size])
            for k in range(0, len(val_samples), tconf.batch_size)
        ]

    loss_history: list[float] = []
    val_history: list[float] = []
    drop_rng = np.random.default_rng(tconf.seed + 1)
    for epoch in range(tconf.epochs):
        if tconf.schedule == "cosine":
            state.lr = cosine_lr(epoch, tconf.epochs, tconf.lr, tconf.lr_min)
        epoch_loss, seen = 0.0, 0
        for bi in rng.permutation(len(batches)):
            batch = batches[bi]
            loss, out = model.loss(
                params,
                batch,
                training=True,
                rng=drop_rng,
                loss_kind=tconf.loss,
                target_shift=shift,
                target_scale=scl,
            )
            if not np.isfinite(loss.value):
                label = out.tape.first_nonfinite() or "loss"
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, first bad tape entry: {label}"
                )
            grads = ad.backward(out.tape, loss, params)
            adam_step(params, grads, state)
            epoch_loss += float(loss.value) * batch.num_graphs
            seen += batch.num_graphs
        loss_history.append(epoch_loss / seen)
        if val_batches is not None:
            val_history.append(_metric(model, params, val_batches, tconf, shift, scl))
    return TrainResult(
        params=params,
        loss_history=loss_history,
        val_history=val_history,
        target_shift=shift,
        target_scale=scl,
    )
