"""E(n)-invariant geometric features on cells and cell pairs.

Cell-level quantities (hull volume/area, perimeter, radius, centroid
distances) are all built from simplex volumes: a cell's measure is the sum
over a simplex decomposition, which is what makes the same formulas work
for nodes, edges, and arbitrary polygonal rings.

The convex hull is computed by quickhull (own implementation, ambient
dimension 2 or 3) with an absolute facet-visibility tolerance of 1e-10;
affinely degenerate inputs fall back to the measure of the lower-dimensional
hull instead of raising, so transiently flattened cells cannot crash a
training run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cells import CellId, CWComplex

__all__ = [
    "InvariantVector",
    "InvariantConfig",
    "INVARIANT_NAMES",
    "simplex_volume",
    "quickhull_2d",
    "quickhull_3d",
    "hull_volume_area",
    "approx_radius",
    "ring_perimeter",
    "midpoint",
    "compute_invariants",
    "default_invariants",
]

HULL_TOL = 1e-10

INVARIANT_NAMES = (
    "node-distance",
    "edge-length",
    "midpoint-distance",
    "ring-radius",
    "ring-perimeter",
    "hull-volume",
    "hull-area",
    "node-to-ring-midpoint",
    "vertex-count",
    "edge-angle",
)


def simplex_volume(vertices, k: int | None = None) -> float:
    """Volume of a k-simplex given its k+1 vertices in ambient dimension >= k.

    Uses the determinant of the edge matrix when the ambient dimension
    equals k, and the Gram form sqrt(det(G^T G)) / k! otherwise.
    """
    pts = np.asarray(vertices, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"vertices must be a (k+1, n) array, got shape {pts.shape}")
    if k is None:
        k = pts.shape[0] - 1
    if pts.shape[0] < k + 1:
        raise ValueError(f"a {k}-simplex needs {k + 1} vertices, got {pts.shape[0]}")
    n = pts.shape[1]
    if n < k:
        raise ValueError(f"ambient dimension {n} < simplex dimension {k}")
    if k == 0:
        return 1.0
    edges = (pts[1 : k + 1] - pts[0]).T  # (n, k)
    if n == k:
        return abs(float(np.linalg.det(edges))) / math.factorial(k)
    gram = edges.T @ edges
    det = float(np.linalg.det(gram))
    return math.sqrt(max(det, 0.0)) / math.factorial(k)


# ---------------------------------------------------------------------------
# Quickhull
# ---------------------------------------------------------------------------


def quickhull_2d(points, tol: float = HULL_TOL) -> list[int]:
    """Indices of the convex hull polygon of 2-d points, clockwise order."""
    pts = np.asarray(points, dtype=np.float64)
    order = sorted(range(len(pts)), key=lambda i: (pts[i, 0], pts[i, 1], i))
    left, right = order[0], order[-1]
    if left == right:
        return [left]

    def cross(o, a, p):
        return (pts[a, 0] - pts[o, 0]) * (pts[p, 1] - pts[o, 1]) - (
            pts[a, 1] - pts[o, 1]
        ) * (pts[p, 0] - pts[o, 0])

    def chain(a, b, cands):
        if not cands:
            return [a]
        far = max(cands, key=lambda i: (cross(a, b, i), -i))
        above_ap = [i for i in cands if cross(a, far, i) > tol]
        above_pb = [i for i in cands if cross(far, b, i) > tol]
        return chain(a, far, above_ap) + chain(far, b, above_pb)

    rest = [i for i in range(len(pts)) if i != left and i != right]
    upper = [i for i in rest if cross(left, right, i) > tol]
    lower = [i for i in rest if cross(right, left, i) > tol]
    return chain(left, right, upper) + chain(right, left, lower)


class _Face:
    __slots__ = ("verts", "normal", "offset", "outside", "alive")

    def __init__(self, verts, normal, offset):
        self.verts = verts
        self.normal = normal
        self.offset = offset
        self.outside: list[int] = []
        self.alive = True

    def dist(self, p) -> float:
        return float(self.normal @ p - self.offset)


def _make_face(pts, a, b, c, inside_point) -> _Face | None:
    normal = np.cross(pts[b] - pts[a], pts[c] - pts[a])
    norm = np.linalg.norm(normal)
    if norm < 1e-300:
        return None
    normal = normal / norm
    offset = float(normal @ pts[a])
    if normal @ inside_point - offset > 0:
        b, c = c, b
        normal = -normal
        offset = -offset
    return _Face((a, b, c), normal, offset)


def quickhull_3d(points, tol: float = HULL_TOL) -> list[tuple[int, int, int]] | None:
    """Triangular facets of the 3-d convex hull, outward-oriented.

    Returns None when the input is affinely degenerate (coincident, collinear
    or coplanar within the visibility tolerance).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 4:
        return None

    # initial simplex from extreme points
    cand = set()
    for axis in range(3):
        cand.add(min(range(n), key=lambda i: (pts[i, axis], i)))
        cand.add(max(range(n), key=lambda i: (pts[i, axis], i)))
    cand = sorted(cand)
    best, i0, j0 = -1.0, -1, -1
    for ii in range(len(cand)):
        for jj in range(ii + 1, len(cand)):
            d = float(np.linalg.norm(pts[cand[ii]] - pts[cand[jj]]))
            if d > best:
                best, i0, j0 = d, cand[ii], cand[jj]
    if best < tol:
        return None
    axis_dir = (pts[j0] - pts[i0]) / best
    line_d = np.linalg.norm(
        (pts - pts[i0]) - np.outer((pts - pts[i0]) @ axis_dir, axis_dir), axis=1
    )
    k0 = int(np.lexsort((np.arange(n), -line_d))[0])
    if line_d[k0] < tol:
        return None
    normal = np.cross(pts[j0] - pts[i0], pts[k0] - pts[i0])
    normal /= np.linalg.norm(normal)
    plane_d = np.abs((pts - pts[i0]) @ normal)
    l0 = int(np.lexsort((np.arange(n), -plane_d))[0])
    if plane_d[l0] < tol:
        return None

    centroid = (pts[i0] + pts[j0] + pts[k0] + pts[l0]) / 4.0
    faces: list[_Face] = []
    for tri in ((i0, j0, k0), (i0, j0, l0), (i0, k0, l0), (j0, k0, l0)):
        face = _make_face(pts, *tri, centroid)
        if face is None:
            return None
        faces.append(face)

    used = {i0, j0, k0, l0}
    for p in range(n):
        if p in used:
            continue
        for face in faces:
            if face.dist(pts[p]) > tol:
                face.outside.append(p)
                break

    edge_owner: dict[tuple[int, int], _Face] = {}

    def register(face):
        a, b, c = face.verts
        for u, v in ((a, b), (b, c), (c, a)):
            edge_owner[(u, v)] = face

    for face in faces:
        register(face)

    pending = [f for f in faces if f.outside]
    while pending:
        face = pending.pop()
        if not face.alive or not face.outside:
            continue
        p = max(face.outside, key=lambda i: (face.dist(pts[i]), -i))
        # flood-fill the faces visible from p
        visible = [face]
        seen = {id(face)}
        stack = [face]
        while stack:
            f = stack.pop()
            a, b, c = f.verts
            for u, v in ((a, b), (b, c), (c, a)):
                nb = edge_owner.get((v, u))
                if nb is not None and nb.alive and id(nb) not in seen:
                    if nb.dist(pts[p]) > tol:
                        seen.add(id(nb))
                        visible.append(nb)
                        stack.append(nb)
        horizon = []
        for f in visible:
            a, b, c = f.verts
            for u, v in ((a, b), (b, c), (c, a)):
                nb = edge_owner.get((v, u))
                if nb is None or not nb.alive or id(nb) not in seen:
                    horizon.append((u, v))
        orphans: list[int] = []
        for f in visible:
            f.alive = False
            orphans.extend(i for i in f.outside if i != p)
            a, b, c = f.verts
            for u, v in ((a, b), (b, c), (c, a)):
                if edge_owner.get((u, v)) is f:
                    del edge_owner[(u, v)]
        new_faces = []
        for u, v in horizon:
            nf = _make_face(pts, u, v, p, centroid)
            if nf is None:
                continue
            new_faces.append(nf)
            register(nf)
            faces.append(nf)
        for q in sorted(set(orphans)):
            for nf in new_faces:
                if nf.dist(pts[q]) > tol:
                    nf.outside.append(q)
                    break
        pending.extend(nf for nf in new_faces if nf.outside)

    return [f.verts for f in faces if f.alive]


def _affine_frame(pts: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Centered points, orthonormal basis of their affine span, and its rank."""
    center = pts.mean(axis=0)
    centered = pts - center
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > tol))
    return centered, vt[:rank], rank


def hull_volume_area(points) -> tuple[float, float]:
    """(volume, area) of the convex hull in ambient dimension 2 or 3.

    In 2-d, "volume" is the polygon area and "area" the perimeter. Degenerate
    inputs give volume 0 and the measure of the lower-dimensional hull as
    area (segment length, or planar polygon area for coplanar 3-d input).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ValueError(f"points must be (N, 2) or (N, 3), got shape {pts.shape}")
    if pts.shape[0] < 2:
        raise ValueError("need at least 2 points")
    n = pts.shape[1]
    centered, basis, rank = _affine_frame(pts, HULL_TOL)

    if rank == 0:
        return 0.0, 0.0
    if rank == 1:
        coords = centered @ basis[0]
        return 0.0, float(coords.max() - coords.min())
    if rank == 2 and n == 3:
        flat = centered @ basis.T
        poly = quickhull_2d(flat)
        area2d = _polygon_area(flat, poly)
        return 0.0, area2d

    if n == 2:
        poly = quickhull_2d(pts)
        volume = _polygon_area(pts, poly)
        perimeter = sum(
            simplex_volume([pts[poly[i]], pts[poly[(i + 1) % len(poly)]]], 1)
            for i in range(len(poly))
        )
        return volume, perimeter

    facets = quickhull_3d(pts)
    if facets is None:  # rank said 3 but quickhull disagreed near the tolerance
        return 0.0, 0.0
    hull_vertices = sorted({v for tri in facets for v in tri})
    ref = pts[hull_vertices].mean(axis=0)
    volume = sum(
        simplex_volume([ref, pts[a], pts[b], pts[c]], 3) for a, b, c in facets
    )
    area = sum(simplex_volume([pts[a], pts[b], pts[c]], 2) for a, b, c in facets)
    return volume, area


def _polygon_area(pts: np.ndarray, poly: list[int]) -> float:
    if len(poly) < 3:
        return 0.0
    ref = pts[poly].mean(axis=0)
    return sum(
        simplex_volume([ref, pts[poly[i]], pts[poly[(i + 1) % len(poly)]]], 2)
        for i in range(len(poly))
    )


# ---------------------------------------------------------------------------
# Cell-level quantities
# ---------------------------------------------------------------------------


def approx_radius(points) -> float:
    """Half of the maximum pairwise distance: a fast stand-in for hull size."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        raise ValueError("need at least 2 points")
    diff = pts[:, None, :] - pts[None, :, :]
    return 0.5 * float(np.max(np.linalg.norm(diff, axis=-1)))


def midpoint(points) -> np.ndarray:
    """Arithmetic centroid; correctly-rounded sums make it exactly
    permutation invariant."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 1:
        raise ValueError("need at least 1 point")
    return np.array([math.fsum(pts[:, j]) for j in range(pts.shape[1])]) / pts.shape[0]


def ring_perimeter(cx: CWComplex, cid: CellId, positions) -> float:
    """Sum of the boundary-edge lengths of a 2-cell."""
    cid = CellId(*cid)
    if cid.rank != 2:
        raise ValueError(f"ring_perimeter needs a 2-cell, got rank {cid.rank}")
    pos = np.asarray(positions, dtype=np.float64)
    total = 0.0
    for eid in cx.boundaries(cid):
        a, b = cx.cell(eid).vertices
        total += float(np.linalg.norm(pos[a] - pos[b]))
    return total


# ---------------------------------------------------------------------------
# Invariant dispatch
# ---------------------------------------------------------------------------

_DEFAULTS: dict[tuple[int, int], tuple[str, ...]] = {
    (0, 0): ("node-distance",),
    (0, 1): ("edge-length",),
    (1, 0): ("edge-length",),
    (1, 1): ("edge-length", "edge-length", "midpoint-distance"),
    (1, 2): ("ring-radius", "ring-perimeter", "edge-length"),
    (2, 1): ("ring-radius", "ring-perimeter", "edge-length"),
    (2, 0): ("node-to-ring-midpoint", "ring-perimeter", "hull-volume", "hull-area"),
    (0, 2): ("node-to-ring-midpoint", "ring-perimeter", "hull-volume", "hull-area"),
    (2, 2): ("midpoint-distance",),
}


def default_invariants(sender_rank: int, receiver_rank: int) -> tuple[str, ...]:
    return _DEFAULTS.get((sender_rank, receiver_rank), ())


def _applicable(name: str, sender_rank: int, receiver_rank: int) -> bool:
    ranks = {sender_rank, receiver_rank}
    if name == "node-distance":
        return ranks == {0}
    if name == "edge-length":
        return 1 in ranks
    if name == "midpoint-distance":
        return True
    if name in ("ring-radius", "ring-perimeter", "hull-volume", "hull-area"):
        return 2 in ranks
    if name == "node-to-ring-midpoint":
        return ranks == {0, 2}
    if name == "vertex-count":
        return max(ranks) >= 1
    if name == "edge-angle":
        return sender_rank == 1 and receiver_rank == 1
    return False


@dataclass
class InvariantConfig:
    """Invariant names used per (sender rank, receiver rank, adjacency kind).

    Unset triples fall back to the built-in defaults for the rank pair, so an
    empty config reproduces the standard feature sets.
    """

    entries: dict[tuple[int, int, str], tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for (sr, rr, kind), names in self.entries.items():
            for name in names:
                if name not in INVARIANT_NAMES:
                    raise ValueError(f"unknown invariant {name!r}")
                if not _applicable(name, sr, rr):
                    raise ValueError(
                        f"invariant {name!r} is not applicable to ranks ({sr}, {rr}) [{kind}]"
                    )

    def schema(self, sender_rank: int, receiver_rank: int, kind: str) -> tuple[str, ...]:
        key = (sender_rank, receiver_rank, kind)
        if key in self.entries:
            return self.entries[key]
        return default_invariants(sender_rank, receiver_rank)

    def to_dict(self) -> dict:
        return {
            f"{sr}->{rr}/{kind}": list(names)
            for (sr, rr, kind), names in sorted(self.entries.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InvariantConfig":
        entries = {}
        for key, names in d.items():
            ranks, _, kind = key.partition("/")
            sr, _, rr = ranks.partition("->")
            entries[(int(sr), int(rr), kind)] = tuple(names)
        return cls(entries=entries)


@dataclass
class InvariantVector:
    values: np.ndarray
    schema: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.schema),):
            raise ValueError(
                f"values shape {self.values.shape} does not match schema of {len(self.schema)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("invariant values must be finite")


def _cell_positions(cx: CWComplex, cid: CellId, pos: np.ndarray) -> np.ndarray:
    return pos[list(cx.cell(cid).vertices)]


def evaluate_invariant(
    name: str,
    occurrence: int,
    sender: CellId,
    receiver: CellId,
    cx: CWComplex,
    pos: np.ndarray,
) -> float:
    """One scalar; `occurrence` disambiguates repeated names (sender first)."""
    s_cell, r_cell = CellId(*sender), CellId(*receiver)
    if name == "node-distance":
        return float(np.linalg.norm(pos[s_cell.index] - pos[r_cell.index]))
    if name == "edge-length":
        edges = [c for c in (s_cell, r_cell) if c.rank == 1]
        cell = edges[min(occurrence, len(edges) - 1)]
        a, b = cx.cell(cell).vertices
        return float(np.linalg.norm(pos[a] - pos[b]))
    if name == "midpoint-distance":
        ms = midpoint(_cell_positions(cx, s_cell, pos))
        mr = midpoint(_cell_positions(cx, r_cell, pos))
        return float(np.linalg.norm(ms - mr))
    ring = next((c for c in (s_cell, r_cell) if c.rank == 2), None)
    if name == "ring-radius":
        return approx_radius(_cell_positions(cx, ring, pos))
    if name == "ring-perimeter":
        return ring_perimeter(cx, ring, pos)
    if name == "hull-volume":
        return hull_volume_area(_cell_positions(cx, ring, pos))[0]
    if name == "hull-area":
        return hull_volume_area(_cell_positions(cx, ring, pos))[1]
    if name == "node-to-ring-midpoint":
        node = next(c for c in (s_cell, r_cell) if c.rank == 0)
        m = midpoint(_cell_positions(cx, ring, pos))
        return float(np.linalg.norm(pos[node.index] - m))
    if name == "vertex-count":
        cell = s_cell if s_cell.rank >= r_cell.rank else r_cell
        return float(len(cx.cell(cell).vertices))
    if name == "edge-angle":
        sa, sb = cx.cell(s_cell).vertices
        ra, rb = cx.cell(r_cell).vertices
        u, v = pos[sb] - pos[sa], pos[rb] - pos[ra]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return abs(float(u @ v)) / (nu * nv)
    raise ValueError(f"unknown invariant {name!r}")


def compute_invariants(
    kind: str,
    sigma: CellId,
    tau: CellId,
    cx: CWComplex,
    positions,
    config: InvariantConfig | None = None,
) -> InvariantVector:
    """Invariant vector for a message from sender tau to receiver sigma."""
    config = config or InvariantConfig()
    sigma, tau = CellId(*sigma), CellId(*tau)
    pos = np.asarray(positions, dtype=np.float64)
    schema = config.schema(tau.rank, sigma.rank, kind)
    counts: dict[str, int] = {}
    values = []
    for name in schema:
        occ = counts.get(name, 0)
        counts[name] = occ + 1
        values.append(evaluate_invariant(name, occ, tau, sigma, cx, pos))
    return InvariantVector(values=np.asarray(values), schema=schema)
