import math

import numpy as np
import pytest

from cellmp.cells import CellId, build_complex
from cellmp.checks import monte_carlo_hull_volume
from cellmp.datagen import GeometricGraph
from cellmp.geometry import random_transform
from cellmp.invariants import (
    InvariantConfig,
    InvariantVector,
    approx_radius,
    compute_invariants,
    hull_volume_area,
    midpoint,
    quickhull_2d,
    quickhull_3d,
    ring_perimeter,
    simplex_volume,
)

from conftest import transform_points


UNIT_CUBE = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# simplex_volume
# ---------------------------------------------------------------------------


def test_simplex_volume_triangle():
    assert simplex_volume([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 2) == pytest.approx(0.5)


def test_simplex_volume_tetrahedron():
    pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    assert simplex_volume(pts, 3) == pytest.approx(1.0 / 6.0)


def test_simplex_volume_gram_form():
    pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    assert simplex_volume(pts, 2) == pytest.approx(0.5)


def test_simplex_volume_forms_agree():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = rng.standard_normal((4, 3))
        det_form = simplex_volume(pts, 3)
        # Gram form via an isometric embedding into R^4
        lifted = np.concatenate([pts, np.zeros((4, 1))], axis=1)
        gram_form = simplex_volume(lifted, 3)
        assert abs(det_form - gram_form) < 1e-10


def test_simplex_volume_degenerate_zero():
    assert simplex_volume([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], 2) == pytest.approx(0.0)


def test_simplex_volume_too_few():
    with pytest.raises(ValueError):
        simplex_volume([[0.0, 0.0], [1.0, 0.0]], 2)


# ---------------------------------------------------------------------------
# Hulls
# ---------------------------------------------------------------------------


def test_unit_cube_exact():
    volume, area = hull_volume_area(UNIT_CUBE)
    assert abs(volume - 1.0) < 1e-12
    assert abs(area - 6.0) < 1e-12


def test_unit_square_exact():
    volume, area = hull_volume_area(UNIT_SQUARE)
    assert abs(volume - 1.0) < 1e-12
    assert abs(area - 4.0) < 1e-12  # 2-d "area" is the perimeter


def test_hull_interior_points_ignored():
    pts = np.vstack([UNIT_CUBE, [[0.5, 0.5, 0.5], [0.25, 0.25, 0.25]]])
    volume, area = hull_volume_area(pts)
    assert abs(volume - 1.0) < 1e-12
    assert abs(area - 6.0) < 1e-12


def test_hull_matches_own_simplex():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    volume, _ = hull_volume_area(pts)
    assert abs(volume - simplex_volume(pts, 3)) < 1e-10


def test_hull_monte_carlo_oracle():
    # light version here (acceptance runs 20 clouds at 1e6 samples)
    for seed in range(3):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((10, 3))
        volume, _ = hull_volume_area(pts)
        est = monte_carlo_hull_volume(pts, 400_000, seed=seed + 100)
        assert abs(volume - est) / est < 0.015


def test_hull_against_scipy():
    scipy_spatial = pytest.importorskip("scipy.spatial")
    for seed in range(25):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((rng.integers(4, 16), 3))
        volume, area = hull_volume_area(pts)
        ref = scipy_spatial.ConvexHull(pts)
        assert abs(volume - ref.volume) < 1e-10
        assert abs(area - ref.area) < 1e-10
    for seed in range(15):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((rng.integers(3, 12), 2))
        volume, perimeter = hull_volume_area(pts)
        ref = scipy_spatial.ConvexHull(pts)
        assert abs(volume - ref.volume) < 1e-10
        assert abs(perimeter - ref.area) < 1e-10  # qhull "area" in 2-d is the perimeter


def test_degenerate_hulls():
    collinear = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]])
    volume, area = hull_volume_area(collinear)
    assert volume == 0.0
    assert area == pytest.approx(3 * math.sqrt(3))
    coplanar = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    volume, area = hull_volume_area(coplanar)
    assert volume == 0.0
    assert area == pytest.approx(1.0)  # planar polygon area
    coincident = np.zeros((3, 3))
    assert hull_volume_area(coincident) == (0.0, 0.0)


def test_hull_too_few_points():
    with pytest.raises(ValueError):
        hull_volume_area(np.array([[0.0, 0.0]]))
    with pytest.raises(ValueError):
        hull_volume_area(np.zeros((3, 4)))


def test_quickhull_2d_collinear_on_edge():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    poly = quickhull_2d(pts)
    assert sorted(poly) == [0, 1, 3]  # midpoint of the base is not a vertex


def test_quickhull_3d_degenerate_none():
    assert quickhull_3d(np.zeros((5, 3))) is None
    flat = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.3, 0.2, 0]])
    assert quickhull_3d(flat) is None


def test_subdivision_consistency():
    """Triangle-fan decomposition of a convex polygon equals the hull area."""
    rng = np.random.default_rng(7)
    for _ in range(10):
        n = int(rng.integers(4, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(0.5, 2.0, size=n)
        pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        hull_volume, _ = hull_volume_area(pts)
        poly = quickhull_2d(pts)
        ref = pts[poly].mean(axis=0)
        fan = sum(
            simplex_volume([ref, pts[poly[i]], pts[poly[(i + 1) % len(poly)]]], 2)
            for i in range(len(poly))
        )
        assert abs(fan - hull_volume) < 1e-10


# ---------------------------------------------------------------------------
# Cell quantities
# ---------------------------------------------------------------------------


def test_approx_radius():
    assert approx_radius(UNIT_SQUARE) == pytest.approx(math.sqrt(2) / 2)
    assert approx_radius([[0.0, 0.0], [0.0, 3.0]]) == pytest.approx(1.5)
    hexagon = [[math.cos(a), math.sin(a)] for a in np.linspace(0, 2 * np.pi, 7)[:-1]]
    assert approx_radius(hexagon) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        approx_radius([[1.0, 2.0]])


def test_midpoint():
    assert np.allclose(midpoint(UNIT_SQUARE), [0.5, 0.5])
    assert np.allclose(midpoint([[3.0, 1.0]]), [3.0, 1.0])
    assert np.allclose(midpoint([[0.0, 0.0], [2.0, 0.0]]), [1.0, 0.0])
    with pytest.raises(ValueError):
        midpoint(np.zeros((0, 2)))


def test_ring_perimeter(unit_square_ring):
    graph, cx = unit_square_ring
    assert ring_perimeter(cx, CellId(2, 0), graph.positions) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        ring_perimeter(cx, CellId(1, 0), graph.positions)


def test_ring_perimeter_triangle_and_hexagon():
    tri = GeometricGraph(
        positions=np.array([[0.0, 0.0], [2.0, 0.0], [1.0, math.sqrt(3)]]),
        edges=[(0, 1), (1, 2), (0, 2)],
    )
    cx = build_complex(tri, [[0, 1, 2]])
    assert ring_perimeter(cx, CellId(2, 0), tri.positions) == pytest.approx(6.0)
    hexagon = GeometricGraph(
        positions=np.array([[math.cos(a), math.sin(a)] for a in np.linspace(0, 2 * np.pi, 7)[:-1]]),
        edges=[(i, (i + 1) % 6) for i in range(6)],
    )
    cxh = build_complex(hexagon, [[0, 1, 2, 3, 4, 5]])
    assert ring_perimeter(cxh, CellId(2, 0), hexagon.positions) == pytest.approx(6.0)


# ---------------------------------------------------------------------------
# compute_invariants
# ---------------------------------------------------------------------------


def test_node_node_distance():
    g = GeometricGraph(positions=np.array([[0.0, 0.0], [3.0, 4.0]]), edges=[(0, 1)])
    cx = build_complex(g, [])
    vec = compute_invariants("upper", CellId(0, 0), CellId(0, 1), cx, g.positions)
    assert vec.schema == ("node-distance",)
    assert vec.values[0] == pytest.approx(5.0)


def test_edge_edge_right_angle():
    # unit edges (0,1) and (0,2) at a right angle; midpoints (0.5,0) and (0,0.5)
    g = GeometricGraph(
        positions=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        edges=[(0, 1), (0, 2)],
    )
    cx = build_complex(g, [])
    vec = compute_invariants("lower", CellId(1, 0), CellId(1, 1), cx, g.positions)
    assert vec.schema == ("edge-length", "edge-length", "midpoint-distance")
    assert np.allclose(vec.values, [1.0, 1.0, math.sqrt(2) / 2])


def test_ring_to_node_unit_square(unit_square_ring):
    graph, cx = unit_square_ring
    vec = compute_invariants("point", CellId(0, 0), CellId(2, 0), cx, graph.positions)
    assert vec.schema == ("node-to-ring-midpoint", "ring-perimeter", "hull-volume", "hull-area")
    assert np.allclose(vec.values, [math.sqrt(2) / 2, 4.0, 1.0, 4.0])


def test_invariant_config_validation():
    with pytest.raises(ValueError):
        InvariantConfig(entries={(0, 0, "upper"): ("ring-radius",)})
    with pytest.raises(ValueError):
        InvariantConfig(entries={(0, 0, "upper"): ("no-such-thing",)})
    cfg = InvariantConfig(entries={(1, 1, "lower"): ("edge-angle", "midpoint-distance")})
    assert cfg.schema(1, 1, "lower") == ("edge-angle", "midpoint-distance")
    assert cfg.schema(0, 0, "upper") == ("node-distance",)


def test_invariant_config_roundtrip():
    cfg = InvariantConfig(entries={(2, 0, "point"): ("ring-perimeter", "hull-area")})
    assert InvariantConfig.from_dict(cfg.to_dict()).entries == cfg.entries


def test_invariant_vector_validation():
    with pytest.raises(ValueError):
        InvariantVector(values=np.array([1.0, np.nan]), schema=("a", "b"))
    with pytest.raises(ValueError):
        InvariantVector(values=np.array([1.0]), schema=("a", "b"))


def test_edge_angle_invariant():
    g = GeometricGraph(
        positions=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        edges=[(0, 1), (0, 2)],
    )
    cx = build_complex(g, [])
    cfg = InvariantConfig(entries={(1, 1, "lower"): ("edge-angle",)})
    vec = compute_invariants("lower", CellId(1, 0), CellId(1, 1), cx, g.positions, cfg)
    assert vec.values[0] == pytest.approx(0.0)  # perpendicular


# ---------------------------------------------------------------------------
# E(n) and permutation invariance
# ---------------------------------------------------------------------------


def test_en_invariance_of_all_quantities():
    rng = np.random.default_rng(3)
    pts3 = rng.standard_normal((8, 3))
    ring = GeometricGraph(
        positions=rng.standard_normal((5, 3)),
        edges=[(i, (i + 1) % 5) for i in range(5)],
    )
    cx = build_complex(ring, [[0, 1, 2, 3, 4]])
    base_vol, base_area = hull_volume_area(pts3)
    base_rad = approx_radius(pts3)
    base_per = ring_perimeter(cx, CellId(2, 0), ring.positions)
    base_simp = simplex_volume(pts3[:4], 3)
    for trial in range(100):
        t = random_transform(trial, 3, include_reflection=True, translation_scale=10.0)
        moved = transform_points(pts3, t)
        vol, area = hull_volume_area(moved)
        tol = lambda ref: 1e-9 * (1.0 + abs(ref))
        assert abs(vol - base_vol) <= tol(base_vol)
        assert abs(area - base_area) <= tol(base_area)
        assert abs(approx_radius(moved) - base_rad) <= tol(base_rad)
        assert abs(simplex_volume(moved[:4], 3) - base_simp) <= tol(base_simp)
        moved_ring = transform_points(ring.positions, t)
        assert abs(ring_perimeter(cx, CellId(2, 0), moved_ring) - base_per) <= tol(base_per)
        # midpoint is equivariant rather than invariant
        assert np.allclose(midpoint(moved), transform_points([midpoint(pts3)], t)[0], atol=1e-9)


def test_permutation_invariance():
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((9, 3))
    base = hull_volume_area(pts)
    for _ in range(10):
        perm = rng.permutation(len(pts))
        shuffled = pts[perm]
        vol, area = hull_volume_area(shuffled)
        assert abs(vol - base[0]) <= 1e-12
        assert abs(area - base[1]) <= 1e-12
        assert approx_radius(shuffled) == approx_radius(pts)
        assert np.array_equal(np.sort(midpoint(shuffled)), np.sort(midpoint(pts)))
