"""Verification harness: equivariance, permutation, gradient, count, hull checks.

Each check builds fresh seeded inputs, measures a worst-case error over its
trials and reports pass/fail against a tolerance. The hull oracle estimates
volumes by Monte-Carlo rejection with a brute-force supporting-half-space
membership test, sharing no code with the quickhull implementation it audits.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cells import build_complex
from .datagen import GeometricGraph
from .geometry import random_transform
from .invariants import hull_volume_area
from .lifting import LiftConfig, decouple, lift_rings
from .model import Batch, CellNetwork, ModelConfig, Sample

__all__ = [
    "CheckReport",
    "CheckSettings",
    "random_complex_sample",
    "check_scalar_invariance",
    "check_position_equivariance",
    "check_permutation_equivariance",
    "check_gradients",
    "check_message_count",
    "check_hull_oracle",
    "run_standard_checks",
]


@dataclass
class CheckReport:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    trials: int
    wall_time: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "trials": self.trials,
            "wall_time": self.wall_time,
            "detail": self.detail,
        }

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max error {self.max_error:.3e}"
            f" (tol {self.tolerance:.1e}, {self.trials} trials, {self.wall_time:.2f}s)"
        )


@dataclass
class CheckSettings:
    complexes: int = 20
    transforms: int = 20
    translation_scale: float = 100.0
    min_nodes: int = 5
    max_nodes: int = 8
    num_layers: int = 4
    hidden_width: int = 32
    grad_hidden_width: int = 8
    grad_h: float = 1e-6
    tol_scalar: float = 1e-6
    tol_position: float = 1e-6
    tol_permutation: float = 1e-9
    tol_gradient: float = 1e-4
    count_graphs: int = 50
    seed: int = 0
    leak_coordinates: bool = False  # negative control: break invariance on purpose

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def random_complex_sample(
    seed: int,
    n_nodes: int | None = None,
    dim: int = 3,
    min_nodes: int = 5,
    max_nodes: int = 8,
    with_velocities: bool = True,
    with_target: bool = False,
) -> Sample:
    """Random connected graph with chordless-cycle 2-cells, seeded."""
    rng = np.random.default_rng(seed)
    n = n_nodes if n_nodes is not None else int(rng.integers(min_nodes, max_nodes + 1))
    edges = set()
    order = rng.permutation(n)
    for i in range(1, n):  # random spanning tree keeps the graph connected
        j = order[int(rng.integers(0, i))]
        a, b = int(min(order[i], j)), int(max(order[i], j))
        edges.add((a, b))
    for a in range(n):
        for b in range(a + 1, n):
            if (a, b) not in edges and rng.random() < 0.35:
                edges.add((a, b))
    graph = GeometricGraph(
        positions=rng.standard_normal((n, dim)),
        edges=sorted(edges),
        node_features=rng.standard_normal((n, 2)),
        velocities=rng.standard_normal((n, dim)) if with_velocities else None,
        target=rng.standard_normal((n, dim)) if with_target else None,
    )
    cycles = lift_rings(graph, max_ring_size=6)
    return Sample(graph=graph, complex=build_complex(graph, cycles))


def _transform_sample(sample: Sample, t) -> Sample:
    g = sample.graph.copy()
    g.positions = sample.graph.positions @ t.rotation.T + t.translation
    if g.velocities is not None:
        g.velocities = sample.graph.velocities @ t.rotation.T
    return Sample(graph=g, complex=build_complex(g, [list(c.vertices) for c in sample.complex.cells(2)]),
                  dense_edges=sample.dense_edges)


def _harness_model(settings: CheckSettings, readout: str) -> tuple[CellNetwork, "ad.Params"]:
    config = ModelConfig(
        num_layers=settings.num_layers,
        hidden_width=settings.hidden_width,
        position_update=True,
        velocity_input=True,
        readout=readout,
        debug_leak_coordinates=settings.leak_coordinates,
    )
    model = CellNetwork(config, feature_dim=2, ambient_dim=3)
    return model, model.init_params(settings.seed)


def check_scalar_invariance(settings: CheckSettings) -> CheckReport:
    start = time.perf_counter()
    model, params = _harness_model(settings, "scalar")
    worst = 0.0
    trials = 0
    for ci in range(settings.complexes):
        sample = random_complex_sample(
            settings.seed * 10_000 + ci, min_nodes=settings.min_nodes, max_nodes=settings.max_nodes
        )
        base = model.forward(params, Batch.from_samples([sample]))
        ref = float(base.prediction.value.ravel()[0])
        for ti in range(settings.transforms):
            t = random_transform(
                settings.seed * 77_777 + ci * 1000 + ti,
                3,
                include_reflection=True,
                translation_scale=settings.translation_scale,
            )
            out = model.forward(params, Batch.from_samples([_transform_sample(sample, t)]))
            got = float(out.prediction.value.ravel()[0])
            worst = max(worst, abs(got - ref) / (1.0 + abs(ref)))
            trials += 1
    return CheckReport(
        name="scalar-invariance",
        passed=worst <= settings.tol_scalar,
        max_error=worst,
        tolerance=settings.tol_scalar,
        trials=trials,
        wall_time=time.perf_counter() - start,
    )


def check_position_equivariance(settings: CheckSettings) -> CheckReport:
    start = time.perf_counter()
    model, params = _harness_model(settings, "positions")
    worst = 0.0
    trials = 0
    for ci in range(settings.complexes):
        sample = random_complex_sample(
            settings.seed * 20_000 + ci, min_nodes=settings.min_nodes, max_nodes=settings.max_nodes
        )
        base = model.forward(params, Batch.from_samples([sample]))
        for ti in range(settings.transforms):
            t = random_transform(
                settings.seed * 88_888 + ci * 1000 + ti,
                3,
                include_reflection=True,
                translation_scale=settings.translation_scale,
            )
            out = model.forward(params, Batch.from_samples([_transform_sample(sample, t)]))
            expect_x = base.positions.value @ t.rotation.T + t.translation
            expect_v = base.velocities.value @ t.rotation.T
            err = float(np.max(np.abs(out.positions.value - expect_x)))
            err = max(err, float(np.max(np.abs(out.velocities.value - expect_v))))
            worst = max(worst, err)
            trials += 1
    return CheckReport(
        name="position-equivariance",
        passed=worst <= settings.tol_position,
        max_error=worst,
        tolerance=settings.tol_position,
        trials=trials,
        wall_time=time.perf_counter() - start,
    )


def _permute_sample(sample: Sample, perm: np.ndarray) -> Sample:
    """Relabel node i as perm[i], relabeling cells consistently."""
    inv = np.argsort(perm)
    g = sample.graph
    g2 = GeometricGraph(
        positions=g.positions[inv],
        edges=[(int(perm[a]), int(perm[b])) for a, b in g.edges],
        node_features=None if g.node_features is None else g.node_features[inv],
        velocities=None if g.velocities is None else g.velocities[inv],
    )
    cycles = [[int(perm[v]) for v in c.vertices] for c in sample.complex.cells(2)]
    dense = None
    if sample.dense_edges is not None:
        dense = [(int(perm[a]), int(perm[b])) for a, b in sample.dense_edges]
    return Sample(graph=g2, complex=build_complex(g2, cycles), dense_edges=dense)


def check_permutation_equivariance(settings: CheckSettings) -> CheckReport:
    start = time.perf_counter()
    scalar_model, scalar_params = _harness_model(settings, "scalar")
    pos_model, pos_params = _harness_model(settings, "positions")
    worst = 0.0
    trials = 0
    for ci in range(settings.complexes):
        sample = random_complex_sample(
            settings.seed * 30_000 + ci, min_nodes=settings.min_nodes, max_nodes=settings.max_nodes
        )
        rng = np.random.default_rng(settings.seed * 99 + ci)
        perm = rng.permutation(sample.graph.num_nodes)
        permuted = _permute_sample(sample, perm)
        s0 = scalar_model.forward(scalar_params, Batch.from_samples([sample]))
        s1 = scalar_model.forward(scalar_params, Batch.from_samples([permuted]))
        ref = float(s0.prediction.value.ravel()[0])
        worst = max(worst, abs(float(s1.prediction.value.ravel()[0]) - ref) / (1.0 + abs(ref)))
        p0 = pos_model.forward(pos_params, Batch.from_samples([sample]))
        p1 = pos_model.forward(pos_params, Batch.from_samples([permuted]))
        worst = max(worst, float(np.max(np.abs(p1.positions.value[perm] - p0.positions.value))))
        trials += 1
    return CheckReport(
        name="permutation-equivariance",
        passed=worst <= settings.tol_permutation,
        max_error=worst,
        tolerance=settings.tol_permutation,
        trials=trials,
        wall_time=time.perf_counter() - start,
    )


def check_gradients(settings: CheckSettings) -> CheckReport:
    """End-to-end central differences on a 2-layer model, 5 nodes, one ring."""
    start = time.perf_counter()
    rng = np.random.default_rng(settings.seed)
    graph = GeometricGraph(
        positions=rng.standard_normal((5, 3)),
        edges=[(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)],
        node_features=rng.standard_normal((5, 2)),
        velocities=rng.standard_normal((5, 3)),
        target=rng.standard_normal((5, 3)),
    )
    sample = Sample(graph=graph, complex=build_complex(graph, [[0, 1, 2, 3]]))
    batch = Batch.from_samples([sample])
    config = ModelConfig(
        num_layers=2,
        hidden_width=settings.grad_hidden_width,
        position_update=True,
        velocity_input=True,
        readout="positions",
    )
    model = CellNetwork(config, feature_dim=2, ambient_dim=3)
    params = model.init_params(settings.seed)

    def loss_fn(p, need_grad):
        loss, out = model.loss(p, batch)
        if need_grad:
            return float(loss.value), ad.backward(out.tape, loss, p)
        return float(loss.value), None

    err, worst_key = ad.finite_diff_check(loss_fn, params, h=settings.grad_h)
    return CheckReport(
        name="gradient-check",
        passed=err <= settings.tol_gradient,
        max_error=err,
        tolerance=settings.tol_gradient,
        trials=params.count(),
        wall_time=time.perf_counter() - start,
        detail=f"worst key {worst_key}",
    )


def check_message_count(settings: CheckSettings) -> CheckReport:
    """Decoupled audit: messages/layer == |V|(|V|-1) + sum of ring sizes."""
    start = time.perf_counter()
    worst = 0.0
    checked = 0
    seed = settings.seed * 50_000
    model = CellNetwork(ModelConfig(num_layers=1, hidden_width=4, decoupled=True), 2, 3)
    while checked < settings.count_graphs:
        seed += 1
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 9))
        sample = random_complex_sample(seed, n_nodes=n)
        rings = sample.complex.cells(2)
        if len(rings) >= n or len(rings) == 0:
            continue
        dense, lifted = decouple(sample.graph, LiftConfig(method="chordless-cycles"))
        dsample = Sample(graph=sample.graph, complex=lifted, dense_edges=dense.edges)
        params = model.init_params(seed)
        out = model.forward(params, Batch.from_samples([dsample]))
        ring_sizes = sum(len(set(c.vertices)) for c in lifted.cells(2))
        expected = n * (n - 1) + ring_sizes
        bound = n * n + len(lifted.cells(2)) * n
        err = abs(out.messages_per_layer - expected)
        if out.messages_per_layer > bound:
            err = max(err, out.messages_per_layer - bound)
        worst = max(worst, float(err))
        checked += 1
    return CheckReport(
        name="message-count",
        passed=worst == 0.0,
        max_error=worst,
        tolerance=0.0,
        trials=checked,
        wall_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Hull oracle (Monte-Carlo rejection, independent membership test)
# ---------------------------------------------------------------------------


def _supporting_halfspaces(pts: np.ndarray, tol: float = 1e-12):
    """Brute-force supporting planes: every facet-triple with all points on one side."""
    n = len(pts)
    normals, offsets = [], []
    for i, j, k in itertools.combinations(range(n), 3):
        nrm = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        mag = np.linalg.norm(nrm)
        if mag < tol:
            continue
        nrm = nrm / mag
        d = (pts - pts[i]) @ nrm
        if np.all(d <= tol):
            normals.append(nrm)
            offsets.append(float(nrm @ pts[i]))
        elif np.all(d >= -tol):
            normals.append(-nrm)
            offsets.append(float(-nrm @ pts[i]))
    return np.asarray(normals), np.asarray(offsets)


def monte_carlo_hull_volume(pts: np.ndarray, n_samples: int, seed: int) -> float:
    """Rejection estimate of the 3-d hull volume over the bounding box."""
    rng = np.random.default_rng(seed)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    box = float(np.prod(hi - lo))
    normals, offsets = _supporting_halfspaces(pts)
    inside = 0
    chunk = 200_000
    remaining = n_samples
    while remaining > 0:
        m = min(chunk, remaining)
        x = rng.uniform(lo, hi, size=(m, 3))
        ok = np.all(x @ normals.T <= offsets[None, :] + 1e-12, axis=1)
        inside += int(np.sum(ok))
        remaining -= m
    return box * inside / n_samples


def check_hull_oracle(
    n_clouds: int = 20, n_points: int = 10, n_samples: int = 1_000_000, tol: float = 0.01, seed: int = 0
) -> CheckReport:
    start = time.perf_counter()
    worst = 0.0
    for ci in range(n_clouds):
        rng = np.random.default_rng(seed * 1_000 + ci)
        pts = rng.standard_normal((n_points, 3))
        volume, _ = hull_volume_area(pts)
        estimate = monte_carlo_hull_volume(pts, n_samples, seed=seed * 2_000 + ci)
        worst = max(worst, abs(volume - estimate) / estimate)
    return CheckReport(
        name="hull-oracle",
        passed=worst <= tol,
        max_error=worst,
        tolerance=tol,
        trials=n_clouds,
        wall_time=time.perf_counter() - start,
    )


def run_standard_checks(settings: CheckSettings | None = None) -> list[CheckReport]:
    """The five standard checks, in a fixed order."""
    settings = settings or CheckSettings()
    return [
        check_scalar_invariance(settings),
        check_position_equivariance(settings),
        check_permutation_equivariance(settings),
        check_gradients(settings),
        check_message_count(settings),
    ]
