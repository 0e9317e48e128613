"""Message passing on geometric CW complexes with E(n)-invariant features."""

__version__ = "0.1.0"

from .cells import Cell, CellId, CWComplex, build_complex
from .datagen import (
    GeometricGraph,
    Trajectory,
    load_graph,
    make_nbody_dataset,
    save_graph,
    simulate_nbody,
    skeleton_templates,
)
from .geometry import EuclideanTransform, apply_transform, distance, random_transform
from .invariants import (
    InvariantConfig,
    InvariantVector,
    approx_radius,
    compute_invariants,
    hull_volume_area,
    midpoint,
    ring_perimeter,
    simplex_volume,
)
from .lifting import LiftConfig, decouple, lift_cliques, lift_rings, template_lift, vietoris_rips

__all__ = [
    "Cell",
    "CellId",
    "CWComplex",
    "EuclideanTransform",
    "GeometricGraph",
    "InvariantConfig",
    "InvariantVector",
    "LiftConfig",
    "Trajectory",
    "apply_transform",
    "approx_radius",
    "build_complex",
    "compute_invariants",
    "decouple",
    "distance",
    "hull_volume_area",
    "lift_cliques",
    "lift_rings",
    "load_graph",
    "make_nbody_dataset",
    "midpoint",
    "random_transform",
    "ring_perimeter",
    "save_graph",
    "simplex_volume",
    "simulate_nbody",
    "skeleton_templates",
    "template_lift",
    "vietoris_rips",
]
