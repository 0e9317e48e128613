"""Euclidean primitives: points, rigid/orthogonal transforms, distances.

All arithmetic is float64. Points are plain 1-d numpy arrays of length n
(the ambient dimension); functions validate dimensions and finiteness where
cheap to do so.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EuclideanTransform",
    "apply_transform",
    "compose",
    "distance",
    "random_transform",
]

_ORTHO_TOL = 1e-12


def _as_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError(f"point must be a 1-d vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("point has non-finite coordinates")
    return p


@dataclass(frozen=True)
class EuclideanTransform:
    """An element of E(n): an orthogonal matrix plus a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError(f"rotation must be square, got shape {r.shape}")
        if t.shape != (r.shape[0],):
            raise ValueError(
                f"translation shape {t.shape} does not match rotation {r.shape}"
            )
        err = np.max(np.abs(r.T @ r - np.eye(r.shape[0])))
        if err > 1e-10:
            raise ValueError(f"rotation is not orthogonal (max |R^T R - I| = {err:g})")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.rotation))


def apply_transform(t: EuclideanTransform, p) -> np.ndarray:
    """Return R @ p + translation."""
    p = _as_point(p)
    if p.shape[0] != t.dim:
        raise ValueError(f"dimension mismatch: transform is {t.dim}-d, point is {p.shape[0]}-d")
    return t.rotation @ p + t.translation


def compose(t1: EuclideanTransform, t2: EuclideanTransform) -> EuclideanTransform:
    """Transform equal to applying t2 first, then t1."""
    if t1.dim != t2.dim:
        raise ValueError(f"dimension mismatch: {t1.dim} vs {t2.dim}")
    return EuclideanTransform(
        rotation=t1.rotation @ t2.rotation,
        translation=t1.rotation @ t2.translation + t1.translation,
    )


def distance(p, q) -> float:
    """Euclidean distance between two points of equal dimension."""
    p = _as_point(p)
    q = _as_point(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape[0]} vs {q.shape[0]}")
    return float(np.linalg.norm(p - q))


def random_transform(
    seed: int,
    dim: int,
    include_reflection: bool = True,
    translation_scale: float = 1.0,
) -> EuclideanTransform:
    """Seeded random element of E(dim).

    The orthogonal part comes from Gram-Schmidt on a standard-normal matrix
    (fixed column order, so the result is reproducible bit-for-bit given the
    seed). With include_reflection=False the determinant is forced to +1 by
    negating the last column when needed. The translation is uniform in
    [-translation_scale, translation_scale]^dim.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    while True:
        m = rng.standard_normal((dim, dim))
        q = np.empty_like(m)
        ok = True
        for j in range(dim):
            v = m[:, j].copy()
            for k in range(j):
                v -= (q[:, k] @ m[:, j]) * q[:, k]
            norm = np.linalg.norm(v)
            if norm < 1e-8:  # degenerate draw, retry with fresh columns
                ok = False
                break
            q[:, j] = v / norm
        if ok:
            break
    if not include_reflection and np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    translation = rng.uniform(-translation_scale, translation_scale, size=dim)
    return EuclideanTransform(rotation=q, translation=translation)
