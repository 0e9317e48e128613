"""Minimal differentiable compute layer: a recording tape over numpy arrays.

Every operation appends one entry to a Tape: the output variable, its input
variables, a forward closure (for bit-exact replay) and a vjp closure mapping
the output adjoint to input adjoints. backward() walks the entries in exact
reverse order. Operations are matrix-level (whole message batches at once) so
a full network forward is a few hundred entries rather than one per message.

Gradients are exact; finite_diff_check() is the independent oracle used by
the test-suite and the verification harness.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "Params",
    "backward",
    "finite_diff_check",
    "dense",
    "mlp2",
    "swish",
    "sigmoid",
]

PARAM_FORMAT_VERSION = 1


class Var:
    __slots__ = ("value", "key", "requires")

    def __init__(self, value, key=None, requires=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.key = key
        self.requires = requires

    def __repr__(self):
        return f"Var(shape={self.value.shape}, key={self.key})"


class Tape:
    """Recorded operation sequence; one Tape per forward pass."""

    def __init__(self):
        self.entries: list[tuple[Var, tuple[Var, ...], object, object, str]] = []
        self._leaves: dict[str, Var] = {}

    def const(self, value) -> Var:
        return Var(value)

    def leaf(self, params: "Params", key: str) -> Var:
        """Parameter leaf; the same Var is reused within one tape."""
        if key not in self._leaves:
            self._leaves[key] = Var(params[key], key=key, requires=True)
        return self._leaves[key]

    def record(self, out: Var, inputs: tuple[Var, ...], fwd, vjp, label: str) -> Var:
        out.requires = any(v.requires for v in inputs)
        self.entries.append((out, inputs, fwd, vjp, label))
        return out

    def replay_max_error(self) -> float:
        """Recompute every entry from its recorded inputs; 0.0 means bit-exact."""
        worst = 0.0
        for out, _inputs, fwd, _vjp, _label in self.entries:
            redo = fwd()
            if redo.shape != out.value.shape or not np.array_equal(redo, out.value):
                worst = max(worst, float(np.max(np.abs(redo - out.value))))
        return worst

    def first_nonfinite(self) -> str | None:
        for out, _i, _f, _v, label in self.entries:
            if not np.all(np.isfinite(out.value)):
                return label
        return None


def backward(tape: Tape, loss: Var, params: "Params | None" = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss, keyed like the parameters.

    Unused parameters get explicit zero gradients when `params` is given.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for out, inputs, _fwd, vjp, _label in reversed(tape.entries):
        g = adjoint.pop(id(out), None)
        if g is None or not out.requires:
            continue
        needs = tuple(v.requires for v in inputs)
        grads = vjp(g, needs)
        for v, dv in zip(inputs, grads):
            if dv is None or not v.requires:
                continue
            acc = adjoint.get(id(v))
            if acc is None:
                adjoint[id(v)] = dv
            else:
                adjoint[id(v)] = acc + dv
    out: dict[str, np.ndarray] = {}
    for key, leaf in tape._leaves.items():
        out[key] = adjoint.get(id(leaf), np.zeros_like(leaf.value))
    if params is not None:
        for key in params.keys():
            if key not in out:
                out[key] = np.zeros_like(params[key])
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _key_rng(seed: int, key: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}/{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class Params:
    """Named flat float64 arrays; keys unique, shapes fixed after creation."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, key: str, value: np.ndarray) -> None:
        if key in self._arrays:
            raise ValueError(f"duplicate parameter key {key!r}")
        self._arrays[key] = np.asarray(value, dtype=np.float64)

    def dense_init(self, prefix: str, in_dim: int, out_dim: int, seed: int, bias: bool = True):
        """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights, zero biases.

        The draw is keyed on (seed, key) so shared keys across two models
        built from the same seed get identical values.
        """
        bound = 1.0 / np.sqrt(in_dim)
        rng = _key_rng(seed, f"{prefix}/W")
        self.add(f"{prefix}/W", rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        if bias:
            self.add(f"{prefix}/b", np.zeros(out_dim))

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self._arrays[key]
        except KeyError:
            raise KeyError(f"no parameter {key!r}") from None

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        if key not in self._arrays:
            raise KeyError(f"no parameter {key!r}")
        if value.shape != self._arrays[key].shape:
            raise ValueError(f"shape mismatch for {key!r}")
        self._arrays[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self._arrays

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def count(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> "Params":
        p = Params()
        for k, v in self._arrays.items():
            p.add(k, v.copy())
        return p

    # checkpoint container: key -> shape + row-major data, with a version field
    def to_dict(self) -> dict:
        return {
            "format_version": PARAM_FORMAT_VERSION,
            "params": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in sorted(self._arrays.items())
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Params":
        if doc.get("format_version") != PARAM_FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format {doc.get('format_version')!r}")
        p = cls()
        for key, spec in doc["params"].items():
            p.add(key, np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"]))
        return p

    def save(self, path) -> None:
        from .datagen import canonical_json

        Path(path).write_text(canonical_json(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Params":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def dense(tape: Tape, params: Params, prefix: str, x: Var, bias: bool = True) -> Var:
    """Affine map x @ W^T (+ b); works on (M, in) batches and (in,) vectors."""
    w = tape.leaf(params, f"{prefix}/W")
    b = tape.leaf(params, f"{prefix}/b") if bias else None
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[1]:
        raise ValueError(
            f"shape mismatch at {prefix!r}: input width {xv.shape[-1]}, weight expects {wv.shape[1]}"
        )

    def fwd():
        y = x.value @ w.value.T
        return y + b.value if b is not None else y

    out = Var(fwd())
    if b is None:

        def vjp(g, needs):
            dx = g @ w.value if needs[0] else None
            dw = (g.T @ x.value if g.ndim == 2 else np.outer(g, x.value)) if needs[1] else None
            return dx, dw

        return tape.record(out, (x, w), fwd, vjp, f"dense:{prefix}")

    def vjp(g, needs):
        dx = g @ w.value if needs[0] else None
        dw = (g.T @ x.value if g.ndim == 2 else np.outer(g, x.value)) if needs[1] else None
        db = (g.sum(axis=0) if g.ndim == 2 else g) if needs[2] else None
        return dx, dw, db

    return tape.record(out, (x, w, b), fwd, vjp, f"dense:{prefix}")


def swish(tape: Tape, x: Var) -> Var:
    sig = 1.0 / (1.0 + np.exp(-x.value))

    def fwd():
        s = 1.0 / (1.0 + np.exp(-x.value))
        return x.value * s

    out = Var(x.value * sig)

    def vjp(g, needs):
        return (g * sig * (1.0 + x.value * (1.0 - sig)),)

    return tape.record(out, (x,), fwd, vjp, "swish")


def sigmoid(tape: Tape, x: Var) -> Var:
    def fwd():
        return 1.0 / (1.0 + np.exp(-x.value))

    out = Var(fwd())

    def vjp(g, needs):
        s = out.value
        return (g * s * (1.0 - s),)

    return tape.record(out, (x,), fwd, vjp, "sigmoid")


def mlp2(tape: Tape, params: Params, prefix: str, x: Var) -> Var:
    """The two-layer Swish MLP used by every message function."""
    h = swish(tape, dense(tape, params, f"{prefix}/lin1", x))
    return swish(tape, dense(tape, params, f"{prefix}/lin2", h))


def mlp2_init(params: Params, prefix: str, in_dim: int, hidden: int, out_dim: int, seed: int):
    params.dense_init(f"{prefix}/lin1", in_dim, hidden, seed)
    params.dense_init(f"{prefix}/lin2", hidden, out_dim, seed)


def add(tape: Tape, a: Var, b: Var) -> Var:
    def fwd():
        return a.value + b.value

    def vjp(g, needs):
        return g, g

    return tape.record(Var(fwd()), (a, b), fwd, vjp, "add")


def sub(tape: Tape, a: Var, b: Var) -> Var:
    def fwd():
        return a.value - b.value

    def vjp(g, needs):
        return g, -g

    return tape.record(Var(fwd()), (a, b), fwd, vjp, "sub")


def mul(tape: Tape, a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shapes differ: {a.value.shape} vs {b.value.shape}")

    def fwd():
        return a.value * b.value

    def vjp(g, needs):
        da = g * b.value if needs[0] else None
        db = g * a.value if needs[1] else None
        return da, db

    return tape.record(Var(fwd()), (a, b), fwd, vjp, "mul")


def scale(tape: Tape, a: Var, c: float) -> Var:
    def fwd():
        return a.value * c

    def vjp(g, needs):
        return (g * c,)

    return tape.record(Var(fwd()), (a,), fwd, vjp, "scale")


def rowscale(tape: Tape, x: Var, s: Var) -> Var:
    """Multiply each row of x (M, K) by a per-row scalar s (M, 1)."""
    if s.value.shape != (x.value.shape[0], 1):
        raise ValueError(f"rowscale scalar shape {s.value.shape} incompatible with {x.value.shape}")

    def fwd():
        return x.value * s.value

    def vjp(g, needs):
        dx = g * s.value if needs[0] else None
        ds = np.sum(g * x.value, axis=1, keepdims=True) if needs[1] else None
        return dx, ds

    return tape.record(Var(fwd()), (x, s), fwd, vjp, "rowscale")


def hconcat(tape: Tape, parts: list[Var]) -> Var:
    widths = [p.value.shape[1] for p in parts]

    def fwd():
        return np.concatenate([p.value for p in parts], axis=1)

    def vjp(g, needs):
        grads = []
        start = 0
        for w, need in zip(widths, needs):
            grads.append(g[:, start : start + w] if need else None)
            start += w
        return grads

    return tape.record(Var(fwd()), tuple(parts), fwd, vjp, "hconcat")


def _scatter_add_rows(rows: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum `rows` into `num_rows` bins by index (deterministic sorted order)."""
    out = np.zeros((num_rows,) + rows.shape[1:])
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sorted_idx))[0] + 1])
    out[sorted_idx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def gather_rows(tape: Tape, x: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.intp)

    def fwd():
        return x.value[idx]

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        return (_scatter_add_rows(g, idx, x.value.shape[0]),)

    return tape.record(Var(fwd()), (x,), fwd, vjp, "gather_rows")


def segment_sum(tape: Tape, x: Var, seg: np.ndarray, num_segments: int) -> Var:
    seg = np.asarray(seg, dtype=np.intp)

    def fwd():
        return _scatter_add_rows(x.value, seg, num_segments)

    def vjp(g, needs):
        return (g[seg],)

    return tape.record(Var(fwd()), (x,), fwd, vjp, "segment_sum")


def segment_max(tape: Tape, x: Var, seg: np.ndarray, num_segments: int) -> Var:
    """Per-segment maximum of a column vector (M, 1); empty segments give 0.

    The gradient routes to the first row attaining the maximum.
    """
    seg = np.asarray(seg, dtype=np.intp)
    col = x.value[:, 0]
    maxes = np.full(num_segments, -np.inf)
    np.maximum.at(maxes, seg, col)
    argrow = np.full(num_segments, -1, dtype=np.intp)
    hit = np.nonzero(col == maxes[seg])[0]
    big = np.full(num_segments, x.value.shape[0], dtype=np.intp)
    np.minimum.at(big, seg[hit], hit)
    filled = big < x.value.shape[0]
    argrow[filled] = big[filled]
    result = np.where(np.isfinite(maxes), maxes, 0.0)[:, None]

    def fwd():
        out = np.full(num_segments, -np.inf)
        np.maximum.at(out, seg, x.value[:, 0])
        return np.where(np.isfinite(out), out, 0.0)[:, None]

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        dx = np.zeros_like(x.value)
        rows = argrow[filled]
        dx[rows, 0] = g[filled, 0]
        return (dx,)

    return tape.record(Var(result), (x,), fwd, vjp, "segment_max")


def row_norm(tape: Tape, x: Var) -> Var:
    """Euclidean norm of each row, (M, K) -> (M, 1); zero rows get zero grad."""

    def fwd():
        return np.sqrt(np.sum(x.value**2, axis=1, keepdims=True))

    out = Var(fwd())

    def vjp(g, needs):
        r = out.value.copy()
        r[r == 0.0] = 1.0
        return (g * x.value / r,)

    return tape.record(out, (x,), fwd, vjp, "row_norm")


def rowsum(tape: Tape, x: Var) -> Var:
    def fwd():
        return np.sum(x.value, axis=1, keepdims=True)

    def vjp(g, needs):
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return tape.record(Var(fwd()), (x,), fwd, vjp, "rowsum")


def sum_all(tape: Tape, x: Var) -> Var:
    def fwd():
        return np.asarray(np.sum(x.value))

    def vjp(g, needs):
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return tape.record(Var(fwd()), (x,), fwd, vjp, "sum_all")


def mean_all(tape: Tape, x: Var) -> Var:
    size = x.value.size

    def fwd():
        return np.asarray(np.mean(x.value))

    def vjp(g, needs):
        return (np.broadcast_to(g / size, x.value.shape).copy(),)

    return tape.record(Var(fwd()), (x,), fwd, vjp, "mean_all")


def sqrt_el(tape: Tape, x: Var) -> Var:
    def fwd():
        return np.sqrt(x.value)

    out = Var(fwd())

    def vjp(g, needs):
        r = out.value.copy()
        r[r == 0.0] = np.inf  # zero slope at the origin, matching row_norm
        return (g * 0.5 / r,)

    return tape.record(out, (x,), fwd, vjp, "sqrt")


def abs_el(tape: Tape, x: Var) -> Var:
    def fwd():
        return np.abs(x.value)

    def vjp(g, needs):
        return (g * np.sign(x.value),)

    return tape.record(Var(fwd()), (x,), fwd, vjp, "abs")


def divide(tape: Tape, a: Var, b: Var) -> Var:
    def fwd():
        return a.value / b.value

    def vjp(g, needs):
        da = g / b.value if needs[0] else None
        db = -g * a.value / (b.value**2) if needs[1] else None
        return da, db

    return tape.record(Var(fwd()), (a, b), fwd, vjp, "divide")


def cross3_rows(tape: Tape, a: Var, b: Var) -> Var:
    def fwd():
        return np.cross(a.value, b.value)

    def vjp(g, needs):
        da = np.cross(b.value, g) if needs[0] else None
        db = np.cross(g, a.value) if needs[1] else None
        return da, db

    return tape.record(Var(fwd()), (a, b), fwd, vjp, "cross3")


def det3_rows(tape: Tape, a: Var, b: Var, c: Var) -> Var:
    """Rowwise scalar triple product a . (b x c), shape (M, 3) -> (M, 1)."""

    def fwd():
        return np.sum(a.value * np.cross(b.value, c.value), axis=1, keepdims=True)

    def vjp(g, needs):
        da = g * np.cross(b.value, c.value) if needs[0] else None
        db = g * np.cross(c.value, a.value) if needs[1] else None
        dc = g * np.cross(a.value, b.value) if needs[2] else None
        return da, db, dc

    return tape.record(Var(fwd()), (a, b, c), fwd, vjp, "det3")


def det2_rows(tape: Tape, a: Var, b: Var) -> Var:
    """Rowwise 2x2 determinant a0*b1 - a1*b0, shape (M, 2) -> (M, 1)."""

    def fwd():
        av, bv = a.value, b.value
        return (av[:, 0] * bv[:, 1] - av[:, 1] * bv[:, 0])[:, None]

    def vjp(g, needs):
        av, bv = a.value, b.value
        da = g * np.stack([bv[:, 1], -bv[:, 0]], axis=1) if needs[0] else None
        db = g * np.stack([-av[:, 1], av[:, 0]], axis=1) if needs[1] else None
        return da, db

    return tape.record(Var(fwd()), (a, b), fwd, vjp, "det2")


def dropout(tape: Tape, x: Var, rate: float, rng: np.random.Generator) -> Var:
    """Seeded inverted dropout; call only during training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return x
    mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)

    def fwd():
        return x.value * mask

    def vjp(g, needs):
        return (g * mask,)

    return tape.record(Var(fwd()), (x,), fwd, vjp, "dropout")


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_check(loss_fn, params: Params, h: float = 1e-6, rel_floor: float = 1e-3):
    """Central-difference check of analytic gradients over every parameter.

    `loss_fn(params, need_grad)` must return (loss value, gradient dict or
    None). Returns (max relative error, worst key) with the error measured
    against max(|analytic|, |numeric|, rel_floor).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    _, grads = loss_fn(params, True)
    worst, worst_key = 0.0, ""
    for key in params.keys():
        base = params[key]
        analytic = grads.get(key, np.zeros_like(base))
        flat = base.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_fn(params, False)
            flat[i] = orig - h
            down, _ = loss_fn(params, False)
            flat[i] = orig
            num[i] = (up - down) / (2.0 * h)
        numeric = num.reshape(base.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), rel_floor)
        err = float(np.max(np.abs(analytic - numeric) / denom))
        if err > worst:
            worst, worst_key = err, key
    return worst, worst_key
