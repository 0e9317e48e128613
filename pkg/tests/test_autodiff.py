import numpy as np
import pytest

from cellmp import autodiff as ad
from cellmp.autodiff import Params, Tape, Var, backward, finite_diff_check
from cellmp.optim import OptimizerState, adam_step, cosine_lr


def numeric_grad(fn, x, h=1e-6):
    """Central differences of a scalar fn at array x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def check_op(build, shapes, seed, h=1e-6, tol=1e-6):
    """Analytic vs central-difference gradients for one tape operation.

    `build(tape, *vars) -> Var` must produce any output; the check reduces it
    to a scalar via a fixed random projection.
    """
    rng = np.random.default_rng(seed)
    values = [rng.standard_normal(s) for s in shapes]
    tape = Tape()
    vars_ = [Var(v.copy(), requires=True) for v in values]
    out = build(tape, *vars_)
    proj = np.random.default_rng(seed + 1).standard_normal(out.value.shape)
    loss = ad.sum_all(tape, ad.mul(tape, out, tape.const(proj)))
    adjoint = {id(loss): np.asarray(1.0)}
    # reuse backward by turning the inputs into fake leaves
    for i, v in enumerate(vars_):
        v.key = f"x{i}"
        tape._leaves[f"x{i}"] = v
    grads = backward(tape, loss)
    for i, v in enumerate(values):
        def scalar(x, i=i):
            t = Tape()
            vs = [Var(values[j] if j != i else x) for j in range(len(values))]
            o = build(t, *vs)
            return float(np.sum(o.value * proj))

        num = numeric_grad(scalar, v.copy(), h)
        ana = grads[f"x{i}"]
        denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-3)
        assert np.max(np.abs(num - ana) / denom) < tol, f"op gradient mismatch on input {i}"


SEG = np.array([0, 0, 1, 2, 2, 2], dtype=np.intp)
IDX = np.array([2, 0, 1, 1, 3], dtype=np.intp)


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_ops_gradients(seed):
    check_op(lambda t, a: ad.swish(t, a), [(4, 3)], seed)
    check_op(lambda t, a: ad.sigmoid(t, a), [(4, 3)], seed)
    check_op(lambda t, a, b: ad.add(t, a, b), [(3, 2), (3, 2)], seed)
    check_op(lambda t, a, b: ad.sub(t, a, b), [(3, 2), (3, 2)], seed)
    check_op(lambda t, a, b: ad.mul(t, a, b), [(3, 2), (3, 2)], seed)
    check_op(lambda t, a: ad.scale(t, a, -1.7), [(3, 2)], seed)
    check_op(lambda t, a, b: ad.divide(t, a, ad.add(t, ad.mul(t, b, b), t.const(np.ones((3, 2))))), [(3, 2), (3, 2)], seed)


@pytest.mark.parametrize("seed", range(10))
def test_structural_ops_gradients(seed):
    check_op(lambda t, a, s: ad.rowscale(t, a, s), [(4, 3), (4, 1)], seed)
    check_op(lambda t, a, b: ad.hconcat(t, [a, b]), [(4, 2), (4, 3)], seed)
    check_op(lambda t, a: ad.gather_rows(t, a, IDX), [(4, 3)], seed)
    check_op(lambda t, a: ad.segment_sum(t, a, SEG, 4), [(6, 3)], seed)
    check_op(lambda t, a: ad.rowsum(t, a), [(4, 3)], seed)
    check_op(lambda t, a: ad.sum_all(t, a), [(4, 3)], seed)
    check_op(lambda t, a: ad.mean_all(t, a), [(4, 3)], seed)


@pytest.mark.parametrize("seed", range(10))
def test_geometry_ops_gradients(seed):
    check_op(lambda t, a: ad.row_norm(t, a), [(5, 3)], seed)
    check_op(lambda t, a: ad.sqrt_el(t, ad.add(t, ad.mul(t, a, a), t.const(np.full((4, 2), 0.5)))), [(4, 2)], seed)
    check_op(lambda t, a: ad.abs_el(t, a), [(4, 2)], seed)
    check_op(lambda t, a, b: ad.cross3_rows(t, a, b), [(5, 3), (5, 3)], seed)
    check_op(lambda t, a, b, c: ad.det3_rows(t, a, b, c), [(5, 3), (5, 3), (5, 3)], seed)
    check_op(lambda t, a, b: ad.det2_rows(t, a, b), [(5, 2), (5, 2)], seed)
    check_op(lambda t, a: ad.segment_max(t, ad.mul(t, a, a), SEG, 4), [(6, 1)], seed)


def test_dense_identity():
    params = Params()
    params.add("lin/W", np.eye(2))
    params.add("lin/b", np.zeros(2))
    tape = Tape()
    out = ad.dense(tape, params, "lin", tape.const(np.array([1.0, 2.0])))
    assert np.allclose(out.value, [1.0, 2.0])


def test_dense_zero_weights_bias_only():
    params = Params()
    params.add("lin/W", np.zeros((1, 3)))
    params.add("lin/b", np.array([3.0]))
    tape = Tape()
    out = ad.dense(tape, params, "lin", tape.const(np.array([5.0, -1.0, 2.0])))
    assert np.allclose(out.value, [3.0])


def test_dense_bias_gradient_all_ones():
    params = Params()
    params.add("lin/W", np.random.default_rng(0).standard_normal((3, 2)))
    params.add("lin/b", np.zeros(3))
    tape = Tape()
    out = ad.dense(tape, params, "lin", tape.const(np.array([0.3, -0.7])))
    loss = ad.sum_all(tape, out)
    grads = backward(tape, loss, params)
    assert np.allclose(grads["lin/b"], np.ones(3))


def test_dense_shape_mismatch_names_key():
    params = Params()
    params.add("block/W", np.zeros((2, 3)))
    params.add("block/b", np.zeros(2))
    tape = Tape()
    with pytest.raises(ValueError, match="block"):
        ad.dense(tape, params, "block", tape.const(np.zeros(5)))


def test_swish_values():
    tape = Tape()
    out = ad.swish(tape, tape.const(np.array([0.0, 30.0, -30.0])))
    assert out.value[0] == 0.0
    assert out.value[1] == pytest.approx(30.0, rel=1e-12)
    assert abs(out.value[2]) < 1e-11


def test_swish_derivative_at_zero():
    # analytic d/dx = sigma(x)(1 + x(1 - sigma(x))) -> 0.5 at x = 0
    tape = Tape()
    x = Var(np.array([0.0]), requires=True)
    x.key = "x"
    tape._leaves["x"] = x
    loss = ad.sum_all(tape, ad.swish(tape, x))
    grads = backward(tape, loss)
    assert grads["x"][0] == pytest.approx(0.5)
    h = 1e-6
    num = (
        (h * (1 / (1 + np.exp(-h)))) - (-h * (1 / (1 + np.exp(h))))
    ) / (2 * h)
    assert abs(grads["x"][0] - num) < 1e-8


def test_mlp2_composition():
    params = Params()
    ad.mlp2_init(params, "m", 3, 4, 2, seed=0)
    x = np.random.default_rng(1).standard_normal(3)
    tape = Tape()
    out = ad.mlp2(tape, params, "m", tape.const(x))
    # manual: dense -> swish -> dense -> swish
    def sw(v):
        return v / (1 + np.exp(-v))

    h1 = sw(params["m/lin1/W"] @ x + params["m/lin1/b"])
    h2 = sw(params["m/lin2/W"] @ h1 + params["m/lin2/b"])
    assert np.allclose(out.value, h2, atol=1e-15)


def test_mlp2_zero_weights():
    params = Params()
    params.add("m/lin1/W", np.zeros((4, 3)))
    params.add("m/lin1/b", np.zeros(4))
    params.add("m/lin2/W", np.zeros((2, 4)))
    params.add("m/lin2/b", np.array([1.0, -1.0]))
    tape = Tape()
    out = ad.mlp2(tape, params, "m", tape.const(np.array([9.0, 9.0, 9.0])))
    expected = np.array([1.0, -1.0]) / (1 + np.exp(-np.array([1.0, -1.0])))
    assert np.allclose(out.value, expected)


def test_mlp2_gradcheck():
    params = Params()
    ad.mlp2_init(params, "m", 3, 5, 4, seed=2)
    x = np.random.default_rng(3).standard_normal(3)

    def loss_fn(p, need_grad):
        tape = Tape()
        out = ad.mlp2(tape, p, "m", tape.const(x))
        loss = ad.sum_all(tape, out)
        if need_grad:
            return float(loss.value), backward(tape, loss, p)
        return float(loss.value), None

    err, _ = finite_diff_check(loss_fn, params, h=1e-6)
    assert err < 1e-5


def test_backward_sum_of_params():
    params = Params()
    params.add("a", np.array([1.0, 2.0, 3.0]))
    tape = Tape()
    loss = ad.sum_all(tape, tape.leaf(params, "a"))
    grads = backward(tape, loss, params)
    assert np.array_equal(grads["a"], np.ones(3))


def test_backward_unused_params_zero():
    params = Params()
    params.add("used", np.array([2.0]))
    params.add("unused", np.ones((3, 3)))
    tape = Tape()
    loss = ad.sum_all(tape, tape.leaf(params, "used"))
    grads = backward(tape, loss, params)
    assert np.array_equal(grads["unused"], np.zeros((3, 3)))


def test_backward_rejects_nonscalar():
    params = Params()
    params.add("a", np.ones(3))
    tape = Tape()
    leaf = tape.leaf(params, "a")
    with pytest.raises(ValueError):
        backward(tape, leaf, params)


def test_tape_replay_bit_exact():
    params = Params()
    ad.mlp2_init(params, "m", 4, 6, 3, seed=5)
    tape = Tape()
    out = ad.mlp2(tape, params, "m", tape.const(np.random.default_rng(0).standard_normal((7, 4))))
    loss = ad.mean_all(tape, ad.mul(tape, out, out))
    assert tape.replay_max_error() == 0.0


def test_finite_diff_check_linear_exact():
    params = Params()
    params.add("w", np.array([1.0, -2.0, 0.5]))

    def loss_fn(p, need_grad):
        tape = Tape()
        loss = ad.sum_all(tape, ad.mul(tape, tape.leaf(p, "w"), tape.const(np.array([2.0, 3.0, -1.0]))))
        if need_grad:
            return float(loss.value), backward(tape, loss, p)
        return float(loss.value), None

    err, _ = finite_diff_check(loss_fn, params, h=1e-6)
    assert err < 1e-9


def test_initialization_deterministic_and_bounded():
    p1 = Params()
    p1.dense_init("layer0/x", 16, 8, seed=3)
    p2 = Params()
    p2.dense_init("layer0/x", 16, 8, seed=3)
    assert np.array_equal(p1["layer0/x/W"], p2["layer0/x/W"])
    assert np.max(np.abs(p1["layer0/x/W"])) <= 1.0 / 4.0
    assert np.array_equal(p1["layer0/x/b"], np.zeros(8))
    p3 = Params()
    p3.dense_init("layer0/x", 16, 8, seed=4)
    assert not np.array_equal(p1["layer0/x/W"], p3["layer0/x/W"])


def test_params_duplicate_key():
    p = Params()
    p.add("k", np.zeros(2))
    with pytest.raises(ValueError):
        p.add("k", np.zeros(2))


def test_params_checkpoint_roundtrip(tmp_path):
    p = Params()
    p.dense_init("a/b", 3, 2, seed=0)
    path = tmp_path / "ckpt.json"
    p.save(path)
    q = Params.load(path)
    assert set(q.keys()) == set(p.keys())
    for k in p.keys():
        assert np.array_equal(p[k], q[k])
    # byte-stable round trip
    q.save(tmp_path / "ckpt2.json")
    assert (tmp_path / "ckpt.json").read_bytes() == (tmp_path / "ckpt2.json").read_bytes()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_grads_only_weight_decay():
    params = Params()
    params.add("w", np.array([1.0, -2.0]))
    state = OptimizerState(lr=0.1, weight_decay=0.01)
    adam_step(params, {"w": np.zeros(2)}, state)
    assert np.allclose(params["w"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))
    state2 = OptimizerState(lr=0.1, weight_decay=0.0)
    params2 = Params()
    params2.add("w", np.array([1.0, -2.0]))
    adam_step(params2, {"w": np.zeros(2)}, state2)
    assert np.array_equal(params2["w"], np.array([1.0, -2.0]))


def test_adam_first_step_magnitude():
    # bias-corrected first step: m_hat = g, v_hat = g^2, so |update| ~ lr
    params = Params()
    params.add("w", np.zeros(3))
    state = OptimizerState(lr=1e-3)
    g = np.array([0.5, -2.0, 10.0])
    adam_step(params, {"w": g}, state)
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(params["w"], expected)
    assert np.allclose(np.abs(params["w"]), 1e-3, rtol=1e-6)


def test_adam_deterministic_trajectories():
    def run():
        params = Params()
        params.dense_init("w", 4, 4, seed=0)
        state = OptimizerState(lr=1e-2)
        rng = np.random.default_rng(5)
        hist = []
        for _ in range(25):
            g = {k: rng.standard_normal(params[k].shape) for k in params.keys()}
            adam_step(params, g, state)
            hist.append(params["w/W"].copy())
        return hist

    a, b = run(), run()
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_adam_key_mismatch():
    params = Params()
    params.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        adam_step(params, {"v": np.zeros(2)}, OptimizerState())


def test_adam_against_reference_sequence():
    """Hand-rolled Adam recursion as the oracle for a short run."""
    params = Params()
    params.add("w", np.array([0.3]))
    state = OptimizerState(lr=0.05)
    w = np.array([0.3])
    m = v = np.zeros(1)
    for t in range(1, 6):
        g = np.array([np.sin(t * 1.7)])
        adam_step(params, {"w": g.copy()}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9**t)
        vh = v / (1 - 0.999**t)
        w = w - 0.05 * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(params["w"], w, atol=1e-15)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0) == pytest.approx(1.0)
    assert cosine_lr(99, 100, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(0, 1, 0.05) == 0.05
    mid = cosine_lr(50, 101, 1.0, lr_min=0.2)
    assert mid == pytest.approx(0.6)


def test_dropout_train_vs_eval():
    rng = np.random.default_rng(0)
    tape = Tape()
    x = tape.const(np.ones((1000, 4)))
    out = ad.dropout(tape, x, 0.25, rng)
    kept = np.count_nonzero(out.value) / out.value.size
    assert 0.70 < kept < 0.80
    # inverted scaling keeps the expectation
    assert np.mean(out.value) == pytest.approx(1.0, abs=0.05)
    assert ad.dropout(tape, x, 0.0, rng) is x  # rate 0 is the identity
