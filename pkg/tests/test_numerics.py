"""Tensor op and reverse-mode gradient checks.

Expected values come from independent oracles: an explicit triple-loop
matmul, float64 numpy mirrors of each primitive, and central finite
differences evaluated through those mirrors.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchanim import numerics as nm
from sketchanim.errors import DimensionError, UnknownGraphError


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=seed))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def matmul_oracle(a, b):
    """Triple-loop float64 matrix product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


# float64 mirrors of each primitive, used to build finite-difference oracles
MIRRORS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "matmul": lambda a, b: a @ b,
    "tanh": np.tanh,
    "rsqrt": lambda x: 1.0 / np.sqrt(x),
    "softmax_rows": lambda x: (lambda e: e / e.sum(axis=-1, keepdims=True))(
        np.exp(x - x.max(axis=-1, keepdims=True))
    ),
    "reduce_sum": lambda x: x.sum(),
    "reshape": lambda x: x.reshape(-1),
    "transpose": lambda x: np.swapaxes(x, -1, -2),
}


def fd_grad(f, x, h=1e-3):
    """Central finite differences of scalar-valued f at x, in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        dn = f(x)
        flat[i] = keep
        gf[i] = (up - dn) / (2.0 * h)
    return g


def assert_close(got, want, rtol, atol=1e-5):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    err = np.abs(got - want)
    bound = atol + rtol * np.abs(want)
    assert np.all(err <= bound), f"max err {err.max():.3e} vs bound {bound[err > bound].min():.3e}"


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def test_matmul_identity_exact():
    a = nm.tensor(_rng(0).integers(-4, 5, size=(5, 5)))
    eye = np.eye(5, dtype=np.float32)
    assert np.array_equal(nm.matmul(a, eye), a)
    assert np.array_equal(nm.matmul(eye, a), a)


def test_matmul_1x1():
    out = nm.matmul(nm.tensor([[2.0]]), nm.tensor([[3.0]]))
    assert out.shape == (1, 1)
    assert out[0, 0] == np.float32(6.0)


def test_matmul_vs_triple_loop():
    r = _rng(1)
    a = nm.tensor(r.normal(size=(5, 4)))
    b = nm.tensor(r.normal(size=(4, 3)))
    want = matmul_oracle(a, b)
    assert np.max(np.abs(nm.matmul(a, b) - want)) <= 1e-6


def test_matmul_batched_vs_triple_loop():
    r = _rng(2)
    a = nm.tensor(r.normal(size=(3, 5, 4)))
    b3 = nm.tensor(r.normal(size=(3, 4, 2)))
    b2 = nm.tensor(r.normal(size=(4, 2)))
    got3 = nm.matmul(a, b3)
    got2 = nm.matmul(a, b2)
    for i in range(3):
        assert np.max(np.abs(got3[i] - matmul_oracle(a[i], b3[i]))) <= 1e-6
        assert np.max(np.abs(got2[i] - matmul_oracle(a[i], b2))) <= 1e-6


def test_matmul_shape_error_names_both():
    with pytest.raises(DimensionError) as ei:
        nm.matmul(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))
    assert "(2, 3)" in str(ei.value) and "(4, 2)" in str(ei.value)


def test_softmax_uniform_rows():
    out = nm.softmax_rows(np.zeros((3, 4), np.float32))
    assert_close(out, np.full((3, 4), 0.25), rtol=0, atol=1e-7)


def test_softmax_two_logits():
    # softmax([0, ln 3]) = [0.25, 0.75]
    out = nm.softmax_rows(nm.tensor([[0.0, np.log(3.0)]]))
    assert_close(out, [[0.25, 0.75]], rtol=0, atol=1e-6)


def test_softmax_rows_sum_to_one():
    x = nm.tensor(_rng(3).normal(scale=5.0, size=(6, 9)))
    out = nm.softmax_rows(x)
    assert_close(out.sum(axis=-1), np.ones(6), rtol=0, atol=1e-6)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 8))
def test_softmax_shift_invariance(seed, rows, cols):
    x = nm.tensor(_rng(seed).normal(scale=3.0, size=(rows, cols)))
    shifted = nm.softmax_rows(x + np.float32(7.25))
    assert_close(shifted, nm.softmax_rows(x), rtol=0, atol=1e-6)


def test_scaled_scores_one_hot():
    # d=4 one-hot rows: q @ k^T / sqrt(4) has 0.5 where the hots line up
    q = np.zeros((1, 2, 4), np.float32)
    k = np.zeros((1, 3, 4), np.float32)
    q[0, 0, 1] = 1.0
    q[0, 1, 2] = 1.0
    k[0, 0, 1] = 1.0
    k[0, 2, 2] = 1.0
    out = nm.scaled_attention_scores(q, k)
    want = np.zeros((1, 2, 3))
    want[0, 0, 0] = 0.5
    want[0, 1, 2] = 0.5
    assert_close(out, want, rtol=0, atol=1e-7)


def test_scaled_scores_d1():
    out = nm.scaled_attention_scores(nm.tensor([[[2.0]]]), nm.tensor([[[3.0]]]))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == np.float32(6.0)


def test_scaled_scores_match_matmul():
    r = _rng(4)
    q = nm.tensor(r.normal(size=(2, 5, 8)))
    k = nm.tensor(r.normal(size=(2, 7, 8)))
    want = (np.asarray(q, np.float64) @ np.swapaxes(np.asarray(k, np.float64), 1, 2)) / np.sqrt(8)
    assert_close(nm.scaled_attention_scores(q, k), want, rtol=1e-6)


def test_scaled_scores_shape_error():
    with pytest.raises(DimensionError):
        nm.scaled_attention_scores(np.zeros((2, 3, 4), np.float32), np.zeros((2, 3, 5), np.float32))


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 2**31 - 1))
def test_ops_stay_finite(seed):
    r = _rng(seed)
    x = nm.tensor(r.normal(scale=30.0, size=(4, 6)))
    y = nm.tensor(r.normal(scale=30.0, size=(4, 6)))
    for out in (nm.add(x, y), nm.mul(x, y), nm.softmax_rows(x), nm.tanh(x)):
        assert np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_gradient_of_sum_is_ones():
    tape = nm.Tape()
    x = tape.input("x", _rng(5).normal(size=(3, 4)))
    rec = tape.finalize(nm.reduce_sum(x), register=True)
    got = nm.gradient(nm.GradientRequest(rec.id, {"x"}, np.float32(1.0)))
    assert np.array_equal(got["x"], np.ones((3, 4), np.float32))


def test_gradient_of_sum_of_squares():
    tape = nm.Tape()
    x = tape.input("x", [1.0, 2.0, 3.0])
    rec = tape.finalize(nm.reduce_sum(nm.mul(x, x)))
    got = rec.vjp(np.float32(1.0), wrt=["x"])
    assert_close(got["x"], [2.0, 4.0, 6.0], rtol=0, atol=1e-6)


def test_unknown_graph_id_raises():
    with pytest.raises(UnknownGraphError):
        nm.gradient(nm.GradientRequest("rec-999999", {"x"}, np.float32(1.0)))


def test_released_recording_raises():
    tape = nm.Tape()
    x = tape.input("x", [1.0])
    rec = tape.finalize(nm.reduce_sum(x), register=True)
    nm.release_recording(rec.id)
    with pytest.raises(UnknownGraphError):
        nm.gradient(nm.GradientRequest(rec.id, {"x"}, np.float32(1.0)))


def test_two_layer_mlp_grad_matches_fd():
    r = _rng(6)
    x0 = r.normal(size=(3, 5))
    w1 = r.normal(scale=0.5, size=(5, 7))
    w2 = r.normal(scale=0.5, size=(7, 2))

    def mirror(x):
        return np.sum(np.tanh(np.tanh(x @ w1) @ w2))

    tape = nm.Tape()
    x = tape.input("x", x0)
    h = nm.tanh(nm.matmul(x, nm.as_f32(w1)))
    y = nm.tanh(nm.matmul(h, nm.as_f32(w2)))
    rec = tape.finalize(nm.reduce_sum(y))
    got = rec.vjp(np.float32(1.0), wrt=["x"])["x"]
    assert_close(got, fd_grad(mirror, x0), rtol=1e-4, atol=1e-5)


def _fd_case(seed):
    """One randomized primitive gradient case checked against its mirror."""
    r = _rng(seed)
    ops = [
        "add", "sub", "mul", "matmul", "tanh", "rsqrt",
        "softmax_rows", "reduce_sum", "reshape", "transpose", "narrow", "concat",
    ]
    name = ops[seed % len(ops)]
    m, n, k = (int(v) for v in r.integers(1, 5, size=3))
    x0 = r.normal(size=(m, n))
    ct = nm.as_f32(r.normal(size=()))

    if name in ("add", "sub", "mul"):
        other = nm.as_f32(r.normal(size=(m, n)))
        build = lambda x: getattr(nm, name)(x, other)
        mirror = lambda x: np.sum(MIRRORS[name](x, np.float64(1) * other))
    elif name == "matmul":
        other = nm.as_f32(r.normal(size=(n, k)))
        build = lambda x: nm.matmul(x, other)
        mirror = lambda x: np.sum(x @ other)
    elif name in ("tanh", "softmax_rows"):
        build = lambda x: getattr(nm, name)(x)
        mirror = lambda x: np.sum(MIRRORS[name](x))
    elif name == "rsqrt":
        x0 = np.abs(x0) + 1.0
        build = nm.rsqrt
        mirror = lambda x: np.sum(1.0 / np.sqrt(x))
    elif name == "reduce_sum":
        build = lambda x: nm.reduce_sum(x, axis=1)
        mirror = lambda x: np.sum(x.sum(axis=1))
    elif name == "reshape":
        build = lambda x: nm.reshape(x, (n, m))
        mirror = lambda x: np.sum(x.reshape(n, m))
    elif name == "transpose":
        build = lambda x: nm.transpose(x, (1, 0))
        mirror = lambda x: np.sum(x.T)
    elif name == "narrow":
        build = lambda x: nm.narrow(x, 1, 0, n)
        mirror = lambda x: np.sum(x[:, :n])
    else:  # concat
        other = nm.as_f32(r.normal(size=(m, n)))
        build = lambda x: nm.concat([x, other], axis=0)
        mirror = lambda x: np.sum(np.concatenate([x, np.float64(1) * other]))

    tape = nm.Tape()
    x = tape.input("x", x0)
    rec = tape.finalize(nm.reduce_sum(build(x)))
    got = rec.vjp(ct, wrt=["x"])["x"]
    want = ct.item() * fd_grad(mirror, x0)
    assert_close(got, want, rtol=1e-4, atol=1e-5)


def test_primitive_grads_match_fd_100_cases():
    for seed in range(120):
        _fd_case(seed)


def test_grad_accumulates_over_reused_node():
    # y = x*x + x used twice more via concat; d/dx = 2x + 2
    tape = nm.Tape()
    x = tape.input("x", [3.0])
    y = nm.add(nm.mul(x, x), nm.reduce_sum(nm.concat([x, x]), keepdims=True))
    rec = tape.finalize(nm.reduce_sum(y))
    got = rec.vjp(np.float32(1.0), wrt=["x"])["x"]
    assert_close(got, [8.0], rtol=0, atol=1e-6)


def test_cotangent_shape_checked():
    tape = nm.Tape()
    x = tape.input("x", np.ones((2, 2), np.float32))
    rec = tape.finalize(nm.mul(x, x))
    with pytest.raises(DimensionError):
        rec.vjp(np.ones((3,), np.float32), wrt=["x"])


def test_layer_norm_forward_and_grad():
    r = _rng(7)
    x0 = r.normal(size=(4, 8))

    def mirror(x):
        mu = x.mean(axis=-1, keepdims=True)
        c = x - mu
        var = (c * c).mean(axis=-1, keepdims=True)
        return np.sum(c / np.sqrt(var + 1e-5))

    out = nm.layer_norm(nm.as_f32(x0))
    assert_close(out.mean(axis=-1), np.zeros(4), rtol=0, atol=1e-6)
    assert_close((out * out).mean(axis=-1), np.ones(4), rtol=0, atol=1e-3)

    tape = nm.Tape()
    x = tape.input("x", x0)
    rec = tape.finalize(nm.reduce_sum(nm.layer_norm(x)))
    got = rec.vjp(np.float32(1.0), wrt=["x"])["x"]
    assert_close(got, fd_grad(mirror, x0), rtol=1e-3, atol=1e-4)


def test_repeat_run_bitwise_identical():
    r = _rng(8)
    q = nm.tensor(r.normal(size=(3, 6, 4)))
    k = nm.tensor(r.normal(size=(3, 5, 4)))
    a = nm.softmax_rows(nm.scaled_attention_scores(q, k))
    b = nm.softmax_rows(nm.scaled_attention_scores(q, k))
    assert a.tobytes() == b.tobytes()
