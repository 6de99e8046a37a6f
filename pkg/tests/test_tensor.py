import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmoe import tensor as T
from mdmoe.tensor import Tensor, grad_check

SEEDS = range(20)


def p64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True, dtype=np.float64)


def weighted(out: Tensor, rng) -> Tensor:
    # random linear read-out so every output element matters
    w = rng.normal(size=out.shape)
    return T.sum_(T.mul(out, w))


def _case(name, rng):
    """(loss closure, params) for one op on random small shapes."""
    m, k, n = rng.integers(1, 5, size=3)
    if name == "matmul":
        a, b = p64(rng, m, k), p64(rng, k, n)
        return lambda: weighted(T.matmul(a, b), rng_fixed(a)), [a, b]
    if name == "batched_matmul":
        a, b = p64(rng, 2, m, k), p64(rng, k, n)
        return lambda: weighted(a @ b, rng_fixed(a)), [a, b]
    if name == "add_broadcast":
        a, b = p64(rng, m, k), p64(rng, k)
        return lambda: weighted(a + b, rng_fixed(a)), [a, b]
    if name == "mul":
        a, b = p64(rng, m, k), p64(rng, m, k)
        return lambda: weighted(a * b, rng_fixed(a)), [a, b]
    if name == "reciprocal":
        a = Tensor(rng.uniform(0.5, 2.0, size=(m, k)), requires_grad=True, dtype=np.float64)
        return lambda: weighted(T.reciprocal(a), rng_fixed(a)), [a]
    if name == "exp_log":
        a = Tensor(rng.uniform(0.5, 2.0, size=(m, k)), requires_grad=True, dtype=np.float64)
        return lambda: weighted(T.log(a) + T.exp(a), rng_fixed(a)), [a]
    if name == "square_silu":
        a = p64(rng, m, k)
        return lambda: weighted(T.square(a) + T.silu(a), rng_fixed(a)), [a]
    if name == "softmax":
        a = p64(rng, m, k + 1)
        return lambda: weighted(T.softmax(a, axis=-1), rng_fixed(a)), [a]
    if name == "log_softmax":
        a = p64(rng, m, k + 1)
        return lambda: weighted(T.log_softmax(a, axis=-1), rng_fixed(a)), [a]
    if name == "logsumexp":
        a = p64(rng, m, k + 1)
        return lambda: weighted(T.logsumexp(a, axis=-1), rng_fixed(a)), [a]
    if name == "rms_norm":
        x, g = p64(rng, m, 2 * k), p64(rng, 2 * k)
        return lambda: weighted(T.rms_norm(x, g, 1e-6), rng_fixed(x)), [x, g]
    if name == "rope":
        x = p64(rng, m, 2 * k)
        ang = rng.uniform(0, 6, size=(m, k))
        return lambda: weighted(T.rope(x, np.cos(ang), np.sin(ang)), rng_fixed(x)), [x]
    if name == "embedding":
        w = p64(rng, 5, k)
        ids = rng.integers(0, 5, size=(m, 3))
        return lambda: weighted(T.embedding(w, ids), rng_fixed(w)), [w]
    if name == "take_scatter":
        a, b = p64(rng, 4, k), p64(rng, 3, k)
        rows = rng.integers(0, 4, size=3)
        return lambda: weighted(T.scatter_add_rows(a, rows, T.take_rows(b, [2, 0, 2])), rng_fixed(a)), [a, b]
    if name == "gather":
        a = p64(rng, 4, 5)
        r, c = rng.integers(0, 4, 6), rng.integers(0, 5, 6)
        idx = rng.integers(0, 5, size=(4, 2))
        return lambda: weighted(T.gather_elements(a, r, c), rng_fixed(a)) + weighted(T.take_along(a, idx), rng_fixed(a)), [a]
    if name == "cross_entropy":
        a = p64(rng, 6, 5)
        tgt, w = rng.integers(0, 5, 6), rng.uniform(0.1, 2, 6)
        return lambda: T.cross_entropy(a, tgt, w), [a]
    if name == "reduce_reshape":
        a = p64(rng, 2, m, k)
        return lambda: weighted(T.mean(T.transpose(a, (1, 0, 2)).reshape(m, -1), axis=0) + T.sum_(a), rng_fixed(a)), [a]
    if name == "concat":
        a, b = p64(rng, m, k), p64(rng, 2, k)
        return lambda: weighted(T.concat([a, b], axis=0), rng_fixed(a)), [a, b]
    raise KeyError(name)


def rng_fixed(t: Tensor):
    # read-out weights depend only on the shape, so every call sees the same ones
    return np.random.default_rng(hash(t.shape) % (2**32))


OPS = [
    "matmul", "batched_matmul", "add_broadcast", "mul", "reciprocal", "exp_log", "square_silu", "softmax",
    "log_softmax", "logsumexp", "rms_norm", "rope", "embedding", "take_scatter", "gather", "cross_entropy",
    "reduce_reshape", "concat",
]


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_over_seeds(op):
    worst = 0.0
    for seed in SEEDS:
        f, params = _case(op, np.random.default_rng(seed))
        worst = max(worst, grad_check(f, params))
    assert worst < 1e-5, (op, worst)


def test_grad_check_trivial_cases():
    x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    assert grad_check(lambda: T.sum_(T.square(x)), [x]) < 1e-9
    assert x.grad[0] == pytest.approx(6.0)
    c = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    assert grad_check(lambda: T.sum_(c * 0.0) + 5.0, [c]) == 0.0
    assert np.all(c.grad == 0.0)


def test_grad_check_requires_float64():
    x = Tensor(np.ones(2), requires_grad=True, dtype=np.float32)
    with pytest.raises(TypeError):
        grad_check(lambda: T.sum_(x), [x])


def test_grad_check_skips_piece_boundaries():
    # |x| has a kink at 0; with the piece label the straddling stencil is refined
    x = Tensor(np.array([5e-5]), requires_grad=True, dtype=np.float64)
    f = lambda: T.sum_(T.mul(x, np.sign(x.data)))
    assert grad_check(f, [x], piece=lambda: bool(x.data[0] > 0)) < 1e-9


def test_matmul_examples():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.tensor([[5.0], [6.0]])
    np.testing.assert_allclose((a @ b).data, [[17.0], [39.0]])
    eye = T.tensor(np.eye(2))
    np.testing.assert_array_equal((eye @ a).data, a.data)
    with pytest.raises(ValueError):
        T.matmul(a, T.tensor(np.ones((3, 1))))


def test_matmul_gradient_is_column_sums():
    rng = np.random.default_rng(0)
    A = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    B = Tensor(rng.normal(size=(4, 2)), requires_grad=True, dtype=np.float64)
    T.sum_(A @ B).backward()
    np.testing.assert_allclose(A.grad, np.tile(B.data.sum(axis=1), (3, 1)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(T.tensor([0.0, 0, 0, 0])).data, [0.25] * 4)
    np.testing.assert_allclose(T.softmax(T.tensor([2.0, 1, 0, -1]), axis=-1).data, [0.6439, 0.2369, 0.0871, 0.0321], atol=1e-3)
    out = T.softmax(T.tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0)


def test_logsumexp_examples():
    assert T.logsumexp(T.tensor([0.0, 0.0], dtype=np.float64)).item() == pytest.approx(math.log(2))
    assert T.logsumexp(T.tensor([math.log(2)] * 2, dtype=np.float64)).item() == pytest.approx(math.log(4))
    assert T.logsumexp(T.tensor([1000.0, 1000.0], dtype=np.float64)).item() == pytest.approx(1000 + math.log(2))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_and_logsumexp_properties(xs):
    x = T.tensor(np.array(xs), dtype=np.float64)
    s = T.softmax(x).data
    assert abs(s.sum() - 1.0) < 1e-6 and np.all(s >= 0)
    lse = T.logsumexp(x).item()
    assert lse >= max(xs) - 1e-9
    assert lse <= max(xs) + math.log(len(xs)) + 1e-9


def test_non_finite_detection():
    with pytest.raises(T.NonFiniteError):
        T.check_finite(T.tensor([1.0, np.nan]))
    x = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    with pytest.raises(T.NonFiniteError):
        grad_check(lambda: T.sum_(T.log(x - 1.0)), [x])


def test_shape_and_grad_invariants():
    rng = np.random.default_rng(1)
    a = p64(rng, 3, 4)
    assert a.data.size == int(np.prod(a.shape))
    loss = T.sum_(T.softmax(a @ p64(rng, 4, 5)))
    loss.backward()
    assert a.grad.shape == a.shape


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    T.sum_(x * x + x).backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad


def test_precision_context():
    assert T.default_dtype() == np.float32
    with T.precision(np.float64):
        assert T.tensor([1.0]).dtype == np.float64
    assert T.tensor([1.0]).dtype == np.float32


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(8, 16)).astype(np.float32)
    w = rng.normal(size=(16, 16)).astype(np.float32)
    outs = [T.softmax(T.tensor(data) @ T.tensor(w)).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])
