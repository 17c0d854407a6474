import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csfm import tensor as T
from csfm.errors import ContractError, DimensionError, NumericError
from csfm.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- forward oracles


def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_matches_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    np.testing.assert_allclose(T.matmul(t64(a), t64(b)).data, matmul_loops(a, b), rtol=1e-12, atol=1e-12)


def test_batched_matmul_against_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 2, 4, 5)), rng.normal(size=(3, 2, 5, 2))
    out = T.matmul(t64(a), t64(b)).data
    for i in range(3):
        for j in range(2):
            np.testing.assert_allclose(out[i, j], matmul_loops(a[i, j], b[i, j]), atol=1e-12)


def test_softmax_formula():
    x = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])
    out = T.softmax(t64(x)).data
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    np.testing.assert_allclose(out[0], [v / sum(e) for v in e], rtol=1e-12)
    np.testing.assert_allclose(out[1], [1 / 3] * 3, rtol=1e-12)


def test_layer_norm_formula():
    rng = np.random.default_rng(1)
    x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
    out = T.layer_norm(t64(x), t64(g), t64(b), eps=1e-5).data
    for row, o in zip(x, out):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        expected = [(v - mu) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(row, g, b)]
        np.testing.assert_allclose(o, expected, rtol=1e-10)


def test_gelu_is_exact_erf_form():
    xs = np.linspace(-4, 4, 17)
    out = T.gelu(t64(xs)).data
    np.testing.assert_allclose(out, [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in xs], rtol=1e-12, atol=1e-15)


def conv1d_loops(x, w, bias, stride, padding):
    B, C, L = x.shape
    O, _, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    n = (L + 2 * padding - K) // stride + 1
    out = np.zeros((B, O, n))
    for b in range(B):
        for o in range(O):
            for i in range(n):
                out[b, o, i] = np.sum(xp[b, :, i * stride:i * stride + K] * w[o]) + bias[o]
    return out


def conv_transpose_loops(x, w, bias, stride, padding):
    B, C, L = x.shape
    _, O, K = w.shape
    full = np.zeros((B, O, (L - 1) * stride + K))
    for b in range(B):
        for c in range(C):
            for i in range(L):
                full[b, :, i * stride:i * stride + K] += x[b, c, i] * w[c]
    out = full[:, :, padding:full.shape[2] - padding]
    return out + bias[None, :, None]


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv1d_matches_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.normal(size=(2, 3, 11)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    out = T.conv1d(t64(x), t64(w), t64(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(out, conv1d_loops(x, w, b, stride, padding), atol=1e-12)
    assert out.shape[-1] == T.conv_output_length(11, 3, stride, padding)


@pytest.mark.parametrize("stride,kernel,padding", [(1, 3, 1), (2, 4, 1), (5, 9, 2), (10, 20, 5)])
def test_conv_transpose_matches_loops(stride, kernel, padding):
    rng = np.random.default_rng(stride + kernel)
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 2, kernel)), rng.normal(size=2)
    out = T.conv1d_transpose(t64(x), t64(w), t64(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(out, conv_transpose_loops(x, w, b, stride, padding), atol=1e-12)
    assert out.shape[-1] == T.conv_transpose_output_length(4, kernel, stride, padding) == (4 - 1) * stride - 2 * padding + kernel


def test_losses_match_formulas():
    z = np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 0.0]])
    y = np.array([0, 2])
    ce = T.cross_entropy_with_logits(t64(z), y).item()
    manual = [-(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(2)]
    assert ce == pytest.approx(sum(manual) / 2, rel=1e-12)
    logits, target, weight = np.array([3.0, -2.0, 0.1]), np.array([1.0, 0.0, 1.0]), np.array([1.0, 0.0, 2.0])
    bce = T.binary_cross_entropy_with_logits(t64(logits), target, weight).item()
    terms = [math.log1p(math.exp(-l)) if t else math.log1p(math.exp(l)) for l, t in zip(logits, target)]
    assert bce == pytest.approx(sum(w * v for w, v in zip(weight, terms)) / weight.sum(), rel=1e-12)
    assert T.mse_loss(t64([1.0, 3.0]), np.array([0.0, 0.0])).item() == pytest.approx(5.0)


def test_uniform_logits_give_log_n_cross_entropy():
    assert T.cross_entropy_with_logits(t64(np.zeros((3, 5))), [0, 1, 4]).item() == pytest.approx(math.log(5))


# ---------------------------------------------------------------- tape semantics


def test_ops_outside_tape_record_nothing():
    a = t64([1.0, 2.0], grad=True)
    out = T.add(a, a)
    assert not out.requires_grad
    with T.Tape() as tape:
        T.add(a, t64([1.0, 1.0]))
        T.add(t64([1.0]), t64([2.0]))  # no input requires grad
    assert len(tape) == 1


def test_backward_accumulates_shared_inputs():
    a = t64([2.0, -3.0], grad=True)
    with T.Tape() as tape:
        loss = T.sum_(T.mul(a, a))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, [4.0, -6.0])


def test_backward_requires_scalar():
    a = t64([1.0, 2.0], grad=True)
    with T.Tape() as tape:
        out = T.scale(a, 2.0)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_leading_dim_broadcast_only():
    a = t64(np.ones((2, 3, 4)), grad=True)
    b = t64(np.arange(4.0), grad=True)
    with T.Tape() as tape:
        loss = T.sum_(T.add(a, b))
    tape.backward(loss)
    np.testing.assert_allclose(b.grad, np.full(4, 6.0))
    with pytest.raises(DimensionError):
        T.add(a, t64(np.ones((3, 1))))


def test_non_finite_output_raises_with_op_name():
    with pytest.raises(NumericError) as info, np.errstate(over="ignore"):
        T.mul(t64([1e300]), t64([1e300]))
    assert info.value.op == "mul"


def test_precision_switch():
    assert T.get_default_dtype() is np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ContractError):
        T.set_default_dtype(np.int32)


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3)))
    for out in (T.gelu(x), T.sigmoid(x), T.scale(x, 0.5), T.softmax(x)):
        assert out.dtype == np.float32


def test_grad_check_rejects_float32():
    with pytest.raises(ContractError):
        T.grad_check(lambda a: T.sum_(a), [Tensor([1.0])])


def test_slice_rejects_fancy_index():
    with pytest.raises(DimensionError):
        T.slice_(t64(np.ones(4)), ([0, 1],))


# ---------------------------------------------------------------- gradient checks (per op)

N_DRAWS = 20
TOL = 1e-6


def _checked(f, make, n=N_DRAWS):
    worst = 0.0
    for seed in range(n):
        rng = np.random.default_rng(seed)
        worst = max(worst, T.grad_check(f, [t64(a) for a in make(rng)]))
    return worst


def _weighted(out, rng_seed=99):
    # random projection turns any output into a scalar with generic gradients
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return T.sum_(T.mul(out, Tensor(w, dtype=out.dtype)))


OP_CASES = {
    "add": (lambda a, b: _weighted(T.add(a, b)), lambda r: [r.normal(size=(2, 3)), r.normal(size=3)]),
    "sub": (lambda a, b: _weighted(T.sub(a, b)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "mul": (lambda a, b: _weighted(T.mul(a, b)), lambda r: [r.normal(size=(2, 3)), r.normal(size=3)]),
    "scale": (lambda a: _weighted(T.scale(a, -1.7)), lambda r: [r.normal(size=(3, 2))]),
    "gelu": (lambda a: _weighted(T.gelu(a)), lambda r: [r.normal(size=(2, 4))]),
    "sigmoid": (lambda a: _weighted(T.sigmoid(a)), lambda r: [r.normal(size=(2, 4))]),
    "matmul": (lambda a, b: _weighted(T.matmul(a, b)), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))]),
    "matmul_shared": (lambda a, b: _weighted(T.matmul(a, b)), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
    "linear": (lambda x, w, b: _weighted(T.linear(x, w, b)), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 3)), r.normal(size=3)]),
    "transpose": (lambda a: _weighted(T.transpose(a, (2, 0, 1))), lambda r: [r.normal(size=(2, 3, 4))]),
    "reshape": (lambda a: _weighted(T.reshape(a, (4, 3))), lambda r: [r.normal(size=(2, 6))]),
    "concat": (lambda a, b: _weighted(T.concat([a, b], axis=1)), lambda r: [r.normal(size=(2, 2, 3)), r.normal(size=(2, 1, 3))]),
    "slice": (lambda a: _weighted(T.slice_(a, (slice(None), slice(1, 3)))), lambda r: [r.normal(size=(2, 4, 2))]),
    "embedding_lookup": (lambda w: _weighted(T.embedding_lookup(w, np.array([[0, 2], [2, 3]]))), lambda r: [r.normal(size=(4, 3))]),
    "take_tokens": (lambda a: _weighted(T.take_tokens(a, np.array([[3, 0], [1, 1]]))), lambda r: [r.normal(size=(2, 4, 3))]),
    "sum": (lambda a: _weighted(T.sum_(a, axis=1)), lambda r: [r.normal(size=(2, 3, 2))]),
    "mean": (lambda a: _weighted(T.mean(a, axis=(0, 2), keepdims=True)), lambda r: [r.normal(size=(2, 3, 2))]),
    "softmax": (lambda a: _weighted(T.softmax(a, axis=-1)), lambda r: [r.normal(size=(2, 5))]),
    "layer_norm": (lambda x, g, b: _weighted(T.layer_norm(x, g, b)), lambda r: [r.normal(size=(3, 5)), r.normal(size=5), r.normal(size=5)]),
    "mse_loss": (lambda a: T.mse_loss(a, np.linspace(-1, 1, 6).reshape(2, 3)), lambda r: [r.normal(size=(2, 3))]),
    "cross_entropy": (lambda a: T.cross_entropy_with_logits(a, np.array([0, 2, 1])), lambda r: [r.normal(size=(3, 4))]),
    "binary_cross_entropy": (
        lambda a: T.binary_cross_entropy_with_logits(a, np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.5], [0.0, 2.0]])),
        lambda r: [r.normal(size=(2, 2)) * 2],
    ),
    "conv1d": (lambda x, w, b: _weighted(T.conv1d(x, w, b, stride=2, padding=1)), lambda r: [r.normal(size=(2, 2, 7)), r.normal(size=(3, 2, 3)), r.normal(size=3)]),
    "conv1d_transpose": (
        lambda x, w, b: _weighted(T.conv1d_transpose(x, w, b, stride=2, padding=1)),
        lambda r: [r.normal(size=(2, 2, 3)), r.normal(size=(2, 3, 4)), r.normal(size=3)],
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    f, make = OP_CASES[name]
    assert _checked(f, make) < TOL


def test_worked_examples():
    np.testing.assert_array_equal(T.matmul(t64([[1, 0], [0, 1]]), t64([[2, 3], [4, 5]])).data, [[2, 3], [4, 5]])
    assert T.matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11.0]]
    np.testing.assert_allclose(T.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])
    big = T.softmax(t64([1000.0, 0.0])).data
    assert big[0] == 1.0 and big[1] < 1e-300
    ln = T.layer_norm(t64([1.0, 3.0]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-12).data
    np.testing.assert_allclose(ln, [-1.0, 1.0], atol=1e-9)
    np.testing.assert_array_equal(T.layer_norm(t64([2.0, 2.0, 2.0]), t64(np.ones(3)), t64(np.zeros(3))).data, 0.0)
    assert T.gelu(t64([0.0])).item() == 0.0
    assert T.cross_entropy_with_logits(t64([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2))
    assert T.conv_output_length(10, 3, 1, 1) == 10


def test_grad_check_polynomial():
    assert T.grad_check(lambda x: T.mul(x, x), [t64([3.0])]) < 1e-10


def test_grad_check_linear_mse():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    err = T.grad_check(lambda w, b: T.mse_loss(T.linear(t64(x), w, b), np.ones((4, 2))),
                       [t64(rng.normal(size=(3, 2))), t64(rng.normal(size=2))])
    assert err < 1e-6
