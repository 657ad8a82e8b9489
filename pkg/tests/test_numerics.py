import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from offline_rlhf import numerics as nx
from offline_rlhf.numerics import Tensor

from conftest import finite_difference


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def fd_grad(fn, x: np.ndarray, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        g[idx] = finite_difference(lambda: fn(x).item(), x, idx, h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(nx.matmul(Tensor(a), Tensor(np.eye(4))).data, a)


def test_matmul_hand_value():
    out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_grad_is_row_broadcast_of_column_sums():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 5)))
    nx.backward(nx.tsum(nx.matmul(a, b)))
    expected = np.tile(b.data.sum(axis=1), (3, 1))
    numeric = fd_grad(lambda x: nx.tsum(nx.matmul(Tensor(x), b)), a.data.copy())
    assert np.allclose(a.grad, expected, rtol=1e-12)
    assert rel_err(a.grad, numeric) < 1e-8


def test_matmul_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_grads():
    rng = np.random.default_rng(2)
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    c = leaf(rng.normal(size=(2, 5, 3)))
    nx.backward(nx.tsum(nx.matmul(nx.matmul(a, b), c)))
    for t, fn in [
        (a, lambda x: nx.tsum(nx.matmul(nx.matmul(Tensor(x), b.data), c.data))),
        (b, lambda x: nx.tsum(nx.matmul(nx.matmul(a.data, Tensor(x)), c.data))),
        (c, lambda x: nx.tsum(nx.matmul(nx.matmul(a.data, b.data), Tensor(x)))),
    ]:
        assert rel_err(t.grad, fd_grad(fn, t.data.copy())) < 1e-8


# --- softmax ------------------------------------------------------------------

def test_softmax_values():
    assert nx.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    big = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    p = nx.softmax(Tensor([math.log(1), math.log(3)])).data
    assert p == pytest.approx([0.25, 0.75], abs=1e-15)


def test_softmax_nan_propagates():
    assert np.isnan(nx.softmax(Tensor([np.nan, 0.0])).data).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax(Tensor(x), axis=-1).data
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all((p >= 0) & (p <= 1))


def test_softmax_grad():
    rng = np.random.default_rng(3)
    x, w = leaf(rng.normal(size=(3, 5))), rng.normal(size=(3, 5))
    nx.backward(nx.tsum(nx.softmax(x) * w))
    numeric = fd_grad(lambda v: nx.tsum(nx.softmax(Tensor(v)) * w), x.data.copy())
    assert rel_err(x.grad, numeric) < 1e-8


# --- cross entropy --------------------------------------------------------------

def test_cross_entropy_uniform_is_log_vocab():
    v = 7
    loss = nx.cross_entropy(Tensor(np.zeros((4, v))), [0, 3, 6, 2], np.ones(4))
    assert loss.item() == pytest.approx(math.log(v), abs=1e-14)


def test_cross_entropy_masked_token_contributes_nothing():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 5))
    a = nx.cross_entropy(Tensor(logits), [1, 2, 3], [1, 1, 0]).item()
    logits[2] += 100.0
    b = nx.cross_entropy(Tensor(logits), [1, 2, 4], [1, 1, 0]).item()
    assert a == b


def test_cross_entropy_two_token_high_precision():
    logits = [[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]]
    targets = [2, 1]
    mpmath.mp.dps = 50
    nll = []
    for row, t in zip(logits, targets):
        z = mpmath.log(mpmath.fsum(mpmath.e ** mpmath.mpf(v) for v in row))
        nll.append(z - mpmath.mpf(row[t]))
    expected = float((nll[0] + nll[1]) / 2)
    got = nx.cross_entropy(Tensor(logits), targets, [1, 1]).item()
    assert got == pytest.approx(expected, abs=1e-15)


def test_cross_entropy_all_masked_errors():
    with pytest.raises(ValueError, match="no supervised tokens"):
        nx.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [0, 0])


def test_cross_entropy_grad():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(2, 4, 6)))
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[0, 1, 1, 0], [1, 1, 1, 1]], dtype=float)
    nx.backward(nx.cross_entropy(x, targets, mask))
    numeric = fd_grad(lambda v: nx.cross_entropy(Tensor(v), targets, mask), x.data.copy())
    assert rel_err(x.grad, numeric) < 1e-8


# --- elementwise and norm grads --------------------------------------------------

@pytest.mark.parametrize("op", [nx.exp, nx.sigmoid, nx.silu, nx.softplus,
                                lambda t: nx.log(nx.exp(t) + 1.0),
                                lambda t: nx.mean(t, axis=1),
                                lambda t: nx.transpose(t, (1, 0)) / 3.0,
                                lambda t: t[[0, 2, 0]]])
def test_elementwise_grads(op):
    rng = np.random.default_rng(6)
    x = leaf(rng.normal(size=(3, 4)))
    out = op(x)
    w = rng.normal(size=out.shape)
    nx.backward(nx.tsum(out * w))
    numeric = fd_grad(lambda v: nx.tsum(op(Tensor(v)) * w), x.data.copy())
    assert rel_err(x.grad, numeric) < 1e-8


def test_rmsnorm_grad():
    rng = np.random.default_rng(7)
    x, g = leaf(rng.normal(size=(2, 3, 5))), leaf(rng.normal(size=5))
    w = rng.normal(size=(2, 3, 5))
    nx.backward(nx.tsum(nx.rmsnorm(x, g) * w))
    assert rel_err(x.grad, fd_grad(lambda v: nx.tsum(nx.rmsnorm(Tensor(v), g.data) * w), x.data.copy())) < 1e-8
    assert rel_err(g.grad, fd_grad(lambda v: nx.tsum(nx.rmsnorm(x.data, Tensor(v)) * w), g.data.copy())) < 1e-8


def test_embedding_grad_accumulates_repeated_ids():
    w = leaf(np.arange(12.0).reshape(4, 3))
    nx.backward(nx.tsum(nx.embedding(w, np.array([[1, 1], [3, 0]]))))
    assert w.grad.tolist() == [[1] * 3, [2] * 3, [0] * 3, [1] * 3]


# --- backward semantics -------------------------------------------------------------

def test_sum_of_params_gives_unit_grads():
    a, b = leaf(np.ones((2, 2))), leaf(np.ones(3))
    nx.backward(nx.tsum(a) + nx.tsum(b))
    assert np.all(a.grad == 1) and np.all(b.grad == 1)


def test_backward_non_scalar_root_errors():
    with pytest.raises(nx.GradientError):
        nx.backward(leaf(np.ones(3)) * 2.0)


def test_second_backward_on_same_graph_errors():
    a = leaf([1.0, 2.0])
    loss = nx.tsum(a * a)
    nx.backward(loss)
    with pytest.raises(nx.GradientError, match="consumed"):
        nx.backward(loss)


def test_backward_without_zeroing_errors():
    a = leaf([1.0, 2.0])
    nx.backward(nx.tsum(a))
    with pytest.raises(nx.GradientError, match="zeroed"):
        nx.backward(nx.tsum(a * 3.0))
    nx.zero_grad([a])
    nx.backward(nx.tsum(a * 3.0))
    assert a.grad.tolist() == [3.0, 3.0]


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with nx.no_grad():
        out = a * 2.0
    assert not out.requires_grad


def test_deterministic_bitwise():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 6))
    r1 = nx.softmax(nx.matmul(Tensor(x), Tensor(x.T))).data
    r2 = nx.softmax(nx.matmul(Tensor(x), Tensor(x.T))).data
    assert r1.tobytes() == r2.tobytes()


# --- Adam -----------------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    out = nx.adam_step(p, {"w": np.zeros(2)}, nx.AdamState(), lr=0.1)
    assert np.array_equal(out["w"], p["w"])


def test_adam_first_step():
    # bias-corrected m_hat = 1, v_hat = 1  ->  step = lr / (1 + eps)
    out = nx.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, nx.AdamState(), lr=0.1)
    assert out["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_minimises_quadratic():
    state = nx.AdamState()
    p = {"w": np.array([3.0])}
    for _ in range(2000):
        p = nx.adam_step(p, {"w": 2 * p["w"]}, state, lr=0.05)
    assert abs(p["w"][0]) < 1e-2
    assert state.step == 2000


def test_clip_grad_norm_bounds_global_norm():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
    clipped, before = nx.clip_grad_norm(grads, 1.0)
    after = math.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
    assert before == pytest.approx(13.0) and after <= 1.0


def test_clip_grad_norm_ignores_dict_order():
    rng = np.random.default_rng(9)
    grads = {f"p{i}": rng.normal(size=(7, 5)) * 10.0 ** rng.integers(-4, 4) for i in range(12)}
    reordered = dict(reversed(list(grads.items())))
    a, na = nx.clip_grad_norm(grads, 1e-3)
    b, nb = nx.clip_grad_norm(reordered, 1e-3)
    assert na == nb and all(np.array_equal(a[k], b[k]) for k in grads)
