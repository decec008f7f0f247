import math

import numpy as np
import pytest

from meshnet import tensor as T
from meshnet.gradcheck import check_gradients
from meshnet.optim import SGD, SgdState, multistep_lr, sgd_step
from meshnet.tensor import Tensor


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_shape_error_names_op():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_reduce_max_first_index_gets_gradient():
    a = Tensor([3.0, 1.0, 3.0], requires_grad=True)
    out = T.reduce_max(a, axis=0)
    assert float(out.data) == 3.0
    out.backward()
    np.testing.assert_array_equal(a.grad, [1, 0, 0])


def test_cross_entropy_uniform_is_ln2():
    loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
    assert float(loss.data) == pytest.approx(math.log(2), rel=1e-6)


def test_sum_of_squares_gradient():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.reduce_sum(w * w).backward()
    np.testing.assert_allclose(w.grad, [2, 4, 6])


def test_double_backward_is_an_error():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(w * w)
    loss.backward()
    with pytest.raises(T.GraphError):
        loss.backward()


def test_backward_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.GraphError, match="scalar"):
        (w * w).backward()


def test_detached_tensor_gets_no_grad():
    w = Tensor([1.0, 2.0], requires_grad=True)
    d = w.detach()
    T.reduce_sum(d * w).backward()
    assert d.grad is None
    np.testing.assert_allclose(w.grad, [1, 2])


def test_no_grad_builds_no_graph():
    w = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = w * w
    assert not out.requires_grad


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    with T.precision(np.float64):
        logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        labels = rng.integers(0, 4, 5)
        T.softmax_cross_entropy(logits, labels).backward()
    z = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    p[np.arange(5), labels] -= 1
    np.testing.assert_allclose(logits.grad, p / 5, atol=1e-12)


def test_gather_and_concat_gradients(rng):
    with T.precision(np.float64):
        a = Tensor(rng.normal(size=(2, 5, 3)))
        b = Tensor(rng.normal(size=(2, 5, 2)))
        idx = rng.integers(0, 5, (2, 5, 4))
        w = rng.normal(size=(2, 5, 4, 5))

        def loss():
            return T.reduce_sum(T.gather(T.concat([a, b], axis=-1), idx, axis=1) * w)

        res = check_gradients("gather", loss, [a, b], rng)
    assert res.passed, res


def test_reduce_mean_is_order_exact(rng):
    x = rng.normal(size=(7, 4)).astype(np.float32)
    a = T.reduce_mean(Tensor(x), axis=1).data
    b = T.reduce_mean(Tensor(x[:, ::-1].copy()), axis=1).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradcheck(rng, training):
    with T.precision(np.float64):
        x = Tensor(rng.normal(size=(3, 4, 5)))
        gamma = Tensor(rng.normal(size=5))
        beta = Tensor(rng.normal(size=5))
        rm, rv = rng.normal(size=5), rng.uniform(0.5, 2, 5)
        w = rng.normal(size=(3, 4, 5))

        def loss():
            out = T.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training=training)
            return T.reduce_sum(out * w)

        res = check_gradients("batch_norm", loss, [x, gamma, beta], rng)
    assert res.passed, res


def test_batch_norm_running_stats_update():
    x = Tensor(np.array([[1.0], [3.0]]))
    rm, rv = np.zeros(1), np.ones(1)
    T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True, momentum=0.9)
    assert rm[0] == pytest.approx(0.2)
    assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)  # unbiased batch variance is 2


def test_dropout_is_identity_in_eval(rng):
    x = Tensor(rng.normal(size=(4, 6)))
    assert np.array_equal(T.dropout(x, 0.5, rng, training=False).data, x.data)
    y = T.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    z = T.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert np.array_equal(y, z)
    kept = y != 0
    np.testing.assert_allclose(y[kept], 2 * x.data[kept], rtol=1e-6)


def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with np.errstate(over="ignore"), pytest.raises(T.NonFiniteError):
            T.exp(Tensor([1000.0]))
    finally:
        T.set_debug(False)


# ------------------------------------------------------------------ SGD

def _one_param(value=0.0):
    return {"p": Tensor(np.array([value]), requires_grad=True)}


def test_sgd_single_step():
    params = _one_param()
    sgd_step(params, {"p": np.array([1.0])}, SgdState(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert params["p"].data[0] == pytest.approx(-0.1)


def test_sgd_momentum_two_steps():
    params = _one_param()
    state = SgdState(lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        sgd_step(params, {"p": np.array([1.0])}, state)
    assert params["p"].data[0] == pytest.approx(-0.29)


def test_weight_decay_is_geometric_without_gradient():
    params = _one_param(1.0)
    opt = SGD(params, lr=0.1, momentum=0.0, weight_decay=0.0005)
    for _ in range(10):
        params["p"].grad = np.zeros(1)
        opt.step()
    assert params["p"].data[0] == pytest.approx((1 - 0.1 * 0.0005) ** 10, rel=1e-6)


def test_multistep_schedule():
    assert multistep_lr(0.01, 29, (30, 60)) == 0.01
    assert multistep_lr(0.01, 30, (30, 60)) == pytest.approx(0.001)
    assert multistep_lr(0.01, 60, (30, 60)) == pytest.approx(0.0001)
