import numpy as np
import pytest

import autodiff as ad
from autodiff import Parameter, Tensor, no_grad
from errors import NonFiniteError, ShapeError, StateError
from optimizer import grad_check


def _param(name, shape, rng, low=-1.0, high=1.0):
    return Parameter(name, rng.uniform(low, high, size=shape))


def _assert_gradients(closure, params, tolerance=1e-5):
    report = grad_check(closure, params, tolerance=tolerance, max_entries=None)
    assert report.deterministic
    assert report.passed, report.max_relative_error


UNARY = {
    "exp": lambda a: ad.exp(a),
    "tanh": lambda a: ad.tanh(a),
    "sigmoid": lambda a: ad.sigmoid(a),
    "softsign": lambda a: ad.softsign(a),
    "softmax": lambda a: ad.softmax(a),
    "log_softmax": lambda a: ad.log_softmax(a),
    "square": lambda a: a**2,
    "transpose": lambda a: a.T,
    "reshape": lambda a: a.reshape(12),
    "row_slice": lambda a: a[1:],
    "fancy_index": lambda a: a[[0, 0, 2]],
    "sum_axis": lambda a: a.sum(axis=0),
    "mean_axis": lambda a: a.mean(axis=1, keepdims=True),
    "broadcast": lambda a: ad.broadcast_to(a[:1], (5, 4)),
    "gated": lambda a: ad.gated_activation(a.T, 2),
}


@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_gradients(op, rng):
    a = _param("a", (3, 4), rng)
    weights = rng.normal(size=UNARY[op](Tensor(a.data)).shape)
    _assert_gradients(lambda: (UNARY[op](a) * weights).sum(), {"a": a})


def test_log_and_abs_away_from_kinks(rng):
    a = _param("a", (3, 4), rng, 0.5, 2.0)
    b = Parameter("b", rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.5, 1.0, size=(3, 4)))
    _assert_gradients(lambda: (ad.log(a) * ad.absolute(b)).sum() + ad.relu(b).sum(), {"a": a, "b": b})


def test_binary_gradients_with_broadcasting(rng):
    a = _param("a", (3, 4), rng)
    b = _param("b", (4,), rng, 0.5, 1.5)
    c = _param("c", (3, 1), rng)

    def closure():
        return ((a + b) * c - a / b + (c - a)).sum()

    _assert_gradients(closure, {"a": a, "b": b, "c": c})


def test_matmul_and_concat(rng):
    a = _param("a", (2, 3, 4), rng)
    w = _param("w", (4, 5), rng)
    b = _param("b", (3, 2), rng)

    def closure():
        h = ad.matmul(a, w).reshape(6, 5)
        return ad.tanh(ad.concat([h, b.reshape(6, 1)], axis=1)).sum()

    _assert_gradients(closure, {"a": a, "w": w, "b": b})


def test_losses(rng):
    logits = _param("logits", (6, 5), rng)
    pred = _param("pred", (4, 3), rng)
    z = _param("z", (2, 7), rng)
    targets = rng.integers(0, 5, size=6)
    reference = rng.normal(size=(4, 3)) + 3.0

    def closure():
        return (
            ad.cross_entropy_with_logits(logits, targets)
            + ad.l1_loss(pred, reference)
            + ad.gaussian_nll(z)
        )

    _assert_gradients(closure, {"logits": logits, "pred": pred, "z": z})


def test_loss_values():
    logits = Tensor(np.zeros((4, 8)), dtype=np.float64)
    assert ad.cross_entropy_with_logits(logits, [0, 1, 2, 3]).item() == pytest.approx(np.log(8))
    z = Tensor(np.zeros(10), dtype=np.float64)
    assert ad.gaussian_nll(z).item() == pytest.approx(5 * ad.LOG_2PI)
    assert ad.l1_loss(Tensor([1.0, -1.0]), [0.0, 0.0]).item() == pytest.approx(1.0)


def test_shared_subexpression_accumulates():
    x = Parameter("x", np.array([3.0]))
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_log_of_zero_raises():
    with pytest.raises(NonFiniteError, match="log"):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_no_grad_records_nothing():
    x = Parameter("x", np.ones(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_backward_errors():
    x = Parameter("x", np.ones(3))
    with pytest.raises(StateError):
        (x * 2.0).backward()
    with pytest.raises(StateError):
        Tensor(np.ones(1)).backward()


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)
    with pytest.raises(ShapeError):
        ad.cross_entropy_with_logits(Tensor(np.ones((2, 3))), [0, 3])


def test_integer_data_becomes_float():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.ones(2), dtype=np.float64).dtype == np.float64
