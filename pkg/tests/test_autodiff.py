"""Forward/backward correctness of the differentiation substrate.

Every primitive is validated against the central finite-difference oracle
over randomized shapes and points, alongside the hand-computable cases.
"""

import numpy as np
import pytest

from mvfusion import autodiff as ad
from mvfusion.errors import AxisError, GraphError, ShapeError


def _rng(seed=0):
    return np.random.default_rng(seed)


def _scalarize(v, weights):
    """Weighted mean reduction to a scalar; weights break symmetry so
    permutation/transposition bugs cannot cancel in the FD comparison."""
    out = ad.mul(v, ad.Value(weights))
    while out.data.ndim > 0:
        out = ad.reduce_mean(out, axis=0)
    return out


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_sigmoid_tanh_at_zero():
    assert ad.sigmoid(ad.Value(np.zeros(3))).data == pytest.approx(np.full(3, 0.5))
    assert ad.tanh(ad.Value(np.zeros(3))).data == pytest.approx(np.zeros(3))


def test_softmax_equal_logits_is_uniform():
    for v in (2, 3, 7):
        out = ad.softmax(ad.Value(np.ones(v)), axis=0)
        assert out.data == pytest.approx(np.full(v, 1.0 / v))


def test_reduce_prod_value():
    out = ad.reduce_prod(ad.Value(np.array([2.0, 0.5])), axis=0)
    assert out.data == pytest.approx(1.0)


def test_softmax_rows_are_simplex():
    rng = _rng(1)
    x = ad.Value(rng.normal(size=(6, 4, 3)) * 5)
    for axis in range(3):
        out = ad.softmax(x, axis=axis).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-9)


def test_forward_dispatch_matches_functions():
    rng = _rng(2)
    a, b = ad.Value(rng.normal(size=(3, 4))), ad.Value(rng.normal(size=(4, 2)))
    np.testing.assert_array_equal(ad.forward("matmul", (a, b)).data, ad.matmul(a, b).data)
    np.testing.assert_array_equal(
        ad.forward("slice", a, axis=1, start=1, length=2).data, ad.narrow(a, 1, 1, 2).data
    )
    np.testing.assert_array_equal(ad.forward("softmax", a, axis=0).data, ad.softmax(a, 0).data)
    with pytest.raises(GraphError):
        ad.forward("convolve", (a,))


def test_forward_is_pure():
    rng = _rng(3)
    x = rng.normal(size=(4, 3))
    before = x.tobytes()
    v = ad.Value(x)
    for fn in (
        lambda: ad.sigmoid(v),
        lambda: ad.relu(v),
        lambda: ad.softmax(v, 1),
        lambda: ad.add(v, v),
        lambda: ad.mul(v, v),
        lambda: ad.reduce_max(v, 0),
        lambda: ad.reduce_prod(v, 1),
        lambda: ad.narrow(v, 0, 1, 2),
        lambda: ad.reshape(v, (3, 4)),
        lambda: ad.concat([v, v], 0),
    ):
        fn()
        assert v.data.tobytes() == before


def test_shape_and_axis_errors():
    a = ad.Value(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.matmul(a, ad.Value(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(a, ad.Value(np.ones((4, 5))))
    with pytest.raises(AxisError):
        ad.softmax(a, axis=5)
    with pytest.raises(ShapeError):
        ad.narrow(a, 1, 2, 5)
    with pytest.raises(ShapeError):
        ad.Value(np.ones((2, 2, 2, 2)))


# ---------------------------------------------------------------------------
# backward values
# ---------------------------------------------------------------------------

def test_square_gradient():
    x = ad.Value(np.array(3.0), requires_grad=True)
    ad.backward(ad.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_sigmoid_gradient_at_zero():
    # sigma'(0) = sigma(0) * (1 - sigma(0)) = 0.25
    x = ad.Value(np.array(0.0), requires_grad=True)
    ad.backward(ad.sigmoid(x))
    assert x.grad == pytest.approx(0.25)


def test_reduce_mean_gradient_is_uniform():
    x = ad.Value(np.arange(4.0), requires_grad=True)
    ad.backward(ad.reduce_mean(x, axis=0))
    assert x.grad == pytest.approx(np.full(4, 0.25))


def test_fanout_sums_contributions():
    rng = _rng(4)
    data = rng.normal(size=5)
    x = ad.Value(data, requires_grad=True)
    out = ad.reduce_mean(ad.mul(x, x), axis=0)
    ad.backward(out)
    np.testing.assert_allclose(x.grad, 2.0 * data / 5.0, rtol=1e-12)


def test_backward_accumulates_across_calls():
    x = ad.Value(np.array([1.0, 2.0]), requires_grad=True)
    out = ad.reduce_mean(ad.mul(x, x), axis=0)
    ad.backward(out)
    first = x.grad.copy()
    ad.backward(out)
    np.testing.assert_allclose(x.grad, 2.0 * first, rtol=1e-12)


def test_backward_requires_scalar_root():
    x = ad.Value(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ad.backward(ad.mul(x, x))


def test_constant_function_has_zero_gradient():
    report = ad.grad_check(lambda x: ad.reduce_mean(ad.mul(x, ad.Value(np.zeros(3))), 0), np.ones(3))
    assert report.passed and report.max_rel_error == 0.0


# ---------------------------------------------------------------------------
# randomized finite-difference suite (one entry per primitive)
# ---------------------------------------------------------------------------

def _random_shape(rng):
    rank = int(rng.integers(1, 4))
    return tuple(int(rng.integers(1, 5)) for _ in range(rank))


def _spread_ties(x, axis, gap=0.05):
    """Ensure a strict maximizer along `axis` (reduce-max FD validity)."""
    order = np.argsort(np.argsort(x, axis=axis), axis=axis)
    return x + gap * 3 * order


def _away_from(x, margin, pivot=0.0):
    return np.where(np.abs(x - pivot) < margin, x + 2 * margin, x)


def _case_matmul(rng):
    point = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    other = rng.normal(size=(point.shape[1], int(rng.integers(1, 5))))
    return lambda x: ad.matmul(x, ad.Value(other)), point


def _case_add(rng):
    point = rng.normal(size=_random_shape(rng))
    # Alternate between an equal-shape and a trailing-axes broadcast operand.
    shape = point.shape if rng.random() < 0.5 else point.shape[-1:]
    other = rng.normal(size=shape)
    return lambda x: ad.add(x, ad.Value(other)), point


def _case_mul(rng):
    point = rng.normal(size=_random_shape(rng))
    shape = point.shape if rng.random() < 0.5 else point.shape[-1:]
    other = rng.normal(size=shape)
    return lambda x: ad.mul(x, ad.Value(other)), point


def _case_concat(rng):
    point = rng.normal(size=_random_shape(rng))
    other = rng.normal(size=point.shape)
    return lambda x: ad.concat([x, ad.Value(other)], 0), point


CASES = {
    "matmul": _case_matmul,
    "add": _case_add,
    "mul": _case_mul,
    "scale": lambda rng: (lambda x: ad.scale(x, 1.7), rng.normal(size=_random_shape(rng))),
    "sigmoid": lambda rng: (ad.sigmoid, rng.normal(size=_random_shape(rng))),
    "tanh": lambda rng: (ad.tanh, rng.normal(size=_random_shape(rng))),
    # Keep points clear of the relu kink so finite differences are valid.
    "relu": lambda rng: (ad.relu, _away_from(rng.normal(size=_random_shape(rng)), 0.02)),
    "softmax": lambda rng: (lambda x: ad.softmax(x, 0), rng.normal(size=_random_shape(rng)) * 2),
    "concat": _case_concat,
    "slice": lambda rng: (lambda x: ad.narrow(x, 0, 0, max(1, x.shape[0] - 1)), rng.normal(size=_random_shape(rng))),
    "reshape": lambda rng: (lambda x: ad.reshape(x, (x.data.size,)), rng.normal(size=_random_shape(rng))),
    "reduce-mean": lambda rng: (lambda x: ad.reduce_mean(x, 0), rng.normal(size=_random_shape(rng))),
    "reduce-max": lambda rng: (
        lambda x: ad.reduce_max(x, 0),
        _spread_ties(rng.normal(size=_random_shape(rng)), 0),
    ),
    "reduce-prod": lambda rng: (lambda x: ad.reduce_prod(x, 0), rng.normal(size=_random_shape(rng))),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_randomized_grad_checks(name):
    rng = _rng(hash(name) % 2**32)
    worst = 0.0
    for trial in range(50):
        fn, point = CASES[name](rng)
        weights = rng.normal(size=fn(ad.Value(point)).data.shape)
        report = ad.grad_check(lambda x: _scalarize(fn(x), weights), point, step=1e-3, tolerance=1e-4)
        worst = max(worst, report.max_rel_error)
        assert report.passed, f"{name} trial {trial}: max rel error {report.max_rel_error:.3e}"
    assert worst < 1e-4


def test_reduce_prod_gradient_with_zeros():
    # Lone zero: gradient lands on the zero via the leave-one-out product.
    x = np.array([2.0, 0.0, 3.0])
    v = ad.Value(x, requires_grad=True)
    ad.backward(ad.reduce_prod(v, 0))
    np.testing.assert_allclose(v.grad, [0.0, 6.0, 0.0], rtol=1e-12)
    report = ad.grad_check(lambda t: ad.reduce_prod(t, 0), x)
    assert report.passed

    # Two zeros: all partials vanish.
    v2 = ad.Value(np.array([0.0, 5.0, 0.0]), requires_grad=True)
    ad.backward(ad.reduce_prod(v2, 0))
    np.testing.assert_array_equal(v2.grad, np.zeros(3))


def test_reduce_max_tie_routes_to_first():
    v = ad.Value(np.array([1.0, 3.0, 3.0]), requires_grad=True)
    ad.backward(ad.reduce_max(v, 0))
    np.testing.assert_array_equal(v.grad, [0.0, 1.0, 0.0])


def test_grad_check_square_is_tight():
    report = ad.grad_check(lambda x: ad.mul(x, x), np.array(3.0), step=1e-5, tolerance=1e-7)
    assert report.passed and report.max_rel_error < 1e-7


# ---------------------------------------------------------------------------
# ops with hand-derived gradients
# ---------------------------------------------------------------------------

def test_bce_values():
    y = np.array([1.0, 0.0])
    half = ad.bce(ad.Value(np.array([0.5, 0.5])), y)
    assert half.data == pytest.approx(np.log(2.0), abs=1e-12)
    near_perfect = ad.bce(ad.Value(np.array([1.0 - 1e-7, 1e-7])), y)
    assert near_perfect.data == pytest.approx(0.0, abs=1e-6)


def test_bce_gradient_through_sigmoid():
    rng = _rng(11)
    y = (rng.random(6) > 0.5).astype(float)

    def loss(z):
        return ad.bce(ad.sigmoid(z), y)

    report = ad.grad_check(loss, rng.normal(size=6), step=1e-5, tolerance=1e-6)
    assert report.passed, report


def test_batchnorm_train_gradients():
    rng = _rng(12)
    x = rng.normal(size=(5, 3)) * 2 + 1
    gamma = rng.normal(size=3) + 1.5
    beta = rng.normal(size=3)
    w = rng.normal(size=(5, 3))

    def wrt_x(v):
        out, _, _ = ad.batch_norm_train(v, ad.Value(gamma), ad.Value(beta))
        return _scalarize(out, w)

    def wrt_gamma(v):
        out, _, _ = ad.batch_norm_train(ad.Value(x), v, ad.Value(beta))
        return _scalarize(out, w)

    def wrt_beta(v):
        out, _, _ = ad.batch_norm_train(ad.Value(x), ad.Value(gamma), v)
        return _scalarize(out, w)

    for fn, point in ((wrt_x, x), (wrt_gamma, gamma), (wrt_beta, beta)):
        report = ad.grad_check(fn, point, step=1e-4, tolerance=1e-5)
        assert report.passed, report


def test_batchnorm_train_normalizes():
    rng = _rng(13)
    x = rng.normal(size=(64, 5)) * 3 + 7
    out, mu, var = ad.batch_norm_train(ad.Value(x), ad.Value(np.ones(5)), ad.Value(np.zeros(5)))
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-4)
    np.testing.assert_allclose(mu, x.mean(axis=0))
    np.testing.assert_allclose(var, x.var(axis=0))
