import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import autodiff_grad, numeric_grad, rel_err
from wdsgnn import autodiff as ad

rng = np.random.default_rng(7)


def away_from_zero(shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def check(build, *values, tol=1e-6):
    grads = autodiff_grad(build, *values)
    for k, v in enumerate(values):
        def f(x, k=k):
            args = [ad.Tensor(a) for a in values]
            args[k] = ad.Tensor(x)
            return float(build(*args).value)

        assert rel_err(grads[k], numeric_grad(f, v)) <= tol


W = rng.normal(size=(3, 4))

UNARY = {
    "neg": lambda a: ad.neg(a),
    "reciprocal": lambda a: ad.reciprocal(a),
    "relu": lambda a: ad.relu(a),
    "selu": lambda a: ad.selu(a),
    "absolute": lambda a: ad.absolute(a),
    "pow_abs": lambda a: ad.pow_abs(a, 1.852),
    "pow_abs_inverse": lambda a: ad.pow_abs(a, 1 / 1.852),
    "mean": lambda a: ad.mean(a, axis=0),
    "reshape": lambda a: ad.reshape(a, (-1,)),
    "getitem": lambda a: a[1:, ::2],
    "transpose": lambda a: ad.transpose(a, (1, 0)),
    "gather": lambda a: ad.gather(a, [2, 0, 0, 1]),
    "scatter": lambda a: ad.scatter(a, [4, 1, 0], 6),
    "segment_sum": lambda a: ad.segment_sum(a, [1, 0, 1], 3),
    "segment_max": lambda a: ad.segment_max(a, [1, 0, 1], 3, fill=0.0),
    "matmul": lambda a: ad.matmul(a, W),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_matches_finite_differences(name):
    x = away_from_zero((3, 3))
    weights = rng.normal(size=UNARY[name](ad.Tensor(x)).shape)
    check(lambda a: ad.total(UNARY[name](a) * weights), x)


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "maximum": ad.maximum,
    "minimum": ad.minimum,
    "where": lambda a, b: ad.where(np.array([[True, False, True]]), a, b),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_matches_finite_differences(name):
    a, b = away_from_zero((2, 3)), away_from_zero((2, 3))
    weights = rng.normal(size=BINARY[name](ad.Tensor(a), ad.Tensor(b)).shape)
    check(lambda x, y: ad.total(BINARY[name](x, y) * weights), a, b)


def test_broadcasting_sums_gradients_back():
    a, b = away_from_zero((4, 3)), away_from_zero((1, 3))
    check(lambda x, y: ad.total(x * y + y), a, b)


def test_matmul_batched_input():
    x, w = rng.normal(size=(5, 2, 3)), rng.normal(size=(3, 4))
    weights = rng.normal(size=(5, 2, 4))
    check(lambda a, b: ad.total(ad.matmul(a, b) * weights), x, w)


def test_pow_abs_derivative_at_negative_argument():
    (g,) = autodiff_grad(lambda a: ad.total(ad.pow_abs(a, 1.852)), np.array([-2.0]))
    assert g[0] == pytest.approx(-1.852 * 2.0**0.852, rel=1e-12)


def test_segment_max_ties_route_to_first_member():
    x = np.array([3.0, 1.0, 3.0, 2.0])
    (g,) = autodiff_grad(lambda a: ad.total(ad.segment_max(a, [0, 0, 0, 1], 2)), x)
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0, 1.0])


def test_segment_max_empty_segment_gets_fill_and_no_gradient():
    x = np.array([[1.0], [5.0]])
    seg = ad.Segments([0, 2], 3)
    out = ad.segment_max(ad.Tensor(x), seg, fill=-7.0)
    np.testing.assert_array_equal(out.value[:, 0], [1.0, -7.0, 5.0])


def test_segment_ops_along_inner_axis():
    x = rng.normal(size=(2, 5, 3))
    ids = [0, 2, 2, 1, 0]
    w = rng.normal(size=(2, 3, 3))
    check(lambda a: ad.total(ad.segment_sum(a, ids, 3, axis=1) * w), x)
    check(lambda a: ad.total(ad.segment_max(a, ids, 3, axis=1) * w), x)


def test_numpy_array_on_the_left_defers_to_tensor():
    out = np.ones(3) * ad.Tensor(np.arange(3.0))
    assert isinstance(out, ad.Tensor)
    out = np.ones(3) - ad.Tensor(np.arange(3.0))
    np.testing.assert_array_equal(out.value, [1.0, 0.0, -1.0])


def test_unreached_parameter_gets_zero_gradient_and_is_reported():
    a = ad.Tensor([1.0, 2.0], requires_grad=True, name="a")
    b = ad.Tensor([3.0], requires_grad=True, name="b")
    with ad.Tape() as tape:
        loss = ad.total(a * a)
    ga, gb = tape.gradient(loss, [a, b])
    np.testing.assert_array_equal(ga, [2.0, 4.0])
    np.testing.assert_array_equal(gb, [0.0])
    assert tape.disconnected == ["b"]


def test_non_scalar_loss_is_rejected():
    a = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        out = a * a
    with pytest.raises(ad.ShapeError):
        tape.gradient(out, [a])


def test_no_tape_records_nothing():
    a = ad.Tensor([1.0], requires_grad=True)
    assert not (a * a).requires_grad


finite = st.floats(-10, 10, allow_nan=False).filter(lambda v: abs(v) > 1e-3)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (4,), elements=finite), arrays(float, (4,), elements=finite))
def test_chain_of_ops_property(x, y):
    # stay off the kinks of |.| and selu
    assume(np.all(np.abs(x - y) > 1e-3) and np.all(np.abs(x * y + x) > 1e-3))
    def build(a, b):
        return ad.total(ad.pow_abs(a * b + a, 1.5) + ad.selu(a - b))

    ga, gb = autodiff_grad(build, x, y)
    ref = numeric_grad(lambda v: float(build(ad.Tensor(v), ad.Tensor(y)).value), x, h=1e-7)
    assert np.allclose(ga, ref, rtol=1e-4, atol=1e-4 * (1 + np.abs(ref).max()))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 2), elements=st.floats(-5, 5, allow_nan=False)),
       st.lists(st.integers(0, 3), min_size=6, max_size=6))
def test_segment_sum_gradient_is_gather_property(x, ids):
    w = np.arange(8.0).reshape(4, 2)
    (g,) = autodiff_grad(lambda a: ad.total(ad.segment_sum(a, ids, 4) * w), x)
    np.testing.assert_array_equal(g, w[ids])
