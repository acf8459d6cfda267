"""Autodiff engine: primitive semantics, tape rules, gradient correctness.

Every primitive's analytic gradient is validated against central finite
differences over at least 100 random inputs; pinned example values come
from closed forms evaluated by hand.
"""

import numpy as np
import pytest

from pointgat import autodiff as ad
from pointgat.autodiff import ShapeMismatchError


# --------------------------------------------------------------------------
# forward semantics

def test_add_componentwise():
    out = ad.apply("add", ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))
    assert out.values.tolist() == [4.0, 6.0]


def test_matmul_identity_returns_vector():
    p = np.array([0.3, -1.2, 2.5])
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(p))
    np.testing.assert_array_equal(out.values, p)


def test_scatter_add_merges_duplicate_rows():
    out = ad.scatter_add(ad.constant([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
    assert out.values.tolist() == [[3.0], [3.0]]


def test_split_concat_round_trip():
    x = ad.constant(np.arange(12.0).reshape(3, 4))
    parts = ad.split(x, [1, 3], axis=1)
    assert parts[0].shape == (3, 1) and parts[1].shape == (3, 3)
    back = ad.concat(parts, axis=1)
    np.testing.assert_array_equal(back.values, x.values)


def test_gather_selects_rows():
    x = ad.constant(np.arange(6.0).reshape(3, 2))
    out = ad.gather(x, [2, 0])
    np.testing.assert_array_equal(out.values, [[4.0, 5.0], [0.0, 1.0]])


def test_expand_repeats_axis():
    out = ad.expand(ad.constant([1.0, 2.0]), axis=0, size=3)
    assert out.shape == (3, 2)
    np.testing.assert_array_equal(out.values, [[1, 2]] * 3)


def test_activation_values():
    x = np.array([-1.0, 0.0, 2.0])
    sig = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(ad.sigmoid(ad.constant(x)).values, sig, rtol=1e-15)
    np.testing.assert_allclose(ad.silu(ad.constant(x)).values, x * sig, rtol=1e-15)
    np.testing.assert_allclose(ad.sin(ad.constant(x)).values, np.sin(x), rtol=1e-15)
    np.testing.assert_allclose(ad.cos(ad.constant(x)).values, np.cos(x), rtol=1e-15)


def test_sigmoid_extreme_inputs_stay_finite():
    out = ad.sigmoid(ad.constant([-800.0, 800.0])).values
    assert out[0] == 0.0 and out[1] == 1.0


def test_sqrt_rejects_negative():
    with pytest.raises(ValueError, match="sqrt"):
        ad.sqrt(ad.constant([-1.0]))


def test_unknown_primitive_rejected():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.apply("convolve", ad.constant([1.0]))


@pytest.mark.parametrize("op,shapes", [
    ("add", ((2, 3), (4,))),
    ("multiply", ((2, 3), (2, 4))),
    ("matmul", ((3, 4), (5, 2))),
    ("cross", ((3, 4), (3, 4))),            # size-4 spatial axis
    ("concat", ((2, 3), (3, 3))),
])
def test_shape_errors_name_primitive_and_shapes(op, shapes):
    arrays = [ad.constant(np.zeros(s)) for s in shapes]
    kwargs = {"axis": 1} if op in ("cross", "concat") else {}
    with pytest.raises(ShapeMismatchError) as err:
        ad.apply(op, *arrays, **kwargs)
    message = str(err.value)
    assert op in message
    assert str(shapes[0]) in message


def test_arrays_are_frozen():
    x = ad.constant([1.0, 2.0])
    with pytest.raises(ValueError):
        x.values[0] = 5.0


# --------------------------------------------------------------------------
# backward semantics

def test_grad_of_sum_of_squares():
    x = ad.parameter([1.0, 2.0, 3.0])
    with ad.Tape() as tape:
        loss = ad.sum_reduce(x * x)
    grads = ad.backward(loss, tape)
    np.testing.assert_array_equal(grads[x], [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_grad_of_sigmoid_at_zero():
    x = ad.parameter(0.0)
    with ad.Tape() as tape:
        out = ad.sigmoid(x)
    grads = ad.backward(out, tape)
    assert grads[x] == pytest.approx(0.25, abs=1e-15)


def test_grad_of_plain_norm_is_unit_vector():
    v = ad.parameter([3.0, 4.0])
    with ad.Tape() as tape:
        out = ad.safe_norm(v, axis=0, eps=0.0)
    grads = ad.backward(out, tape)
    assert out.item() == 5.0
    np.testing.assert_allclose(grads[v], [0.6, 0.8], rtol=1e-15)


def test_safe_norm_gradient_is_zero_at_origin():
    v = ad.parameter([0.0, 0.0, 0.0])
    with ad.Tape() as tape:
        out = ad.safe_norm(v, axis=0, eps=1e-8)
    grads = ad.backward(out, tape)
    assert out.item() == pytest.approx(1e-8)
    np.testing.assert_array_equal(grads[v], [0.0, 0.0, 0.0])


def test_three_node_chain_rule_by_hand():
    # tree: multiply -> sigmoid -> sum; hand rule d/dw = sigma'(x w) * x
    x = np.array([1.0, 2.0])
    w = ad.parameter([0.5, -1.0])
    with ad.Tape() as tape:
        loss = ad.sum_reduce(ad.sigmoid(ad.constant(x) * w))
    grads = ad.backward(loss, tape)
    s = 1.0 / (1.0 + np.exp(-x * w.values))
    np.testing.assert_allclose(grads[w], s * (1.0 - s) * x, rtol=1e-14)


def test_untouched_leaf_gets_zero_gradient():
    x = ad.parameter([1.0, 2.0])
    unused = ad.parameter([5.0])
    with ad.Tape() as tape:
        loss = ad.sum_reduce(x * x) + ad.sum_reduce(unused * 0.0)
    grads = ad.backward(loss, tape)
    np.testing.assert_array_equal(grads[unused], [0.0])


def test_backward_requires_scalar():
    x = ad.parameter([1.0, 2.0])
    with ad.Tape() as tape:
        y = x * x
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(y, tape)


def test_backward_twice_rejected():
    x = ad.parameter([1.0])
    with ad.Tape() as tape:
        loss = ad.sum_reduce(x * x)
    ad.backward(loss, tape)
    with pytest.raises(RuntimeError, match="already"):
        ad.backward(loss, tape)


def test_backward_needs_output_from_tape():
    x = ad.parameter([1.0])
    with ad.Tape():
        loss = ad.sum_reduce(x * x)
    with ad.Tape() as other:
        pass
    with pytest.raises(ValueError, match="not computed under"):
        ad.backward(loss, other)


def test_gradients_are_bitwise_deterministic():
    rng = np.random.default_rng(3)
    w = ad.parameter(rng.normal(size=(6, 4)))
    x = ad.constant(rng.normal(size=(10, 6)))
    rows = rng.integers(0, 10, size=25)

    def run():
        with ad.Tape() as tape:
            h = ad.silu(ad.matmul(x, w))
            g = ad.gather(h, rows)
            pooled = ad.scatter_add(g, rows % 4, 4)
            loss = ad.sum_reduce(pooled * pooled)
        return ad.backward(loss, tape)[w]

    np.testing.assert_array_equal(run(), run())


# --------------------------------------------------------------------------
# finite-difference validation of every primitive

def _fd(f, leaves, **kw):
    report = ad.finite_difference_check(f, leaves, **kw)
    return report.max_rel_error


def _tracked(rng, shape, low=-2.0, high=2.0):
    return ad.parameter(rng.uniform(low, high, size=shape))


def _cotangent(rng, template):
    return ad.constant(rng.normal(size=template.shape))


PRIMITIVE_TRIALS = 100


def _check_many(make_case, trials=PRIMITIVE_TRIALS, tolerance=1e-6):
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(1000 + trial)
        f, leaves = make_case(rng)
        worst = max(worst, _fd(f, leaves))
    assert worst < tolerance, f"worst relative error {worst}"


def test_fd_add():
    def case(rng):
        a, b = _tracked(rng, (3, 4)), _tracked(rng, (4,))
        w = _cotangent(rng, np.zeros((3, 4)))
        return (lambda: ad.sum_reduce((a + b) * w)), [a, b]
    _check_many(case)


def test_fd_subtract_multiply_divide():
    def case(rng):
        a, b = _tracked(rng, (2, 3)), _tracked(rng, (2, 3))
        d = ad.parameter(rng.uniform(0.5, 2.0, size=(2, 3)) * rng.choice([-1.0, 1.0], size=(2, 3)))
        w = _cotangent(rng, np.zeros((2, 3)))
        return (lambda: ad.sum_reduce(((a - b) * b / d) * w)), [a, b, d]
    _check_many(case)


def test_fd_matmul_all_supported_shapes():
    def case(rng):
        pick = rng.integers(0, 5)
        if pick == 0:
            a, b = _tracked(rng, (3, 4)), _tracked(rng, (4, 2))
        elif pick == 1:
            a, b = _tracked(rng, (5, 3, 4)), _tracked(rng, (4, 2))
        elif pick == 2:
            a, b = _tracked(rng, (3, 4)), _tracked(rng, (4,))
        elif pick == 3:
            a, b = _tracked(rng, (4,)), _tracked(rng, (4, 2))
        else:
            a, b = _tracked(rng, (4,)), _tracked(rng, (4,))
        w = _cotangent(rng, (a.values @ b.values))
        return (lambda: ad.sum_reduce(ad.matmul(a, b) * w)), [a, b]
    _check_many(case)


def test_fd_scale_sum_broadcast():
    def case(rng):
        a = _tracked(rng, (3, 2))
        w = _cotangent(rng, np.zeros((3, 2, 4)))
        def f():
            spread = ad.expand(a * 1.7, axis=2, size=4)
            return ad.sum_reduce(ad.sum_reduce(spread * w, axis=1))
        return f, [a]
    _check_many(case)


def test_fd_concat_split_slice():
    def case(rng):
        a, b = _tracked(rng, (2, 3)), _tracked(rng, (2, 2))
        w = _cotangent(rng, np.zeros((2, 5)))
        def f():
            joined = ad.concat([a, b], axis=1)
            left, right = ad.split(joined * w, [2, 3], axis=1)
            return ad.sum_reduce(left) + ad.sum_reduce(right * 0.5)
        return f, [a, b]
    _check_many(case)


def test_fd_gather_scatter():
    def case(rng):
        a = _tracked(rng, (5, 3))
        rows = rng.integers(0, 5, size=8)
        w = _cotangent(rng, np.zeros((4, 3)))
        def f():
            edges = ad.gather(a, rows)
            pooled = ad.scatter_add(edges, rows % 4, 4)
            return ad.sum_reduce(pooled * w)
        return f, [a]
    _check_many(case)


def test_fd_activations():
    def case(rng):
        x = _tracked(rng, (2, 5))
        w = _cotangent(rng, np.zeros((2, 5)))
        def f():
            return ad.sum_reduce((ad.sigmoid(x) + ad.silu(x) + ad.sin(x) + ad.cos(x)) * w)
        return f, [x]
    _check_many(case)


def test_fd_sqrt():
    def case(rng):
        x = ad.parameter(rng.uniform(0.5, 3.0, size=(4,)))
        w = _cotangent(rng, np.zeros(4))
        return (lambda: ad.sum_reduce(ad.sqrt(x) * w)), [x]
    _check_many(case)


def test_fd_safe_norm():
    def case(rng):
        x = _tracked(rng, (4, 3, 2))
        w = _cotangent(rng, np.zeros((4, 2)))
        eps = rng.choice([1e-8, 1e-2])
        return (lambda: ad.sum_reduce(ad.safe_norm(x, axis=1, eps=eps) * w)), [x]
    _check_many(case)


def test_fd_cross():
    def case(rng):
        a, b = _tracked(rng, (4, 3, 2)), _tracked(rng, (4, 3, 2))
        w = _cotangent(rng, np.zeros((4, 3, 2)))
        return (lambda: ad.sum_reduce(ad.cross(a, b, axis=1) * w)), [a, b]
    _check_many(case)


# --------------------------------------------------------------------------
# the checker itself

def test_fd_check_constant_function_reports_zero():
    x = ad.parameter([1.0, 2.0])
    report = ad.finite_difference_check(lambda: ad.constant(3.0), [x])
    assert report.max_rel_error == 0.0
    assert report.passed


def test_fd_check_simple_quadratic_is_tight():
    x = ad.parameter([1.0, 2.0])
    report = ad.finite_difference_check(lambda: ad.sum_reduce(x * x), [x])
    assert report.max_rel_error < 1e-8


def test_fd_check_flags_nonfinite():
    x = ad.parameter([0.5])

    def f():
        return ad.sum_reduce(ad.sqrt(ad.constant([0.25]) - x * x))

    with pytest.raises(ValueError, match="leaf0"):
        ad.finite_difference_check(f, [x], step=1e-1)


def test_fd_check_restores_leaf_values():
    x = ad.parameter([1.0, 2.0])
    before = x.values.copy()
    ad.finite_difference_check(lambda: ad.sum_reduce(x * x), [x])
    np.testing.assert_array_equal(x.values, before)
    assert not x.values.flags.writeable


def test_fd_check_rejects_nonpositive_step():
    x = ad.parameter([1.0])
    with pytest.raises(ValueError, match="step"):
        ad.finite_difference_check(lambda: ad.sum_reduce(x), [x], step=0.0)
