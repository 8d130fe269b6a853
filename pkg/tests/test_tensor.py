import numpy as np
import pytest
from hypothesis import given, strategies as st

from odseg import tensor as T
from odseg.tensor import Tensor, create

from oracles import matmul_loops


def d(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_create_fill_and_data():
    assert np.array_equal(create([2, 2], fill=0).data, [[0, 0], [0, 0]])
    t = create([3], data=[1, 2, 3])
    assert np.array_equal(t.data, [1, 2, 3])
    assert not t.requires_grad


@pytest.mark.parametrize("shape,data", [([2, 3], [1, 2, 3, 4, 5]), ([0, 2], None), ([], None)])
def test_create_errors(shape, data):
    with pytest.raises(ValueError):
        create(shape, fill=0 if data is None else None, data=data)


def test_elementwise_examples():
    assert np.array_equal(T.elementwise("add", d([1, 2]), d([3, 4])).data, [4, 6])
    assert T.elementwise("sigmoid", d([0])).data[0] == 0.5
    np.testing.assert_allclose(T.elementwise("leaky_relu", d([-2, 3]), slope=0.01).data,
                               [-0.02, 3])
    assert np.array_equal(T.elementwise("scale", d([1, -2]), c=3).data, [3, -6])


def test_broadcast_rules():
    out = T.add(d(np.ones((2, 3))), d(np.ones((1, 3))))
    assert out.shape == (2, 3)
    with pytest.raises(ValueError):
        T.add(d(np.ones((2, 3))), d(np.ones((3,))))
    with pytest.raises(ValueError):
        T.mul(d(np.ones((2, 3))), d(np.ones((2, 2))))


def test_division_by_tiny_value_is_flagged():
    with pytest.raises(ZeroDivisionError):
        T.div(d([1.0]), d([1e-31]))


def test_non_finite_results_raise():
    with pytest.raises(T.NonFiniteError):
        T.exp(d([1000.0]))


def test_matmul_examples(rng):
    m = d([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(d(np.eye(2)), m).data, m.data)
    assert T.matmul(d([[1, 2]]), d([[3], [4]])).data[0, 0] == 11
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(T.matmul(d(a), d(b)).data, matmul_loops(a, b), atol=1e-12, rtol=0)
    with pytest.raises(ValueError):
        T.matmul(d(a), d(a))


def test_softmax_examples(rng):
    np.testing.assert_allclose(T.softmax(d([0, 0, 0, 0])).data, [0.25] * 4)
    out = T.softmax(d([1000.0, 0.0])).data
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)
    row = T.softmax(d(rng.standard_normal(6))).data
    assert abs(sum(row.tolist()) - 1) <= 1e-6
    with pytest.raises(ValueError):
        T.softmax(d([1.0]), temperature=0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(0.05, 40))
def test_softmax_is_distribution(values, temp):
    out = T.softmax(d(values), temperature=temp).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) <= 1e-6


def test_reduce_examples(rng):
    assert T.reduce("mean", d([[1, 3], [5, 7]]), (0, 1)).item() == 4
    x = d([[1, 2], [3, 4]])
    assert T.reduce("sum", x, ()) is x
    a = rng.standard_normal((3, 4))
    best = a[0, 0]
    for v in a.ravel():
        best = v if v > best else best
    assert T.reduce("max", d(a), (0, 1)).item() == best
    with pytest.raises(ValueError):
        T.reduce("sum", x, (2,))
    with pytest.raises(ValueError):
        T.reduce("sum", x, (0, 0))
    assert T.reduce("sum", x, (1,), keepdims=True).shape == (2, 1)


def test_global_average_pool(rng):
    assert np.allclose(T.global_average_pool(d(np.full((3, 2, 2, 2), 2.5))).data, 2.5)
    x = np.arange(1, 9, dtype=float).reshape(1, 2, 2, 2)
    assert T.global_average_pool(d(x)).item() == 4.5
    r = rng.standard_normal((3, 4, 4, 4))
    np.testing.assert_allclose(T.global_average_pool(d(r)).data, T.mean(d(r), (1, 2, 3)).data)


def test_backward_examples():
    x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    T.backward(T.sum(T.mul(x, x)))
    assert x.grad[0] == 6
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=np.float64)
    b = d(np.arange(12.0).reshape(3, 4))
    T.backward(T.sum(T.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (2, 3)))


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.scale(x, 2))


def test_shared_subexpression_accumulates(rng):
    v = rng.standard_normal(5)
    x = Tensor(v, requires_grad=True, dtype=np.float64)
    s = T.sigmoid(x)
    T.backward(T.sum(T.add(T.mul(s, s), s)))
    shared = x.grad.copy()
    # oracle: rebuild the subexpression three times, no sharing
    y = Tensor(v, requires_grad=True, dtype=np.float64)
    T.backward(T.sum(T.add(T.mul(T.sigmoid(y), T.sigmoid(y)), T.sigmoid(y))))
    np.testing.assert_allclose(shared, y.grad, rtol=1e-14)


def test_tape_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.sum(T.mul(T.exp(x), x))
    tape = T.Tape.from_root(y)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert len(pos) == len(tape.nodes)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4).flatmap(
    lambda shape: st.tuples(st.just(shape), st.integers(0, int(np.prod(shape)) - 1))))
def test_row_major_index_round_trip(case):
    shape, index = case
    coord = T.unravel_index(index, shape)
    assert T.ravel_index(coord, shape) == index
    assert np.ravel_multi_index(coord, shape) == index


def test_finite_difference_check_examples(rng):
    x = Tensor(rng.standard_normal(20), dtype=np.float64)
    mx, _ = T.finite_difference_check(lambda t: T.sum(t), x, h=1e-5)
    assert mx < 1e-9
    x = Tensor(rng.standard_normal(20), dtype=np.float64)
    mx, _ = T.finite_difference_check(lambda t: T.sum(T.sigmoid(t)), x, h=1e-5)
    assert mx <= 1e-6


OPS = {
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), d(np.ones((1, 1)) * 0.5))),
    "sub_bcast": lambda a, b: T.sub(a, T.mean(b, 0, keepdims=True)),
    "softmax_t": lambda a, b: T.mul(T.softmax(a, axis=1, temperature=3.0), b),
    "log_softmax": lambda a, b: T.mul(T.log_softmax(a, axis=0), b),
    "leaky": lambda a, b: T.mul(T.leaky_relu(a, 0.1), b),
    "max": lambda a, b: T.mul(T.amax(a, 1, keepdims=True), b),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "concat": lambda a, b: T.mul(T.concat([a, b], axis=0), T.concat([b, a], axis=0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    a = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    b = d(rng.standard_normal((3, 4)))
    w = rng.standard_normal(OPS[name](a, b).shape)
    mx, med = T.finite_difference_check(lambda t: T.sum(T.mul(OPS[name](t, b), d(w))), a)
    assert mx <= 1e-4 and med <= 1e-5
