import math

import numpy as np
import pytest

import pointseq.autodiff as ad
from pointseq.autodiff import (
    DomainError,
    NonScalarOutputError,
    ParamSet,
    ShapeError,
    Tensor,
    UnknownNameError,
)


def params_of(**arrays):
    ps = ParamSet()
    for name, value in arrays.items():
        ps.add(name, np.asarray(value, dtype=np.float64))
    return ps


def test_softmax_symmetry():
    out = ad.softmax(Tensor(np.array([0.0, 0.0])))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_matmul_scalar_product():
    out = ad.matmul(Tensor(np.array([[2.0]])), Tensor(np.array([[3.0]])))
    assert out.data.reshape(-1)[0] == 6.0


def test_layer_norm_hand_value():
    # direct evaluation of (x - mean)/sqrt(var + eps) for [1, 3], eps 1e-5
    x = np.array([1.0, 3.0])
    mean = 2.0
    var = 1.0
    expected = (x - mean) / math.sqrt(var + 1e-5)
    out = ad.layer_norm(Tensor(x), eps=1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)
    assert abs(expected[1] - 0.9999950000374997) < 1e-15


def test_gradient_square():
    ps = params_of(x=3.0)
    grads = ad.gradient(lambda p: ad.mul(p["x"], p["x"]), ps)
    np.testing.assert_allclose(grads["x"], 6.0)


def test_gradient_of_softmax_sum_is_zero():
    ps = params_of(v=[0.3, -1.2, 2.0, 0.0])
    grads = ad.gradient(lambda p: ad.reduce_sum(ad.softmax(p["v"])), ps)
    np.testing.assert_allclose(grads["v"], np.zeros(4), atol=1e-14)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7)) * 20.0
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(5), atol=1e-12)
    assert np.all(out > 0) and np.all(out < 1)


def test_forward_deterministic_bit_identical():
    rng = np.random.default_rng(1)
    ps = ParamSet()
    ps.add("a", rng.normal(size=(4, 4)).astype(np.float32))
    ps.add("b", rng.normal(size=(4, 4)).astype(np.float32))
    expr = lambda p: ad.reduce_sum(ad.gelu(ad.matmul(p["a"], p["b"])))
    one = ad.forward(expr, ps).data.tobytes()
    two = ad.forward(expr, ps).data.tobytes()
    assert one == two


def test_forward_does_not_mutate_inputs():
    ps = params_of(x=[1.0, 2.0])
    before = ps.value("x").copy()
    ad.forward(lambda p: ad.reduce_sum(ad.relu(p["x"])), ps)
    np.testing.assert_array_equal(ps.value("x"), before)


def test_fd_check_quadratic_is_tight():
    ps = params_of(x=3.0)
    report = ad.finite_difference_check(lambda p: ad.mul(p["x"], p["x"]), ps)
    assert report.max_rel_error < 1e-9
    assert report.worst_name == "x"


def test_fd_check_excludes_frozen():
    ps = ParamSet()
    ps.add("w", np.array([2.0]))
    ps.add("frozen", np.array([5.0]), trainable=False)
    expr = lambda p: ad.reduce_sum(ad.mul(p["w"], p["frozen"]))
    report = ad.finite_difference_check(expr, ps)
    assert set(report.per_param) == {"w"}


def test_gradient_rejects_frozen_wrt():
    ps = ParamSet()
    ps.add("w", np.array([2.0]), trainable=False)
    with pytest.raises(ValueError):
        ad.gradient(lambda p: ad.reduce_sum(p["w"]), ps, wrt=["w"])


def test_gradient_rejects_nonscalar():
    ps = params_of(x=[1.0, 2.0])
    with pytest.raises(NonScalarOutputError):
        ad.gradient(lambda p: p["x"], ps)


def test_unknown_name_raises():
    ps = params_of(x=1.0)
    with pytest.raises(UnknownNameError):
        ad.forward(lambda p: p["missing"], ps)
    with pytest.raises(UnknownNameError):
        ad.gradient(lambda p: ad.mul(p["x"], p["x"]), ps, wrt=["missing"])


def test_shape_mismatch_names_operands():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError) as err:
        ad.matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(DomainError):
        ad.divide(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    with pytest.raises(DomainError):
        ad.sqrt(Tensor(np.array([-1.0])))


# every primitive passes a finite-difference check on its smallest nontrivial shape
def _fd_case(name, expr, arrays):
    ps = ParamSet()
    for pname, value in arrays.items():
        ps.add(pname, np.asarray(value, dtype=np.float64))
    report = ad.finite_difference_check(expr, ps)
    assert report.max_rel_error < 1e-4, f"{name}: {report.max_rel_error} at {report.worst_name}"


RNG = np.random.default_rng(7)
A23 = RNG.normal(size=(2, 3))
B23 = RNG.normal(size=(2, 3)) + 3.0  # keep divide/log/sqrt in-domain
B34 = RNG.normal(size=(3, 4))
IDX = np.array([1, 0, 1])

PRIMITIVE_CASES = [
    ("add", lambda p: ad.reduce_sum(ad.add(p["a"], p["b"])), {"a": A23, "b": B23}),
    ("sub", lambda p: ad.reduce_sum(ad.mul(ad.sub(p["a"], p["b"]), p["a"])), {"a": A23, "b": B23}),
    ("mul", lambda p: ad.reduce_sum(ad.mul(p["a"], p["b"])), {"a": A23, "b": B23}),
    ("divide", lambda p: ad.reduce_sum(ad.divide(p["a"], p["b"])), {"a": A23, "b": B23}),
    ("matmul", lambda p: ad.reduce_sum(ad.matmul(p["a"], p["b"])), {"a": A23, "b": B34}),
    ("matmul_batched", lambda p: ad.reduce_sum(ad.matmul(p["a"], p["b"])),
     {"a": RNG.normal(size=(2, 2, 3)), "b": RNG.normal(size=(3, 2))}),
    ("exp", lambda p: ad.reduce_sum(ad.exp(p["a"])), {"a": A23}),
    ("log", lambda p: ad.reduce_sum(ad.log(p["b"])), {"b": B23}),
    ("sqrt", lambda p: ad.reduce_sum(ad.sqrt(p["b"])), {"b": B23}),
    ("tanh", lambda p: ad.reduce_sum(ad.tanh(p["a"])), {"a": A23}),
    ("relu", lambda p: ad.reduce_sum(ad.relu(p["a"])), {"a": A23 + 0.05}),
    ("gelu", lambda p: ad.reduce_sum(ad.gelu(p["a"])), {"a": A23}),
    ("layer_norm", lambda p: ad.reduce_sum(ad.mul(ad.layer_norm(p["a"]), p["b"])), {"a": A23, "b": B23}),
    ("softmax", lambda p: ad.reduce_sum(ad.mul(ad.softmax(p["a"]), p["b"])), {"a": A23, "b": B23}),
    ("reduce_sum_axis", lambda p: ad.reduce_sum(ad.mul(ad.reduce_sum(p["a"], axis=0), ad.reduce_sum(p["b"], axis=0))),
     {"a": A23, "b": B23}),
    ("reduce_mean", lambda p: ad.reduce_sum(ad.square(ad.reduce_mean(p["a"], axis=1))), {"a": A23}),
    ("reduce_max", lambda p: ad.reduce_sum(ad.square(ad.reduce_max(p["a"], axis=1))), {"a": A23}),
    ("reduce_min", lambda p: ad.reduce_sum(ad.square(ad.reduce_min(p["a"], axis=0))), {"a": A23}),
    ("concat", lambda p: ad.reduce_sum(ad.square(ad.concat([p["a"], p["b"]], axis=1))), {"a": A23, "b": B23}),
    ("transpose", lambda p: ad.reduce_sum(ad.matmul(ad.transpose(p["a"], (1, 0)), p["b"])), {"a": A23, "b": B23}),
    ("reshape", lambda p: ad.reduce_sum(ad.square(ad.reshape(p["a"], (3, 2)))), {"a": A23}),
    ("broadcast", lambda p: ad.reduce_sum(ad.mul(ad.broadcast_to(p["v"], (2, 3)), p["b"])),
     {"v": RNG.normal(size=(1, 3)), "b": B23}),
    ("gather", lambda p: ad.reduce_sum(ad.square(ad.gather(p["a"], IDX))), {"a": A23}),
    ("linear", lambda p: ad.reduce_sum(ad.square(ad.linear(p["a"], p["w"], p["b"]))),
     {"a": A23, "w": B34, "b": RNG.normal(size=4)}),
    ("linear_batched_nobias", lambda p: ad.reduce_sum(ad.square(ad.linear(p["a"], p["w"]))),
     {"a": RNG.normal(size=(2, 2, 3)), "w": B34}),
    ("logsumexp", lambda p: ad.reduce_sum(ad.logsumexp(p["a"])), {"a": A23}),
    ("l2_normalize", lambda p: ad.reduce_sum(ad.mul(ad.l2_normalize(p["a"]), p["b"])), {"a": A23, "b": B23}),
]


@pytest.mark.parametrize("name,expr,arrays", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_fd(name, expr, arrays):
    _fd_case(name, expr, arrays)


def test_max_reduce_tie_routes_to_first():
    ps = params_of(x=[2.0, 2.0, 1.0])
    grads = ad.gradient(lambda p: ad.reduce_max(p["x"], axis=0), ps)
    np.testing.assert_array_equal(grads["x"], [1.0, 0.0, 0.0])


def test_gather_accumulates_duplicates():
    ps = params_of(x=[[1.0], [2.0]])
    grads = ad.gradient(lambda p: ad.reduce_sum(ad.gather(p["x"], np.array([0, 0, 1]))), ps)
    np.testing.assert_array_equal(grads["x"], [[2.0], [1.0]])


def test_unused_parameter_gets_zero_gradient():
    ps = params_of(x=2.0, y=5.0)
    grads = ad.gradient(lambda p: ad.mul(p["x"], p["x"]), ps)
    np.testing.assert_array_equal(grads["y"], np.zeros(()))


def test_paramset_order_is_lexicographic():
    ps = ParamSet()
    ps.add("b.w", np.zeros(1))
    ps.add("a.w", np.zeros(1))
    ps.add("a.b", np.zeros(1))
    assert ps.names() == ["a.b", "a.w", "b.w"]


def test_paramset_rejects_duplicates():
    ps = ParamSet()
    ps.add("w", np.zeros(1))
    with pytest.raises(ValueError):
        ps.add("w", np.zeros(1))
