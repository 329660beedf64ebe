import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scmil import numerics as nx
from scmil.errors import ConfigError, DimensionError, NonFiniteError, OptimizerStateError

from .conftest import check_op_gradient

mpmath.mp.dps = 40


def test_matmul_identity_and_hand_values():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nx.matmul(np.eye(3), m).value, m)
    out = nx.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert check_op_gradient(lambda x, y: nx.matmul(x, y), [a, b]) < 1e-6


def test_softmax_rows_examples():
    out = nx.softmax_rows(np.array([[0.0, 0.0], [0.0, math.log(3.0)], [1000.0, 1000.0]])).value
    assert np.allclose(out, [[0.5, 0.5], [0.25, 0.75], [0.5, 0.5]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_and_shift_invariance(x, c):
    s = nx.softmax_rows(x).value
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(nx.softmax_rows(x + c).value, s, atol=1e-9)


def test_activation_examples():
    assert nx.sigmoid(0.0).item() == 0.5
    assert nx.softplus(0.0).item() == pytest.approx(math.log(2.0), abs=1e-15)
    assert abs(nx.softplus(50.0).item() - 50.0) < 1e-12
    assert nx.softplus(-800.0).item() >= 0.0
    assert nx.tanh_act(0.0).item() == 0.0


def test_erf_examples():
    assert nx.erf(0.0) == 0.0
    assert nx.erf(6.0) > 1 - 1e-15
    assert abs(nx.erf(1.0) - float(mpmath.erf(1))) < 1e-15
    assert abs(nx.erf(1.0) - 0.842700792949715) < 1e-14


def test_erf_against_high_precision_oracle():
    xs = np.concatenate([np.linspace(-7, 7, 1401), [2.9999999, 3.0, 3.0000001, 1e-12, 26.0]])
    got = nx.erf(xs)
    want = np.array([float(mpmath.erf(x)) for x in xs])
    assert np.max(np.abs(got - want)) < 1e-10


@settings(max_examples=200)
@given(st.floats(-40, 40))
def test_erf_odd_symmetry_is_exact(x):
    assert nx.erf(-x) == -nx.erf(x)


def test_log_erfc_far_tail():
    for x in [3.5, 10.0, 30.0, 100.0]:
        assert nx.log_erfc(x) == pytest.approx(float(mpmath.log(mpmath.erfc(x))), rel=1e-11)


ELEMENTWISE = [
    ("exp", nx.exp, lambda r: r.standard_normal((3, 4))),
    ("log", nx.log, lambda r: r.uniform(0.5, 3, (3, 4))),
    ("square", nx.square, lambda r: r.standard_normal((3, 4))),
    ("sigmoid", nx.sigmoid, lambda r: 3 * r.standard_normal((3, 4))),
    ("tanh", nx.tanh_act, lambda r: 2 * r.standard_normal((3, 4))),
    ("softplus", nx.softplus, lambda r: 4 * r.standard_normal((3, 4))),
    ("neg", nx.neg, lambda r: r.standard_normal((3, 4))),
    ("transpose", nx.transpose, lambda r: r.standard_normal((3, 4))),
    ("softmax_rows", nx.softmax_rows, lambda r: 2 * r.standard_normal((3, 5))),
    ("log_softmax_rows", nx.log_softmax_rows, lambda r: 2 * r.standard_normal((3, 5))),
    ("logsumexp_rows", nx.logsumexp_rows, lambda r: 2 * r.standard_normal((3, 5))),
    ("sum_all", nx.sum_all, lambda r: r.standard_normal((3, 4))),
    ("sum_rows", nx.sum_rows, lambda r: r.standard_normal((3, 4))),
    ("sum_cols", nx.sum_cols, lambda r: r.standard_normal((3, 4))),
    ("mean_rows", nx.mean_rows, lambda r: r.standard_normal((3, 4))),
    ("log_norm_sf", nx.log_norm_sf, lambda r: np.array([[-8.0, -1.0, 0.0, 2.5, 3.5, 12.0]]) + 0.1 * r.standard_normal((1, 6))),
    ("scale", lambda x: nx.scale(x, -2.5), lambda r: r.standard_normal((2, 3))),
    ("select_rows", lambda x: nx.select_rows(x, [2, 0, 2]), lambda r: r.standard_normal((3, 4))),
    ("select_cols", lambda x: nx.select_cols(x, slice(1, 3)), lambda r: r.standard_normal((3, 4))),
    ("select_cols_idx", lambda x: nx.select_cols(x, [3, 1, 1]), lambda r: r.standard_normal((3, 4))),
    ("maximum", lambda x: nx.maximum(x, 0.05), lambda r: r.choice([-1.0, 1.0], (3, 4)) * r.uniform(0.2, 1, (3, 4))),
]


@pytest.mark.parametrize("name,op,make", ELEMENTWISE, ids=[e[0] for e in ELEMENTWISE])
def test_unary_gradients(name, op, make):
    for seed in range(3):
        rng = np.random.default_rng(seed)
        assert check_op_gradient(op, [make(rng)], seed) < 1e-4


BINARY_SHAPES = [((3, 4), (3, 4)), ((3, 4), (1, 4)), ((3, 4), (3, 1)), ((3, 4), (1, 1))]


@pytest.mark.parametrize("op", [nx.add, nx.sub, nx.mul, nx.div], ids=["add", "sub", "mul", "div"])
@pytest.mark.parametrize("shapes", BINARY_SHAPES, ids=str)
def test_broadcast_binary_gradients(op, shapes):
    rng = np.random.default_rng(4)
    a = rng.standard_normal(shapes[0])
    b = rng.uniform(0.5, 2.0, shapes[1]) * rng.choice([-1, 1], shapes[1])
    assert check_op_gradient(op, [a, b]) < 1e-4


def test_concat_gradients():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    assert check_op_gradient(lambda x, y: nx.concat_rows([x, y]), [a, b]) < 1e-6
    c = rng.standard_normal((2, 5))
    assert check_op_gradient(lambda x, y: nx.concat_cols([x, y]), [a, c]) < 1e-6


def test_dropout_gradient_with_fixed_mask():
    x = np.random.default_rng(6).standard_normal((4, 5))
    op = lambda t: nx.dropout(t, 0.3, True, np.random.default_rng(9))
    assert check_op_gradient(op, [x]) < 1e-6


def test_dropout_behaviour():
    x = nx.Tensor(np.ones((2, 3)))
    rng = np.random.default_rng(0)
    assert nx.dropout(x, 0.0, True, rng) is x
    assert nx.dropout(x, 0.9, False, rng) is x
    with pytest.raises(ConfigError):
        nx.dropout(x, 1.0, True, rng)
    big = nx.dropout(np.ones((1, 100_000)), 0.1, True, np.random.default_rng(1)).value
    assert abs(big.mean() - 1.0) < 0.01
    a = nx.dropout(np.ones((3, 3)), 0.5, True, np.random.default_rng(2)).value
    b = nx.dropout(np.ones((3, 3)), 0.5, True, np.random.default_rng(2)).value
    assert np.array_equal(a, b)


def test_tape_replays_in_reverse_once():
    w = nx.Parameter(np.array([[2.0]]), "w")
    with nx.Tape() as tape:
        y = nx.square(w * 3.0)
        assert len(tape) == 2
    tape.backward(y)
    assert w.grad[0, 0] == pytest.approx(36.0)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_no_recording_outside_tape():
    w = nx.Parameter(np.ones((1, 1)), "w")
    out = nx.exp(w)
    assert not out.requires_grad


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        nx.exp(np.array([[1000.0]]))


# ---------------------------------------------------------------- Adam

def _quadratic_step(p, opt):
    opt.zero_grad()
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.square(p - 3.0))
    tape.backward(loss)
    opt.step()


def test_adam_first_step_moves_by_lr_times_sign():
    p = nx.Parameter(np.array([[0.0, 10.0]]), "p")
    opt = nx.Adam([p], lr=0.01, weight_decay=0.0)
    _quadratic_step(p, opt)
    assert np.allclose(p.value, [[0.01, 9.99]], atol=1e-9)


def test_adam_zero_gradient_leaves_parameter():
    p = nx.Parameter(np.array([[1.5]]), "p")
    opt = nx.Adam([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros_like(p.value)
    opt.step()
    assert p.value[0, 0] == 1.5


def test_adam_converges_on_quadratic():
    p = nx.Parameter(np.array([[0.0]]), "p")
    opt = nx.Adam([p], lr=0.1, weight_decay=0.0)
    for _ in range(200):
        _quadratic_step(p, opt)
    assert abs(p.value[0, 0] - 3.0) < 1e-2


def test_adam_decoupled_weight_decay():
    p = nx.Parameter(np.array([[2.0]]), "p")
    opt = nx.Adam([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros_like(p.value)
    opt.step()
    assert p.value[0, 0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_requires_backward_first():
    p = nx.Parameter(np.zeros((1, 1)), "p")
    with pytest.raises(OptimizerStateError):
        nx.Adam([p]).step()
