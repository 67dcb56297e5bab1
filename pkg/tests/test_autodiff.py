"""Tensor/tape semantics, per-op gradient correctness, Adam, and the checker."""

import math

import numpy as np
import pytest

import hdrf.autodiff as ad
from hdrf.autodiff import AdamState, Tape, Tensor, adam_step, backward, finite_diff_check
from hdrf.errors import (
    DeterminismError,
    DomainError,
    InputError,
    NumericError,
    ShapeError,
    TapeReuseError,
)


def scalarize(op_fn, *tensors):
    """Random projection to a scalar so any op can be gradient-checked."""
    rng = np.random.default_rng(7)
    out = op_fn(*tensors)
    proj = Tensor(rng.standard_normal(out.shape))
    return ad.sum_all(ad.mul(out, proj))


# ---------------------------------------------------------------------------
# forward values


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)


def test_softplus_at_zero_is_log_two():
    assert ad.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_matmul_of_ones_gives_row_sums():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 1)))
    assert np.allclose(ad.matmul(a, b).data, 3.0)


def test_mean_sq_err_averages_over_rows():
    a = Tensor([[0.1, 0.0, 0.0], [0.0, 0.0, 0.0]])
    b = Tensor(np.zeros((2, 3)))
    assert ad.mean_sq_err(a, b).item() == pytest.approx(0.01 / 2)


def test_op_apply_dispatch_and_unknown_kind():
    x = Tensor([1.0, 2.0])
    assert np.allclose(ad.op_apply("exp", x).data, np.exp([1.0, 2.0]))
    with pytest.raises(InputError):
        ad.op_apply("conv3d", x)


# ---------------------------------------------------------------------------
# gradient correctness: every op kind vs central differences


def _rand(rng, shape):
    # keep values away from relu's kink and log's boundary
    return rng.uniform(0.2, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


OP_CASES = {
    "matmul": lambda rng: (
        ad.matmul,
        [Tensor(_rand(rng, (3, 4)), True), Tensor(_rand(rng, (4, 2)), True)],
    ),
    "add": lambda rng: (ad.add, [Tensor(_rand(rng, (3, 4)), True), Tensor(_rand(rng, (4,)), True)]),
    "mul": lambda rng: (ad.mul, [Tensor(_rand(rng, (3, 4)), True), Tensor(_rand(rng, (3, 1)), True)]),
    "exp": lambda rng: (ad.exp, [Tensor(_rand(rng, (5,)), True)]),
    "log": lambda rng: (ad.log, [Tensor(rng.uniform(0.3, 2.0, 5), True)]),
    "relu": lambda rng: (ad.relu, [Tensor(_rand(rng, (6,)), True)]),
    "softplus": lambda rng: (ad.softplus, [Tensor(_rand(rng, (6,)), True)]),
    "sigmoid": lambda rng: (ad.sigmoid, [Tensor(_rand(rng, (6,)), True)]),
    "sum": lambda rng: (ad.sum_all, [Tensor(_rand(rng, (4, 3)), True)]),
    "mean_sq_err": lambda rng: (
        ad.mean_sq_err,
        [Tensor(_rand(rng, (4, 3)), True), Tensor(_rand(rng, (4, 3)), True)],
    ),
    "concat": lambda rng: (
        lambda a, b: ad.concat([a, b], axis=1),
        [Tensor(_rand(rng, (3, 2)), True), Tensor(_rand(rng, (3, 4)), True)],
    ),
    "broadcast": lambda rng: (
        lambda a: ad.broadcast(a, (4, 3, 2)),
        [Tensor(_rand(rng, (3, 1)), True)],
    ),
    "take_column": lambda rng: (
        lambda a: ad.take_column(a, 1),
        [Tensor(_rand(rng, (5, 3)), True)],
    ),
    "reshape": lambda rng: (
        lambda a: ad.reshape(a, (2, 6)),
        [Tensor(_rand(rng, (3, 4)), True)],
    ),
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(kind):
    # ten random double-precision points per op kind, relative tolerance 1e-5
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        op_fn, tensors = OP_CASES[kind](rng)
        report = finite_diff_check(lambda: scalarize(op_fn, *tensors), tensors, h=1e-6, rel_tol=1e-5)
        assert report.passed, f"{kind} seed {seed}: {report}"


def test_chain_rule_on_scalar_chain():
    x = Tensor(0.3, requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
        z = ad.sigmoid(y)
    backward(tape, z)
    ex = math.exp(0.3)
    sig = 1.0 / (1.0 + math.exp(-ex))
    assert x.grad == pytest.approx(sig * (1 - sig) * ex, rel=1e-12)


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_sigmoid_at_zero_gives_quarter():
    x = Tensor(0.0, requires_grad=True)
    with Tape() as tape:
        y = ad.sigmoid(x)
    backward(tape, y)
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_all(x)
    backward(tape, y)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_unused_parameter_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.sum_all(ad.mul(x, x))
    backward(tape, y, params=[x, unused])
    assert np.array_equal(unused.grad, np.zeros(1))
    assert np.allclose(x.grad, 2.0 * x.data)


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_backward_twice_on_same_tape_rejected():
    x = Tensor(1.0, requires_grad=True)
    with Tape() as tape:
        y = ad.sigmoid(x)
    backward(tape, y)
    with pytest.raises(TapeReuseError):
        backward(tape, y)


def test_gradients_overwritten_across_tapes():
    x = Tensor(2.0, requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            y = ad.mul(x, x)
        backward(tape, y)
    assert x.grad == pytest.approx(4.0)  # not accumulated to 8


def test_shared_input_gradients_accumulate_within_one_pass():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = ad.add(ad.mul(x, x), ad.mul(x, x))
    backward(tape, y)
    assert x.grad == pytest.approx(12.0)


# ---------------------------------------------------------------------------
# validation and errors


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        Tensor([np.inf])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_log_of_non_positive_raises_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-1.0]))


def test_exp_overflow_raises_numeric_error():
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_signed_lr():
    lr = 1e-3
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    g = np.array([0.5, -0.2, 0.01])
    state = AdamState.for_params([p])
    before = p.data.copy()
    adam_step([p], [g], state, lr)
    # bias correction makes m_hat = g and v_hat = g^2 on the first step
    expected = before - lr * g / (np.abs(g) + state.eps)
    assert np.allclose(p.data, expected, rtol=1e-12)
    assert np.allclose(p.data, before - lr * np.sign(g), atol=1e-6)
    assert state.t == 1


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2)], state, 1e-2)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_constant_gradient_keeps_unit_step_scale():
    lr = 1e-3
    p = Tensor(np.array([0.0]), requires_grad=True)
    g = np.array([0.7])
    state = AdamState.for_params([p])
    adam_step([p], [g], state, lr)
    first = abs(float(p.data[0]))
    before = float(p.data[0])
    adam_step([p], [g], state, lr)
    second = abs(float(p.data[0]) - before)
    assert first == pytest.approx(lr, rel=1e-5)
    assert second == pytest.approx(lr, rel=1e-5)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(4)], state, 1e-3)


def test_adam_defaults_match_training_setup():
    state = AdamState.for_params([Tensor(np.zeros(2), requires_grad=True)])
    assert (state.beta1, state.beta2, state.eps) == (0.9, 0.999, 1e-7)


# ---------------------------------------------------------------------------
# finite-difference checker


def test_checker_square_function_is_exact():
    x = Tensor(3.0, requires_grad=True)
    report = finite_diff_check(lambda: ad.mul(x, x), [x], h=1e-5, rel_tol=1e-8)
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_checker_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    report = finite_diff_check(lambda: ad.sigmoid(x), [x], h=1e-6, rel_tol=1e-6)
    assert report.passed


def test_checker_constant_function_passes_with_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor(5.0)
    report = finite_diff_check(lambda: ad.mul(c, c), [x], h=1e-5, rel_tol=1e-6)
    assert report.passed
    assert report.max_rel_err == 0.0


def test_checker_rejects_nondeterministic_eval():
    x = Tensor(1.0, requires_grad=True)
    rng = np.random.default_rng(0)

    def noisy():
        return ad.mul(x, Tensor(rng.random()))

    with pytest.raises(DeterminismError):
        finite_diff_check(noisy, [x])
