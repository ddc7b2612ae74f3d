"""Autograd core: brute-force forward oracles, gradient checks and tape semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv_loop, dense_loop, pool_loop, rel

from abnet.gradsuite import check_ops
from abnet.nn import (
    Adam,
    BatchNormStats,
    ParamGroup,
    Tape,
    Tensor,
    backward,
    finite_diff_check,
    inject_fault,
    no_record,
    ops,
)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loops_both_paths(seed):
    rng = np.random.default_rng(seed)
    # c_out <= c_in and c_out > c_in exercise both internal implementations
    for c_in, c_out in ((2, 5), (5, 2), (3, 3)):
        x = rng.normal(size=(2, c_in, int(rng.integers(3, 7)), int(rng.integers(3, 7))))
        w = rng.normal(size=(c_out, c_in, 3, 3))
        b = rng.normal(size=c_out)
        for padding in (0, 1):
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), padding).data
            assert rel(got, conv_loop(x, w, b, padding)) <= 1e-12


def test_conv_unbatched_matches_batched():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(3, 5, 5)), rng.normal(size=(4, 3, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), None, 1).data
    b = ops.conv2d(Tensor(x[None]), Tensor(w), None, 1).data[0]
    assert np.array_equal(a, b)


def test_pool_and_dense_match_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 7))
    assert rel(ops.maxpool2d(Tensor(x)).data, pool_loop(x)) == 0.0
    d, w, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6)), rng.normal(size=3)
    assert rel(ops.dense(Tensor(d), Tensor(w), Tensor(b)).data, dense_loop(d, w, b)) <= 1e-12


def test_conv_shape_errors_name_the_dimension():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    with pytest.raises(ValueError, match="C_in"):
        ops.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ValueError, match="H/W"):
        ops.conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(ValueError, match="padding"):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), padding=2)
    with pytest.raises(ValueError, match="D_in"):
        ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="spatial"):
        ops.concat_channels([Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((2, 4, 3)))])
    with pytest.raises(ValueError, match="H,W >= 2"):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 1, 4))))


def test_maxpool_first_occurrence_tie_and_floor():
    x = Tensor(np.ones((1, 1, 3, 3)))
    y = ops.maxpool2d(x)
    x.requires_grad = True
    with Tape() as tape:
        loss = ops.maxpool2d(x).sum()
    backward(loss, tape)
    expected = np.zeros((1, 1, 3, 3))
    expected[0, 0, 0, 0] = 1.0
    assert np.array_equal(x.grad, expected)
    assert y.shape == (1, 1, 1, 1)


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_train_moments_and_constant_input():
    rng = np.random.default_rng(0)
    # unbatched 4x3x3; eps makes the output variance var/(var+eps), so a wide input keeps it within 1e-6 of 1
    raw = rng.normal(3.0, 10.0, size=(4, 3, 3))
    y = ops.batchnorm(Tensor(raw), Tensor(np.ones(4)), Tensor(np.zeros(4)), "train").data
    assert np.all(np.abs(y.mean(axis=(1, 2))) < 1e-10)
    assert np.all(np.abs(y.var(axis=(1, 2)) - 1.0) < 1e-6)
    v = raw.var(axis=(1, 2))
    assert np.allclose(y.var(axis=(1, 2)), v / (v + 1e-5), rtol=0, atol=1e-12)
    const = Tensor(np.broadcast_to(np.arange(3.0)[None, :, None, None], (2, 3, 4, 4)).copy())
    out = ops.batchnorm(const, Tensor(np.ones(3)), Tensor(np.zeros(3)), "train").data
    assert np.array_equal(out, np.zeros_like(out))


def test_batchnorm_running_stats_and_eval_requirements():
    stats = BatchNormStats(2)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    with pytest.raises(ValueError, match="running"):
        ops.batchnorm(Tensor(np.zeros((1, 2, 2, 2))), g, b, "eval", stats)
    x = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    ops.batchnorm(Tensor(x), g, b, "train", stats)
    assert np.allclose(stats.mean, x.mean(axis=(0, 2, 3)))
    assert np.allclose(stats.var, x.var(axis=(0, 2, 3), ddof=1))
    ops.batchnorm(Tensor(x + 1.0), g, b, "train", stats)
    assert np.allclose(stats.mean, x.mean(axis=(0, 2, 3)) + 0.1)
    out = ops.batchnorm(Tensor(x), g, b, "eval", stats).data
    assert np.allclose(out, (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5))


# ---------------------------------------------------------------- gradients


def test_every_op_passes_finite_differences():
    errors = check_ops(seed=0)
    assert max(errors.values()) <= 1e-4, errors


def test_injected_fault_is_detected_and_scoped():
    rng = np.random.default_rng(0)
    x, w = Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(2, 2, 3, 3)))

    def fn():
        return ops.conv2d(x, w, None, 1).sum()

    with inject_fault("conv2d", 2.0):
        assert finite_diff_check(fn, [x, w]) > 0.1
    assert finite_diff_check(fn, [x, w]) < 1e-6


def test_backward_needs_scalar_and_accumulates_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)
    with Tape() as tape:
        loss = ops.add(ops.sum_(ops.mul(x, x)), ops.sum_(x))
    backward(loss, tape)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_no_record_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_record():
            ops.relu(x)
    assert len(tape) == 0


def test_unbroadcast_gradient_shapes():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_(ops.mul(a, b))
    backward(loss, tape)
    assert b.grad.shape == (1, 3) and np.allclose(b.grad, 2.0)


@settings(max_examples=25, deadline=None)
@given(
    b=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(3, 6), w=st.integers(3, 6),
    co=st.integers(1, 3), pad=st.sampled_from([0, 1]), seed=st.integers(0, 10_000),
)
def test_conv_gradient_property(b, c, h, w, co, pad, seed):
    rng = np.random.default_rng(seed)
    x, k = Tensor(rng.normal(size=(b, c, h, w))), Tensor(rng.normal(size=(co, c, 3, 3)))
    r = rng.normal(size=(b, co, h + 2 * pad - 2, w + 2 * pad - 2))
    assert finite_diff_check(lambda: ops.sum_(ops.mul(ops.conv2d(x, k, None, pad), r)), [x, k]) <= 1e-6


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_moves_by_lr_and_lr_scale_applies():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    q = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([ParamGroup([p], 0.1), ParamGroup([q], 0.01)])
    p.grad, q.grad = np.array([3.0, -0.5]), np.array([2.0])
    opt.step()
    assert np.allclose(p.data, [0.9, -0.9])
    assert np.allclose(q.data, [0.49])
    opt.set_lr_scale(0.5)
    p.grad, q.grad = np.array([3.0, -0.5]), np.array([2.0])
    opt.step()
    assert np.allclose(q.data, [0.485])


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([ParamGroup([p], 0.05)])
    for _ in range(500):
        opt.zero_grad()
        with Tape() as tape:
            loss = ops.sum_(ops.square(p))
        backward(loss, tape)
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)
