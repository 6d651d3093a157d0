"""Gradient reversal, warm-up scheduling, and the domain head."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnshift.adversarial import (
    DomainHead,
    LambdaScheduler,
    domain_forward,
    grl_apply,
    schedule_lambda,
)
from bnshift.layers import Linear, linear, relu
from bnshift.tensor import ShapeError, Tensor


def test_grl_forward_is_bit_identical():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    y = grl_apply(x, 0.7)
    assert y.data.tobytes() == x.data.tobytes()


def test_grl_lambda_zero_kills_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    grl_apply(x, 0.0).sum().backward()
    assert np.array_equal(x.grad, np.zeros((2, 2)))


def test_grl_lambda_one_flips_ones():
    x = Tensor(np.ones(5), requires_grad=True)
    grl_apply(x, 1.0).sum().backward()
    assert np.array_equal(x.grad, -np.ones(5))


def test_grl_rejects_negative_lambda():
    with pytest.raises(ValueError):
        grl_apply(Tensor([1.0]), -0.1)


def _head_grad(x, fc1, fc2, lam):
    x.zero_grad()
    h = grl_apply(x, lam) if lam is not None else x
    out = relu(linear(h, fc1))
    (linear(out, fc2) ** 2).sum().backward()
    return x.grad.copy()


def test_grl_scales_composed_graph_gradient_exactly():
    # powers of two commute with IEEE rounding, so equality is bitwise
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    fc1 = Linear(6, 5, rng=rng)
    fc2 = Linear(5, 2, rng=rng)
    plain = _head_grad(x, fc1, fc2, None)
    for lam in (0.5, 1.0, 2.0):
        with_grl = _head_grad(x, fc1, fc2, lam)
        assert with_grl.tobytes() == (-lam * plain).tobytes()
    for lam in (0.3, 0.77):
        with_grl = _head_grad(x, fc1, fc2, lam)
        assert np.allclose(with_grl, -lam * plain, rtol=1e-12, atol=0)


def test_schedule_matches_tanh_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.uniform(0.0, 1.0)
        tau = rng.uniform(1e-3, 1.0)
        gamma = rng.uniform(0.1, 30.0)
        s = LambdaScheduler(tau, gamma)
        assert abs(schedule_lambda(p, s) - tau * math.tanh(gamma * p / 2.0)) < 1e-12


def test_schedule_reference_points():
    s = LambdaScheduler(1.0, 10.0)
    assert schedule_lambda(0.0, s) == 0.0
    assert abs(schedule_lambda(0.5, s) - 0.986614) < 1e-6
    assert abs(schedule_lambda(1.0, s) - 0.999909) < 1e-6


def test_schedule_rejects_out_of_range_progress():
    s = LambdaScheduler()
    for p in (-0.1, 1.1):
        with pytest.raises(ValueError):
            schedule_lambda(p, s)


def test_scheduler_parameter_validation():
    with pytest.raises(ValueError):
        LambdaScheduler(tau_max=0.0)
    with pytest.raises(ValueError):
        LambdaScheduler(tau_max=1.2)
    with pytest.raises(ValueError):
        LambdaScheduler(gamma_rate=0.0)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(1e-3, 1.0, allow_nan=False),
    st.floats(0.1, 25.0, allow_nan=False),
    st.integers(0, 1000),
    st.integers(0, 1000),
)
def test_schedule_monotone_and_bounded(tau, gamma, i1, i2):
    # p on a millis grid: strict monotonicity is only testable above the
    # float64 resolution of the saturating sigmoid
    s = LambdaScheduler(tau, gamma)
    lo, hi = sorted((i1 / 1000.0, i2 / 1000.0))
    v_lo, v_hi = schedule_lambda(lo, s), schedule_lambda(hi, s)
    assert v_lo < tau and v_hi < tau
    if lo < hi:
        assert v_lo < v_hi
    assert schedule_lambda(0.0, s) == 0.0


def test_domain_head_rows_sum_to_one():
    rng = np.random.default_rng(1)
    head = DomainHead(6, widths=(8, 4, 4), rng=rng)
    out = domain_forward(Tensor(rng.normal(size=(5, 6))), head, 0.3)
    assert out.shape == (5, 2)
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12


def test_domain_head_width_mismatch():
    head = DomainHead(6, widths=(8, 4, 4), rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        domain_forward(Tensor(np.zeros((2, 5))), head, 0.1)


def test_lambda_zero_trains_head_but_not_features():
    rng = np.random.default_rng(4)
    head = DomainHead(6, widths=(8, 4, 4), rng=rng)
    feats = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    out = domain_forward(feats, head, 0.0)
    target = Tensor(np.tile([1.0, 0.0], (4, 1)))
    ((out - target) ** 2).sum().backward()
    assert np.array_equal(feats.grad, np.zeros((4, 6)))
    assert any(np.abs(p.grad).max() > 0 for _, p in head.parameters())
