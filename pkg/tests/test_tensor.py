"""Tensor core: arithmetic, autodiff engine, and the binary tensor format."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnshift.tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    concat,
    load_tensor,
    matmul,
    mul,
    narrow,
    no_grad,
    read_tensor,
    save_tensor,
    scale,
    sub,
    write_tensor,
)
from helpers import check_gradients, finite_diff_grad, rel_error


def test_add_elementwise():
    assert np.array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_zero_annihilates_value_and_grad():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    y = mul(x, 0.0)
    assert np.array_equal(y.data, np.zeros(3))
    y.sum().backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_scale_halves():
    assert np.array_equal(scale(Tensor([2.0, 4.0]), 0.5).data, [1.0, 2.0])


def test_sub_and_shape_mismatch():
    assert np.array_equal(sub(Tensor([5.0, 1.0]), Tensor([2.0, 1.0])).data, [3.0, 0.0])
    with pytest.raises(ShapeError):
        add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_matmul_identity_and_dot():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), m).data, m.data)
    assert np.array_equal(
        matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]]
    )
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)))  # fixed projection to a scalar

    check_gradients(lambda: (matmul(a, b) * w).sum(), [a, b], tol=1e-6)


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 2)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 2)))


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2.0 * first)
    x.zero_grad()
    assert x.grad is None


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=5), requires_grad=True)

    def grad_of(fn):
        x.zero_grad()
        fn().backward()
        return x.grad.copy()

    f = lambda: (x * x).sum()
    g = lambda: (x * 3.0 + 1.0).sum()
    combined = grad_of(lambda: f() * 2.0 + g() * (-0.5))
    assert np.allclose(combined, 2.0 * grad_of(f) - 0.5 * grad_of(g), atol=1e-12)


def test_diamond_reuse_accumulates_through_graph():
    x = Tensor([2.0], requires_grad=True)
    y = x * x  # reused twice below
    ((y * 3.0) + y).sum().backward()  # d/dx of 4x^2 = 8x
    assert np.allclose(x.grad, [16.0])


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    y = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    cases = [
        lambda: (x * y).sum(),
        lambda: (x - y).mean(),
        lambda: (x.exp() * 0.1).sum(),
        lambda: x.log().sum(),
        lambda: x.sqrt().sum(),
        lambda: (x**3).sum(),
        lambda: (x - 1.2).abs().sum(),
        lambda: x.clip(0.6, 1.8).sum(),
        lambda: x.reshape(12).sum(),
        lambda: (concat([x, y], axis=1) * 0.5).sum(),
        lambda: narrow(x, 1, 3).sum(),
        lambda: (-x).sum(),
    ]
    for fn in cases:
        check_gradients(fn, [x, y] if "y" in fn.__code__.co_names else [x])


def test_no_grad_blocks_recording():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert y._parents == ()


def test_determinism_same_seed_bitwise():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        loss = (matmul(x, w).exp() * 0.01).sum()
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_mul_gradient_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.5, 1.5, size=(rows, cols)), requires_grad=True)
    y = Tensor(rng.uniform(0.5, 1.5, size=(rows, cols)))
    x.zero_grad()
    (x * y).sum().backward()
    assert np.allclose(x.grad, y.data, atol=1e-12)


def test_finite_diff_oracle_sanity():
    # the oracle itself: d/dx sum(x^2) = 2x
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    numeric = finite_diff_grad(lambda: (x * x).sum().item(), x)
    assert rel_error(numeric, 2.0 * x.data) < 1e-8


def test_tensor_grad_shape_matches_data():
    x = Tensor(np.ones((2, 5)), requires_grad=True)
    (x * 2.0).sum().backward()
    assert x.grad.shape == x.data.shape


# -- binary tensor format -------------------------------------------------------


def test_bnst_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(2, 3, 4))
    path = tmp_path / "t.bnst"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_bnst_layout_is_little_endian_with_magic():
    buf = io.BytesIO()
    write_tensor(buf, np.array([[1.0, 2.0]]))
    raw = buf.getvalue()
    assert raw[:4] == b"BNST"
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:16] == (2).to_bytes(4, "little")
    assert np.frombuffer(raw[16:], dtype="<f8").tolist() == [1.0, 2.0]


def test_bnst_rejects_bad_magic():
    with pytest.raises(ValueError):
        read_tensor(io.BytesIO(b"XXXX" + b"\x00" * 16))


def test_bnst_rejects_truncated_payload():
    buf = io.BytesIO()
    write_tensor(buf, np.ones(4))
    with pytest.raises(ValueError):
        read_tensor(io.BytesIO(buf.getvalue()[:-8]))
