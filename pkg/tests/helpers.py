"""Shared test oracles, kept independent of the library's backward pass."""

import numpy as np

from bnshift.tensor import Tensor


def finite_diff_grad(loss_fn, leaf, h=1e-6):
    """Central-difference gradient of a scalar loss wrt one leaf tensor.

    Perturbs the leaf's buffer element by element and re-runs the forward
    closure, never touching the analytic backward path.
    """
    base = leaf.data.copy()
    grad = np.zeros_like(base)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn())
        flat[i] = orig - h
        down = float(loss_fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    leaf.data[...] = base
    return grad


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def check_gradients(loss_fn, leaves, h=1e-6, tol=1e-5, atol=1e-8):
    """Assert analytic grads match the central-difference oracle per leaf.

    Elementwise criterion |analytic - numeric| <= atol + tol * |numeric|;
    the additive floor sits at the oracle's own rounding noise (~|f|*eps/h)
    so near-zero gradient components do not amplify it into fake failures.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = loss_fn()
    assert isinstance(loss, Tensor) and loss.size == 1
    loss.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        assert leaf.grad is not None, f"leaf {i} received no gradient"
        numeric = finite_diff_grad(loss_fn, leaf, h=h)
        gap = np.abs(leaf.grad - numeric) - (atol + tol * np.abs(numeric))
        assert gap.max() <= 0, (
            f"gradient mismatch on leaf {i}: worst excess {gap.max():.3e}, "
            f"rel error {rel_error(leaf.grad, numeric):.3e}"
        )
        worst = max(worst, rel_error(leaf.grad, numeric))
    return worst


def pairwise_roc_oracle(scores, labels):
    """O(P*N) Mann-Whitney count with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def sorted_percentile_oracle(values, pct):
    """Linear-interpolation percentile computed from an explicit sort."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = (v.size - 1) * pct / 100.0
    lo = int(np.floor(rank))
    hi = int(np.ceil(rank))
    if lo == hi:
        return v[lo]
    frac = rank - lo
    return v[lo] * (1.0 - frac) + v[hi] * frac
