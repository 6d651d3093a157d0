"""Gradient reversal, the warm-up scheduler for its strength, and the domain head.

The reversal layer is the identity on the forward pass and multiplies the
upstream gradient by -lambda_domain on the backward pass. Its strength is
warmed up over training progress p in [0, 1] by

    lambda(p) = 2 * tau_max / (1 + exp(-gamma_rate * p)) - tau_max

which is 0 at p = 0 and approaches tau_max from below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .layers import Linear, linear, relu, softmax
from .tensor import ShapeError, Tensor

__all__ = ["grl_apply", "LambdaScheduler", "schedule_lambda", "DomainHead", "domain_forward"]


def grl_apply(x, lambda_domain):
    """Identity forward; backward emits -lambda_domain * upstream gradient."""
    lam = float(lambda_domain)
    if lam < 0:
        raise ValueError(f"lambda_domain must be non-negative, got {lam}")
    return Tensor.from_op(x.data, (x,), lambda g: (g * -lam,))


@dataclass
class LambdaScheduler:
    """Warm-up schedule parameters: upper limit tau_max, steepness gamma_rate."""

    tau_max: float = 1.0
    gamma_rate: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.tau_max <= 1.0:
            raise ValueError(f"tau_max must be in (0, 1], got {self.tau_max}")
        if self.gamma_rate <= 0:
            raise ValueError(f"gamma_rate must be positive, got {self.gamma_rate}")


def schedule_lambda(p, scheduler):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"training progress p must be in [0, 1], got {p}")
    return 2.0 * scheduler.tau_max / (1.0 + math.exp(-scheduler.gamma_rate * p)) - scheduler.tau_max


class DomainHead:
    """Three FC+ReLU layers and a 2-way softmax over {source, target}."""

    def __init__(self, in_features, widths=(64, 32, 16), rng=None):
        sizes = [in_features, *widths]
        self.hidden = [Linear(sizes[i], sizes[i + 1], rng=rng) for i in range(len(widths))]
        self.out = Linear(sizes[-1], 2, rng=rng)

    def __call__(self, features, lambda_domain):
        return domain_forward(features, self, lambda_domain)

    def parameters(self):
        named = []
        for i, fc in enumerate(self.hidden, start=1):
            named += [(f"fc{i}.{n}", p) for n, p in fc.parameters()]
        named += [(f"out.{n}", p) for n, p in self.out.parameters()]
        return named


def domain_forward(features, head, lambda_domain):
    """Reverse gradients, then classify features as source vs target."""
    if features.ndim != 2 or features.shape[1] != head.hidden[0].weight.shape[1]:
        raise ShapeError(
            f"domain_forward: feature width {features.shape} does not match head input "
            f"{head.hidden[0].weight.shape[1]}"
        )
    h = grl_apply(features, lambda_domain)
    for fc in head.hidden:
        h = relu(linear(h, fc))
    return softmax(linear(h, head.out))
