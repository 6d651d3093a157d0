"""Batch normalization with three statistics regimes and activation taps.

Modes:
  TRAIN  normalize with batch statistics and update the running averages
  TR     normalize with the frozen running averages (training-time stats)
  TT     normalize with batch statistics recomputed on the inference batch,
         running averages untouched

Normalization always uses the biased (population) variance; the running
variance update uses the unbiased estimate. Running statistics never
participate in autodiff.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import Tensor

__all__ = [
    "StatsMode",
    "BNLayer",
    "bn_forward",
    "set_mode",
    "tap_activations",
    "ActivationTrace",
    "TraceEntry",
    "suspend_stat_updates",
]


class StatsMode(Enum):
    TRAIN = "train"
    TR = "tr"
    TT = "tt"


# When >0, TRAIN-mode forwards skip the running-stat update. Used by the
# activation taps so tracing never perturbs training state.
_stat_updates_suspended = 0


@contextlib.contextmanager
def suspend_stat_updates():
    global _stat_updates_suspended
    _stat_updates_suspended += 1
    try:
        yield
    finally:
        _stat_updates_suspended -= 1


class BNLayer:
    """Per-channel scale/shift with running mean and variance."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, name=""):
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.mode = StatsMode.TRAIN
        self.name = name

    @property
    def channels(self):
        return self.gamma.size

    def __call__(self, x):
        return bn_forward(x, self)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def _axes_and_count(shape, channels):
    if len(shape) == 4 and shape[1] == channels:
        n = shape[0] * shape[2] * shape[3]
        return (0, 2, 3), n, (1, channels, 1, 1)
    if len(shape) == 2 and shape[1] == channels:
        return (0,), shape[0], (1, channels)
    raise ValueError(f"bn_forward: input {shape} incompatible with {channels} channels")


def bn_forward(x, layer):
    """Normalize per channel according to the layer's active statistics mode."""
    axes, n, bshape = _axes_and_count(x.shape, layer.channels)
    gamma, beta = layer.gamma, layer.beta
    eps = layer.eps

    if layer.mode is StatsMode.TR:
        inv_std = 1.0 / np.sqrt(layer.running_var + eps)
        xhat = (x.data - layer.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

        def bw_tr(g):
            return (
                g * (gamma.data * inv_std).reshape(bshape),
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return _record(layer, Tensor.from_op(out, (x, gamma, beta), bw_tr))

    if n < 2:
        raise ValueError(
            f"bn_forward: {layer.mode.value} mode needs >= 2 values per channel, got {n}"
        )
    mean = x.data.mean(axis=axes)
    centered = x.data - mean.reshape(bshape)
    var = (centered**2).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    if layer.mode is StatsMode.TRAIN and not _stat_updates_suspended:
        m = layer.momentum
        layer.running_mean *= 1.0 - m
        layer.running_mean += m * mean
        layer.running_var *= 1.0 - m
        layer.running_var += m * var * (n / (n - 1))

    def bw_batch(g):
        gb = g.sum(axis=axes)
        gs = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        dx = (
            dxhat
            - dxhat.mean(axis=axes).reshape(bshape)
            - xhat * (dxhat * xhat).mean(axis=axes).reshape(bshape)
        ) * inv_std.reshape(bshape)
        return (dx, gs, gb)

    return _record(layer, Tensor.from_op(out, (x, gamma, beta), bw_batch))


def set_mode(model, mode, tt_batch_size=None):
    """Switch every BN layer of a model; TT additionally needs a batch size."""
    mode = StatsMode(mode) if not isinstance(mode, StatsMode) else mode
    if mode is StatsMode.TT and tt_batch_size is None:
        raise ValueError("TT mode requires tt_batch_size")
    for _, layer in model.bn_layers():
        layer.mode = mode
    model.tt_batch_size = int(tt_batch_size) if mode is StatsMode.TT else None


@dataclass
class TraceEntry:
    layer: str
    depth: int
    values: np.ndarray


@dataclass
class ActivationTrace:
    """Post-BN outputs for one batch, in network depth order."""

    entries: list[TraceEntry] = field(default_factory=list)

    def layer_names(self):
        return [e.layer for e in self.entries]

    def __len__(self):
        return len(self.entries)


# Module-level tap target; forwards are confined to one thread per graph.
_active_trace = None


def tap_activations(model, batch):
    """Capture every BN layer's output for one batch without perturbing state.

    Runs under the model's current statistics mode; TRAIN-mode running-stat
    updates are suspended for the duration.
    """
    global _active_trace
    from .tensor import no_grad

    if not model.bn_layers():
        raise ValueError("model has no BN layers to tap")
    trace = ActivationTrace()
    _active_trace = trace
    try:
        with no_grad(), suspend_stat_updates():
            x = batch if isinstance(batch, Tensor) else Tensor(batch)
            model.forward(x)
    finally:
        _active_trace = None
    for depth, entry in enumerate(trace.entries):
        entry.depth = depth
    return trace


def _record(layer, out):
    if _active_trace is not None:
        _active_trace.entries.append(TraceEntry(layer.name, -1, out.data.copy()))
    return out
