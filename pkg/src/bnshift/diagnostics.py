"""Distribution-shift diagnostics between two models' BN outputs.

Activations of each BN layer are pooled across samples, channels, and
positions into one empirical distribution per model, histogrammed over
shared equal-width bins spanning the joint range, and compared with the
Jensen-Shannon divergence in log base 2 (so values live in [0, 1]).
Kernel density estimates of the same pools back the qualitative views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["jsd", "layer_divergence", "kde", "DivergenceProfile", "DivergenceEntry"]

DEFAULT_BINS = 128


@dataclass
class DivergenceEntry:
    layer: str
    depth: int
    jsd: float
    channel: int | None = None


@dataclass
class DivergenceProfile:
    entries: list

    def values(self):
        return [e.jsd for e in self.entries]

    def by_layer(self):
        return {e.layer: e.jsd for e in self.entries if e.channel is None}


def jsd(p_hist, q_hist):
    """Jensen-Shannon divergence of two aligned normalized histograms, base 2."""
    p = np.asarray(p_hist, dtype=np.float64)
    q = np.asarray(q_hist, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histograms have different bin counts: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("histogram mass must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("histograms must each sum to 1")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float((a[nz] * np.log2(a[nz] / m[nz])).sum())

    return 0.5 * kl(p) + 0.5 * kl(q)


def _normalized_hist(values, lo, hi, bins):
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    return counts / values.size


def layer_divergence(trace_a, trace_b, bins=DEFAULT_BINS, per_channel=False):
    """Per-BN-layer JSD between two activation traces on the same batch.

    Traces must be structurally aligned (same layer names, same shapes, same
    order). With ``per_channel`` the pooling keeps channels separate and the
    profile carries one entry per (layer, channel).
    """
    if trace_a.layer_names() != trace_b.layer_names():
        raise ValueError("traces are structurally misaligned (layer names differ)")
    entries = []
    for ea, eb in zip(trace_a.entries, trace_b.entries):
        if ea.values.shape != eb.values.shape:
            raise ValueError(f"layer {ea.layer}: trace shapes differ")
        if per_channel:
            channels = ea.values.shape[1]
            for ch in range(channels):
                a, b = ea.values[:, ch].ravel(), eb.values[:, ch].ravel()
                entries.append(DivergenceEntry(ea.layer, ea.depth, _pooled_jsd(a, b, bins), ch))
        else:
            a, b = ea.values.ravel(), eb.values.ravel()
            entries.append(DivergenceEntry(ea.layer, ea.depth, _pooled_jsd(a, b, bins)))
    return DivergenceProfile(entries)


def _pooled_jsd(a, b, bins):
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 0.0
    return jsd(_normalized_hist(a, lo, hi, bins), _normalized_hist(b, lo, hi, bins))


def silverman_bandwidth(samples):
    sd = float(np.std(samples, ddof=1))
    return 1.06 * sd * len(samples) ** (-0.2)


def kde(samples, grid, bandwidth="auto"):
    """Gaussian-kernel density estimate evaluated on ``grid``.

    ``bandwidth="auto"`` applies Silverman's rule 1.06 * sd * n^(-1/5).
    The curve integrates to ~1 when the grid covers the sample support.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if samples.size < 2:
        raise ValueError("kde needs at least 2 samples")
    if not np.isfinite(samples).all():
        raise ValueError("kde samples must be finite")
    if bandwidth == "auto":
        bandwidth = silverman_bandwidth(samples)
        if bandwidth == 0.0:
            raise ValueError(
                "degenerate sample (zero spread); add jitter before estimating a density"
            )
    bandwidth = float(bandwidth)
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    norm = 1.0 / (samples.size * bandwidth * math.sqrt(2.0 * math.pi))
    density = np.zeros_like(grid)
    # chunked so big activation pools do not blow up the pairwise matrix
    for start in range(0, samples.size, 8192):
        chunk = samples[start : start + 8192]
        z = (grid[:, None] - chunk[None, :]) / bandwidth
        density += np.exp(-0.5 * z * z).sum(axis=1)
    return density * norm
