"""Spatial attention-map analyses: temporal averaging, top-q ROI coverage, real/fake deltas."""
from __future__ import annotations

import numpy as np


def minmax(maps, axes=(-2, -1), constant: float = 0.0) -> np.ndarray:
    """Min-max normalize each map over ``axes``; constant maps become ``constant``."""
    m = np.asarray(maps, dtype=np.float64)
    lo = m.min(axis=axes, keepdims=True)
    hi = m.max(axis=axes, keepdims=True)
    rng = hi - lo
    out = np.where(rng > 0, (m - lo) / np.where(rng > 0, rng, 1.0), constant)
    return out


def attention_energy(psi) -> np.ndarray:
    """Per-position L2 norm over channels: (N, C, h, w) -> (N, h, w)."""
    psi = np.asarray(psi, dtype=np.float64)
    return np.sqrt((psi ** 2).sum(axis=-3))


def temporal_attention_heatmap(maps) -> np.ndarray:
    """Normalize each frame's map to [0, 1], then average over time: (N, h, w) -> (h, w)."""
    m = np.asarray(maps, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    if m.shape[0] == 0:
        raise ValueError("no frames")
    return minmax(m).mean(axis=0)


def topq_roi_coverage(attn, roi, q: float) -> float:
    """Fraction of the smallest top-mass pixel set (holding ``q`` of the mass) that lies in ``roi``.

    Pixels are taken greedily by descending weight; equal weights are
    broken by ascending flat index.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    a = np.asarray(attn, dtype=np.float64).ravel()
    r = np.asarray(roi).ravel().astype(bool)
    if a.shape != r.shape:
        raise ValueError("attention map and ROI differ in size")
    if np.any(a < 0):
        raise ValueError("attention weights must be non-negative")
    total = a.sum()
    if total <= 0:
        raise ValueError("attention map has zero mass")
    order = np.lexsort((np.arange(a.size), -a))
    cum = np.cumsum(a[order]) / total
    # small tolerance so exact fractions like 0.7 = 0.4 + 0.3 are not lost to rounding
    k = int(np.searchsorted(cum, q - 1e-12)) + 1
    chosen = order[:min(k, a.size)]
    return float(r[chosen].mean())


def delta_attention_map(real_maps, fake_maps) -> np.ndarray:
    """mean(normalized fake) - mean(normalized real); positive where fakes attend more."""
    real = np.asarray(real_maps, dtype=np.float64)
    fake = np.asarray(fake_maps, dtype=np.float64)
    if real.ndim == 2:
        real = real[None]
    if fake.ndim == 2:
        fake = fake[None]
    if real.shape[-2:] != fake.shape[-2:]:
        raise ValueError(f"map sizes differ: {real.shape[-2:]} vs {fake.shape[-2:]}")
    return minmax(fake).mean(axis=0) - minmax(real).mean(axis=0)
