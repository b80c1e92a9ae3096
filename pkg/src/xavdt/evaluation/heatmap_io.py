"""Heatmap export: PNG image plus a raw-tensor XAVF sidecar."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .. import xavf


def _colorize(h: np.ndarray) -> np.ndarray:
    # blue -> red ramp through white at 0.5
    h = np.clip(h, 0, 1)[..., None]
    blue, white, red = np.array([0, 0, 255.0]), np.array([255.0, 255, 255]), np.array([255.0, 0, 0])
    lo = blue + (white - blue) * (h / 0.5)
    hi = white + (red - white) * ((h - 0.5) / 0.5)
    return np.where(h < 0.5, lo, hi).astype(np.uint8)


def save_heatmap(path, heatmap, signed: bool = False, tag: str = "") -> tuple:
    """Write ``path`` (.png) and ``path`` with .xavf next to it; returns both paths.

    Signed maps (e.g. real/fake deltas) are mapped from [-max|h|, max|h|] to the colour ramp.
    """
    path = Path(path)
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got {h.shape}")
    if signed:
        m = np.abs(h).max()
        disp = 0.5 + 0.5 * h / m if m > 0 else np.full_like(h, 0.5)
    else:
        disp = h
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_colorize(disp), mode="RGB").save(path)
    side = path.with_suffix(".xavf")
    xavf.write(side, h, hashlib.sha256(tag.encode()).digest(), overwrite=True)
    return path, side
