"""Pixel <-> latent codecs standing in for a VAE."""
from __future__ import annotations

import numpy as np


class IdentityCodec:
    factor = 1
    name = "identity"

    def encode(self, x):
        return np.asarray(x, dtype=np.float64).copy()

    def decode(self, z):
        return np.asarray(z, dtype=np.float64).copy()


class StridedAverageCodec:
    """Average-pool by ``factor`` on encode, nearest-neighbour repeat on decode."""

    name = "strided_average"

    def __init__(self, factor: int = 8):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = int(factor)

    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        f = self.factor
        *lead, H, W = x.shape
        if H % f or W % f:
            raise ValueError(f"frame size {H}x{W} not divisible by downsample factor {f}")
        x = x.reshape(*lead, H // f, f, W // f, f)
        return x.mean(axis=(-3, -1))

    def decode(self, z):
        z = np.asarray(z, dtype=np.float64)
        f = self.factor
        return np.repeat(np.repeat(z, f, axis=-2), f, axis=-1)


def make_codec(name: str, factor: int = 8):
    if name == "identity":
        return IdentityCodec()
    if name == "strided_average":
        return StridedAverageCodec(factor)
    raise ValueError(f"unknown codec {name!r}")
