"""Two-stream detector: 3-D encoders, feature fusion decoder, logit and embedding heads."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

EMBED_EPS = 1e-12


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    phi_channels: int = 12
    psi_channels: int = 16
    phi_downsample: int = 4  # spatial stride of the phi stem; matches the codec factor
    enc_width: int = 32
    enc_layers: int = 2
    cardinality: int = 4
    fused_dim: int = 32
    heads: int = 8
    ffd_layers: int = 3
    embed_dim: int = 16
    margin: float = 0.3
    lam: float = 0.3
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 2
    seed: int = 0
    mining: str = "random"
    use_phi: bool = True
    use_psi: bool = True
    use_residual: bool = True
    learn_mask_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.ffd_layers < 1 or self.enc_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if not (self.use_phi or self.use_psi):
            raise ValueError("at least one input stream is required")
        if self.fused_dim % self.heads:
            raise ValueError(f"fused_dim {self.fused_dim} not divisible by {self.heads} heads")
        if self.mining not in ("random", "semi-hard"):
            raise ValueError(f"unknown mining policy {self.mining!r}")

    @property
    def fused_in(self) -> int:
        return self.enc_width * (int(self.use_phi) + int(self.use_psi))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def paper(cls, **kw) -> "DetectorConfig":
        """Full-scale widths: 2 x 1024 encoder channels fused 2048 -> 1024, 8 heads, L = 3."""
        base = dict(psi_channels=320, phi_downsample=8, enc_width=1024, enc_layers=3, cardinality=32,
                    fused_dim=1024, heads=8, ffd_layers=3, embed_dim=128)
        base.update(kw)
        return cls(**base)


class ResNeXtBlock3d(nn.Module):
    """Bottleneck with a grouped 3x3x3 conv and identity shortcut."""

    def __init__(self, ch: int, cardinality: int):
        super().__init__()
        groups = math.gcd(ch, cardinality)
        self.reduce = nn.Conv3d(ch, ch, 1, bias=False)
        self.norm1 = nn.GroupNorm(groups, ch)
        self.grouped = nn.Conv3d(ch, ch, 3, padding=1, groups=groups, bias=False)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.expand = nn.Conv3d(ch, ch, 1, bias=False)

    def forward(self, x):
        h = F.relu(self.norm1(self.reduce(x)))
        h = F.relu(self.norm2(self.grouped(h)))
        return F.relu(x + self.expand(h))


class StreamEncoder(nn.Module):
    """Stem (optionally patchifying by ``stride``) followed by ResNeXt blocks.

    Input (B, C, N, H, W); output (B, width, N, H/stride, W/stride).
    """

    def __init__(self, in_ch: int, width: int, layers: int, cardinality: int, stride: int = 1, bias: bool = True):
        super().__init__()
        if stride > 1:
            self.stem = nn.Conv3d(in_ch, width, (3, stride, stride), stride=(1, stride, stride),
                                  padding=(1, 0, 0), bias=bias)
        else:
            self.stem = nn.Conv3d(in_ch, width, 3, padding=1, bias=bias)
        self.blocks = nn.Sequential(*[ResNeXtBlock3d(width, cardinality) for _ in range(layers - 1)])

    def forward(self, x):
        return self.blocks(F.relu(self.stem(x)))


def sinusoidal_2d(dim: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D positional code (dim, h, w): half the channels encode rows, half columns."""
    if dim % 4:
        raise ValueError("positional dim must be divisible by 4")
    quarter = dim // 4
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freqs[None]
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freqs[None]
    row = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, dim/2)
    col = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # (w, dim/2)
    pe = torch.cat([row[:, None, :].expand(h, w, -1), col[None, :, :].expand(h, w, -1)], dim=-1)
    return pe.permute(2, 0, 1).to(dtype)


class TokenSelfAttention(nn.Module):
    """Multi-head self-attention over spatial tokens, pre-norm + residual, then post-norm."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm_in = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm_out = nn.LayerNorm(dim)

    def attend(self, x):
        B, L, D = x.shape
        h = self.heads
        split = lambda t: t.view(B, L, h, D // h).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)
        return self.out((w @ v).transpose(1, 2).reshape(B, L, D))

    def forward(self, x):
        return self.norm_out(x + self.attend(self.norm_in(x)))


class FeatureFusionDecoder(nn.Module):
    def __init__(self, in_ch: int, dim: int, heads: int, layers: int, cardinality: int):
        super().__init__()
        self.proj = nn.Conv3d(in_ch, dim, 1)
        self.attn = TokenSelfAttention(dim, heads)
        self.convs = nn.Sequential(*[ResNeXtBlock3d(dim, cardinality) for _ in range(layers)])

    def forward(self, v, a=None):
        x = v if a is None else torch.cat([v, a], dim=1)
        p = self.proj(x)  # (B, D, N, h, w)
        B, D, N, h, w = p.shape
        p = p + sinusoidal_2d(D, h, w, p.dtype)[:, None]
        tokens = p.permute(0, 2, 3, 4, 1).reshape(B * N, h * w, D)
        tokens = self.attn(tokens)
        p = tokens.reshape(B, N, h, w, D).permute(0, 4, 1, 2, 3)
        return self.convs(p).mean(dim=(2, 3, 4))


class MaskAggregator(nn.Module):
    """Learned weights over the full/face/lip gated copies of psi."""

    def __init__(self):
        super().__init__()
        self.weights = nn.Parameter(torch.full((3,), 1.0 / 3.0))

    def forward(self, psi):  # (B, N, 3C, h, w)
        B, N, C3, h, w = psi.shape
        return torch.einsum("k,bnkchw->bnchw", self.weights, psi.view(B, N, 3, C3 // 3, h, w))


@dataclass
class DetectorOutput:
    logit: torch.Tensor
    embedding: torch.Tensor
    fused: torch.Tensor = field(repr=False)


class Heads(nn.Module):
    def __init__(self, dim: int, embed_dim: int):
        super().__init__()
        self.logit = nn.Linear(dim, 1)
        self.embed = nn.Linear(dim, embed_dim)

    def forward(self, g) -> DetectorOutput:
        s = self.logit(g).squeeze(-1)
        u = l2_normalize(self.embed(g))
        return DetectorOutput(s, u, g)


def l2_normalize(e: torch.Tensor) -> torch.Tensor:
    return e / e.norm(dim=-1, keepdim=True).clamp_min(EMBED_EPS)


class Detector(nn.Module):
    """Inputs are frame-major: phi (B, N, 12, H, W) and psi (B, N, C, h, w)."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        phi_in = cfg.phi_channels - (0 if cfg.use_residual else 3)
        self.enc_v = StreamEncoder(phi_in, cfg.enc_width, cfg.enc_layers, cfg.cardinality,
                                   stride=cfg.phi_downsample) if cfg.use_phi else None
        self.enc_a = StreamEncoder(cfg.psi_channels, cfg.enc_width, cfg.enc_layers, cfg.cardinality) \
            if cfg.use_psi else None
        self.mask_agg = MaskAggregator() if cfg.learn_mask_weights and cfg.use_psi else None
        self.ffd = FeatureFusionDecoder(cfg.fused_in, cfg.fused_dim, cfg.heads, cfg.ffd_layers, cfg.cardinality)
        self.heads = Heads(cfg.fused_dim, cfg.embed_dim)

    def encode_streams(self, phi, psi):
        cfg = self.cfg
        v = a = None
        if cfg.use_phi:
            if not cfg.use_residual:
                phi = phi[:, :, :9]
            v = self.enc_v(phi.permute(0, 2, 1, 3, 4))
        if cfg.use_psi:
            if self.mask_agg is not None:
                psi = self.mask_agg(psi)
            a = self.enc_a(psi.permute(0, 2, 1, 3, 4))
        if v is not None and a is not None and v.shape[2:] != a.shape[2:]:
            raise ShapeError(f"encoded grids differ: phi stream {tuple(v.shape)} vs psi stream {tuple(a.shape)}; "
                             f"check phi_downsample against the psi grid")
        return v, a

    def fuse(self, v, a):
        if v is None:
            v, a = a, None
        return self.ffd(v, a)

    def forward(self, phi, psi) -> DetectorOutput:
        v, a = self.encode_streams(phi, psi)
        return self.heads(self.fuse(v, a))

    def layer(self, name: str) -> nn.Module:
        mods = dict(self.named_modules())
        if name not in mods or not name:
            raise KeyError(f"unknown layer {name!r}")
        return mods[name]
