"""Conditioned noise predictors.

Every backend exposes ``predict_eps(z, t, cond, capture=None)`` returning a
float64 array shaped like ``z``.  Backends with attention sites fill the
optional ``capture`` dict (keys are site names) with :class:`CaptureRecord`
entries during the call.  Backends are read-only after construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .schedule import NoiseSchedule

ATTENTION_KINDS = ("cross", "spatial", "temporal")


class UnknownSiteError(KeyError):
    pass


@dataclass
class Conditioning:
    """Per-call conditioning: audio tokens (N, L, d) and an optional reference latent (c, h, w)."""

    audio: np.ndarray
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        a = np.asarray(self.audio, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, None, :]
        if a.ndim != 3:
            raise ValueError(f"audio condition must be (N, L, d), got {a.shape}")
        self.audio = a


@dataclass
class CaptureRecord:
    """Raw per-head attention output at one site, frame-major.

    heads_out: (N, tokens, heads, dh); out_weight: (C, heads*dh);
    out_bias: (C,); grid: latent (h, w) of the site.
    """

    site: str
    heads_out: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray
    grid: tuple

    @property
    def channels(self) -> int:
        return self.out_weight.shape[0]


class ConstantDenoiser:
    """Returns the same noise tensor for every input (broadcast to ``z``)."""

    sites: tuple = ()
    default_site = None

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    def predict_eps(self, z, t, cond=None, capture=None):
        z = np.asarray(z)
        _reject_capture(self, capture)
        return np.broadcast_to(self.value, z.shape).astype(np.float64)


class GaussianScoreDenoiser:
    """Exact noise prediction when data are i.i.d. N(mean, var) per element.

    With ``z_t = sqrt(ab) x0 + sqrt(1-ab) eps`` the posterior expectation of
    ``eps`` is ``sqrt(1-ab) (z_t - sqrt(ab) mean) / (ab var + 1 - ab)``.
    """

    sites: tuple = ()
    default_site = None

    def __init__(self, schedule: NoiseSchedule, mean=0.0, var=1.0):
        self.schedule = schedule
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)

    def predict_eps(self, z, t, cond=None, capture=None):
        _reject_capture(self, capture)
        z = np.asarray(z, dtype=np.float64)
        ab = self.schedule.alpha_bar(t)
        return np.sqrt(1 - ab) * (z - np.sqrt(ab) * self.mean) / (ab * self.var + 1 - ab)


def _reject_capture(backend, capture):
    if capture:
        missing = [s for s in capture if s not in backend.sites]
        if missing:
            raise UnknownSiteError(f"unknown attention site(s) {missing}; available: {list(backend.sites)}")


# --------------------------------------------------------------------------
# TinyUNet


@dataclass(frozen=True)
class TinyUNetConfig:
    latent_channels: int = 3
    base_channels: int = 16
    mid_channels: int = 32
    up_channels: int = 16
    heads: int = 2
    audio_dim: int = 16
    time_dim: int = 32
    # every linear/conv weight is rescaled to this spectral norm
    lipschitz: float = 0.5
    seed: int = 0


def _timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    arg = (t + 1) * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)])


def _spectral_rescale(module: nn.Module, target: float) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                w = m.weight.reshape(m.weight.shape[0], -1)
                s = torch.linalg.matrix_norm(w, ord=2)
                if s > 0:
                    m.weight.mul_(target / s)
                if m.bias is not None:
                    m.bias.mul_(0.1)


class SiteAttention(nn.Module):
    """Multi-head attention whose per-head outputs can be captured."""

    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def heads_forward(self, x, ctx):
        B, Lq, D = x.shape
        h = self.heads
        q = self.to_q(x).view(B, Lq, h, D // h).transpose(1, 2)
        k = self.to_k(ctx).view(B, ctx.shape[1], h, D // h).transpose(1, 2)
        v = self.to_v(ctx).view(B, ctx.shape[1], h, D // h).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)
        return (w @ v).transpose(1, 2)  # (B, Lq, heads, dh)

    def forward(self, x, ctx):
        raw = self.heads_forward(x, ctx)
        return self.to_out(raw.reshape(*raw.shape[:2], -1)), raw


class StageBlock(nn.Module):
    """Residual conv + spatial, cross (audio) and temporal attention at one resolution."""

    def __init__(self, ch: int, ref_ch: int, audio_dim: int, time_dim: int, heads: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(time_dim, ch)
        self.ref_proj = nn.Linear(ref_ch, ch, bias=False)
        self.spatial = SiteAttention(ch, ch, heads)
        self.cross = SiteAttention(ch, audio_dim, heads)
        self.temporal = SiteAttention(ch, ch, heads)

    def forward(self, h, temb, audio, ref, name, capture):
        N, C, H, W = h.shape
        r = self.conv1(F.silu(h)) + self.temb(temb)[None, :, None, None]
        h = h + 0.5 * self.conv2(F.silu(r))

        tokens = h.flatten(2).transpose(1, 2)  # (N, HW, C)
        ctx = tokens
        if ref is not None:
            ref_tok = self.ref_proj(ref.flatten(1).T)[None].expand(N, -1, -1)
            ctx = torch.cat([tokens, ref_tok], dim=1)
        out, raw = self.spatial(tokens, ctx)
        self._record(capture, f"{name}.spatial", raw, self.spatial, (H, W))
        tokens = tokens + 0.5 * out

        out, raw = self.cross(tokens, audio)
        self._record(capture, f"{name}.cross", raw, self.cross, (H, W))
        tokens = tokens + 0.5 * out

        seq = tokens.transpose(0, 1)  # (HW, N, C): attend across frames
        out, raw = self.temporal(seq, seq)
        self._record(capture, f"{name}.temporal", raw.transpose(0, 1), self.temporal, (H, W))
        tokens = tokens + 0.5 * out.transpose(0, 1)
        return tokens.transpose(1, 2).reshape(N, C, H, W)

    @staticmethod
    def _record(capture, site, raw, attn, grid):
        if capture is not None and site in capture:
            capture[site] = CaptureRecord(
                site=site,
                heads_out=raw.detach().cpu().numpy().copy(),
                out_weight=attn.to_out.weight.detach().cpu().numpy().copy(),
                out_bias=attn.to_out.bias.detach().cpu().numpy().copy(),
                grid=grid,
            )


class TinyUNet(nn.Module):
    """Down / mid / up U-Net over per-frame latents with one attention triple per stage.

    Sites are named ``{down,mid,up}.{cross,spatial,temporal}``; ``up`` is the
    last up stage and runs at full latent resolution with ``up_channels``.
    """

    STAGES = ("down", "mid", "up")

    def __init__(self, cfg: TinyUNetConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, cu = cfg.base_channels, cfg.mid_channels, cfg.up_channels
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.time_mlp = nn.Linear(cfg.time_dim, cfg.time_dim)
        self.down = StageBlock(c0, c0, cfg.audio_dim, cfg.time_dim, cfg.heads)
        self.downsample = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.mid = StageBlock(c1, c0, cfg.audio_dim, cfg.time_dim, cfg.heads)
        self.up_in = nn.Conv2d(c1 + c0, cu, 3, padding=1)
        self.up = StageBlock(cu, c0, cfg.audio_dim, cfg.time_dim, cfg.heads)
        self.conv_out = nn.Conv2d(cu, cfg.latent_channels, 3, padding=1)

    def forward(self, z, t: int, audio, ref=None, capture=None):
        temb = F.silu(self.time_mlp(_timestep_embedding(t, self.cfg.time_dim).to(z.dtype)))
        h0 = self.conv_in(z)
        ref0 = self.conv_in(ref[None])[0] if ref is not None else None
        h = self.down(h0, temb, audio, ref0, "down", capture)
        skip = h
        h = self.downsample(F.silu(h))
        ref1 = F.avg_pool2d(ref0[None], 2)[0] if ref0 is not None else None
        h = self.mid(h, temb, audio, ref1, "mid", capture)
        h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
        h = self.up_in(torch.cat([h, skip], dim=1))
        h = self.up(h, temb, audio, ref0, "up", capture)
        return self.conv_out(F.silu(h))


class TinyUNetDenoiser:
    """numpy-facing wrapper around :class:`TinyUNet` with frozen, seeded weights."""

    def __init__(self, cfg: TinyUNetConfig = TinyUNetConfig(), audio_dim: int | None = None):
        if audio_dim is not None and audio_dim != cfg.audio_dim:
            cfg = TinyUNetConfig(**{**cfg.__dict__, "audio_dim": audio_dim})
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.net = TinyUNet(cfg).double()
        finally:
            torch.random.set_rng_state(gen_state)
        _spectral_rescale(self.net, cfg.lipschitz)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.sites = tuple(f"{s}.{k}" for s in TinyUNet.STAGES for k in ATTENTION_KINDS)
        self.default_site = "up.cross"

    def predict_eps(self, z, t, cond: Conditioning, capture=None):
        _reject_capture(self, capture)
        z_t = torch.as_tensor(np.asarray(z, dtype=np.float64))
        audio = torch.as_tensor(cond.audio)
        if audio.shape[0] != z_t.shape[0]:
            raise ValueError(f"audio frames {audio.shape[0]} != latent frames {z_t.shape[0]}")
        ref = None if cond.reference is None else torch.as_tensor(np.asarray(cond.reference, dtype=np.float64))
        with torch.no_grad():
            eps = self.net(z_t, int(t), audio, ref, capture)
        return eps.numpy()

    def site_module(self, site: str) -> SiteAttention:
        if site not in self.sites:
            raise UnknownSiteError(f"unknown attention site {site!r}; available: {list(self.sites)}")
        stage, kind = site.split(".")
        return getattr(getattr(self.net, stage), kind)

    def cross_attention_capture(self, hidden, cond: Conditioning, site: str | None = None):
        """Attend from a hidden state (N, C, h, w) to the audio tokens at ``site``.

        Returns ``(attended, record)`` where ``attended`` is (N, C, h, w)
        after the output projection and ``record`` holds the raw per-head output.
        """
        site = site or self.default_site
        attn = self.site_module(site)
        if not site.endswith(".cross"):
            raise UnknownSiteError(f"{site!r} is not a cross-attention site")
        H = torch.as_tensor(np.asarray(hidden, dtype=np.float64))
        N, C, h, w = H.shape
        tokens = H.flatten(2).transpose(1, 2)
        with torch.no_grad():
            out, raw = attn(tokens, torch.as_tensor(cond.audio))
        rec = CaptureRecord(site, raw.numpy().copy(), attn.to_out.weight.numpy().copy(),
                            attn.to_out.bias.numpy().copy(), (h, w))
        return out.transpose(1, 2).reshape(N, C, h, w).numpy(), rec


def cross_attention_capture(hidden, cond: Conditioning, site: str, backend):
    if site not in getattr(backend, "sites", ()):
        raise UnknownSiteError(f"unknown attention site {site!r}; available: {list(getattr(backend, 'sites', ()))}")
    return backend.cross_attention_capture(hidden, cond, site)
