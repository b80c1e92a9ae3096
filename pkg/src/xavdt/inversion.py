"""Audio-driven inversion, reconstruction and feature assembly.

Produces the two detector inputs per clip:

* the composite ``phi`` (N, 12, H, W) = [x | D(z_T) | D(z_0_hat) | |x - D(z_0_hat)|]
* the cross-attention feature ``psi`` (N, C, h, w) captured at one
  denoiser site and timestep during inversion, head-projected and
  mask-gated.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .audio import AudioCondition, AudioConfig
from .diffusion import (
    ATTENTION_KINDS,
    CaptureRecord,
    Conditioning,
    ConstantDenoiser,
    NoiseSchedule,
    ScheduleError,
    ScheduleSpec,
    TinyUNetConfig,
    TinyUNetDenoiser,
    UnknownSiteError,
    ddim_invert_step,
    ddim_sample,
    make_codec,
    make_schedule,
)

SEGMENT = 16
PHI_BLOCKS = ("input", "decoded_noise", "reconstruction", "residual")
MASK_KEYS = ("full", "face", "lip")


@dataclass
class VideoClip:
    frames: np.ndarray  # (N, 3, H, W) in [0, 1]
    fps: float = 25.0
    clip_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[1] != 3:
            raise ValueError(f"frames must be (N, 3, H, W), got {f.shape}")
        if f.shape[0] == 0:
            raise ValueError("clip has no frames")
        self.frames = np.clip(f, 0.0, 1.0)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MaskSet:
    """Region gates at latent resolution, (N, h, w) or (h, w), with one weight each."""

    full: np.ndarray
    face: np.ndarray
    lip: np.ndarray
    weights: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        shapes = {np.shape(self.full), np.shape(self.face), np.shape(self.lip)}
        if len(shapes) != 1:
            raise ValueError(f"mask shapes differ: {sorted(shapes)}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (3,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("mask weights must be three finite non-negative reals")
        self.weights = tuple(float(x) for x in w)

    def stack(self) -> np.ndarray:
        return np.stack([np.asarray(getattr(self, k), dtype=np.float64) for k in MASK_KEYS])

    @property
    def grid(self) -> tuple:
        return tuple(np.shape(self.full)[-2:])

    def frames(self, start: int, stop: int, total: int) -> "MaskSet":
        """Frame window of per-frame masks, padding with the last frame."""
        if np.ndim(self.full) == 2:
            return self
        idx = np.minimum(np.arange(start, stop), total - 1)
        return MaskSet(*(np.asarray(getattr(self, k))[idx] for k in MASK_KEYS), weights=self.weights)

    def resized(self, h: int, w: int) -> "MaskSet":
        """Nearest-neighbour resample to an (h, w) grid, e.g. for a lower-resolution site."""
        H, W = self.grid
        if (H, W) == (h, w):
            return self
        rows = np.minimum((np.arange(h) + 0.5) * H / h, H - 1).astype(int)
        cols = np.minimum((np.arange(w) + 0.5) * W / w, W - 1).astype(int)
        return MaskSet(*(np.asarray(getattr(self, k))[..., rows[:, None], cols[None, :]] for k in MASK_KEYS),
                       weights=self.weights)

    @classmethod
    def synthetic(cls, h: int, w: int, weights=(1.0, 0.0, 0.0)) -> "MaskSet":
        """Rectangular stand-ins: whole grid, central face box, lower-central lip box."""
        full = np.ones((h, w))
        face = np.zeros((h, w))
        face[h // 8: h - h // 8, w // 4: w - w // 4] = 1.0
        lip = np.zeros((h, w))
        lip[(5 * h) // 8: (7 * h) // 8 + 1, (3 * w) // 8: w - (3 * w) // 8] = 1.0
        return cls(full, face, lip, weights)


@dataclass
class CompositeFeature:
    data: np.ndarray  # (N, 12, H, W)

    def block(self, name: str) -> np.ndarray:
        i = PHI_BLOCKS.index(name)
        return self.data[:, 3 * i: 3 * i + 3]


@dataclass
class CrossAttnFeature:
    data: np.ndarray  # (N, C, h, w); (N, 3C, h, w) when masks stay unmerged
    t_star: int
    site: str


@dataclass
class Latent:
    """Latent tensor with the chain position that produced it."""

    data: np.ndarray
    timestep: int
    steps: int


@dataclass(frozen=True)
class ExtractConfig:
    schedule: ScheduleSpec = ScheduleSpec()
    t_star: int = 24
    site: str = "up.cross"
    codec: str = "strided_average"
    codec_factor: int = 8
    backend: str = "tiny_unet"
    unet: TinyUNetConfig = TinyUNetConfig()
    audio: AudioConfig = AudioConfig()
    mask_weights: tuple = (1.0, 0.0, 0.0)
    mask_mode: str = "frozen"  # or "learned": keep gated copies for the detector to weight
    segment: int = SEGMENT
    feature_dtype: str = "float32"

    def __post_init__(self):
        if self.mask_mode not in ("frozen", "learned"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        stage, _, kind = self.site.partition(".")
        if kind not in ATTENTION_KINDS:
            raise ValueError(f"site {self.site!r} must be '<stage>.<{'|'.join(ATTENTION_KINDS)}>'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["betas"] = list(d["schedule"]["betas"]) if d["schedule"]["betas"] else None
        d["mask_weights"] = list(self.mask_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractConfig":
        d = dict(d)
        sched = dict(d.pop("schedule", {}))
        if sched.get("betas") is not None:
            sched["betas"] = tuple(sched["betas"])
        return cls(schedule=ScheduleSpec(**sched),
                   unet=TinyUNetConfig(**d.pop("unet", {})),
                   audio=AudioConfig(**d.pop("audio", {})),
                   mask_weights=tuple(d.pop("mask_weights", (1.0, 0.0, 0.0))),
                   **d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    @classmethod
    def paper_scale(cls) -> "ExtractConfig":
        """Full-scale shapes: 40 of 1000 steps, t*=24, last up stage with 320 channels, 8x codec."""
        return cls(unet=TinyUNetConfig(latent_channels=4, base_channels=320, mid_channels=640,
                                       up_channels=320, heads=8, audio_dim=768),
                   audio=AudioConfig(layer_dim=768, cross_dim=768))

    @classmethod
    def desk(cls, **kw) -> "ExtractConfig":
        """Small, fast setting for toy corpora (10 of 1000 steps, 4x codec)."""
        base = dict(schedule=ScheduleSpec(steps=10), t_star=99, codec_factor=4)
        base.update(kw)
        return cls(**base)


def feature_shapes(cfg: ExtractConfig, n_frames: int, height: int, width: int) -> dict:
    """Shapes of phi and psi for a clip, derived from the config alone."""
    f = 1 if cfg.codec == "identity" else cfg.codec_factor
    if height % f or width % f:
        raise ValueError(f"frame size {height}x{width} not divisible by {f}")
    n = -(-n_frames // cfg.segment) * cfg.segment
    stage = cfg.site.split(".")[0]
    h, w = height // f, width // f
    C = {"down": cfg.unet.base_channels, "mid": cfg.unet.mid_channels, "up": cfg.unet.up_channels}[stage]
    if stage == "mid":
        h, w = -(-h // 2), -(-w // 2)
    if cfg.mask_mode == "learned":
        C *= 3
    return {"phi": (n, 12, height, width), "psi": (n, C, h, w)}


def build_backend(cfg: ExtractConfig):
    if cfg.backend == "tiny_unet":
        return TinyUNetDenoiser(cfg.unet, audio_dim=cfg.audio.cross_dim)
    if cfg.backend == "constant":
        return ConstantDenoiser(0.1)
    raise ValueError(f"unknown backend {cfg.backend!r}")


def segment_clip(video: VideoClip, audio: AudioCondition, length: int = SEGMENT):
    """Split into non-overlapping ``length``-frame windows, repeating the last frame to pad."""
    N = video.n_frames
    if N < 1:
        raise ValueError("empty clip")
    if audio.frames != N:
        raise ValueError(f"audio has {audio.frames} frames, video has {N}")
    total = -(-N // length) * length
    idx = np.minimum(np.arange(total), N - 1)
    frames = video.frames[idx]
    emb = audio.embedding[idx]
    out = []
    for s in range(0, total, length):
        out.append((VideoClip(frames[s:s + length], video.fps, f"{video.clip_id}#{s // length}"),
                    AudioCondition(emb[s:s + length], dict(audio.provenance))))
    return out


def _as_frames(x) -> np.ndarray:
    return x.frames if isinstance(x, VideoClip) else np.asarray(x)


def invert_and_capture(x, x_ref, c: AudioCondition, masks: Optional[MaskSet], t_star: Optional[int],
                       steps: int, backend, codec, schedule: NoiseSchedule, site: Optional[str] = None):
    """Encode, attach the reference latent, and invert clean -> T over ``steps`` steps.

    Returns ``(z_T, record)``.  ``record`` is the raw per-head capture taken
    at the denoiser call labelled ``t_star`` (None if ``t_star`` is None).
    ``masks`` are applied downstream by :func:`gate_and_aggregate`.
    """
    ladder = schedule.ladder(steps)
    if t_star is not None and t_star not in ladder[1:]:
        raise ScheduleError(f"t_star={t_star} is not an inversion timestep; valid: {ladder[1:].tolist()}")
    if t_star is not None:
        site = site or backend.default_site
        if site not in getattr(backend, "sites", ()):
            raise UnknownSiteError(f"unknown attention site {site!r}; available: {list(getattr(backend, 'sites', ()))}")

    z = codec.encode(_as_frames(x))
    ref = codec.encode(_as_frames(x_ref)[None])[0] if x_ref is not None else None
    emb = c.embedding if isinstance(c, AudioCondition) else c
    cond = Conditioning(emb, reference=ref)

    record = None
    for t, t_next in zip(ladder[:-1], ladder[1:]):
        capture = {site: None} if t_next == t_star else None
        z = ddim_invert_step(z, int(t), int(t_next), cond, backend, schedule, capture=capture)
        if capture is not None:
            record = capture[site]
    return Latent(z, int(ladder[-1]), steps), record


def reconstruct(z_T: Latent, c, steps: int, backend, schedule: NoiseSchedule, x_ref=None, codec=None):
    """Deterministic reverse chain from the inverted latent back to the clean state."""
    top = int(schedule.timesteps(steps)[-1])
    if isinstance(z_T, Latent):
        if z_T.steps != steps or z_T.timestep != top:
            raise ScheduleError(f"latent was inverted with {z_T.steps} steps to t={z_T.timestep}; "
                                f"reconstruction asked for {steps} steps ending at t={top}")
        data = z_T.data
    else:
        data = np.asarray(z_T)
    ref = None
    if x_ref is not None:
        ref = codec.encode(_as_frames(x_ref)[None])[0]
    emb = c.embedding if isinstance(c, AudioCondition) else c
    return ddim_sample(data, Conditioning(emb, reference=ref), backend, schedule, steps)


def assemble_composite(x, decoded_noise, reconstruction) -> CompositeFeature:
    x = np.asarray(_as_frames(x))
    dn = np.asarray(decoded_noise)
    rec = np.asarray(reconstruction)
    if not (x.shape == dn.shape == rec.shape) or x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3, H, W) tensors, got {x.shape}, {dn.shape}, {rec.shape}")
    dtype = np.result_type(x.dtype, dn.dtype, rec.dtype)
    x, dn, rec = x.astype(dtype), dn.astype(dtype), rec.astype(dtype)
    return CompositeFeature(np.concatenate([x, dn, rec, np.abs(x - rec)], axis=1))


def project_heads(record: CaptureRecord, grid: Optional[tuple] = None) -> np.ndarray:
    """Apply the site's output projection to the per-head output and reshape to (N, C, h, w)."""
    heads_out = np.asarray(record.heads_out, dtype=np.float64)
    if heads_out.ndim != 4:
        raise ValueError(f"expected (N, tokens, heads, dh), got {heads_out.shape}")
    N, T, H, dh = heads_out.shape
    W = np.asarray(record.out_weight, dtype=np.float64)
    if W.shape[1] != H * dh:
        raise ValueError(f"projection expects {W.shape[1]} inputs, heads give {H * dh}")
    grid = grid or record.grid
    if grid is None:
        side = int(round(np.sqrt(T)))
        grid = (side, side)
    if grid[0] * grid[1] != T:
        raise ValueError(f"{T} tokens do not fill the expected {grid[0]}x{grid[1]} grid")
    proj = heads_out.reshape(N, T, H * dh) @ W.T + np.asarray(record.out_bias, dtype=np.float64)
    return proj.transpose(0, 2, 1).reshape(N, W.shape[0], *grid)


def gate_and_aggregate(psi_tilde, masks: MaskSet, merge: bool = True) -> np.ndarray:
    """``sum_k w_k (psi_tilde * M_k)``; with ``merge=False`` the three gated copies are stacked on channels."""
    psi_tilde = np.asarray(psi_tilde, dtype=np.float64)
    M = masks.stack()  # (3, [N,] h, w)
    if M.shape[-2:] != psi_tilde.shape[-2:]:
        raise ValueError(f"mask grid {M.shape[-2:]} != feature grid {psi_tilde.shape[-2:]}")
    if M.ndim == 4:
        if M.shape[1] != psi_tilde.shape[0]:
            raise ValueError(f"{M.shape[1]} mask frames for {psi_tilde.shape[0]} feature frames")
        gated = psi_tilde[None] * M[:, :, None]
    else:
        gated = psi_tilde[None] * M[:, None, None]
    if not merge:
        return np.concatenate(list(gated), axis=1)
    w = np.asarray(masks.weights, dtype=np.float64)
    return np.tensordot(w, gated, axes=1)


@dataclass
class ExtractionResult:
    phi: CompositeFeature
    psi: CrossAttnFeature
    z0: np.ndarray = field(repr=False)
    zT: np.ndarray = field(repr=False)
    z0_hat: np.ndarray = field(repr=False)


class FeatureExtractor:
    """Runs the full extraction for one config; holds the frozen backend and codec."""

    def __init__(self, cfg: ExtractConfig, backend=None):
        self.cfg = cfg
        self.schedule = make_schedule(cfg.schedule.T, cfg.schedule)
        self.codec = make_codec(cfg.codec, cfg.codec_factor)
        self.backend = backend if backend is not None else build_backend(cfg)
        valid = self.schedule.timesteps(cfg.schedule.steps)
        if cfg.t_star not in valid:
            raise ScheduleError(f"t_star={cfg.t_star} is not an inversion timestep; valid: {valid.tolist()}")

    def default_masks(self, height: int, width: int) -> MaskSet:
        f = self.codec.factor
        return MaskSet.synthetic(height // f, width // f, self.cfg.mask_weights)

    def extract(self, clip: VideoClip, audio: AudioCondition, masks: Optional[MaskSet] = None,
                x_ref=None) -> ExtractionResult:
        cfg = self.cfg
        N, _, H, W = clip.frames.shape
        if masks is None:
            masks = self.default_masks(H, W)
        if tuple(masks.weights) != tuple(cfg.mask_weights):
            masks = replace(masks, weights=cfg.mask_weights)
        if x_ref is None:
            x_ref = clip.frames[0]
        total = -(-N // cfg.segment) * cfg.segment
        phis, psis, z0s, zTs, z0hs = [], [], [], [], []
        for i, (seg, seg_audio) in enumerate(segment_clip(clip, audio, cfg.segment)):
            x = seg.frames.astype(np.float64)
            zT, rec = invert_and_capture(x, x_ref, seg_audio, masks, cfg.t_star, cfg.schedule.steps,
                                         self.backend, self.codec, self.schedule, cfg.site)
            z0_hat = reconstruct(zT, seg_audio, cfg.schedule.steps, self.backend, self.schedule,
                                 x_ref=x_ref, codec=self.codec)
            phis.append(assemble_composite(x, self.codec.decode(zT.data), self.codec.decode(z0_hat)).data)
            psi_t = project_heads(rec)
            seg_masks = masks.frames(i * cfg.segment, (i + 1) * cfg.segment, N).resized(*psi_t.shape[-2:])
            psis.append(gate_and_aggregate(psi_t, seg_masks, merge=cfg.mask_mode == "frozen"))
            z0s.append(self.codec.encode(x))
            zTs.append(zT.data)
            z0hs.append(z0_hat)
        dt = np.dtype(cfg.feature_dtype)
        phi = np.concatenate(phis).astype(dt)
        psi = np.concatenate(psis).astype(dt)
        assert phi.shape[0] == total
        return ExtractionResult(CompositeFeature(phi), CrossAttnFeature(psi, cfg.t_star, cfg.site),
                                np.concatenate(z0s), np.concatenate(zTs), np.concatenate(z0hs))
