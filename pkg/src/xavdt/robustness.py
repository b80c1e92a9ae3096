"""Deterministic corruption ladders and the severity-sweep harness.

Severity 0 is always the identity.  Visual ladders (severities 1-4):

    jpeg        quality 90, 70, 50, 30
    blur        Gaussian radius (std, pixels) 0.5, 1.0, 2.0, 3.0
    noise       std on the 0-255 scale 5, 10, 20, 35 (clamped to [0, 1])
    resize      scale 0.75, 0.60, 0.50, 0.40, bilinear down then up
    frame_drop  drop probability 0.05, 0.10, 0.20, 0.30, no duplication

Audio ladders (severities 1-2): ``audio_desync`` offsets -0.5 s, +0.5 s;
``audio_bitrate`` caps 32 and 8 kbps (simulated).
"""
from __future__ import annotations

import hashlib
import io
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import PIL
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.signal import resample_poly
import torch
import torch.nn.functional as F

from .audio import AudioCondition
from .evaluation import EvalReport
from .inversion import MaskSet, VideoClip

LADDERS = {
    "jpeg": (None, 90, 70, 50, 30),
    "blur": (0.0, 0.5, 1.0, 2.0, 3.0),
    "noise": (0.0, 5.0, 10.0, 20.0, 35.0),
    "resize": (1.0, 0.75, 0.60, 0.50, 0.40),
    "frame_drop": (0.0, 0.05, 0.10, 0.20, 0.30),
    "audio_desync": (0.0, -0.5, 0.5),
    "audio_bitrate": (None, 32, 8),
}
VISUAL_KINDS = ("jpeg", "blur", "noise", "resize", "frame_drop")
AUDIO_KINDS = ("audio_desync", "audio_bitrate")
JPEG_ENCODER = f"Pillow {PIL.__version__} baseline JPEG (4:2:0, standard quality tables)"

# bitrate cap (kbps) -> simulated sample rate; bits per sample follow from the cap
BITRATE_RATES = {8: 4000, 16: 4000, 32: 8000, 64: 16000}


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in LADDERS:
            raise CorruptionError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity < len(LADDERS[self.kind]):
            raise CorruptionError(f"{self.kind} severity must be in [0, {len(LADDERS[self.kind]) - 1}]")

    @property
    def param(self):
        return LADDERS[self.kind][self.severity]


def _frame_rng(seed: int, frame: np.ndarray) -> np.random.Generator:
    digest = hashlib.sha256(np.ascontiguousarray(frame).tobytes()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def _jpeg(frame: np.ndarray, quality: int) -> np.ndarray:
    img = Image.fromarray(np.round(frame.transpose(1, 2, 0) * 255).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def _resize(frames: np.ndarray, scale: float) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
    H, W = x.shape[-2:]
    small = (max(1, int(round(H * scale))), max(1, int(round(W * scale))))
    down = F.interpolate(x, size=small, mode="bilinear", align_corners=False)
    return F.interpolate(down, size=(H, W), mode="bilinear", align_corners=False).numpy()


def frame_drop_indices(n: int, p: float, seed: int, clip_id: str) -> np.ndarray:
    """Indices of retained frames (ordered); at least one frame is kept."""
    rng = np.random.default_rng([seed, zlib.crc32(clip_id.encode())])
    keep = np.nonzero(rng.random(n) >= p)[0]
    return keep if keep.size else np.array([0])


def corrupt_video(clip: VideoClip, spec: CorruptionSpec) -> VideoClip:
    if spec.kind not in VISUAL_KINDS:
        raise CorruptionError(f"{spec.kind} is not a visual corruption")
    if spec.severity == 0:
        return VideoClip(clip.frames.copy(), clip.fps, clip.clip_id)
    x = clip.frames
    p = spec.param
    if spec.kind == "jpeg":
        out = np.stack([_jpeg(f, p) for f in x])
    elif spec.kind == "blur":
        out = gaussian_filter(x, sigma=(0, 0, p, p), mode="reflect")
    elif spec.kind == "noise":
        out = np.stack([f + _frame_rng(spec.seed, f).normal(0.0, p / 255.0, size=f.shape) for f in x])
    elif spec.kind == "resize":
        out = _resize(x, p)
    else:
        out = x[frame_drop_indices(len(x), p, spec.seed, clip.clip_id)]
    return VideoClip(np.clip(out, 0.0, 1.0).astype(np.float32), clip.fps, clip.clip_id)


def _offset(tau: float, rate: float) -> int:
    return int(np.floor(abs(tau) * rate + 0.5))  # half-up, so 0.5 s at 25 fps is 13 frames


def _desync_wave(w: np.ndarray, sr: int, tau: float) -> np.ndarray:
    k = _offset(tau, sr)
    if k >= w.size:
        raise CorruptionError(f"offset {tau}s is not shorter than the clip ({w.size / sr:.3f}s)")
    if tau > 0:
        return np.concatenate([np.zeros(k, dtype=w.dtype), w[:w.size - k]])
    return np.concatenate([w[k:], np.zeros(k, dtype=w.dtype)])


def _mu_law_quantize(w: np.ndarray, bits: int, mu: float = 255.0) -> np.ndarray:
    peak = max(np.abs(w).max(), 1e-12)
    x = np.clip(w / peak, -1, 1)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    levels = 2 ** bits - 1
    yq = np.round((y + 1) / 2 * levels) / levels * 2 - 1
    return peak * np.sign(yq) * np.expm1(np.abs(yq) * np.log1p(mu)) / mu


def simulate_bitrate(w: np.ndarray, sr: int, kbps: int) -> np.ndarray:
    """Band-limit to a low sample rate, companding-quantize, and resample back."""
    low = min(BITRATE_RATES.get(int(kbps), 8000), sr)
    bits = max(1, int(round(kbps * 1000 / low)))
    g = np.gcd(sr, low)
    down = resample_poly(w, low // g, sr // g)
    q = _mu_law_quantize(down, bits)
    up = resample_poly(q, sr // g, low // g)
    out = np.zeros_like(w)
    out[:min(w.size, up.size)] = up[:w.size]
    return out


def corrupt_audio(audio, spec: CorruptionSpec, sr: Optional[int] = None, fps: Optional[float] = None):
    """Corrupt a waveform (needs ``sr``) or an AudioCondition (desync only, needs ``fps``).

    Desync keeps the length: a delay prefixes silence and drops the tail, an
    advance trims the head and pads silence at the end.
    """
    if spec.kind not in AUDIO_KINDS:
        raise CorruptionError(f"{spec.kind} is not an audio corruption")
    if isinstance(audio, AudioCondition):
        if spec.severity == 0:
            return AudioCondition(audio.embedding.copy(), dict(audio.provenance))
        if spec.kind != "audio_desync":
            raise CorruptionError("bitrate simulation needs a waveform")
        if fps is None:
            raise CorruptionError("frame rate required to shift a conditioning sequence")
        e = audio.embedding
        k = _offset(spec.param, fps)
        if k >= e.shape[0]:
            raise CorruptionError("offset is not shorter than the clip")
        z = np.zeros((k,) + e.shape[1:], dtype=e.dtype)
        e = np.concatenate([z, e[:e.shape[0] - k]]) if spec.param > 0 else np.concatenate([e[k:], z])
        return AudioCondition(e, dict(audio.provenance))
    w = np.asarray(audio, dtype=np.float64)
    if spec.severity == 0:
        return w.copy()
    if sr is None:
        raise CorruptionError("sample rate required for waveform corruption")
    if spec.kind == "audio_desync":
        return _desync_wave(w, sr, spec.param)
    return simulate_bitrate(w, sr, spec.param)


# --------------------------------------------------------------------------
# severity sweep


@dataclass
class RobustnessReport:
    grid: dict = field(default_factory=dict)  # (kind, severity) -> EvalReport
    kinds: tuple = ()
    severities: tuple = ()
    jpeg_encoder: str = JPEG_ENCODER

    def rows(self):
        for (kind, sev), rep in sorted(self.grid.items()):
            for metric in EvalReport.KEYS:
                yield kind, sev, metric, getattr(rep, metric)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"# jpeg_encoder: {self.jpeg_encoder}", "kind\tseverity\tmetric\tvalue"]
        lines += [f"{k}\t{s}\t{m}\t{v!r}" for k, s, m, v in self.rows()]
        grid_path = out / "robustness_grid.tsv"
        grid_path.write_text("\n".join(lines) + "\n")
        for kind in self.kinds:
            curve = ["severity\tparam\tauroc\tap\tacc_at_eer"]
            for sev in self.severities:
                r = self.grid[(kind, sev)]
                curve.append(f"{sev}\t{LADDERS[kind][sev]}\t{r.auroc!r}\t{r.ap!r}\t{r.acc_at_eer!r}")
            (out / f"curve_{kind}.tsv").write_text("\n".join(curve) + "\n")
        return grid_path


def read_grid(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("kind\t") or not line.strip():
            continue
        k, s, m, v = line.split("\t")
        out[(k, int(s), m)] = float(v)
    return out


def run_suite(ckpt, manifest, extract_cfg, kinds: Iterable[str] = VISUAL_KINDS,
              severities: Iterable[int] = (0, 1, 2, 3, 4), seed: int = 0, extractor=None,
              clean_features=None) -> RobustnessReport:
    """Corrupt raw inputs, re-extract features, score, and evaluate each (kind, severity).

    ``clean_features`` (a FeatureSet aligned with ``manifest``) is reused for
    the severity-0 column when given; otherwise it is extracted like the rest.
    """
    from .inversion import FeatureExtractor
    from .pipeline import condition_for, evaluate_features, extract_inputs, load_inputs
    from .detector import FeatureSet

    kinds, severities = tuple(kinds), tuple(severities)
    if 0 not in severities:
        raise CorruptionError("severity grid must include the severity-0 baseline")
    for k in kinds:
        for s in severities:
            CorruptionSpec(k, s, seed)
    fx = extractor or FeatureExtractor(extract_cfg)
    inputs = [load_inputs(manifest, r, extract_cfg) for r in manifest]
    labels = [r.label for r in manifest]
    gens = [r.generator for r in manifest]
    ids = [r.clip_id for r in manifest]

    def features(kind, sev):
        spec = CorruptionSpec(kind, sev, seed)
        phis, psis = [], []
        for inp in inputs:
            if kind in AUDIO_KINDS:
                wav = corrupt_audio(inp.waveform, spec, sr=inp.sr)
                inp2 = type(inp)(inp.record, inp.clip, wav, inp.sr, inp.masks)
                cond = condition_for(inp2, extract_cfg)
            else:
                cond = condition_for(inp, extract_cfg)
                clip = corrupt_video(inp.clip, spec)
                masks = inp.masks
                if kind == "frame_drop" and sev > 0:
                    keep = frame_drop_indices(inp.clip.n_frames, spec.param, seed, inp.clip.clip_id)
                    cond = AudioCondition(cond.embedding[keep], cond.provenance)
                    if masks is not None and np.ndim(masks.full) == 3:
                        masks = MaskSet(masks.full[keep], masks.face[keep], masks.lip[keep], masks.weights)
                inp2 = type(inp)(inp.record, clip, inp.waveform, inp.sr, masks)
            phi, psi = extract_inputs(fx, inp2, cond)
            # dropped frames can shorten a clip by whole segments; pad like a segment tail
            n = -(-inp.clip.n_frames // extract_cfg.segment) * extract_cfg.segment
            if phi.shape[0] < n:
                idx = np.minimum(np.arange(n), phi.shape[0] - 1)
                phi, psi = phi[idx], psi[idx]
            phis.append(phi)
            psis.append(psi)
        return FeatureSet(np.stack(phis), np.stack(psis), labels, ids, gens)

    baseline = clean_features if clean_features is not None else features(kinds[0], 0)
    clean = evaluate_features(ckpt, baseline)
    report = RobustnessReport(kinds=kinds, severities=severities)
    for kind in kinds:
        for sev in severities:
            report.grid[(kind, sev)] = clean if sev == 0 else evaluate_features(ckpt, features(kind, sev))
    return report
