"""Audio conditioning: a layered reference embedder and local-context aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 16000
    n_mels: int = 32
    layer_dim: int = 16
    n_layers: int = 14
    concat_layers: int = 12
    window: int = 5
    cross_dim: int = 16
    seed: int = 0


@dataclass
class AudioCondition:
    """Per-frame conditioning tokens.

    embedding: (N, L, d) with L tokens per video frame (L = window after
    :func:`audio_context`).  ``provenance`` records how it was produced.
    """

    embedding: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.asarray(self.embedding)
        if e.ndim == 2:
            e = e[:, None, :]
        if e.ndim != 3:
            raise ValueError(f"audio embedding must be (N, L, d), got {e.shape}")
        self.embedding = e

    @property
    def frames(self) -> int:
        return self.embedding.shape[0]

    def pad_to(self, n: int) -> "AudioCondition":
        """Repeat the last frame's tokens up to ``n`` frames."""
        e = self.embedding
        if n < e.shape[0]:
            raise ValueError("cannot pad to fewer frames")
        if n == e.shape[0]:
            return self
        extra = np.repeat(e[-1:], n - e.shape[0], axis=0)
        return AudioCondition(np.concatenate([e, extra]), dict(self.provenance))

    def slice(self, start: int, stop: int) -> "AudioCondition":
        return AudioCondition(self.embedding[start:stop], dict(self.provenance))


def mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-style mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sr / 2
    hz_to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    mel_to_hz = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz = mel_to_hz(mels)
    bins = np.linspace(0, sr / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, mid, hi = hz[i], hz[i + 1], hz[i + 2]
        up = (bins - lo) / max(mid - lo, 1e-9)
        down = (hi - bins) / max(hi - mid, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0, None)
    return fb


class ReferenceAudioEmbedder:
    """Deterministic stand-in for a pretrained speech encoder.

    Log-mel features are sampled once per video frame and pushed through a
    stack of frozen random ``tanh`` layers; every layer's output is exposed
    so the last-K concatenation path can be exercised.
    """

    def __init__(self, cfg: AudioConfig = AudioConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dims = [cfg.n_mels] + [cfg.layer_dim] * cfg.n_layers
        self.weights = [rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i])
                        for i in range(cfg.n_layers)]
        self.biases = [0.1 * rng.standard_normal(dims[i + 1]) for i in range(cfg.n_layers)]

    @property
    def ident(self) -> str:
        return f"ref-mel{self.cfg.n_mels}-L{self.cfg.n_layers}x{self.cfg.layer_dim}-s{self.cfg.seed}"

    def frame_features(self, waveform, sr: int, n_frames: int, fps: float) -> np.ndarray:
        w = np.asarray(waveform, dtype=np.float64)
        hop = sr / fps
        n_fft = max(64, int(2 ** np.ceil(np.log2(2 * hop))))
        fb = mel_filterbank(sr, n_fft, self.cfg.n_mels)
        pad = np.concatenate([np.zeros(n_fft // 2), w, np.zeros(n_fft)])
        feats = np.empty((n_frames, self.cfg.n_mels))
        win = np.hanning(n_fft)
        for i in range(n_frames):
            start = int(round(i * hop))
            seg = pad[start:start + n_fft]
            if seg.size < n_fft:
                seg = np.pad(seg, (0, n_fft - seg.size))
            spec = np.abs(np.fft.rfft(seg * win)) ** 2
            feats[i] = np.log(fb @ spec + 1e-8)
        return feats

    def layers(self, waveform, sr: int, n_frames: int, fps: float) -> np.ndarray:
        """Hidden states of every layer, shape (n_layers, N, layer_dim)."""
        h = self.frame_features(waveform, sr, n_frames, fps)
        h = (h - h.mean()) / (h.std() + 1e-8)
        out = []
        for W, b in zip(self.weights, self.biases):
            h = np.tanh(h @ W.T + b)
            out.append(h)
        return np.stack(out)


def context_projection(cfg: AudioConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed + 1)
    d_in = cfg.concat_layers * cfg.layer_dim
    return rng.standard_normal((cfg.cross_dim, d_in)) / np.sqrt(d_in)


def audio_context(layered, concat_layers: int = 12, window: int = 5, projection=None,
                  provenance: dict | None = None) -> AudioCondition:
    """Concatenate the last ``concat_layers`` layers per frame, stack a
    ``window``-frame neighbourhood (edge-replicated), then project.

    layered: (n_layers, N, d).  ``projection`` is a (d_out, K*d) matrix or
    ``None`` for identity.  Returns an AudioCondition with tokens
    (N, window, d_out).
    """
    layered = np.asarray(layered, dtype=np.float64)
    if layered.ndim != 3:
        raise ValueError(f"expected (layers, N, d), got {layered.shape}")
    n_layers, N, d = layered.shape
    if n_layers < concat_layers:
        raise ValueError(f"need {concat_layers} layers, only {n_layers} available")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    feats = layered[-concat_layers:].transpose(1, 0, 2).reshape(N, concat_layers * d)
    half = window // 2
    idx = np.clip(np.arange(N)[:, None] + np.arange(-half, half + 1)[None, :], 0, N - 1)
    stacked = feats[idx]  # (N, window, K*d)
    if projection is not None:
        projection = np.asarray(projection, dtype=np.float64)
        if projection.shape[1] != stacked.shape[-1]:
            raise ValueError(f"projection expects {projection.shape[1]} inputs, got {stacked.shape[-1]}")
        stacked = stacked @ projection.T
    prov = dict(provenance or {})
    prov.update(concat_layers=concat_layers, window=window)
    return AudioCondition(stacked, prov)


def condition_from_waveform(waveform, sr: int, n_frames: int, fps: float,
                            cfg: AudioConfig = AudioConfig()) -> AudioCondition:
    emb = ReferenceAudioEmbedder(cfg)
    layers = emb.layers(waveform, sr, n_frames, fps)
    return audio_context(layers, cfg.concat_layers, cfg.window, context_projection(cfg),
                         provenance={"embedder": emb.ident})
