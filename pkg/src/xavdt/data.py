"""Manifests, real/fake pairing, feature caching and a synthetic toy corpus."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.io import wavfile

from . import xavf
from .inversion import ExtractConfig, MaskSet, VideoClip

log = logging.getLogger(__name__)

MANIFEST_HEADER = "#xavdt-manifest v1"
REAL_TAG = "real"


class ManifestError(ValueError):
    pass


class CacheError(ValueError):
    pass


@dataclass
class ManifestRecord:
    clip_id: str
    video_path: str
    audio_path: str
    label: int
    generator: str
    split: str
    paired_real: str = ""
    mask_path: str = ""

    def __post_init__(self):
        self.label = int(self.label)
        if self.label not in (0, 1):
            raise ManifestError(f"{self.clip_id}: label must be 0 or 1")
        if self.split not in ("train", "test"):
            raise ManifestError(f"{self.clip_id}: split must be train or test")
        if self.label == 1 and not self.paired_real:
            raise ManifestError(f"fake clip {self.clip_id} has no paired real")


_FIELDS = [f.name for f in fields(ManifestRecord)]
_PATH_FIELDS = ("video_path", "audio_path", "mask_path")


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")
    rejected: list = field(default_factory=list)  # (clip_id, reason)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict:
        return {r.clip_id: r for r in self.records}

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.root)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self) -> None:
        """Exhaustive orphan check and train/test generator disjointness."""
        ids = self.by_id()
        if len(ids) != len(self.records):
            raise ManifestError("duplicate clip ids in manifest")
        orphans = [r.clip_id for r in self.records
                   if r.label == 1 and (r.paired_real not in ids or ids[r.paired_real].label != 0)]
        if orphans:
            raise ManifestError(f"fake clips without a paired real: {orphans}")
        gens = {s: {r.generator for r in self.records if r.split == s and r.label == 1} for s in ("train", "test")}
        overlap = gens["train"] & gens["test"]
        if overlap:
            raise ManifestError(f"generator tags appear in both splits: {sorted(overlap)}")

    def _rel(self, p: str, where: Path) -> str:
        if not p:
            return p
        return os.path.relpath(self.resolve(p).resolve(), where.resolve())

    def save(self, path) -> Path:
        path = Path(path)
        lines = [MANIFEST_HEADER]
        for r in self.records:
            # media paths are stored relative to the manifest file's own directory
            r = replace(r, **{k: self._rel(getattr(r, k), path.parent) for k in _PATH_FIELDS})
            vals = [str(getattr(r, k)) for k in _FIELDS]
            if any("\t" in v or "\n" in v for v in vals):
                raise ManifestError(f"{r.clip_id}: fields may not contain tabs or newlines")
            lines.append("\t".join(vals))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise ManifestError(f"{path}: missing '{MANIFEST_HEADER}' header")
        recs = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != len(_FIELDS):
                raise ManifestError(f"{path}:{n}: expected {len(_FIELDS)} fields, got {len(parts)}")
            recs.append(ManifestRecord(*parts))
        m = cls(recs, path.parent)
        m.validate()
        return m


@dataclass(frozen=True)
class FilterSpec:
    min_duration: float = 2.0
    min_short_side: int = 512
    require_face: bool = True
    test_generators: tuple = ()


def build_manifest(root, spec: FilterSpec = FilterSpec()) -> Manifest:
    """Collect ``*.meta.json`` sidecars under ``root`` into a validated manifest.

    Sidecar keys: clip_id, video, audio, label, generator, paired_real,
    face_ok, duration, height, width, optional split and mask.
    """
    root = Path(root)
    metas = [json.loads(p.read_text()) for p in sorted(root.glob("*.meta.json"))]
    all_ids = {m["clip_id"] for m in metas}
    orphans = [m["clip_id"] for m in metas if int(m["label"]) == 1 and m.get("paired_real") not in all_ids]
    if orphans:
        raise ManifestError(f"fake clips without a paired real: {orphans}")

    kept, rejected = {}, []
    for m in metas:
        reasons = []
        if m.get("duration", 0.0) < spec.min_duration:
            reasons.append(f"duration {m.get('duration')} < {spec.min_duration}")
        if min(m.get("height", 0), m.get("width", 0)) < spec.min_short_side:
            reasons.append(f"short side < {spec.min_short_side}")
        if spec.require_face and not m.get("face_ok", False):
            reasons.append("face tracking failed")
        if reasons:
            rejected.append((m["clip_id"], "; ".join(reasons)))
        else:
            kept[m["clip_id"]] = m
    for cid in [c for c, m in kept.items() if int(m["label"]) == 1 and m["paired_real"] not in kept]:
        rejected.append((cid, "paired real rejected"))
        del kept[cid]

    test_gens = set(spec.test_generators)

    def split_of(m):
        if m.get("split"):
            return m["split"]
        if int(m["label"]) == 1:
            return "test" if m["generator"] in test_gens else "train"
        fakes = [f for f in kept.values() if int(f["label"]) == 1 and f["paired_real"] == m["clip_id"]]
        if fakes and all(f["generator"] in test_gens for f in fakes):
            return "test"
        return "train"

    recs = [ManifestRecord(m["clip_id"], m["video"], m["audio"], int(m["label"]), m["generator"],
                           split_of(m), m.get("paired_real", "") if int(m["label"]) else "",
                           m.get("mask", "")) for m in kept.values()]
    for cid, why in rejected:
        log.info("rejected %s: %s", cid, why)
    man = Manifest(recs, root, rejected)
    man.validate()
    return man


# --------------------------------------------------------------------------
# clip I/O


def save_video(path, frames: np.ndarray, fps: float) -> Path:
    """Frames in [0, 1], (N, 3, H, W); stored as uint8."""
    q = np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, frames=q, fps=np.float64(fps))
    return Path(path)


def load_video(path, clip_id: str = "") -> VideoClip:
    with np.load(path) as d:
        return VideoClip(d["frames"].astype(np.float32) / 255.0, float(d["fps"]), clip_id)


def save_audio(path, waveform: np.ndarray, sr: int) -> Path:
    wavfile.write(path, sr, np.asarray(waveform, dtype=np.float32))
    return Path(path)


def load_audio(path):
    sr, w = wavfile.read(path)
    if w.dtype.kind in "iu":
        w = w.astype(np.float64) / np.iinfo(w.dtype).max
    return np.asarray(w, dtype=np.float64), int(sr)


def load_masks(path, weights=(1.0, 0.0, 0.0)) -> MaskSet:
    with np.load(path) as d:
        return MaskSet(d["full"], d["face"], d["lip"], weights)


# --------------------------------------------------------------------------
# feature cache


def cache_key(clip_id: str, cfg: ExtractConfig) -> str:
    return f"{cfg.digest().hex()[:16]}/{clip_id}"


def cache_paths(cache_root, clip_id: str, cfg: ExtractConfig) -> dict:
    base = Path(cache_root) / cache_key(clip_id, cfg)
    return {k: base.with_name(f"{clip_id}.{k}.xavf") for k in ("phi", "psi")}


def cache_features(cache_root, clip_id: str, phi, psi, cfg: ExtractConfig) -> dict:
    """Write-once; an existing entry for the same (clip, config) is an error."""
    paths = cache_paths(cache_root, clip_id, cfg)
    digest = cfg.digest()
    for kind, arr in (("phi", phi), ("psi", psi)):
        try:
            xavf.write(paths[kind], np.asarray(arr), digest)
        except xavf.XAVFError as e:
            raise CacheError(str(e)) from None
    return paths


def has_features(cache_root, clip_id: str, cfg: ExtractConfig) -> bool:
    return all(p.exists() for p in cache_paths(cache_root, clip_id, cfg).values())


def load_features(cache_root, clip_id: str, cfg: ExtractConfig):
    paths = cache_paths(cache_root, clip_id, cfg)
    out = []
    for kind in ("phi", "psi"):
        if not paths[kind].exists():
            raise CacheError(f"missing cache entry {paths[kind]}")
        try:
            arr, _ = xavf.read(paths[kind], expect_hash=cfg.digest())
        except xavf.XAVFError as e:
            raise CacheError(f"{paths[kind]}: {e}") from None
        out.append(arr)
    return tuple(out)


# --------------------------------------------------------------------------
# human-study responses


def write_responses(path, responses: Iterable[tuple]) -> Path:
    lines = []
    for rater, clip, verdict in responses:
        if verdict not in ("real", "fake"):
            raise ValueError(f"verdict must be real or fake, got {verdict!r}")
        lines.append(f"{rater}\t{clip}\t{verdict}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def read_responses(path) -> list:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("real", "fake"):
            raise ValueError(f"{path}:{n}: malformed response line")
        out.append(tuple(parts))
    return out


# --------------------------------------------------------------------------
# synthetic corpus


def _speech_envelope(rng, n_samples: int, sr: int) -> np.ndarray:
    t = np.arange(n_samples) / sr
    rate = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    env = np.clip(np.sin(2 * np.pi * rate * t + phase), 0, None) ** 2
    return env


def _render_face(env_frames: np.ndarray, size: int, rng, smooth: float = 0.0, hue=None) -> np.ndarray:
    N = env_frames.size
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = rng.uniform(0.1, 0.4, size=3)
    skin = hue if hue is not None else rng.uniform(0.55, 0.85, size=3)
    face = ((xx - 0.5) / 0.28) ** 2 + ((yy - 0.5) / 0.38) ** 2 <= 1.0
    frames = np.empty((N, 3, size, size))
    tex = rng.normal(0, 0.04, size=(3, size, size))
    for i, e in enumerate(env_frames):
        img = bg[:, None, None] + tex
        img = np.where(face[None], skin[:, None, None] + tex, img)
        mouth = ((xx - 0.5) / 0.12) ** 2 + ((yy - 0.72) / (0.015 + 0.06 * e)) ** 2 <= 1.0
        img = np.where(mouth[None], 0.15, img)
        frames[i] = img
    if smooth > 0:
        from scipy.ndimage import gaussian_filter
        frames = gaussian_filter(frames, sigma=(0, 0, smooth, smooth))
    return np.clip(frames, 0, 1)


def make_toy_corpus(root, n_real: int = 8, frames: int = 16, size: int = 32, fps: float = 25.0,
                    sr: int = 16000, train_generators=("gen_a", "gen_b"), test_generators=("gen_c",),
                    seed: int = 0, face_fail_rate: float = 0.0) -> Path:
    """Write a small paired real/fake corpus of sidecar-described clips.

    Each real clip gets one fake; fakes are lip-desynced (mouth driven by a
    different envelope) and carry a generator-specific smoothing artifact.
    Reals alternate between train and test generator families.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    gens = list(train_generators) + list(test_generators)
    n_samples = int(round(frames / fps * sr))
    hop = sr / fps
    for i in range(n_real):
        env = _speech_envelope(rng, n_samples, sr)
        carrier = np.sin(2 * np.pi * rng.uniform(120, 220) * np.arange(n_samples) / sr)
        wav = (0.5 * env * carrier + 0.01 * rng.standard_normal(n_samples)).astype(np.float32)
        env_frames = np.array([env[int(k * hop):int((k + 1) * hop)].mean() for k in range(frames)])
        skin = rng.uniform(0.55, 0.85, size=3)
        real_seed = int(rng.integers(2**31))
        real = _render_face(env_frames, size, np.random.default_rng(real_seed), hue=skin)
        gen = gens[i % len(gens)]
        fake_env = np.roll(env_frames, frames // 3)[::-1]
        fake = _render_face(fake_env, size, np.random.default_rng(real_seed), hue=skin,
                            smooth=0.6 + 0.4 * gens.index(gen))
        rid, fid = f"real{i:03d}", f"fake{i:03d}_{gen}"
        for cid, vid, label, g, paired in ((rid, real, 0, REAL_TAG, ""), (fid, fake, 1, gen, rid)):
            save_video(root / f"{cid}.npz", vid, fps)
            save_audio(root / f"{cid}.wav", wav, sr)
            meta = dict(clip_id=cid, video=f"{cid}.npz", audio=f"{cid}.wav", label=label, generator=g,
                        paired_real=paired, face_ok=bool(rng.random() >= face_fail_rate) if label == 0 else True,
                        duration=frames / fps, height=size, width=size)
            (root / f"{cid}.meta.json").write_text(json.dumps(meta, sort_keys=True))
    return root
