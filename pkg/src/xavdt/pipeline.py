"""Glue between manifests, extraction, cache and the detector."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .audio import AudioCondition, condition_from_waveform
from .data import (CacheError, Manifest, ManifestRecord, cache_features, has_features, load_audio,
                   load_features, load_masks, load_video)
from .detector import Checkpoint, FeatureSet, predict
from .evaluation import EvalReport, evaluate
from .inversion import ExtractConfig, FeatureExtractor, MaskSet, VideoClip

log = logging.getLogger(__name__)


@dataclass
class ClipInputs:
    record: ManifestRecord
    clip: VideoClip
    waveform: np.ndarray
    sr: int
    masks: Optional[MaskSet]


def load_inputs(manifest: Manifest, rec: ManifestRecord, cfg: ExtractConfig) -> ClipInputs:
    clip = load_video(manifest.resolve(rec.video_path), rec.clip_id)
    wav, sr = load_audio(manifest.resolve(rec.audio_path))
    masks = load_masks(manifest.resolve(rec.mask_path), cfg.mask_weights) if rec.mask_path else None
    return ClipInputs(rec, clip, wav, sr, masks)


def condition_for(inp: ClipInputs, cfg: ExtractConfig) -> AudioCondition:
    return condition_from_waveform(inp.waveform, inp.sr, inp.clip.n_frames, inp.clip.fps, cfg.audio)


def extract_inputs(fx: FeatureExtractor, inp: ClipInputs, cond: Optional[AudioCondition] = None):
    cond = cond if cond is not None else condition_for(inp, fx.cfg)
    res = fx.extract(inp.clip, cond, inp.masks)
    return res.phi.data, res.psi.data


def extract_manifest(manifest: Manifest, cfg: ExtractConfig, cache_root, extractor: Optional[FeatureExtractor] = None,
                     progress: Optional[Callable[[str, str], None]] = None) -> dict:
    """Populate the cache for every record; returns counts of hits, writes and failures."""
    stats = {"hit": 0, "written": 0, "failed": []}
    fx = None
    for rec in manifest:
        if has_features(cache_root, rec.clip_id, cfg):
            stats["hit"] += 1
            if progress:
                progress(rec.clip_id, "hit")
            continue
        fx = fx or extractor or FeatureExtractor(cfg)
        try:
            phi, psi = extract_inputs(fx, load_inputs(manifest, rec, cfg))
        except (OSError, ValueError) as e:
            log.error("extraction failed for %s: %s", rec.clip_id, e)
            stats["failed"].append((rec.clip_id, str(e)))
            continue
        cache_features(cache_root, rec.clip_id, phi, psi, cfg)
        stats["written"] += 1
        if progress:
            progress(rec.clip_id, "written")
    return stats


def feature_set(manifest: Manifest, cfg: ExtractConfig, cache_root) -> FeatureSet:
    missing = [r.clip_id for r in manifest if not has_features(cache_root, r.clip_id, cfg)]
    if missing:
        raise CacheError(f"missing cache entries for: {missing}")
    phis, psis = zip(*(load_features(cache_root, r.clip_id, cfg) for r in manifest)) if len(manifest) else ((), ())
    return FeatureSet(np.stack(phis), np.stack(psis), [r.label for r in manifest],
                      [r.clip_id for r in manifest], [r.generator for r in manifest])


def score_features(ckpt: Checkpoint, fs: FeatureSet) -> np.ndarray:
    scores, _ = predict(fs.phi, fs.psi, ckpt)
    return scores


def evaluate_features(ckpt: Checkpoint, fs: FeatureSet) -> EvalReport:
    return evaluate(score_features(ckpt, fs), fs.labels, fs.generators)
