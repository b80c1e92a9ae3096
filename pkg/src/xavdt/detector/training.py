"""Training loop, inference, and the checkpoint container."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .losses import batch_triplet_loss, bce_loss, mine_triplets, total_loss
from .model import Detector, DetectorConfig, DetectorOutput, ShapeError

log = logging.getLogger(__name__)

CKPT_MAGIC = b"XAVC"
CKPT_VERSION = 1
_CKPT_KEYS = {"version", "config", "config_hash", "seed", "log", "tensors", "input_shapes"}


class NumericalError(RuntimeError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


class CheckpointError(ValueError):
    pass


@dataclass
class FeatureSet:
    """Stacked per-clip features: phi (M, N, 12, H, W), psi (M, N, C, h, w), labels (M,)."""

    phi: np.ndarray
    psi: np.ndarray
    labels: np.ndarray
    clip_ids: list = field(default_factory=list)
    generators: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.phi) == len(self.psi) == len(self.labels)):
            raise ValueError("phi, psi and labels differ in length")
        if self.phi.shape[1] != self.psi.shape[1]:
            raise ValueError(f"phi has {self.phi.shape[1]} frames, psi has {self.psi.shape[1]}")

    def __len__(self):
        return len(self.labels)


@dataclass
class Checkpoint:
    config: DetectorConfig
    state: dict  # name -> np.ndarray
    seed: int
    log: list = field(default_factory=list)
    input_shapes: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def model(self) -> Detector:
        torch.manual_seed(self.seed)
        m = Detector(self.config)
        m.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        m.eval()
        return m

    def to_bytes(self) -> bytes:
        names = sorted(self.state)
        index, blobs, off = [], [], 0
        for n in names:
            a = np.ascontiguousarray(self.state[n], dtype=np.float32)
            b = a.astype("<f4").tobytes()
            index.append({"name": n, "shape": list(a.shape), "offset": off, "nbytes": len(b)})
            blobs.append(b)
            off += len(b)
        header = {"version": CKPT_VERSION, "config": self.config.to_dict(), "config_hash": self.config_hash,
                  "seed": self.seed, "log": self.log, "tensors": index,
                  "input_shapes": {k: list(v) for k, v in self.input_shapes.items()}}
        hb = json.dumps(header, sort_keys=True).encode()
        return CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointError("not a detector checkpoint")
        (hlen,) = struct.unpack_from("<Q", buf, 4)
        header = json.loads(buf[12:12 + hlen])
        unknown = set(header) - _CKPT_KEYS
        if unknown:
            raise CheckpointError(f"unknown checkpoint keys: {sorted(unknown)}")
        if header.get("version") != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        try:
            cfg = DetectorConfig.from_dict(header["config"])
        except ValueError as e:
            raise CheckpointError(str(e)) from None
        if cfg.digest() != header["config_hash"]:
            raise CheckpointError("config hash does not match stored config")
        base = 12 + hlen
        state = {}
        for t in header["tensors"]:
            raw = buf[base + t["offset"]: base + t["offset"] + t["nbytes"]]
            if len(raw) != t["nbytes"]:
                raise CheckpointError(f"truncated tensor {t['name']}")
            state[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).astype(np.float32)
        return cls(cfg, state, header["seed"], header["log"],
                   {k: tuple(v) for k, v in header.get("input_shapes", {}).items()})

    def save(self, path) -> Path:
        Path(path).write_bytes(self.to_bytes())
        return Path(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@contextlib.contextmanager
def deterministic(seed: int):
    prev = torch.are_deterministic_algorithms_enabled()
    state = torch.random.get_rng_state()
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)
        torch.random.set_rng_state(state)


def _batches(n: int, bs: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, bs):
        yield order[s:s + bs]


def _state_numpy(model) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def train(data: FeatureSet, cfg: DetectorConfig, eval_every_epoch=None) -> Checkpoint:
    """AdamW at constant LR on ``(1-lam) * BCE + lam * triplet``.

    Bit-reproducible for a fixed ``cfg.seed``.  ``eval_every_epoch`` is an
    optional callback ``(epoch, model) -> dict`` whose result is merged into
    the epoch log entry.
    """
    if len(data) == 0 or len(np.unique(data.labels)) < 2:
        raise ValueError("training data must be non-empty and contain both classes")
    _check_shapes(cfg, data.phi.shape[1:], data.psi.shape[1:])
    with deterministic(cfg.seed):
        model = Detector(cfg)
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        order_rng = np.random.default_rng(cfg.seed)
        mine_rng = np.random.default_rng(cfg.seed + 1)
        phi_all = torch.from_numpy(np.ascontiguousarray(data.phi, dtype=np.float32))
        psi_all = torch.from_numpy(np.ascontiguousarray(data.psi, dtype=np.float32))
        y_all = data.labels
        history = []
        for epoch in range(cfg.epochs):
            last_good = _state_numpy(model)
            model.train()
            sums = {"total": 0.0, "bce": 0.0, "tri": 0.0}
            steps = 0
            for idx in _batches(len(data), cfg.batch_size, order_rng):
                idx_t = torch.as_tensor(idx)
                out = model(phi_all[idx_t], psi_all[idx_t])
                y = torch.as_tensor(y_all[idx], dtype=out.logit.dtype)
                l_bce = bce_loss(out.logit, y)
                trip = mine_triplets(out.embedding, y_all[idx], cfg.mining, mine_rng)
                l_tri = batch_triplet_loss(out.embedding, trip, cfg.margin)
                loss = total_loss(l_bce, l_tri, cfg.lam)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch} step {steps}",
                                         Checkpoint(cfg, last_good, cfg.seed, history, _shapes(data)))
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums["total"] += loss.item()
                sums["bce"] += l_bce.item()
                sums["tri"] += l_tri.item()
                steps += 1
            entry = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}}
            if eval_every_epoch is not None:
                model.eval()
                entry.update(eval_every_epoch(epoch, model))
            log.info("epoch %d: %s", epoch, entry)
            history.append(entry)
        return Checkpoint(cfg, _state_numpy(model), cfg.seed, history, _shapes(data))


def _shapes(data: FeatureSet) -> dict:
    return {"phi": tuple(data.phi.shape[1:]), "psi": tuple(data.psi.shape[1:])}


def _check_shapes(cfg: DetectorConfig, phi_shape, psi_shape):
    phi_shape, psi_shape = tuple(phi_shape), tuple(psi_shape)
    want_psi = cfg.psi_channels * (3 if cfg.learn_mask_weights else 1)
    if cfg.use_phi and phi_shape[1] != cfg.phi_channels:
        raise ShapeError(f"phi has {phi_shape[1]} channels, config expects {cfg.phi_channels}")
    if cfg.use_psi and psi_shape[1] != want_psi:
        raise ShapeError(f"psi has {psi_shape[1]} channels, config expects {want_psi}")
    if cfg.use_phi and cfg.use_psi:
        grid = (phi_shape[2] // cfg.phi_downsample, phi_shape[3] // cfg.phi_downsample)
        if grid != psi_shape[2:]:
            raise ShapeError(f"phi {phi_shape} downsampled by {cfg.phi_downsample} gives grid {grid}, "
                             f"psi {psi_shape} has grid {psi_shape[2:]}")


@torch.no_grad()
def predict(phi, psi, ckpt: Checkpoint, model: Optional[Detector] = None, batch_size: int = 32):
    """Return ``(scores, DetectorOutput)`` for batched features; scores are sigmoid(logit)."""
    phi = np.asarray(phi, dtype=np.float32)
    psi = np.asarray(psi, dtype=np.float32)
    if phi.ndim == 4:
        phi, psi = phi[None], psi[None]
    _check_shapes(ckpt.config, phi.shape[1:], psi.shape[1:])
    if ckpt.input_shapes and tuple(ckpt.input_shapes["phi"])[1:] != phi.shape[2:]:
        raise ShapeError(f"checkpoint trained on phi {ckpt.input_shapes['phi']}, got {phi.shape[1:]}")
    model = model or ckpt.model()
    outs = []
    for s in range(0, len(phi), batch_size):
        outs.append(model(torch.from_numpy(phi[s:s + batch_size]), torch.from_numpy(psi[s:s + batch_size])))
    out = DetectorOutput(torch.cat([o.logit for o in outs]), torch.cat([o.embedding for o in outs]),
                         torch.cat([o.fused for o in outs]))
    return torch.sigmoid(out.logit.double()).numpy(), out


def synthetic_features(n: int, seed: int = 0, frames: int = 4, size: int = 32, psi_channels: int = 16,
                       downsample: int = 4, strength: float = 1.0) -> FeatureSet:
    """Class-dependent random features shaped like extractor output.

    Fakes reconstruct more faithfully (smaller residual block) and carry a
    damped, shifted audio-visual attention pattern in the lower-centre
    region, mirroring the cues the detector is meant to exploit.
    """
    rng = np.random.default_rng(seed)
    g = size // downsample
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    phi = rng.uniform(0.0, 1.0, size=(n, frames, 12, size, size)).astype(np.float32)
    resid = np.abs(rng.normal(0.0, 0.10, size=(n, frames, 3, size, size)))
    resid[labels == 1] *= 1.0 - 0.5 * strength
    phi[:, :, 9:12] = resid
    phi[:, :, 6:9] = np.clip(phi[:, :, 0:3] - resid, 0, 1)
    psi = rng.normal(0.0, 0.5, size=(n, frames, psi_channels, g, g)).astype(np.float32)
    lip = (slice(None), slice(None), slice(None), slice(g // 2, g), slice(g // 4, g - g // 4))
    bump = np.zeros_like(psi)
    bump[lip] = 1.0
    psi += np.where(labels[:, None, None, None, None] == 1, -0.5 * strength, 0.5 * strength) * bump
    return FeatureSet(phi.astype(np.float32), psi.astype(np.float32), labels,
                      [f"syn{i:04d}" for i in range(n)], ["synthetic" if y else "real" for y in labels])
