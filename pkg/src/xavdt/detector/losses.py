"""Classification and metric-learning objectives, plus in-batch triplet mining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def _t(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def bce_loss(logits, labels) -> torch.Tensor:
    """Mean binary cross-entropy on raw logits, in log-sum-exp form."""
    s = _t(logits)
    y = _t(labels, s.dtype)
    if s.numel() == 0:
        raise ValueError("empty batch")
    if s.shape != y.shape:
        raise ValueError(f"logits {tuple(s.shape)} and labels {tuple(y.shape)} differ")
    # -log sig(s) = log(1 + e^-s); logaddexp keeps full precision where softplus goes linear
    zero = torch.zeros_like(s)
    return (y * torch.logaddexp(zero, -s) + (1 - y) * torch.logaddexp(zero, s)).mean()


@dataclass
class TripletBatch:
    """Index triples into a batch of embeddings, with the batch labels for checking."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64)
        self.positives = np.asarray(self.positives, dtype=np.int64)
        self.negatives = np.asarray(self.negatives, dtype=np.int64)
        self.labels = np.asarray(self.labels)
        if not (self.anchors.shape == self.positives.shape == self.negatives.shape):
            raise ValueError("anchor/positive/negative index arrays differ in length")
        y = self.labels
        if np.any(y[self.anchors] != y[self.positives]) or np.any(y[self.anchors] == y[self.negatives]):
            raise ValueError("malformed triplet: positive must share, negative must differ from the anchor label")

    def __len__(self):
        return len(self.anchors)


def triplet_loss(ua, up, un, margin: float) -> torch.Tensor:
    """``mean(max(0, |ua-up|^2 - |ua-un|^2 + m))``; zero for an empty set."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    ua, up, un = _t(ua), _t(up), _t(un)
    if ua.shape[0] == 0:
        return ua.new_zeros(())
    d_ap = ((ua - up) ** 2).sum(-1)
    d_an = ((ua - un) ** 2).sum(-1)
    return F.relu(d_ap - d_an + margin).mean()


def batch_triplet_loss(embeddings: torch.Tensor, batch: TripletBatch, margin: float) -> torch.Tensor:
    if len(batch) == 0:
        return embeddings.new_zeros(())
    idx = lambda a: torch.as_tensor(a, dtype=torch.long)
    return triplet_loss(embeddings[idx(batch.anchors)], embeddings[idx(batch.positives)],
                        embeddings[idx(batch.negatives)], margin)


def total_loss(bce, tri, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * bce + lam * tri


def mine_triplets(embeddings, labels, policy: str = "random", rng: np.random.Generator | None = None) -> TripletBatch:
    """One triplet per anchor that has a negative available.

    The positive is another same-label sample, or the anchor itself when it
    is alone in its class.  ``random`` draws positive and negative uniformly;
    ``semi-hard`` takes the closest negative farther than the positive, else
    the hardest negative.  A single-class batch yields an empty set.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    y = np.asarray(labels)
    e = embeddings.detach().cpu().numpy() if isinstance(embeddings, torch.Tensor) else np.asarray(embeddings)
    n = y.size
    if policy not in ("random", "semi-hard"):
        raise ValueError(f"unknown mining policy {policy!r}")
    A, P, Nn = [], [], []
    if len(np.unique(y)) < 2:
        return TripletBatch(A, P, Nn, y)
    d = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1) if policy == "semi-hard" else None
    for i in range(n):
        pos = [j for j in range(n) if y[j] == y[i] and j != i] or [i]
        neg = [j for j in range(n) if y[j] != y[i]]
        p = pos[rng.integers(len(pos))]
        if policy == "random":
            q = neg[rng.integers(len(neg))]
        else:
            dn = d[i, neg]
            farther = [k for k, v in zip(neg, dn) if v > d[i, p]]
            q = min(farther, key=lambda k: d[i, k]) if farther else neg[int(np.argmin(dn))]
        A.append(i)
        P.append(p)
        Nn.append(q)
    return TripletBatch(A, P, Nn, y)
