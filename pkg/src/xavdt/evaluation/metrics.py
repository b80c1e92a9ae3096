"""Detection metrics reported as percentages: AUROC, AP, EER / Acc@EER, Acc."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check(scores, labels, need_both=True):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if need_both and (y.min(initial=1) == y.max(initial=0) or s.size == 0):
        raise MetricError("both classes must be present")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUROC (ties count one half), in percent."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s)  # midranks; sums are exact half-integers
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    d = float(n_pos * n_neg)
    # divide on the larger side and subtract, so swapped labels sum to exactly 100
    if 2 * u >= d:
        return float(100.0 * u / d)
    return float(100.0 - 100.0 * (d - u) / d)


def _sweep(s, y):
    """Counts at each distinct threshold, descending: predictions are ``score >= thr``."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp.astype(np.float64), fp.astype(np.float64)


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over thresholds of (recall gain) x precision, in percent."""
    s, y = _check(scores, labels, need_both=False)
    n_pos = y.sum()
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    _, tp, fp = _sweep(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return 100.0 * float(np.sum(gains * precision))


def accuracy(scores, labels, threshold: float) -> float:
    s, y = _check(scores, labels, need_both=False)
    return 100.0 * float(np.mean((s >= threshold).astype(np.int64) == y))


def eer_and_acc(scores, labels):
    """Equal error rate, its threshold and the accuracy there (all rates in percent).

    Operating points sit at midpoints between consecutive distinct scores
    (plus one above the max and one below the min).  The EER is taken where
    FPR - FNR first reaches zero, interpolating linearly between the two
    bracketing points; ties at the threshold are scored positive.
    """
    s, y = _check(scores, labels)
    n_pos, n_neg = y.sum(), (1 - y).sum()
    u = np.unique(s)[::-1]
    spread = max(u[0] - u[-1], 1.0)
    thr = np.r_[u[0] + spread, (u[:-1] + u[1:]) / 2.0, u[-1] - spread]
    fpr = np.array([(s[y == 0] >= t).sum() for t in thr]) / n_neg
    fnr = np.array([(s[y == 1] < t).sum() for t in thr]) / n_pos
    d = fpr - fnr  # -1 at the top, +1 at the bottom
    j = int(np.argmax(d >= 0))
    if d[j] == 0:
        eer, t = fpr[j], thr[j]
    else:
        a = -d[j - 1] / (d[j] - d[j - 1])
        eer = fpr[j - 1] + a * (fpr[j] - fpr[j - 1])
        t = thr[j - 1] + a * (thr[j] - thr[j - 1])
    return 100.0 * float(eer), float(t), accuracy(s, y, t)


@dataclass
class EvalReport:
    auroc: float
    ap: float
    eer: float
    eer_threshold: float
    acc_at_eer: float
    acc: float
    n: int = 0
    per_generator: dict = field(default_factory=dict)

    KEYS = ("auroc", "ap", "eer", "eer_threshold", "acc_at_eer", "acc")

    def to_text(self) -> str:
        lines = [f"{k}: {getattr(self, k):.2f}" if k != "eer_threshold" else f"{k}: {self.eer_threshold:.6f}"
                 for k in self.KEYS]
        lines.append(f"n: {self.n}")
        for g, r in sorted(self.per_generator.items()):
            lines.append(f"[{g}] " + "  ".join(f"{k}={getattr(r, k):.2f}" for k in ("auroc", "ap", "acc_at_eer", "acc")))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.KEYS}
        d["n"] = self.n
        d["per_generator"] = {g: r.to_dict() for g, r in sorted(self.per_generator.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        pg = {g: cls.from_dict(r) for g, r in d.get("per_generator", {}).items()}
        return cls(**{k: d[k] for k in cls.KEYS}, n=d.get("n", 0), per_generator=pg)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        path.with_suffix(".txt").write_text(self.to_text())
        return path


def evaluate(scores, labels, generators=None, threshold: float = 0.5) -> EvalReport:
    """Full report; with ``generators`` also one sub-report per fake generator (all reals + that generator)."""
    s, y = _check(scores, labels)
    eer, t, acc_eer = eer_and_acc(s, y)
    rep = EvalReport(roc_auc(s, y), average_precision(s, y), eer, t, acc_eer, accuracy(s, y, threshold), int(s.size))
    if generators is not None:
        g = np.asarray(generators)
        for tag in sorted(set(g[y == 1])):
            keep = (y == 0) | (g == tag)
            rep.per_generator[str(tag)] = evaluate(s[keep], y[keep], threshold=threshold)
    return rep
