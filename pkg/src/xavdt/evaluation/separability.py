"""Class separability: Fisher SNR in dB and a regularized two-class LDA."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SNR_FLOOR_DB = -100.0


def fisher_snr(class0, class1) -> float:
    """``10 log10((mu1 - mu0)^2 / (var0 + var1))`` on scalar projections.

    Identical means give the floor value instead of -inf.
    """
    a = np.asarray(class0, dtype=np.float64).ravel()
    b = np.asarray(class1, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two samples per class")
    num = (b.mean() - a.mean()) ** 2
    den = a.var(ddof=1) + b.var(ddof=1)
    if den <= 0:
        raise ValueError("pooled variance is zero")
    if num <= 0:
        return SNR_FLOOR_DB
    return max(SNR_FLOOR_DB, 10.0 * np.log10(num / den))


@dataclass
class SeparabilityReport:
    fisher_snr_db: float
    lda_margin: float
    axis: np.ndarray  # unit LDA direction, oriented so class 1 projects higher
    basis: np.ndarray  # (2, d): LDA axis and the top principal axis orthogonal to it
    threshold: float  # midpoint of projected class means

    def project(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.basis.T


def lda_fit_and_margin(embeddings, labels, reg: float = 1e-6) -> SeparabilityReport:
    """Fit the two-class Fisher direction ``(Sw + eps I)^-1 (mu1 - mu0)``.

    ``eps = reg * trace(Sw) / d``.  The margin is the projected mean gap over
    the pooled projected standard deviation.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("embeddings must be (n, d) with one label per row")
    X0, X1 = X[y == 0], X[y == 1]
    if len(X0) < 2 or len(X1) < 2:
        raise ValueError("need at least two samples per class")
    mu0, mu1 = X0.mean(0), X1.mean(0)
    Sw = (X0 - mu0).T @ (X0 - mu0) + (X1 - mu1).T @ (X1 - mu1)
    d = X.shape[1]
    eps = reg * np.trace(Sw) / d
    if eps <= 0:
        eps = reg
    try:
        w = np.linalg.solve(Sw + eps * np.eye(d), mu1 - mu0)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"within-class scatter is singular: {e}") from None
    nrm = np.linalg.norm(w)
    if nrm == 0 or not np.isfinite(nrm):
        raise ValueError("degenerate LDA direction")
    w /= nrm
    p0, p1 = X0 @ w, X1 @ w
    pooled = np.sqrt((p0.var(ddof=1) + p1.var(ddof=1)) / 2.0)
    margin = abs(p1.mean() - p0.mean()) / pooled if pooled > 0 else np.inf

    resid = X - X.mean(0)
    resid = resid - np.outer(resid @ w, w)
    if d > 1:
        _, _, vt = np.linalg.svd(resid, full_matrices=False)
        pc = vt[0] - (vt[0] @ w) * w
        pc /= np.linalg.norm(pc)
    else:
        pc = np.zeros_like(w)
    return SeparabilityReport(fisher_snr(p0, p1), float(margin), w, np.stack([w, pc]),
                              float((p0.mean() + p1.mean()) / 2.0))


def embedding_snr(embeddings, labels) -> float:
    """Fisher SNR of embeddings projected on their own LDA axis."""
    return lda_fit_and_margin(embeddings, labels).fisher_snr_db
