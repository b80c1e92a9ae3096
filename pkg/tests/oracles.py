"""Slow, obviously-correct reference implementations used as test oracles."""
import numpy as np
import torch

from xavdt.detector import FeatureFusionDecoder, Heads, TripletBatch, batch_triplet_loss, bce_loss, total_loss


def auroc_pairs(s, y):
    """O(n^2) pair count: P(score_fake > score_real) + 0.5 P(tie), in percent."""
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return 100.0 * wins / (len(pos) * len(neg))


def ap_sweep(s, y):
    """Sweep every distinct threshold (high to low) with explicit masks."""
    n_pos = y.sum()
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        tp = int(np.sum(pred & (y == 1)))
        recall = tp / n_pos
        precision = tp / int(pred.sum())
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return 100.0 * total


def accuracy_loop(s, y, thr):
    correct = sum(int(si >= thr) == yi for si, yi in zip(s, y))
    return 100.0 * (correct / len(s))


def random_scored_set(rng, max_n=64):
    """Random labels (both classes present) with deliberately frequent ties."""
    n = int(rng.integers(2, max_n + 1))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    levels = int(rng.integers(2, 12))
    s = rng.integers(0, levels, n) / levels if rng.random() < 0.5 else rng.normal(size=n) + y * rng.uniform(0, 2)
    return s.astype(np.float64), y


def toy_fuse_loss(seed=0):
    """Total loss through fuse + heads on a 2-token, 2-channel double-precision toy."""
    torch.manual_seed(seed)
    ffd = FeatureFusionDecoder(in_ch=2, dim=4, heads=2, layers=1, cardinality=2).double()
    heads = Heads(4, 3).double()
    v = torch.randn(4, 1, 1, 1, 2, dtype=torch.float64, requires_grad=True)
    a = torch.randn(4, 1, 1, 1, 2, dtype=torch.float64, requires_grad=True)
    y = np.array([0, 1, 0, 1])
    trip = TripletBatch([0, 1, 2, 3], [2, 3, 0, 1], [1, 0, 3, 2], y)

    def loss():
        out = heads(ffd(v, a))
        return total_loss(bce_loss(out.logit, torch.as_tensor(y, dtype=torch.float64)),
                          batch_triplet_loss(out.embedding, trip, 1.5), 0.3)

    return loss, [v, a] + list(ffd.parameters()) + list(heads.parameters())


def central_difference_error(loss, params, h=1e-5):
    """Largest relative error between autograd and central differences over all tensors."""
    for p in params:
        p.grad = None
    loss().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss().item()
            flat[i] = old - h
            down = loss().item()
            flat[i] = old
            numeric[i] = (up - down) / (2 * h)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst
