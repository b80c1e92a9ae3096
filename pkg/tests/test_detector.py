import math
from decimal import Decimal, localcontext

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import central_difference_error, toy_fuse_loss
from xavdt.detector import (Checkpoint, CheckpointError, Detector, DetectorConfig, NumericalError, ShapeError,
                            TripletBatch, bce_loss, l2_normalize, mine_triplets, predict, sinusoidal_2d,
                            synthetic_features, total_loss, train, triplet_loss)

SMALL = dict(psi_channels=4, enc_width=8, fused_dim=8, heads=2, ffd_layers=1, embed_dim=4, batch_size=4)


# --- losses


@settings(max_examples=50)
@given(st.floats(-30, 30), st.sampled_from([0, 1]))
def test_bce_matches_log_sigmoid_oracle(s, y):
    # 50-digit decimal arithmetic as an independent oracle for -log p / -log(1-p)
    with localcontext() as ctx:
        ctx.prec = 50
        d = Decimal(s)
        p = 1 / (1 + (-d).exp())
        expect = float(-(p.ln() if y else (1 - p).ln()))
    got = float(bce_loss([s], [y]))
    assert math.isclose(got, expect, rel_tol=1e-9, abs_tol=1e-15)


def test_bce_is_stable_for_large_logits():
    assert float(bce_loss([1000.0], [1])) == 0.0
    assert math.isclose(float(bce_loss([-1000.0], [1])), 1000.0)
    with pytest.raises(ValueError):
        bce_loss([0.0, 1.0], [1])


def test_triplet_degenerate_values():
    u = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert float(triplet_loss(u, u, u, 0.3)) == 0.3
    v = torch.tensor([[-1.0, 0.0]], dtype=torch.float64)
    assert float(triplet_loss(u, u, v, 0.3)) == 0.0
    assert float(triplet_loss(u[:0], u[:0], u[:0], 0.3)) == 0.0
    with pytest.raises(ValueError):
        triplet_loss(u, u, v, 0.0)


@given(st.floats(0, 1), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_is_convex_combination(lam, a, b):
    t = total_loss(a, b, lam)
    assert min(a, b) - 1e-12 <= t <= max(a, b) + 1e-12
    assert total_loss(a, b, 0.0) == a and total_loss(a, b, 1.0) == b


@settings(max_examples=30)
@given(st.lists(st.sampled_from([0, 1]), min_size=1, max_size=12), st.sampled_from(["random", "semi-hard"]),
       st.integers(0, 1000))
def test_mined_triplets_are_well_formed(labels, policy, seed):
    y = np.array(labels)
    e = np.random.default_rng(seed).normal(size=(len(y), 3))
    t = mine_triplets(e, y, policy, np.random.default_rng(seed))
    if len(set(labels)) < 2:
        assert len(t) == 0
    else:
        assert len(t) == len(y)
        assert np.all(y[t.anchors] == y[t.positives]) and np.all(y[t.anchors] != y[t.negatives])


def test_malformed_triplet_rejected():
    with pytest.raises(ValueError):
        TripletBatch([0], [1], [2], np.array([0, 1, 1]))


def test_semi_hard_prefers_closest_farther_negative():
    e = np.array([[0.0], [1.0], [1.5], [3.0], [0.5]])
    y = np.array([0, 0, 1, 1, 1])
    t = mine_triplets(e, y, "semi-hard", np.random.default_rng(0))
    # anchor 0 has positive 1 (d=1); negatives at d=2.25, 9, 0.25 -> closest farther one is index 2
    assert t.negatives[0] == 2


def test_l2_normalize_handles_zero():
    out = l2_normalize(torch.zeros(2, 3))
    assert torch.all(out == 0)
    x = torch.randn(5, 4)
    assert torch.allclose(l2_normalize(x).norm(dim=-1), torch.ones(5))


# --- model


def test_positional_code_rows_and_columns():
    pe = sinusoidal_2d(8, 3, 5)
    assert pe.shape == (8, 3, 5)
    assert torch.allclose(pe[:4, :, 0], pe[:4, :, 4])  # row half is constant along columns
    assert torch.allclose(pe[4:, 0, :], pe[4:, 2, :])
    with pytest.raises(ValueError):
        sinusoidal_2d(6, 2, 2)


def test_forward_shapes_and_embedding_norm():
    cfg = DetectorConfig(**SMALL)
    fs = synthetic_features(3, psi_channels=4, frames=2, size=16)
    out = Detector(cfg)(torch.from_numpy(fs.phi), torch.from_numpy(fs.psi))
    assert out.logit.shape == (3,) and out.embedding.shape == (3, 4) and out.fused.shape == (3, 8)
    assert torch.allclose(out.embedding.norm(dim=-1), torch.ones(3), atol=1e-6)


@pytest.mark.parametrize("flags,psi_mult", [(dict(use_phi=False), 1), (dict(use_psi=False), 1),
                                            (dict(use_residual=False), 1), (dict(learn_mask_weights=True), 3)])
def test_ablation_variants_run(flags, psi_mult):
    cfg = DetectorConfig(**{**SMALL, **flags})
    fs = synthetic_features(2, psi_channels=4 * psi_mult, frames=2, size=16)
    out = Detector(cfg)(torch.from_numpy(fs.phi), torch.from_numpy(fs.psi))
    assert out.logit.shape == (2,)


def test_grid_mismatch_raises():
    cfg = DetectorConfig(**{**SMALL, "phi_downsample": 2})
    fs = synthetic_features(2, psi_channels=4, frames=2, size=16)
    with pytest.raises(ShapeError):
        Detector(cfg)(torch.from_numpy(fs.phi), torch.from_numpy(fs.psi))
    with pytest.raises(ShapeError):
        train(fs, cfg)


def test_config_round_trip_rejects_unknown():
    cfg = DetectorConfig(**SMALL)
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        DetectorConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})
    paper = DetectorConfig.paper()
    assert paper.fused_in == 2048 and paper.fused_dim == 1024 and paper.lam == 0.3


def test_fuse_and_heads_gradients_match_finite_differences():
    loss, params = toy_fuse_loss()
    assert central_difference_error(loss, params) < 1e-4


# --- training and checkpoints


def test_training_is_bit_reproducible_and_checkpoint_round_trips(tmp_path):
    fs = synthetic_features(16, psi_channels=4, frames=2, size=16)
    cfg = DetectorConfig(**SMALL, epochs=2)
    a, b = train(fs, cfg), train(fs, cfg)
    assert a.sha256() == b.sha256()
    assert [e["total"] for e in a.log] == [e["total"] for e in b.log]
    back = Checkpoint.load(a.save(tmp_path / "d.ckpt"))
    assert back.sha256() == a.sha256() and back.config == cfg
    s1, _ = predict(fs.phi, fs.psi, a)
    s2, _ = predict(fs.phi, fs.psi, back)
    assert np.array_equal(s1, s2) and np.all((s1 > 0) & (s1 < 1))
    c = train(fs, DetectorConfig(**SMALL, epochs=2, seed=1))
    assert c.sha256() != a.sha256()


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"nope")
    fs = synthetic_features(4, psi_channels=4, frames=2, size=16)
    buf = train(fs, DetectorConfig(**SMALL, epochs=1)).to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(buf[:-3])


def test_single_class_training_rejected():
    fs = synthetic_features(4, psi_channels=4, frames=2, size=16)
    fs.labels[:] = 1
    with pytest.raises(ValueError):
        train(fs, DetectorConfig(**SMALL))


def test_non_finite_loss_reports_last_good_state():
    fs = synthetic_features(8, psi_channels=4, frames=2, size=16)
    fs.phi[3, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError) as err:
        train(fs, DetectorConfig(**SMALL, epochs=1))
    good = err.value.last_good
    assert all(np.all(np.isfinite(v)) for v in good.state.values())
