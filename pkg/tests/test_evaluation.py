import json

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from oracles import accuracy_loop, ap_sweep, auroc_pairs, random_scored_set
from xavdt import xavf
from xavdt.detector import Detector, DetectorConfig, synthetic_features
from xavdt.evaluation import (SNR_FLOOR_DB, EvalReport, MetricError, accuracy, attention_energy, average_precision,
                              cam_from, delta_attention_map, eer_and_acc, embedding_snr, evaluate, fisher_snr,
                              grad_cam, hfar, lda_fit_and_margin, minmax, roc_auc, save_heatmap,
                              temporal_attention_heatmap, topq_roi_coverage)

# --- detection metrics


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_match_brute_force(seed):
    s, y = random_scored_set(np.random.default_rng(seed))
    assert abs(roc_auc(s, y) - auroc_pairs(s, y)) < 1e-9
    assert abs(average_precision(s, y) - ap_sweep(s, y)) < 1e-9
    eer, thr, acc = eer_and_acc(s, y)
    assert acc == accuracy_loop(s, y, thr)
    assert 0.0 <= eer <= 100.0


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_auroc_label_swap_and_monotone_invariance(seed):
    s, y = random_scored_set(np.random.default_rng(seed))
    assert roc_auc(s, y) + roc_auc(s, 1 - y) == 100.0
    assert roc_auc(s, y) == roc_auc(np.exp(3 * s) + 7, y)


def test_hand_cases():
    y = np.array([0, 0, 1, 1])
    assert roc_auc([0.1, 0.2, 0.8, 0.9], y) == 100.0
    assert roc_auc([0.5] * 4, y) == 50.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], y) == 0.0
    assert average_precision([0.4, 0.3, 0.2, 0.1], [0, 0, 0, 1]) == 25.0
    assert eer_and_acc([0.1, 0.2, 0.8, 0.9], y)[0] == 0.0
    assert eer_and_acc([0.1, 0.2, 0.8, 0.9], y)[2] == 100.0
    assert eer_and_acc([0.5] * 4, y)[0] == 50.0
    # a fully inverted ranking: every error rate is 1 at the crossing, so accuracy there is 0
    eer, _, acc = eer_and_acc([0.9, 0.8, 0.2, 0.1], y)
    assert eer == 100.0 and acc == 0.0
    assert accuracy([0.2, 0.7], [0, 1], 0.5) == 100.0


def test_metric_errors():
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2], [0, 2])
    with pytest.raises(MetricError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(MetricError):
        evaluate([0.1], [0, 1])


def test_report_round_trip_and_per_generator(tmp_path):
    s = np.array([0.1, 0.3, 0.9, 0.2, 0.8])
    y = np.array([0, 0, 1, 1, 1])
    g = ["real", "real", "a", "b", "b"]
    rep = evaluate(s, y, g)
    assert set(rep.per_generator) == {"a", "b"}
    assert rep.per_generator["a"].auroc == 100.0 and rep.per_generator["a"].n == 3
    path = rep.save(tmp_path / "r.json")
    assert EvalReport.from_dict(json.loads(path.read_text())) == rep
    assert path.with_suffix(".txt").read_text() == rep.to_text()


# --- separability


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5).filter(lambda a: abs(a) > 0.1), st.floats(-5, 5))
def test_fisher_snr_affine_invariant(seed, a, b):
    r = np.random.default_rng(seed)
    x0, x1 = r.normal(size=30), r.normal(1.0, 2.0, size=40)
    assert abs(fisher_snr(x0, x1) - fisher_snr(a * x0 + b, a * x1 + b)) < 1e-9


def test_fisher_snr_formula_and_floor():
    x0, x1 = np.array([0.0, 1.0, 2.0]), np.array([3.0, 5.0, 7.0])
    expect = 10 * np.log10((5.0 - 1.0) ** 2 / (1.0 + 4.0))
    assert np.isclose(fisher_snr(x0, x1), expect)
    assert fisher_snr(x0, x0 + 0.0) == SNR_FLOOR_DB
    with pytest.raises(ValueError):
        fisher_snr([1.0], [1.0, 2.0])


def test_lda_axis_matches_generalized_eigenproblem():
    r = np.random.default_rng(3)
    cov = np.array([[2.0, 0.8, 0.0], [0.8, 1.0, 0.3], [0.0, 0.3, 0.5]])
    X0 = r.multivariate_normal([0, 0, 0], cov, 400)
    X1 = r.multivariate_normal([1, -0.5, 0.3], cov, 400)
    X = np.vstack([X0, X1])
    y = np.r_[np.zeros(400), np.ones(400)]
    rep = lda_fit_and_margin(X, y)
    Sw = np.cov(X0.T, ddof=0) * 400 + np.cov(X1.T, ddof=0) * 400
    dm = X1.mean(0) - X0.mean(0)
    _, vecs = scipy.linalg.eigh(np.outer(dm, dm), Sw)
    top = vecs[:, -1] / np.linalg.norm(vecs[:, -1])
    assert abs(abs(top @ rep.axis) - 1) < 1e-6
    assert (X1 @ rep.axis).mean() > (X0 @ rep.axis).mean()
    assert abs(rep.basis[0] @ rep.basis[1]) < 1e-12
    assert rep.project(X).shape == (800, 2)
    assert rep.lda_margin > 0 and embedding_snr(X, y) == rep.fisher_snr_db


# --- attention maps


def test_minmax_and_constant_maps():
    m = minmax(np.array([[[1.0, 3.0], [2.0, 5.0]], [[4.0, 4.0], [4.0, 4.0]]]))
    assert m[0].min() == 0 and m[0].max() == 1 and np.all(m[1] == 0)
    assert np.all(minmax(np.ones((2, 2)), constant=1.0) == 1)


def test_temporal_heatmap_is_mean_of_normalized_frames():
    a = np.array([[[0.0, 1.0]], [[2.0, 0.0]]])
    assert np.allclose(temporal_attention_heatmap(a), [[0.5, 0.5]])
    with pytest.raises(ValueError):
        temporal_attention_heatmap(np.zeros((0, 2, 2)))


def test_topq_coverage_hand_cases():
    attn = np.array([[0.4, 0.3], [0.2, 0.1]])
    roi = np.array([[1, 0], [0, 0]])
    assert topq_roi_coverage(attn, roi, 0.4) == 1.0
    assert topq_roi_coverage(attn, roi, 0.7) == 0.5
    assert topq_roi_coverage(attn, roi, 1.0) == 0.25
    # ties broken by ascending flat index
    assert topq_roi_coverage(np.ones((2, 2)), roi, 0.25) == 1.0
    with pytest.raises(ValueError):
        topq_roi_coverage(attn, roi, 0.0)
    with pytest.raises(ValueError):
        topq_roi_coverage(np.zeros((2, 2)), roi, 0.5)


@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_topq_coverage_is_fraction_and_full_roi_gives_one(seed, q):
    r = np.random.default_rng(seed)
    attn = r.random((5, 5))
    assert topq_roi_coverage(attn, np.ones((5, 5)), q) == 1.0
    assert 0.0 <= topq_roi_coverage(attn, r.integers(0, 2, (5, 5)), q) <= 1.0


def test_delta_map_sign_and_energy():
    real = np.zeros((3, 2, 2))
    real[:, 0, 0] = 1
    fake = np.zeros((3, 2, 2))
    fake[:, 1, 1] = 1
    d = delta_attention_map(real, fake)
    assert d[1, 1] == 1.0 and d[0, 0] == -1.0
    psi = np.zeros((1, 2, 1, 1))
    psi[0, :, 0, 0] = [3.0, 4.0]
    assert attention_energy(psi)[0, 0, 0] == 5.0


def test_hfar_strict_majority():
    truth = {"f1": 1, "f2": 1, "r1": 0}
    resp = [("a", "f1", "real"), ("b", "f1", "real"), ("c", "f1", "fake"),
            ("a", "f2", "real"), ("b", "f2", "fake"),
            ("a", "r1", "fake")]
    res = hfar(resp, truth)
    assert res.rate == 0.5  # f1 accepted 2-1, f2 tied so not accepted
    assert res.micro == 3 / 5
    assert res.per_rater == {"a": 1.0, "b": 0.5, "c": 0.0}
    with pytest.raises(KeyError):
        hfar([("a", "zz", "real")], truth)


# --- Grad-CAM and heatmap export


def test_cam_from_uniform_positive_gradient():
    act = torch.ones(1, 2, 1, 2, 2)
    grad = torch.ones(1, 2, 1, 2, 2)
    assert torch.all(cam_from(act, grad) == 2.0)
    assert torch.all(cam_from(act, -grad) == 0.0)


def test_grad_cam_shape_and_range():
    cfg = DetectorConfig(psi_channels=4, enc_width=8, fused_dim=8, heads=2, ffd_layers=1, embed_dim=4)
    torch.manual_seed(0)
    model = Detector(cfg)
    fs = synthetic_features(2, psi_channels=4, frames=2, size=16)
    maps = grad_cam(model, fs.phi, fs.psi)
    assert maps.shape == (2, 2, 16, 16)
    assert maps.min() >= 0 and maps.max() <= 1
    assert grad_cam(model, fs.phi[0], fs.psi[0], target=0, layer="enc_a").shape == (1, 2, 16, 16)
    with pytest.raises(KeyError):
        grad_cam(model, fs.phi, fs.psi, layer="nope")


def test_save_heatmap_png_and_sidecar(tmp_path):
    h = np.linspace(-1, 1, 12).reshape(3, 4)
    png, side = save_heatmap(tmp_path / "h.png", h, signed=True, tag="x")
    img = np.asarray(Image.open(png))
    assert img.shape == (3, 4, 3)
    assert tuple(img[0, 0]) == (0, 0, 255) and tuple(img[-1, -1]) == (255, 0, 0)
    assert np.array_equal(xavf.read(side)[0], h)
