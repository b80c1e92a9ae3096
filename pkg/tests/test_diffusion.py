import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from xavdt.diffusion import (CLEAN_T, ConstantDenoiser, Conditioning, GaussianScoreDenoiser, IdentityCodec,
                             ScheduleError, ScheduleSpec, StridedAverageCodec, TinyUNetConfig, TinyUNetDenoiser,
                             UnknownSiteError, attention, cross_attention_capture, ddim_invert, ddim_invert_step,
                             ddim_sample, ddim_step, forward_diffuse, make_codec, make_schedule,
                             multi_head_attention, predict_x0)

SCHED = make_schedule(1000)


def test_alpha_bar_is_cumulative_product():
    betas = np.linspace(1e-4, 2e-2, 1000)
    expect = np.cumprod(1 - betas)
    assert np.allclose(SCHED.alpha_bars, expect, rtol=0, atol=1e-15)
    assert SCHED.alpha_bar(CLEAN_T) == 1.0
    assert np.all(np.diff(SCHED.alpha_bars) < 0)


def test_ladder_contains_probe_timesteps():
    ts = SCHED.timesteps(40)
    assert len(ts) == 40 and ts[0] == 24 and ts[-1] == 999
    assert {24, 249, 499} <= set(ts.tolist())
    assert SCHED.ladder(40)[0] == CLEAN_T


@given(st.integers(1, 1000))
def test_ladder_is_strictly_increasing_and_ends_at_top(k):
    ts = SCHED.timesteps(k)
    assert len(ts) == k
    assert ts[-1] == 999
    assert np.all(np.diff(ts) > 0)


@pytest.mark.parametrize("betas", [np.full(5, 1.0), np.array([0.2, 0.1, 0.3, 0.4, 0.5]), np.full(4, 0.1),
                                   np.array([-0.1, 0.1, 0.1, 0.1, 0.1])])
def test_bad_schedules_rejected(betas):
    with pytest.raises(ScheduleError):
        make_schedule(5, betas)


def test_schedule_spec_text_round_trip():
    spec = ScheduleSpec(T=50, law="scaled_linear", steps=10)
    assert ScheduleSpec.from_text(spec.to_text()) == spec
    a = make_schedule(50, spec)
    assert np.isclose(a.alphas[0], 1 - 1e-4)


def test_forward_diffuse_closed_form(rng):
    x0, eps = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    ab = np.prod(1 - np.linspace(1e-4, 2e-2, 1000)[:250])
    assert np.allclose(forward_diffuse(x0, 249, eps, SCHED), np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)
    with pytest.raises(ValueError):
        forward_diffuse(x0, 249, eps[:1], SCHED)
    with pytest.raises(ScheduleError):
        forward_diffuse(x0, 1000, eps, SCHED)


def test_predict_x0_inverts_forward_with_true_noise(rng):
    x0, eps = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
    z = forward_diffuse(x0, 700, eps, SCHED)
    assert np.allclose(predict_x0(z, 700, None, None, SCHED, eps=eps), x0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.sampled_from([5, 10, 40]), st.integers(0, 2**31))
def test_constant_denoiser_round_trip_is_exact(value, steps, seed):
    z0 = np.random.default_rng(seed).normal(size=(2, 8, 8))
    be = ConstantDenoiser(value)
    zT = ddim_invert(z0, None, be, SCHED, steps)
    assert np.max(np.abs(ddim_sample(zT, None, be, SCHED, steps) - z0)) < 1e-8


def test_step_order_and_identity():
    z = np.ones((1, 2, 2))
    be = ConstantDenoiser(0.3)
    assert np.array_equal(ddim_invert_step(z, 24, 24, None, be, SCHED), z)
    with pytest.raises(ScheduleError):
        ddim_invert_step(z, 49, 24, None, be, SCHED)
    with pytest.raises(ScheduleError):
        ddim_step(z, 24, 49, None, be, SCHED)


def test_inversion_evaluates_at_destination_label():
    seen = []

    class Spy(ConstantDenoiser):
        def predict_eps(self, z, t, cond=None, capture=None):
            seen.append(t)
            return super().predict_eps(z, t, cond, capture)

    ddim_invert(np.zeros((1, 2, 2)), None, Spy(0.0), SCHED, 4)
    assert seen == SCHED.timesteps(4).tolist()


def test_gaussian_score_matches_regression_oracle():
    # E[eps | z] is linear in z for Gaussian data; a least-squares fit recovers the slope
    r = np.random.default_rng(0)
    mu, var, t = 0.5, 0.3, 400
    x0 = mu + np.sqrt(var) * r.standard_normal(400_000)
    eps = r.standard_normal(x0.size)
    z = forward_diffuse(x0, t, eps, SCHED)
    slope, icpt = np.polyfit(z, eps, 1)
    pred = GaussianScoreDenoiser(SCHED, mu, var).predict_eps(np.array([0.0, 1.0]), t)
    assert np.isclose(pred[1] - pred[0], slope, rtol=0.01)
    assert np.isclose(pred[0], icpt, atol=0.01)


def test_gaussian_probability_flow_transports_to_data_law():
    r = np.random.default_rng(1)
    mu, var = -1.0, 0.25
    be = GaussianScoreDenoiser(SCHED, mu, var)
    zT = r.standard_normal(20_000) * np.sqrt(SCHED.alpha_bar(999) * var + 1 - SCHED.alpha_bar(999)) \
        + np.sqrt(SCHED.alpha_bar(999)) * mu
    x = ddim_sample(zT, None, be, SCHED, 200)
    assert abs(x.mean() - mu) < 0.02
    assert abs(x.var() / var - 1) < 0.05


def test_attention_matches_naive(rng):
    q, k, v = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 6))
    out, w = attention(q, k, v, return_weights=True)
    logits = np.einsum("bqd,bkd->bqk", q, k) / 2.0
    naive = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    assert np.allclose(w, naive)
    assert np.allclose(w.sum(-1), 1.0)
    assert np.allclose(out, naive @ v)


def test_multi_head_attention_shape(rng):
    x, ctx = rng.normal(size=(2, 6, 8)), rng.normal(size=(2, 3, 5))
    wq, wk, wv = rng.normal(size=(8, 8)), rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    assert multi_head_attention(x, ctx, wq, wk, wv, heads=2).shape == (2, 6, 2, 4)


@given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_strided_codec_encode_decode_encode(n, f, seed):
    codec = StridedAverageCodec(f)
    x = np.random.default_rng(seed).random((n, 3, 8, 8))
    z = codec.encode(x)
    assert z.shape == (n, 3, 8 // f, 8 // f)
    assert np.allclose(codec.encode(codec.decode(z)), z)
    assert np.isclose(z.mean(), x.mean())


def test_codec_factory():
    assert isinstance(make_codec("identity"), IdentityCodec)
    assert make_codec("strided_average", 4).factor == 4
    with pytest.raises(ValueError):
        make_codec("vae")


def _unet_inputs(r, n=2, size=8, d=16):
    return r.normal(size=(n, 3, size, size)), Conditioning(r.normal(size=(n, 5, d)), r.normal(size=(3, size, size)))


def test_tiny_unet_is_seeded_and_lipschitz_bounded():
    a, b = TinyUNetDenoiser(TinyUNetConfig(seed=3)), TinyUNetDenoiser(TinyUNetConfig(seed=3))
    r = np.random.default_rng(0)
    z, cond = _unet_inputs(r)
    assert np.array_equal(a.predict_eps(z, 499, cond), b.predict_eps(z, 499, cond))
    for m in a.net.modules():
        if isinstance(m, (torch.nn.Linear, torch.nn.Conv2d)):
            s = torch.linalg.matrix_norm(m.weight.reshape(m.weight.shape[0], -1), ord=2)
            assert s <= 0.5 + 1e-9


def test_tiny_unet_capture_sites():
    be = TinyUNetDenoiser()
    z, cond = _unet_inputs(np.random.default_rng(0))
    cap = {s: None for s in be.sites}
    be.predict_eps(z, 99, cond, capture=cap)
    assert len(be.sites) == 9
    up = cap["up.cross"]
    assert up.heads_out.shape == (2, 64, 2, 8) and up.grid == (8, 8) and up.channels == 16
    assert cap["mid.spatial"].grid == (4, 4)
    with pytest.raises(UnknownSiteError):
        be.predict_eps(z, 99, cond, capture={"bottleneck.cross": None})


def test_cross_attention_capture_consistent_with_projection():
    be = TinyUNetDenoiser()
    r = np.random.default_rng(2)
    hidden = r.normal(size=(2, 16, 4, 4))
    cond = Conditioning(r.normal(size=(2, 5, 16)))
    out, rec = cross_attention_capture(hidden, cond, "up.cross", be)
    proj = rec.heads_out.reshape(2, 16, -1) @ rec.out_weight.T + rec.out_bias
    assert np.allclose(proj.transpose(0, 2, 1).reshape(2, 16, 4, 4), out)
    with pytest.raises(UnknownSiteError):
        cross_attention_capture(hidden, cond, "up.spatial", be)
