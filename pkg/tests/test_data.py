import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from xavdt import data as D
from xavdt import xavf
from xavdt.inversion import ExtractConfig

H32 = bytes(range(32))


@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint8, np.int64]),
                  hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_xavf_round_trip(a):
    back, h = xavf.decode(xavf.encode(a, H32))
    assert h == H32 and back.dtype == a.dtype and back.shape == a.shape
    assert back.tobytes() == np.asarray(a, order="C").tobytes()


def test_xavf_layout_is_little_endian_and_checksummed():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = xavf.encode(a, H32)
    assert buf[:4] == b"XAVF"
    assert struct.unpack_from("<BBB", buf, 4) == (1, 1, 2)
    assert struct.unpack_from("<2Q", buf, 7) == (2, 3)
    payload = buf[7 + 16 + 32:-32]
    assert payload == a.astype("<f4").tobytes()
    assert buf[-32:] == hashlib.sha256(payload).digest()


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-40],                                   # truncated
    lambda b: b[:60] + bytes([b[60] ^ 1]) + b[61:],      # flipped payload bit
    lambda b: b"XAVG" + b[4:],                           # bad magic
    lambda b: b[:4] + bytes([9]) + b[5:],                # bad version
])
def test_xavf_rejects_corruption(mutate):
    buf = xavf.encode(np.ones((4, 4), np.float64), H32)
    with pytest.raises(xavf.XAVFError):
        xavf.decode(mutate(buf))


def test_xavf_write_is_exclusive(tmp_path):
    p = xavf.write(tmp_path / "a.xavf", np.zeros(3, np.float32), H32)
    with pytest.raises(xavf.XAVFError):
        xavf.write(p, np.ones(3, np.float32), H32)
    assert np.array_equal(xavf.read(p)[0], np.zeros(3))
    with pytest.raises(xavf.XAVFError):
        xavf.read(p, expect_hash=bytes(32))
    assert list(tmp_path.iterdir()) == [p]


def _meta(root, cid, label, gen, paired="", **kw):
    m = dict(clip_id=cid, video=f"{cid}.npz", audio=f"{cid}.wav", label=label, generator=gen, paired_real=paired,
             face_ok=True, duration=3.0, height=512, width=640)
    m.update(kw)
    (root / f"{cid}.meta.json").write_text(json.dumps(m))


def test_manifest_filters_and_splits(tmp_path):
    _meta(tmp_path, "r1", 0, "real")
    _meta(tmp_path, "r2", 0, "real", duration=1.0)
    _meta(tmp_path, "r3", 0, "real")
    _meta(tmp_path, "f1", 1, "gen_a", "r1")
    _meta(tmp_path, "f2", 1, "gen_a", "r2")
    _meta(tmp_path, "f3", 1, "gen_b", "r3")
    _meta(tmp_path, "f4", 1, "gen_b", "r1", face_ok=False)
    man = D.build_manifest(tmp_path, D.FilterSpec(test_generators=("gen_b",)))
    ids = {r.clip_id: r for r in man}
    assert set(ids) == {"r1", "r3", "f1", "f3"}
    why = dict(man.rejected)
    assert why["f2"] == "paired real rejected" and why["f4"] == "face tracking failed"
    assert why["r2"].startswith("duration")
    assert ids["r3"].split == "test" and ids["r1"].split == "train" and ids["f3"].split == "test"
    back = D.Manifest.load(man.save(tmp_path / "m.tsv"))
    assert back.records == man.records


def test_manifest_orphans_and_overlap(tmp_path):
    _meta(tmp_path, "f1", 1, "gen_a", "nobody")
    with pytest.raises(D.ManifestError):
        D.build_manifest(tmp_path)
    recs = [D.ManifestRecord("r", "r.npz", "r.wav", 0, "real", "train"),
            D.ManifestRecord("a", "a.npz", "a.wav", 1, "g", "train", "r"),
            D.ManifestRecord("b", "b.npz", "b.wav", 1, "g", "test", "r")]
    with pytest.raises(D.ManifestError):
        D.Manifest(recs).validate()
    with pytest.raises(D.ManifestError):
        D.ManifestRecord("x", "x", "x", 1, "g", "train")
    bad = tmp_path / "bad.tsv"
    bad.write_text("no header\n")
    with pytest.raises(D.ManifestError):
        D.Manifest.load(bad)


def test_clip_io_round_trip(tmp_path, rng):
    frames = rng.random((4, 3, 8, 8))
    clip = D.load_video(D.save_video(tmp_path / "v.npz", frames, 30.0), "v")
    assert clip.fps == 30.0 and np.max(np.abs(clip.frames - frames)) <= 0.5 / 255 + 1e-6
    w = rng.uniform(-0.5, 0.5, 800).astype(np.float32)
    back, sr = D.load_audio(D.save_audio(tmp_path / "a.wav", w, 8000))
    assert sr == 8000 and np.allclose(back, w, atol=1e-4)


def test_cache_write_once_and_config_keyed(tmp_path, rng):
    cfg = ExtractConfig.desk()
    phi, psi = rng.random((16, 12, 8, 8)).astype(np.float32), rng.random((16, 4, 2, 2)).astype(np.float32)
    D.cache_features(tmp_path, "c1", phi, psi, cfg)
    assert D.has_features(tmp_path, "c1", cfg)
    assert not D.has_features(tmp_path, "c1", ExtractConfig.desk(site="up.temporal"))
    with pytest.raises(D.CacheError):
        D.cache_features(tmp_path, "c1", phi, psi, cfg)
    p2, s2 = D.load_features(tmp_path, "c1", cfg)
    assert np.array_equal(p2, phi) and np.array_equal(s2, psi)
    with pytest.raises(D.CacheError):
        D.load_features(tmp_path, "c2", cfg)


def test_responses_round_trip(tmp_path):
    rows = [("ann", "f1", "real"), ("bob", "f1", "fake")]
    assert D.read_responses(D.write_responses(tmp_path / "r.tsv", rows)) == rows
    (tmp_path / "bad.tsv").write_text("ann\tf1\tmaybe\n")
    with pytest.raises(ValueError):
        D.read_responses(tmp_path / "bad.tsv")


def test_toy_corpus_pairs_and_generator_split(tmp_path):
    root = D.make_toy_corpus(tmp_path, n_real=6, seed=1)
    man = D.build_manifest(root, D.FilterSpec(min_duration=0.5, min_short_side=32, test_generators=("gen_c",)))
    assert len(man) == 12
    test = man.split("test")
    assert {r.generator for r in test if r.label == 1} == {"gen_c"}
    assert all(man.by_id()[r.paired_real].split == "test" for r in test if r.label == 1)
    real = D.load_video(root / "real000.npz")
    fake = D.load_video(root / "fake000_gen_a.npz")
    assert real.frames.shape == fake.frames.shape == (16, 3, 32, 32)
    assert not np.array_equal(real.frames, fake.frames)


def test_saved_manifest_resolves_media_from_any_directory(tmp_path):
    root = D.make_toy_corpus(tmp_path / "corpus", n_real=2)
    man = D.build_manifest(root, D.FilterSpec(min_duration=0.5, min_short_side=32))
    (tmp_path / "elsewhere").mkdir()
    back = D.Manifest.load(man.save(tmp_path / "elsewhere" / "m.tsv"))
    for r in back:
        assert back.resolve(r.video_path).exists() and back.resolve(r.audio_path).exists()
