import numpy as np
import pytest

from xavdt import data as D
from xavdt.detector import DetectorConfig, train
from xavdt.inversion import ExtractConfig
from xavdt.pipeline import extract_manifest, feature_set

TOY_FILTER = D.FilterSpec(min_duration=0.5, min_short_side=32, test_generators=("gen_c",))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """Toy corpus, manifest, populated desk-scale cache and a small trained checkpoint."""
    base = tmp_path_factory.mktemp("toy")
    root = D.make_toy_corpus(base / "corpus", n_real=6, seed=0)
    man = D.build_manifest(root, TOY_FILTER)
    man_path = man.save(base / "manifest.tsv")
    cfg = ExtractConfig.desk()
    cache = base / "cache"
    stats = extract_manifest(man, cfg, cache)
    assert not stats["failed"]
    fs = feature_set(man.split("train"), cfg, cache)
    dcfg = DetectorConfig(psi_channels=fs.psi.shape[2], phi_downsample=cfg.codec_factor, epochs=2)
    ckpt = train(fs, dcfg)
    ckpt_path = ckpt.save(base / "detector.ckpt")
    return dict(base=base, root=root, manifest=man, manifest_path=man_path, cfg=cfg, cache=cache,
                ckpt=ckpt, ckpt_path=ckpt_path)
