"""Severity sweep on a toy corpus: extract, train, then re-extract under corruptions.

Each (kind, severity) cell corrupts the test clips, re-runs the extractor
and scores with the fixed checkpoint. Severity 0 is the clean baseline.

    python3 demos/04_robustness_sweep.py [workdir]
"""
import sys
from pathlib import Path

from xavdt import data as D
from xavdt.detector import DetectorConfig, train
from xavdt.inversion import ExtractConfig
from xavdt.pipeline import extract_manifest, feature_set
from xavdt.robustness import run_suite

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/robustness")
root = D.make_toy_corpus(work / "corpus", n_real=6, seed=0)
man = D.build_manifest(root, D.FilterSpec(min_duration=0.5, min_short_side=32, test_generators=("gen_c",)))
cfg = ExtractConfig.desk()
print(extract_manifest(man, cfg, work / "cache"))

fs = feature_set(man.split("train"), cfg, work / "cache")
ck = train(fs, DetectorConfig(psi_channels=fs.psi.shape[2], phi_downsample=cfg.codec_factor, epochs=3))

rep = run_suite(ck, man.split("test"), cfg, kinds=("jpeg", "noise", "frame_drop", "audio_desync"),
                severities=(0, 1, 2), seed=0)
for (kind, sev), r in sorted(rep.grid.items()):
    print(f"{kind:14s} sev {sev}  AUROC {r.auroc:6.1f}  AP {r.ap:6.1f}")
print("grid written to", rep.write(work / "grid"))
