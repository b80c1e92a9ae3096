"""Extract the two detector inputs from one clip of a toy corpus.

phi stacks frame, decoded inverted noise, reconstruction and residual
(12 channels at frame resolution). psi is the audio cross-attention
output at one timestep, gated by face/lip masks, at latent resolution.
The temporal attention heatmap is written next to the corpus.

    python3 demos/02_feature_extraction.py [workdir]
"""
import sys
from pathlib import Path

import numpy as np

from xavdt import data as D
from xavdt.evaluation import attention_energy, save_heatmap, temporal_attention_heatmap
from xavdt.inversion import ExtractConfig, FeatureExtractor, feature_shapes
from xavdt.pipeline import condition_for, extract_inputs, load_inputs

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/extract")
root = D.make_toy_corpus(work / "corpus", n_real=2, seed=0)
man = D.build_manifest(root, D.FilterSpec(min_duration=0.5, min_short_side=32, test_generators=("gen_c",)))

cfg = ExtractConfig.desk()
fx = FeatureExtractor(cfg)
for rec in man:
    inp = load_inputs(man, rec, cfg)
    phi, psi = extract_inputs(fx, inp, condition_for(inp, cfg))
    N, _, H, W = inp.clip.frames.shape
    assert {"phi": phi.shape, "psi": psi.shape} == feature_shapes(cfg, N, H, W)
    resid = phi[:, 9:12].mean()
    print(f"{rec.clip_id:16s} label={rec.label} phi{phi.shape} psi{psi.shape} mean residual {resid:.4f}")

heat = temporal_attention_heatmap(attention_energy(psi))
png, _ = save_heatmap(work / f"{rec.clip_id}_temporal.png", heat, tag=rec.clip_id)
print("wrote", png)
print("paper-scale psi for a 16x512x512 clip:",
      feature_shapes(ExtractConfig.paper_scale(), 16, 512, 512)["psi"])
