"""Train the two-stream detector on synthetic features, with and without the triplet term.

Synthetic features mimic the extractor's cues: fakes reconstruct slightly
better and carry a shifted attention bump near the mouth. Both runs are
scored on a held-out set; the embedding separability is reported in dB.

    python3 demos/03_train_detector.py
"""
from xavdt.detector import DetectorConfig, predict, synthetic_features, train
from xavdt.evaluation import embedding_snr, evaluate

tr = synthetic_features(300, seed=0)
held = synthetic_features(120, seed=1)

for lam in (0.0, 0.3):
    ck = train(tr, DetectorConfig(epochs=3, lam=lam))
    last = ck.log[-1]
    scores, out = predict(held.phi, held.psi, ck)
    rep = evaluate(scores, held.labels)
    snr = embedding_snr(out.embedding.detach().double().numpy(), held.labels)
    print(f"lambda={lam}: last epoch bce={last['bce']:.4f} triplet={last['tri']:.4f} | "
          f"AUROC {rep.auroc:.1f} AP {rep.ap:.1f} Acc@EER {rep.acc_at_eer:.1f} | embedding SNR {snr:.1f} dB")
