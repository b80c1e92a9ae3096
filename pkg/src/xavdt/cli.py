"""Command-line entry point.

Every command writes ``run_config.json`` (the resolved configuration) to its
output directory before anything else.  Exit status: 0 ok, 2 config error,
3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .detector import Checkpoint, DetectorConfig, NumericalError, predict, train
from .evaluation import (attention_energy, delta_attention_map, fisher_snr, grad_cam, hfar,
                         lda_fit_and_margin, save_heatmap, temporal_attention_heatmap, topq_roi_coverage)
from .inversion import ExtractConfig, FeatureExtractor, MaskSet
from .robustness import LADDERS, VISUAL_KINDS, run_suite

log = logging.getLogger("xavdt")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
CACHE_ENV = "XAVDT_CACHE"
ANALYSES = ("fisher", "lda", "topq", "delta", "hfar")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config helpers


def extract_config(args) -> ExtractConfig:
    if getattr(args, "extract_config", None):
        cfg = ExtractConfig.from_dict(json.loads(Path(args.extract_config).read_text()))
    elif args.preset == "desk":
        cfg = ExtractConfig.desk()
    else:
        cfg = ExtractConfig()
    kw = {}
    if args.t_star is not None:
        kw["t_star"] = args.t_star
    if args.site is not None:
        kw["site"] = args.site
    if args.steps is not None:
        kw["schedule"] = replace(cfg.schedule, steps=args.steps)
    if getattr(args, "mask_mode", None):
        kw["mask_mode"] = args.mask_mode
    return replace(cfg, **kw) if kw else cfg


def cache_root(args) -> Path:
    root = args.cache or os.environ.get(CACHE_ENV)
    if not root:
        raise ConfigError(f"no cache directory: pass --cache or set {CACHE_ENV}")
    return Path(root)


def snapshot(out: Path, command: str, args, **resolved) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    plain = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    body = {"command": command, "args": plain, **resolved}
    path = out / "run_config.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str))
    return path


def _manifest(args, split=None) -> D.Manifest:
    man = D.Manifest.load(args.manifest)
    return man.split(split) if split else man


def _detector_config(args, fs, xcfg: ExtractConfig) -> DetectorConfig:
    c = fs.psi.shape[2] // (3 if xcfg.mask_mode == "learned" else 1)
    f = 1 if xcfg.codec == "identity" else xcfg.codec_factor
    kw = dict(psi_channels=c, phi_downsample=f, seed=args.seed, lam=args.lam, margin=args.margin,
              epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
              mining=args.mining, use_phi=not args.no_phi, use_psi=not args.no_psi,
              use_residual=not args.no_residual, learn_mask_weights=xcfg.mask_mode == "learned")
    return DetectorConfig(**kw)


# --------------------------------------------------------------------------
# commands


def cmd_toy(args):
    root = D.make_toy_corpus(args.out, n_real=args.n_real, frames=args.frames, size=args.size, seed=args.seed,
                             test_generators=tuple(args.test_generators))
    spec = D.FilterSpec(min_duration=0.0, min_short_side=args.size, test_generators=tuple(args.test_generators))
    man = D.build_manifest(root, spec)
    path = man.save(Path(args.out) / "manifest.tsv")
    print(f"wrote {len(man)} records to {path}")


def cmd_manifest(args):
    spec = D.FilterSpec(args.min_duration, args.min_short_side, not args.no_face_check, tuple(args.test_generators))
    man = D.build_manifest(args.root, spec)
    path = man.save(args.out)
    print(f"kept {len(man)} records, rejected {len(man.rejected)}; wrote {path}")
    for cid, why in man.rejected:
        print(f"  rejected {cid}: {why}")


def cmd_extract(args):
    xcfg = extract_config(args)
    out = Path(args.out)
    snapshot(out, "extract", args, extract_config=xcfg.to_dict(), config_hash=xcfg.digest().hex())
    from .pipeline import extract_manifest
    root = cache_root(args)
    fx = FeatureExtractor(xcfg)  # validates t*, site and codec before any data is touched
    man = _manifest(args)
    stats = extract_manifest(man, xcfg, root, extractor=fx,
                             progress=lambda cid, what: log.info("%s: %s", cid, what))
    (out / "extract_log.json").write_text(json.dumps(stats, indent=2))
    print(f"cache hits {stats['hit']}, written {stats['written']}, failed {len(stats['failed'])}")
    if stats["failed"]:
        raise D.CacheError(f"extraction failed for {[c for c, _ in stats['failed']]}")


def cmd_train(args):
    from .pipeline import feature_set
    xcfg = extract_config(args)
    man = _manifest(args, "train")
    fs = feature_set(man, xcfg, cache_root(args))
    dcfg = _detector_config(args, fs, xcfg)
    out = Path(args.out)
    snapshot(out, "train", args, extract_config=xcfg.to_dict(), detector_config=dcfg.to_dict())
    ckpt = train(fs, dcfg)
    path = ckpt.save(out / "detector.ckpt")
    print(f"checkpoint {path} sha256 {ckpt.sha256()}")
    for e in ckpt.log:
        print(f"  epoch {e['epoch']}: total {e['total']:.4f} bce {e['bce']:.4f} tri {e['tri']:.4f}")


def cmd_eval(args):
    from .pipeline import evaluate_features, feature_set
    xcfg = extract_config(args)
    out = Path(args.out)
    snapshot(out, "eval", args, extract_config=xcfg.to_dict())
    ckpt = Checkpoint.load(args.checkpoint)
    fs = feature_set(_manifest(args, args.split), xcfg, cache_root(args))
    rep = evaluate_features(ckpt, fs)
    rep.save(out / "eval_report.json")
    print(rep.to_text(), end="")


def cmd_perturb(args):
    xcfg = extract_config(args)
    out = Path(args.out)
    kinds = tuple(args.kind or VISUAL_KINDS)
    sevs = tuple(sorted(set(args.severity))) if args.severity else (0, 1, 2, 3, 4)
    snapshot(out, "perturb", args, extract_config=xcfg.to_dict(), kinds=kinds, severities=sevs)
    ckpt = Checkpoint.load(args.checkpoint)
    rep = run_suite(ckpt, _manifest(args, args.split), xcfg, kinds, sevs, seed=args.seed)
    path = rep.write(out)
    print(f"wrote {path}")
    for kind in kinds:
        print(kind, " ".join(f"{rep.grid[(kind, s)].auroc:.2f}" for s in sevs))


def _embeddings(args):
    if args.embeddings:
        X = np.load(args.embeddings)
        y = np.load(args.labels)
        return X, y
    from .pipeline import feature_set
    xcfg = extract_config(args)
    fs = feature_set(_manifest(args, args.split), xcfg, cache_root(args))
    _, outp = predict(fs.phi, fs.psi, Checkpoint.load(args.checkpoint))
    return outp.embedding.double().numpy(), fs.labels


def cmd_analyze(args):
    out = Path(args.out)
    snapshot(out, "analyze", args)
    if not args.analysis:
        raise ConfigError(f"choose at least one analysis from {ANALYSES}")
    results = {}
    for name in args.analysis:
        if name in ("fisher", "lda"):
            X, y = _embeddings(args)
            X = np.asarray(X, dtype=np.float64)
            if X.ndim == 1 or X.shape[1] == 1:
                results["fisher_snr_db"] = fisher_snr(X.ravel()[y == 0], X.ravel()[y == 1])
            else:
                rep = lda_fit_and_margin(X, y)
                results["fisher_snr_db"] = rep.fisher_snr_db
                results["lda_margin"] = rep.lda_margin
                np.savetxt(out / "lda_projection.tsv", np.column_stack([rep.project(X), y]),
                           delimiter="\t", header="lda\tpc\tlabel", comments="")
        elif name in ("topq", "delta"):
            maps, y = _attention_maps(args)
            if name == "topq":
                h, w = maps.shape[-2:]
                roi = MaskSet.synthetic(h, w).face
                cov = [np.mean([topq_roi_coverage(m, roi, args.q) for m in clip]) for clip in maps]
                cov = np.asarray(cov)
                results["topq"] = {"q": args.q, "real": float(cov[y == 0].mean()), "fake": float(cov[y == 1].mean())}
            else:
                delta = delta_attention_map(maps[y == 0].reshape(-1, *maps.shape[-2:]),
                                            maps[y == 1].reshape(-1, *maps.shape[-2:]))
                save_heatmap(out / "delta_attention.png", delta, signed=True, tag="delta")
                results["delta_attention"] = str(out / "delta_attention.png")
        elif name == "hfar":
            man = D.Manifest.load(args.manifest)
            res = hfar(D.read_responses(args.responses), {r.clip_id: r.label for r in man})
            results["hfar"] = {"rate": res.rate, "micro": res.micro, "per_rater": res.per_rater}
        else:
            raise ConfigError(f"unknown analysis {name!r}; choose from {ANALYSES}")
    (out / "analysis.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    for k, v in results.items():
        print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")


def _attention_maps(args):
    from .pipeline import feature_set
    xcfg = extract_config(args)
    fs = feature_set(_manifest(args, args.split), xcfg, cache_root(args))
    return np.stack([attention_energy(p) for p in fs.psi]), fs.labels


def cmd_viz(args):
    out = Path(args.out)
    snapshot(out, "viz", args)
    from .pipeline import feature_set
    xcfg = extract_config(args)
    man = _manifest(args, args.split)
    if args.clip:
        man = D.Manifest([r for r in man if r.clip_id in set(args.clip)], man.root)
    fs = feature_set(man, xcfg, cache_root(args))
    written = []
    for i, cid in enumerate(fs.clip_ids):
        if args.kind == "temporal":
            heat = temporal_attention_heatmap(attention_energy(fs.psi[i]))
        else:
            ckpt = Checkpoint.load(args.checkpoint)
            maps = grad_cam(ckpt.model(), fs.phi[i], fs.psi[i], target=args.target, layer=args.layer)
            heat = maps[0].mean(axis=0)
        p, _ = save_heatmap(out / f"{cid}_{args.kind}.png", heat, tag=cid)
        written.append(str(p))
    print("\n".join(written))


# --------------------------------------------------------------------------
# parser


def _common_extract(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", help=f"feature cache root (default ${CACHE_ENV})")
    p.add_argument("--preset", choices=("desk", "default"), default="desk")
    p.add_argument("--extract-config", help="JSON file with a full extraction config")
    p.add_argument("--t-star", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--site", help="attention site, e.g. up.cross, up.temporal, up.spatial")
    p.add_argument("--mask-mode", choices=("frozen", "learned"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xavdt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="write a synthetic paired corpus and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-real", type=int, default=8)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--test-generators", nargs="*", default=["gen_c"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("manifest", help="build a manifest from clip sidecars")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-duration", type=float, default=2.0)
    p.add_argument("--min-short-side", type=int, default=512)
    p.add_argument("--no-face-check", action="store_true")
    p.add_argument("--test-generators", nargs="*", default=[])
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("extract", help="compute and cache phi/psi features")
    _common_extract(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the detector on cached training-split features")
    _common_extract(p)
    p.add_argument("--lam", type=float, default=0.3)
    p.add_argument("--margin", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--mining", choices=("random", "semi-hard"), default="random")
    p.add_argument("--no-phi", action="store_true")
    p.add_argument("--no-psi", action="store_true")
    p.add_argument("--no-residual", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and write an evaluation report")
    _common_extract(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="severity sweep over corruptions")
    _common_extract(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--kind", action="append", choices=tuple(LADDERS))
    p.add_argument("--severity", action="append", type=int)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("analyze", help="separability, attention and human-study analyses")
    p.add_argument("--out", required=True)
    p.add_argument("--analysis", action="append", choices=ANALYSES)
    p.add_argument("--embeddings", help=".npy (n, d) embeddings; otherwise computed from --checkpoint")
    p.add_argument("--labels", help=".npy labels matching --embeddings")
    p.add_argument("--manifest")
    p.add_argument("--cache")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--responses", help="human-study response file")
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--preset", choices=("desk", "default"), default="desk")
    p.add_argument("--extract-config")
    p.add_argument("--t-star", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--site")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("viz", help="heatmap images (temporal attention or Grad-CAM)")
    _common_extract(p)
    p.add_argument("--kind", choices=("temporal", "gradcam"), default="temporal")
    p.add_argument("--checkpoint")
    p.add_argument("--layer", default="ffd.convs")
    p.add_argument("--target", type=int, default=1)
    p.add_argument("--clip", action="append")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_viz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.ManifestError, D.CacheError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
