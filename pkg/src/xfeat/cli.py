"""Command-line surface: train, extract, match, eval-homography, bench-flops."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import io as xio
from .backbone import BackboneConfig, build_model, forward_features
from .geometry import ransac_homography, corner_error, evaluate_pairs, read_hpatches
from .heads import keypoint_head_forward
from .matcher import mnn_match, refine_matches, sparse_extract, semi_dense_extract
from .tensor import FlopCounter, no_grad
from .training import (
    TrainConfig, LossWeights, CorrespondenceSet, make_training_pairs,
    synth_warp_pair, train,
)

IMAGE_EXTS = (".pgm", ".ppm", ".png", ".jpg", ".jpeg")


def _load_config(path):
    if path is None:
        return BackboneConfig()
    with open(path) as f:
        return BackboneConfig.from_dict(json.load(f))


def _resize_gray(img, w, h):
    from .tensor import Tensor, bilinear_resize
    if img.shape == (h, w):
        return img
    return bilinear_resize(Tensor(img[None, None].astype(np.float32)), h, w).data[0, 0].astype(np.float64)


def cmd_train(args):
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed,
                      image_size=tuple(args.image_size), lr=args.lr,
                      synthetic_fraction=args.synthetic_fraction,
                      weights=LossWeights())
    model = build_model(_load_config(args.config), rng_seed=args.seed)
    rng = np.random.default_rng(args.seed)
    w, h = cfg.image_size

    paths = sorted(p for p in os.listdir(args.corpus)
                   if p.lower().endswith(IMAGE_EXTS))
    if not paths:
        raise SystemExit(f"no images found in {args.corpus}")
    images = [_resize_gray(xio.decode_image(os.path.join(args.corpus, p)), w, h)
              for p in paths]

    pairs = []
    if args.pairs_manifest:
        with open(args.pairs_manifest) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                i1 = _resize_gray(xio.decode_image(rec["image_a"]), w, h)
                i2 = _resize_gray(xio.decode_image(rec["image_b"]), w, h)
                if "homography" in rec:
                    hmat = np.asarray(rec["homography"], dtype=np.float64).reshape(3, 3)
                    _, _, _, corrs = synth_warp_pair(i1, rng, homography=hmat,
                                                     photometric=False)
                    pairs.append((i1, i2, hmat, corrs))
                else:
                    m = np.load(rec["correspondences"])
                    pairs.append((i1, i2, None, CorrespondenceSet(m)))
    n_synth = args.num_pairs if not pairs else \
        int(round(len(pairs) * cfg.synthetic_fraction / max(1e-9, 1 - cfg.synthetic_fraction)))
    pairs.extend(make_training_pairs(images, rng, max(n_synth, 1)))

    history = train(model, pairs, cfg, log_every=args.log_every)
    xio.save_weights(model, args.out)
    csv_path = os.path.splitext(args.out)[0] + "_loss.csv"
    lines = ["step,lr,total,ds,rel,fine,kp"]
    lines += [f"{r['step']},{r['lr']:.6g},{r['total']:.6f},{r['ds']:.6f},"
              f"{r['rel']:.6f},{r['fine']:.6f},{r['kp']:.6f}" for r in history]
    xio.atomic_write(csv_path, ("\n".join(lines) + "\n").encode())
    print(f"saved checkpoint to {args.out} and loss curve to {csv_path}")
    return 0


def cmd_extract(args):
    model = xio.load_weights(args.model).eval()
    img = xio.decode_image(args.image)
    if args.mode == "sparse":
        fs = sparse_extract(model, img, top_k=args.top_k)
    else:
        fs = semi_dense_extract(model, img, top_n=args.top_k)
    xio.save_features(fs, args.out)
    print(f"extracted {len(fs)} {args.mode} features -> {args.out}")
    return 0


def cmd_match(args):
    model = xio.load_weights(args.model).eval()
    fa = xio.load_features(args.feats_a)
    fb = xio.load_features(args.feats_b)
    matches = mnn_match(fa, fb, min_cossim=args.min_cossim)
    if args.refine:
        matches = refine_matches(matches, fa, fb, model, conf_threshold=args.conf)
    records = []
    for i in range(len(matches)):
        rec = {"xa": float(matches.coords_a[i, 0]), "ya": float(matches.coords_a[i, 1]),
               "xb": float(matches.coords_b[i, 0]), "yb": float(matches.coords_b[i, 1]),
               "confidence": float(matches.confidence[i]) if matches.confidence is not None else 1.0}
        records.append(rec)
    xio.atomic_write(args.out, json.dumps(records, indent=1).encode())
    print(f"wrote {len(records)} matches -> {args.out}")
    return 0


def cmd_eval_homography(args):
    model = xio.load_weights(args.model).eval()
    if args.hpatches:
        pair_list = read_hpatches(args.hpatches)
    else:
        with open(args.pairs) as f:
            manifest = json.load(f)
        pair_list = [(rec["image_a"], rec["image_b"],
                      np.asarray(rec["homography"], dtype=np.float64).reshape(3, 3))
                     for rec in manifest]
    rng = np.random.default_rng(args.seed)
    records = []
    cache = {}

    def features(path):
        if path not in cache:
            img = xio.decode_image(path)
            if args.mode == "sparse":
                cache[path] = (sparse_extract(model, img, top_k=args.top_k), img.shape)
            else:
                cache[path] = (semi_dense_extract(model, img, top_n=args.top_k), img.shape)
        return cache[path]

    for path_a, path_b, h_gt in pair_list:
        fa, shape_a = features(path_a)
        fb, _ = features(path_b)
        matches = mnn_match(fa, fb, min_cossim=args.min_cossim)
        if args.refine:
            matches = refine_matches(matches, fa, fb, model, conf_threshold=args.conf)
        res = ransac_homography(matches.coords_a, matches.coords_b,
                                threshold_px=args.threshold, rng=rng)
        if not res.success:
            records.append((None, np.zeros(0, dtype=bool)))
            continue
        err = corner_error(res.homography, h_gt, (shape_a[1], shape_a[0]))
        records.append((err, res.inlier_mask))

    report = evaluate_pairs(records)
    xio.atomic_write(args.out, json.dumps(report.to_dict(), indent=1).encode())
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_bench_flops(args):
    if args.model:
        model = xio.load_weights(args.model).eval()
    else:
        model = build_model(_load_config(args.config), rng_seed=0).eval()
    img = np.zeros((args.height, args.width), dtype=np.float32)
    counter = FlopCounter()
    t0 = time.perf_counter()
    with no_grad():
        forward_features(model, img, counter)
        keypoint_head_forward(model, img, counter)
    dt = time.perf_counter() - t0
    print(f"{'layer':<14}{'H':>6}{'W':>6}{'Cin':>6}{'Cout':>6}{'k':>4}{'f_ops':>16}")
    for name, h, w, cin, cout, k, fops in counter.rows():
        print(f"{name:<14}{h:>6}{w:>6}{cin:>6}{cout:>6}{k:>4}{fops:>16,}")
    print(f"{'total':<14}{'':>28}{counter.total:>20,}")
    print(f"forward pass: {dt * 1000:.1f} ms at {args.width}x{args.height}")
    if args.json_out:
        payload = {"width": args.width, "height": args.height, "total": counter.total,
                   "per_layer": [dict(zip(("name", "h", "w", "c_in", "c_out", "k", "f_ops"), r))
                                 for r in counter.rows()],
                   "forward_seconds": dt}
        xio.atomic_write(args.json_out, json.dumps(payload, indent=1).encode())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="xfeat",
                                description="Lightweight local features: training, "
                                            "extraction, matching and homography evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on an image corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--batch-size", type=int, default=10)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--image-size", type=int, nargs=2, default=(800, 600), metavar=("W", "H"))
    t.add_argument("--num-pairs", type=int, default=200,
                   help="synthetic warp pairs to pre-generate")
    t.add_argument("--pairs-manifest", help="JSON-lines posed pairs (paths + homography)")
    t.add_argument("--synthetic-fraction", type=float, default=0.4)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="extract features from one image")
    e.add_argument("--model", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--mode", choices=("sparse", "semidense"), default="sparse")
    e.add_argument("--top-k", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    m = sub.add_parser("match", help="match two cached feature sets")
    m.add_argument("--model", required=True)
    m.add_argument("--feats-a", required=True)
    m.add_argument("--feats-b", required=True)
    m.add_argument("--refine", action="store_true")
    m.add_argument("--conf", type=float, default=0.2)
    m.add_argument("--min-cossim", type=float, default=-1.0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_match)

    v = sub.add_parser("eval-homography", help="RANSAC homography evaluation")
    v.add_argument("--model", required=True)
    v.add_argument("--pairs", help="JSON manifest: [{image_a, image_b, homography}]")
    v.add_argument("--hpatches", help="HPatches root directory")
    v.add_argument("--mode", choices=("sparse", "semidense"), default="sparse")
    v.add_argument("--top-k", type=int, default=None)
    v.add_argument("--threshold", type=float, default=3.0)
    v.add_argument("--refine", action="store_true")
    v.add_argument("--conf", type=float, default=0.2)
    v.add_argument("--min-cossim", type=float, default=-1.0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval_homography)

    b = sub.add_parser("bench-flops", help="per-layer conv FLOP table and timing")
    b.add_argument("--model")
    b.add_argument("--config")
    b.add_argument("--width", type=int, required=True)
    b.add_argument("--height", type=int, required=True)
    b.add_argument("--json-out")
    b.set_defaults(func=cmd_bench_flops)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "extract" and args.top_k is None:
        args.top_k = 4096 if args.mode == "sparse" else 10000
    if args.command == "eval-homography":
        if args.top_k is None:
            args.top_k = 4096 if args.mode == "sparse" else 10000
        if not args.pairs and not args.hpatches:
            parser.error("eval-homography needs --pairs or --hpatches")
    try:
        return args.func(args)
    except (OSError, ValueError, SystemExit) as exc:
        if isinstance(exc, SystemExit):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
