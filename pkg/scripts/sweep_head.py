"""Sweep head-fitting settings and report held-out sensitivity for each.

Each run fits the proposal head on the training suite, then evaluates on the
held-out suite with the default post-processing. Backbone features are
computed once and reused.

Usage: python3 scripts/sweep_head.py [--hard 0 256 1024] [--lr 0.05 0.5] [--negatives 1024]
"""

import argparse
import itertools
import time

import numpy as np

from retinaxai import detector as D
from retinaxai import evaluate, fit, pipeline
from retinaxai.net import default_spec
from retinaxai.synth import generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hard", type=int, nargs="+", default=[0, 256])
    ap.add_argument("--negatives", type=int, nargs="+", default=[1024])
    ap.add_argument("--lr", type=float, nargs="+", default=[0.05])
    ap.add_argument("--obj-scale", type=float, nargs="+", default=[fit.FitConfig.objectness_lr_scale])
    ap.add_argument("--epochs", type=int, default=fit.FitConfig.epochs)
    args = ap.parse_args()

    spec = default_spec()
    base = pipeline.backbone_weights()
    protos = pipeline.default_prototypes()
    train = [generate_scene(s) for s in pipeline.TRAIN_SEEDS]
    test = [generate_scene(s) for s in pipeline.EVAL_SEEDS]
    train_f = [D.backbone_features(spec, base, s.image) for s in train]
    test_f = [D.backbone_features(spec, base, s.image) for s in test]

    print("hard\tnegatives\tlr\tobj_scale\tloss0\tloss\tdet/scene\tTP per class")
    for n_hard, n_neg, lr, scale in itertools.product(args.hard, args.negatives, args.lr, args.obj_scale):
        t0 = time.perf_counter()
        cfg = fit.FitConfig(epochs=args.epochs, learning_rate=lr, objectness_lr_scale=scale,
                            negatives_per_scene=n_neg, hard_negatives_per_scene=n_hard)
        res = fit.fit_rpn_head(spec, base, train, cfg, features=train_f)
        weights = {**base, **res.head}
        dets = [[d.as_tuple() for d in pipeline.detect(spec, weights, protos, s.image, features=f)]
                for s, f in zip(test, test_f)]
        rows = evaluate.match_and_score(dets, [s.lesions for s in test])
        tp = "/".join(f"{r.detected_true_positives}" for r in rows)
        print(f"{n_hard}\t{n_neg}\t{lr}\t{scale}\t{res.initial_loss:.3f}\t{res.final_loss:.3f}\t"
              f"{np.mean([len(d) for d in dets]):.1f}\t{tp}\t({time.perf_counter() - t0:.0f} s)", flush=True)


if __name__ == "__main__":
    main()
