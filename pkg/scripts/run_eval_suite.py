"""Held-out evaluation of the shipped pipeline, with precision diagnostics.

Prints the per-class sensitivity table for the seeded held-out suite, the
mean number of detections per scene, the fraction of detections that match
some planted lesion, and false positives on lesion-free scenes.

Usage: python3 scripts/run_eval_suite.py [--threshold 0.5] [--iou 0.3] [--shots 5]
"""

import argparse
import time

import numpy as np

from retinaxai import detector as D
from retinaxai import evaluate, pipeline
from retinaxai.lesions import LesionClass
from retinaxai.net import default_spec
from retinaxai.synth import generate_scene


def matched_fraction(dets, gts, iou):
    """Share of detections overlapping a same-class planted lesion at ``iou`` or more."""
    if not dets:
        return float("nan")
    hit = 0
    for box, cls, _ in dets:
        hit += any(c is cls and D.iou(box, b) >= iou for b, c in gts)
    return hit / len(dets)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--threshold", type=float, default=pipeline.SCORE_THRESHOLD)
    ap.add_argument("--iou", type=float, default=evaluate.EVAL_IOU)
    ap.add_argument("--shots", type=int, default=5)
    ap.add_argument("--empty", type=int, default=20, help="number of lesion-free scenes to probe")
    args = ap.parse_args()

    t0 = time.perf_counter()
    spec = default_spec()
    weights = pipeline.load_default_weights()
    protos = pipeline.default_prototypes(args.shots)
    scenes = [generate_scene(s) for s in pipeline.EVAL_SEEDS]
    dets = [[d.as_tuple() for d in pipeline.detect(spec, weights, protos, s.image, args.threshold)] for s in scenes]
    rows = evaluate.match_and_score(dets, [s.lesions for s in scenes], args.iou)
    print(evaluate.sensitivity_table(rows), end="")
    print(f"detections per scene: {np.mean([len(d) for d in dets]):.1f} (planted: {len(scenes[0].lesions)})")
    frac = np.mean([matched_fraction(d, s.lesions, args.iou) for d, s in zip(dets, scenes)])
    print(f"detections matching a planted lesion: {100 * frac:.1f}%")

    empty = [generate_scene(s, {c: 0 for c in LesionClass}) for s in range(args.empty)]
    fp = [len(pipeline.detect(spec, weights, protos, s.image, args.threshold)) for s in empty]
    print(f"lesion-free scenes with detections: {sum(n > 0 for n in fp)}/{len(empty)} ({sum(fp)} total)")
    print(f"{time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
