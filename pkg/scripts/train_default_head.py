"""Fit the proposal head on the seeded training suite and write the shipped weights.

Usage: python3 scripts/train_default_head.py [--out PATH]
"""

import argparse
import time

from retinaxai import fit, io, pipeline
from retinaxai.net import default_spec
from retinaxai.synth import generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(pipeline.default_weights_path()))
    ap.add_argument("--epochs", type=int, default=fit.FitConfig.epochs)
    args = ap.parse_args()

    spec = default_spec()
    weights = pipeline.backbone_weights()
    scenes = [generate_scene(s) for s in pipeline.TRAIN_SEEDS]
    t0 = time.perf_counter()
    result = fit.fit_rpn_head(
        spec, weights, scenes, fit.FitConfig(epochs=args.epochs),
        log=lambda e, l: e % 20 == 0 and print(f"epoch {e:4d}  total {l.total:.6f}  reg {l.reg:.6f}  cls {l.cls:.6f}"),
    )
    print(f"loss {result.initial_loss:.6f} -> {result.final_loss:.6f} in {time.perf_counter() - t0:.1f}s")
    weights.update(result.head)
    io.save_weights(args.out, weights)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
