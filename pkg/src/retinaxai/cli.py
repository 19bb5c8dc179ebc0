"""Command-line entry point: ``retinaxai <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure. Diagnostics go to stderr. Every file output gets a ``<path>.json``
provenance record holding the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluate, fit, gradcam, io, pipeline, report
from .lesions import parse_lesion_class
from .net import DR_GRADES, default_spec
from .synth import DEFAULT_COUNTS, PlacementError, SyntheticScene, generate_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ANNOTATIONS = "annotations.txt"


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


# -- run configuration -------------------------------------------------------


def _path(v):
    return None if v is None else str(v)


def _opt_int(v):
    return None if v is None else int(v)


def _unit(v):
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"must lie in [0, 1], got {v}")
    return v


def _open_unit(v):
    v = float(v)
    if not 0.0 < v < 1.0:
        raise ValueError(f"must lie in (0, 1), got {v}")
    return v


def _nonneg_int(v):
    if int(v) != v or v < 0:
        raise ValueError(f"must be a non-negative integer, got {v}")
    return int(v)


def _pos_int(v):
    if int(v) != v or v < 1:
        raise ValueError(f"must be a positive integer, got {v}")
    return int(v)


def _nonneg_float(v):
    v = float(v)
    if not v >= 0.0:
        raise ValueError(f"must be non-negative, got {v}")
    return v


def _counts(v):
    out = {}
    for k, n in dict(v).items():
        cls = parse_lesion_class(k)
        out[cls.key] = _nonneg_int(n)
    return out


_COMMON = {"weights": _path}
SCHEMAS = {
    "explain": {**_COMMON, "image": _path, "class_index": _opt_int, "lam": _unit, "out": _path, "cam_out": _path},
    "detect": {**_COMMON, "image": _path, "support": _path, "threshold": _unit, "out": _path},
    "report": {**_COMMON, "image": _path, "support": _path, "threshold": _unit, "out": _path},
    "synth": {"seed": _nonneg_int, "n": _pos_int, "counts": _counts, "out_dir": _path},
    "eval": {**_COMMON, "scenes": _path, "support": _path, "threshold": _unit, "iou": _open_unit, "out": _path},
    "fit-head": {**_COMMON, "scenes": _path, "epochs": _nonneg_int, "lr": _nonneg_float, "out": _path, "log": _path},
}
REQUIRED = {
    "explain": ("image", "out"),
    "detect": ("image", "out"),
    "report": ("image",),
    "synth": ("out_dir",),
    "eval": ("scenes",),
    "fit-head": ("scenes", "out"),
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)

    @classmethod
    def build(cls, command: str, params: dict) -> "RunConfig":
        """Validate and normalise ``params``; unknown keys are rejected."""
        if command not in SCHEMAS:
            raise UsageError(f"unknown command {command!r}")
        schema = SCHEMAS[command]
        unknown = sorted(set(params) - set(schema))
        if unknown:
            raise UsageError(f"{command}: unknown config keys: {', '.join(unknown)}")
        resolved = {}
        for key, check in schema.items():
            value = params.get(key)
            try:
                resolved[key] = check(value) if value is not None else None
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{command}: bad value for {key}: {exc}") from None
        missing = [k for k in REQUIRED[command] if resolved[k] is None]
        if missing:
            raise UsageError(f"{command}: missing required settings: {', '.join(missing)}")
        return cls(command, resolved)

    def __getitem__(self, key):
        return self.params[key]


DEFAULTS = {
    "explain": {"lam": gradcam.DEFAULT_LAMBDA},
    "detect": {"threshold": pipeline.SCORE_THRESHOLD},
    "report": {"threshold": pipeline.SCORE_THRESHOLD},
    "synth": {"seed": 0, "n": 1, "counts": {c.key: n for c, n in DEFAULT_COUNTS.items()}},
    "eval": {"threshold": pipeline.SCORE_THRESHOLD, "iou": evaluate.EVAL_IOU},
    "fit-head": {"epochs": fit.FitConfig.epochs, "lr": fit.FitConfig.learning_rate},
}


# -- helpers -----------------------------------------------------------------


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(out_path, config: RunConfig, resolved: dict | None = None, inputs=()) -> None:
    record = {
        "tool": "retinaxai",
        "version": __version__,
        "command": config.command,
        "config": config.params,
        "resolved": resolved or {},
        "inputs": {str(p): _digest(p) for p in inputs if p is not None},
    }
    Path(str(out_path) + ".json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _weights_source(config: RunConfig) -> str:
    return config["weights"] if config["weights"] is not None else str(pipeline.default_weights_path())


def _weights(config: RunConfig) -> dict:
    spec = default_spec()
    if config["weights"] is None:
        weights = pipeline.load_default_weights()
    else:
        weights = io.load_weights(config["weights"])
    from .net import check_weights

    check_weights(spec, weights)
    for name in ("rpn.weight", "rpn.bias"):
        if config.command != "explain" and name not in weights:
            raise io.FormatError(f"weights file has no {name!r} entry")
    return weights


def _prototypes(config: RunConfig):
    if config["support"] is None:
        return pipeline.default_prototypes()
    from .fewshot import build_prototypes

    return build_prototypes(io.read_support_manifest(config["support"]))


def _load_scene_dir(path):
    path = Path(path)
    ann_path = path / ANNOTATIONS
    if not ann_path.is_file():
        raise io.FormatError(f"{path} has no {ANNOTATIONS}")
    annotations = io.parse_annotations(ann_path.read_text())
    scenes = []
    for scene_id, lesions in annotations.items():
        image = io.read_image(path / f"{scene_id}.ppm")
        scenes.append((scene_id, SyntheticScene(image=image, lesions=lesions)))
    return scenes, ann_path


def _detect(config: RunConfig):
    image = io.read_image(config["image"])
    weights = _weights(config)
    dets = pipeline.detect(default_spec(), weights, _prototypes(config), image, config["threshold"])
    return image, dets


# -- commands ----------------------------------------------------------------


def cmd_explain(config: RunConfig, out) -> None:
    spec = default_spec()
    image = io.read_image(config["image"])
    weights = _weights(config)
    class_index = config["class_index"]
    if class_index is None:
        from .net import forward, preprocess

        class_index = int(np.argmax(forward(spec, weights, preprocess(image)).logits))
    if not 0 <= class_index < spec.num_classes:
        raise UsageError(f"class index must be in [0, {spec.num_classes}), got {class_index}")
    cam, heat, blended, trace = gradcam.explain(spec, weights, image, class_index, config["lam"])
    if not np.isfinite(blended.rgb).all():
        raise NumericError("overlay contains non-finite values")
    io.write_image(config["out"], blended.rgb)
    resolved = {
        "class_index": class_index,
        "class_name": DR_GRADES[class_index],
        "lambda_used": blended.lambda_used,
        "logits": [float(v) for v in trace.logits],
    }
    write_provenance(config["out"], config, resolved, [config["image"], _weights_source(config)])
    if config["cam_out"] is not None:
        io.write_image(config["cam_out"], heat.rgb)
        write_provenance(config["cam_out"], config, resolved, [config["image"], _weights_source(config)])
    print(f"class {class_index} ({DR_GRADES[class_index]}), lambda {blended.lambda_used}", file=out)


def cmd_detect(config: RunConfig, out) -> None:
    _, dets = _detect(config)
    Path(config["out"]).write_text(io.format_detections(dets))
    write_provenance(config["out"], config, {"detections": len(dets)},
                     [config["image"], _weights_source(config), config["support"]])
    print(f"{len(dets)} detections", file=out)


def cmd_report(config: RunConfig, out) -> None:
    image, dets = _detect(config)
    rep = report.aggregate(dets, image.shape[2], image.shape[1])
    out.write(report.render_text(rep))
    if config["out"] is not None:
        Path(config["out"]).write_text(report.serialize(rep))
        write_provenance(config["out"], config, {"detections": len(dets)},
                         [config["image"], _weights_source(config), config["support"]])


def cmd_synth(config: RunConfig, out) -> None:
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {parse_lesion_class(k): n for k, n in config["counts"].items()}
    records = []
    for seed in range(config["seed"], config["seed"] + config["n"]):
        scene = generate_scene(seed, counts)
        scene_id = f"scene_{seed:06d}"
        io.write_image(out_dir / f"{scene_id}.ppm", scene.image)
        records.extend((scene_id, box, cls) for box, cls in scene.lesions)
    ann = out_dir / ANNOTATIONS
    ann.write_text(io.format_annotations(records))
    write_provenance(ann, config)
    print(f"wrote {config['n']} scene(s), {len(records)} lesions to {out_dir}", file=out)


def cmd_eval(config: RunConfig, out) -> None:
    spec = default_spec()
    weights = _weights(config)
    protos = _prototypes(config)
    scenes, ann_path = _load_scene_dir(config["scenes"])
    dets, gts = [], []
    for _, scene in scenes:
        found = pipeline.detect(spec, weights, protos, scene.image, config["threshold"])
        dets.append([d.as_tuple() for d in found])
        gts.append(scene.lesions)
    rows = evaluate.match_and_score(dets, gts, config["iou"])
    table = evaluate.sensitivity_table(rows)
    out.write(table)
    if config["out"] is not None:
        Path(config["out"]).write_text(table)
        resolved = {
            "scenes": [sid for sid, _ in scenes],
            "detections": sum(len(d) for d in dets),
            "rows": {r.lesion_class.key: [r.detected_true_positives, r.manual_count] for r in rows},
        }
        write_provenance(config["out"], config, resolved, [ann_path, _weights_source(config), config["support"]])


def cmd_fit_head(config: RunConfig, out) -> None:
    spec = default_spec()
    weights = pipeline.backbone_weights() if config["weights"] is None else io.load_weights(config["weights"])
    from .net import check_weights

    check_weights(spec, weights)
    scenes, ann_path = _load_scene_dir(config["scenes"])
    fc = fit.FitConfig(epochs=config["epochs"], learning_rate=config["lr"])
    try:
        result = fit.fit_rpn_head(spec, weights, [s for _, s in scenes], fc)
    except fit.DivergenceError as exc:
        raise NumericError(str(exc)) from None
    weights = {**weights, **result.head}
    io.save_weights(config["out"], weights)
    log_lines = ["epoch\ttotal\treg\tcls\tn_pos"] + [
        f"{e}\t{l.total:.9g}\t{l.reg:.9g}\t{l.cls:.9g}\t{l.n_pos}" for e, l in enumerate(result.losses)
    ]
    log_text = "\n".join(log_lines) + "\n"
    if config["log"] is not None:
        Path(config["log"]).write_text(log_text)
    else:
        sys.stderr.write(log_text)
    resolved = {"fit": {k: getattr(fc, k) for k in fc.__dataclass_fields__},
                "initial_loss": result.initial_loss, "final_loss": result.final_loss}
    write_provenance(config["out"], config, resolved, [ann_path, config["weights"]])
    print(f"loss {result.initial_loss:.6f} -> {result.final_loss:.6f}", file=out)


COMMANDS = {
    "explain": cmd_explain,
    "detect": cmd_detect,
    "report": cmd_report,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "fit-head": cmd_fit_head,
}


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_counts(text: str) -> dict:
    counts = {}
    for item in text.split(","):
        name, sep, n = item.partition("=")
        if not sep:
            raise UsageError(f"--counts items look like ma=5, got {item!r}")
        try:
            counts[name.strip()] = int(n)
        except ValueError:
            raise UsageError(f"--counts: bad count {n!r} for {name!r}") from None
    return counts


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="retinaxai", description="Grad-CAM explanations and quadrant lesion reports.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, image=True):
        if image:
            p.add_argument("image", help="input image (binary P6 or P5)")
        p.add_argument("--weights", help="RXPW1 weights file (default: shipped weights)")
        p.add_argument("--config", help="JSON file of settings; flags given explicitly override it")

    p = sub.add_parser("explain", help="Grad-CAM overlay for one image")
    common(p)
    p.add_argument("--class", dest="class_index", type=int, help="class index (default: top logit)")
    p.add_argument("--lambda", dest="lam", type=float, help=f"heatmap weight (default {gradcam.DEFAULT_LAMBDA})")
    p.add_argument("--out", help="overlay image path")
    p.add_argument("--cam-out", dest="cam_out", help="also write the colorized heatmap")

    for name, help_ in (("detect", "typed lesion detections"), ("report", "per-quadrant lesion report")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--support", help="support manifest (default: seeded synthetic support set)")
        p.add_argument("--threshold", type=float, help="minimum objectness")
        p.add_argument("--out", help="detections file" if name == "detect" else "structured report file")

    p = sub.add_parser("synth", help="write synthetic scenes and annotations")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of scenes (seeds seed .. seed+n-1)")
    p.add_argument("--counts", type=_parse_counts, help="e.g. ma=5,hem=3,he=4,cws=2")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--config")

    p = sub.add_parser("eval", help="per-class sensitivity table over a scene directory")
    common(p, image=False)
    p.add_argument("--scenes", help="directory written by synth")
    p.add_argument("--support")
    p.add_argument("--threshold", type=float)
    p.add_argument("--iou", type=float, help=f"match IoU (default {evaluate.EVAL_IOU})")
    p.add_argument("--out", help="also write the table here")

    p = sub.add_parser("fit-head", help="fit the proposal head on a scene directory")
    common(p, image=False)
    p.add_argument("--scenes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", help="output weights file")
    p.add_argument("--log", help="per-epoch loss log (default: stderr)")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    params = dict(DEFAULTS[args.command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(SCHEMAS[args.command]))
        if unknown:
            raise UsageError(f"{args.command}: unknown config keys: {', '.join(unknown)}")
        params.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        params[key] = value
    return RunConfig.build(args.command, params)


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        COMMANDS[config.command](config, stdout)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, fit.DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
