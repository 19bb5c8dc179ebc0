import io as stdio
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from retinaxai import cli, gradcam, io, pipeline
from retinaxai.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE

GOLDEN = Path(__file__).parent / "golden"


def run(*argv):
    buf = stdio.StringIO()
    code = cli.main([str(a) for a in argv], buf)
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    code, _ = run("synth", "--seed", 5000, "--n", 3, "--out-dir", d)
    assert code == EXIT_OK
    return d


@pytest.fixture(scope="module")
def empty_scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("empty")
    code, _ = run("synth", "--seed", 9, "--counts", "ma=0,hem=0,he=0,cws=0", "--out-dir", d)
    assert code == EXIT_OK
    return d / "scene_000009.ppm"


# -- synth ---------------------------------------------------------------------------

def test_synth_writes_scenes_and_annotations(scenes):
    names = sorted(p.name for p in scenes.iterdir())
    assert names == ["annotations.txt", "annotations.txt.json",
                     "scene_005000.ppm", "scene_005001.ppm", "scene_005002.ppm"]
    ann = io.parse_annotations((scenes / "annotations.txt").read_text())
    assert list(ann) == ["scene_005000", "scene_005001", "scene_005002"]
    assert all(len(v) == 14 for v in ann.values())


def test_synth_images_are_quantized_scenes(scenes):
    from retinaxai.synth import generate_scene

    img = io.read_image(scenes / "scene_005001.ppm")
    want = io.to_bytes(generate_scene(5001).image)
    np.testing.assert_array_equal(io.to_bytes(img), want)


def test_synth_placement_failure_is_data_error(tmp_path):
    code, _ = run("synth", "--counts", "cws=500", "--out-dir", tmp_path)
    assert code == EXIT_DATA


# -- explain ---------------------------------------------------------------------------

def test_explain_lambda_zero_reproduces_input(scenes, tmp_path):
    src = scenes / "scene_005000.ppm"
    code, text = run("explain", src, "--lambda", 0, "--out", tmp_path / "o.ppm")
    assert code == EXIT_OK and "lambda 0.0" in text
    assert (tmp_path / "o.ppm").read_bytes() == src.read_bytes()


def test_explain_lambda_one_is_heatmap(scenes, tmp_path):
    src = scenes / "scene_005000.ppm"
    code, _ = run("explain", src, "--class", 2, "--lambda", 1, "--out", tmp_path / "o.ppm",
                  "--cam-out", tmp_path / "cam.ppm")
    assert code == EXIT_OK
    assert (tmp_path / "o.ppm").read_bytes() == (tmp_path / "cam.ppm").read_bytes()


def test_explain_default_class_is_top_logit(scenes, tmp_path):
    code, _ = run("explain", scenes / "scene_005000.ppm", "--out", tmp_path / "o.ppm")
    assert code == EXIT_OK
    prov = json.loads((tmp_path / "o.ppm.json").read_text())
    logits = prov["resolved"]["logits"]
    assert prov["resolved"]["class_index"] == int(np.argmax(logits))
    assert prov["config"]["lam"] == gradcam.DEFAULT_LAMBDA
    assert prov["config"]["class_index"] is None


def test_explain_rejects_bad_class(scenes, tmp_path):
    code, _ = run("explain", scenes / "scene_005000.ppm", "--class", 5, "--out", tmp_path / "o.ppm")
    assert code == EXIT_USAGE
    assert not (tmp_path / "o.ppm").exists()


# -- detect / report -------------------------------------------------------------------

def test_detect_file_format(scenes, tmp_path):
    out = tmp_path / "d.txt"
    code, text = run("detect", scenes / "scene_005000.ppm", "--out", out)
    assert code == EXIT_OK
    dets = io.parse_detections(out.read_text())
    assert f"{len(dets)} detections" in text and len(dets) > 0
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True) and min(scores) >= pipeline.SCORE_THRESHOLD


def test_report_on_empty_scene(empty_scene, tmp_path):
    code, text = run("report", empty_scene, "--out", tmp_path / "r.txt")
    assert code == EXIT_OK
    assert text.splitlines()[:4] == [f"Quadrant {q}: no lesions detected." for q in ("I", "II", "III", "IV")]
    assert (tmp_path / "r.txt").read_text().splitlines()[-1] == "total=0"


def test_report_structured_matches_text(scenes, tmp_path):
    from retinaxai import report

    code, text = run("report", scenes / "scene_005002.ppm", "--out", tmp_path / "r.txt")
    assert code == EXIT_OK
    parsed = report.parse_serialized((tmp_path / "r.txt").read_text())
    assert report.render_text(parsed) == text


def test_report_with_support_manifest(scenes, tmp_path):
    ann = io.parse_annotations((scenes / "annotations.txt").read_text())
    lines = [f"{sid}.ppm {cls.key} {b.cx} {b.cy} {b.w} {b.h}" for sid in ("scene_005000", "scene_005001")
             for b, cls in ann[sid]]
    manifest = scenes / "support.txt"
    manifest.write_text("\n".join(lines) + "\n")
    try:
        code, text = run("report", scenes / "scene_005002.ppm", "--support", manifest)
    finally:
        manifest.unlink()
    assert code == EXIT_OK and text.startswith("Quadrant I:")


# -- eval / fit-head ---------------------------------------------------------------------

def test_eval_golden_table(tmp_path):
    d = tmp_path / "suite"
    assert run("synth", "--seed", 5000, "--n", 20, "--out-dir", d)[0] == EXIT_OK
    code, text = run("eval", "--scenes", d, "--out", tmp_path / "table.txt")
    assert code == EXIT_OK
    assert text == (GOLDEN / "eval_table.txt").read_text()
    assert (tmp_path / "table.txt").read_text() == text
    prov = json.loads((tmp_path / "table.txt.json").read_text())
    assert prov["config"]["iou"] == 0.3 and len(prov["resolved"]["scenes"]) == 20


def test_eval_iou_is_configurable(scenes):
    strict = run("eval", "--scenes", scenes, "--iou", 0.9)[1]
    loose = run("eval", "--scenes", scenes, "--iou", 0.1)[1]
    assert strict != loose


def test_fit_head_writes_weights_and_log(scenes, tmp_path):
    out = tmp_path / "w.rxpw"
    code, text = run("fit-head", "--scenes", scenes, "--epochs", 5, "--out", out, "--log", tmp_path / "log.tsv")
    assert code == EXIT_OK and "->" in text
    w = io.load_weights(out)
    assert set(w) == set(pipeline.backbone_weights())
    log = (tmp_path / "log.tsv").read_text().splitlines()
    assert log[0].split("\t") == ["epoch", "total", "reg", "cls", "n_pos"] and len(log) == 7
    prov = json.loads((tmp_path / "w.rxpw.json").read_text())
    assert prov["resolved"]["fit"]["epochs"] == 5


def test_fit_head_divergence_exit_code(scenes, tmp_path):
    code, _ = run("fit-head", "--scenes", scenes, "--epochs", 3, "--lr", 1e300, "--out", tmp_path / "w.rxpw",
                  "--log", tmp_path / "log.tsv")
    assert code == EXIT_NUMERIC


# -- configuration and errors --------------------------------------------------------------

def test_config_file_with_flag_override(scenes, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lam": 0.0, "class_index": 1}))
    code, _ = run("explain", scenes / "scene_005000.ppm", "--config", cfg, "--lambda", 0.7, "--out", tmp_path / "o.ppm")
    assert code == EXIT_OK
    prov = json.loads((tmp_path / "o.ppm.json").read_text())
    assert prov["config"]["lam"] == 0.7 and prov["config"]["class_index"] == 1


def test_unknown_config_key(scenes, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lamda": 0.3}))
    code, _ = run("explain", scenes / "scene_005000.ppm", "--config", cfg, "--out", tmp_path / "o.ppm")
    assert code == EXIT_USAGE


def test_run_config_validation():
    with pytest.raises(cli.UsageError, match="unknown config keys: bogus"):
        cli.RunConfig.build("eval", {"scenes": "x", "bogus": 1})
    with pytest.raises(cli.UsageError, match="missing required settings: out"):
        cli.RunConfig.build("explain", {"image": "x"})
    with pytest.raises(cli.UsageError, match="iou"):
        cli.RunConfig.build("eval", {"scenes": "x", "iou": 1.5})
    cfg = cli.RunConfig.build("synth", {"out_dir": "d", "counts": {"soft exudate": 2}, "seed": 0, "n": 1})
    assert cfg["counts"] == {"cotton_wool_spot": 2}


@pytest.mark.parametrize(
    "argv,code",
    [
        ([], EXIT_USAGE),
        (["frobnicate"], EXIT_USAGE),
        (["explain", "x.ppm"], EXIT_USAGE),
        (["explain", "missing.ppm", "--out", "o.ppm"], EXIT_DATA),
        (["explain", "IMG", "--out", "o.ppm", "--lambda", "2"], EXIT_USAGE),
        (["synth", "--counts", "drusen=3", "--out-dir", "d"], EXIT_USAGE),
        (["synth", "--counts", "ma", "--out-dir", "d"], EXIT_USAGE),
        (["eval", "--scenes", "nowhere"], EXIT_DATA),
        (["detect", "IMG", "--out", "o.txt", "--weights", "BAD"], EXIT_DATA),
    ],
)
def test_exit_codes(argv, code, scenes, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "BAD").write_bytes(b"NOTRXPW")
    argv = [str(scenes / "scene_005000.ppm") if a == "IMG" else a for a in argv]
    assert run(*argv)[0] == code
    assert capsys.readouterr().err.strip() != ""


def test_corrupt_image_is_data_error(tmp_path, capsys):
    (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
    assert run("explain", tmp_path / "bad.ppm", "--out", tmp_path / "o.ppm")[0] == EXIT_DATA
    assert "byte offset" in capsys.readouterr().err


def test_outputs_stay_inside_named_paths(scenes, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "sub"
    out.mkdir()
    run("explain", scenes / "scene_005000.ppm", "--out", out / "o.ppm")
    run("report", scenes / "scene_005000.ppm", "--out", out / "r.txt")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["sub"]
    assert sorted(p.name for p in out.iterdir()) == ["o.ppm", "o.ppm.json", "r.txt", "r.txt.json"]


# -- determinism ----------------------------------------------------------------------------

def test_explain_report_eval_are_deterministic(scenes, tmp_path):
    img = scenes / "scene_005001.ppm"
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        e = run("explain", img, "--out", d / "o.ppm", "--cam-out", d / "c.ppm")
        r = run("report", img, "--out", d / "r.txt")
        v = run("eval", "--scenes", scenes, "--out", d / "t.txt")
        outs.append((e, r, v, {p.name: p.read_bytes() for p in d.iterdir() if p.suffix != ".json"}))
    assert outs[0] == outs[1]
    for name in ("o.ppm.json", "r.txt.json", "t.txt.json"):
        a = json.loads((tmp_path / "run0" / name).read_text())
        b = json.loads((tmp_path / "run1" / name).read_text())
        assert a["resolved"] == b["resolved"] and a["inputs"] == b["inputs"]


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "retinaxai.cli", "synth", "--seed", "3", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "scene_000003.ppm").exists()
    res = subprocess.run([sys.executable, "-m", "retinaxai.cli", "explain"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE and res.stdout == "" and "usage error" in res.stderr
