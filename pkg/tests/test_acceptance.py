"""Acceptance criteria, one test each, every test printing a single PASS/FAIL line.

Also runnable directly: ``python tests/test_acceptance.py``.
"""

import io as stdio
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import code_value_image, fd_tap_gradient, head_score, rel_err, window_margins  # noqa: E402

from retinaxai import cli, evaluate, fit, gradcam, net, pipeline, report, synth  # noqa: E402
from retinaxai import detector as D  # noqa: E402
from retinaxai.detector import BBox, RpnOutput  # noqa: E402
from retinaxai.evaluate import SensitivityRow  # noqa: E402
from retinaxai.lesions import LesionClass  # noqa: E402

MA, HEM, HE, CWS = LesionClass


def _line(n, title, ok, detail):
    return f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"


# -- 1 -------------------------------------------------------------------------------

TABLE_ONE = """\
---------------------------------------------------------
DR lesions     Count in manual results  Sensitivity
---------------------------------------------------------
Microaneurysm                      797  96.4% (768/797)
Hemorrhage                        1623  99.6% (1617/1623)
Hard exudates                     2319  99.5% (2308/2319)
Soft exudates                       86  94.2% (81/86)
---------------------------------------------------------
"""


def criterion_1():
    t0 = time.perf_counter()
    rows = [SensitivityRow(MA, 797, 768), SensitivityRow(HEM, 1623, 1617),
            SensitivityRow(HE, 2319, 2308), SensitivityRow(CWS, 86, 81)]
    pct = [evaluate.format_sensitivity(r).split("%")[0] for r in rows]
    table = evaluate.sensitivity_table(rows)
    ms = 1000 * (time.perf_counter() - t0)
    ok = pct == ["96.4", "99.6", "99.5", "94.2"] and table == TABLE_ONE
    return ok, f"percentages {', '.join(pct)}; table byte-exact={table == TABLE_ONE}; {ms:.1f} ms"


# -- 2 -------------------------------------------------------------------------------

def criterion_2():
    t0 = time.perf_counter()
    spec = net.default_spec()
    weights = pipeline.load_default_weights()
    protos = pipeline.default_prototypes(shots=5)
    scenes = [synth.generate_scene(s) for s in pipeline.EVAL_SEEDS]
    dets = [[d.as_tuple() for d in pipeline.detect(spec, weights, protos, s.image)] for s in scenes]
    rows = evaluate.match_and_score(dets, [s.lesions for s in scenes], 0.3)
    secs = time.perf_counter() - t0
    ok = all(r.sensitivity >= 0.90 for r in rows) and secs < 120
    parts = [f"{r.lesion_class.key} {r.detected_true_positives}/{r.manual_count}" for r in rows]
    return ok, f"{len(scenes)} scenes, {'; '.join(parts)}; {secs:.1f} s"


# -- 3 -------------------------------------------------------------------------------

def criterion_3():
    t0 = time.perf_counter()
    eps = 1e-3
    spec = net.default_spec()
    w = {k: v.astype(np.float64) for k, v in net.init_weights(spec, 0).items()}
    trace = net.forward(spec, w, code_value_image(0))
    A = trace.tap_activation
    margin = float(window_margins(A).min())
    worst, route_gap = 0.0, 0.0
    pick = np.random.default_rng(9).choice(A.size, size=60, replace=False)
    for c in range(spec.num_classes):
        g = net.grad_score_wrt_tap(spec, w, trace, c)
        n = fd_tap_gradient(A, w["layers.7.weight"], w["layers.7.bias"], c, eps)
        worst = max(worst, float(rel_err(g, n).max()))
        # independent route: rerun the tail of the network on perturbed taps
        for flat in pick:
            idx = np.unravel_index(flat, A.shape)
            up, dn = A.copy(), A.copy()
            up[idx] += eps
            dn[idx] -= eps
            fd = (net.run_layers(spec, w, up, spec.tap_layer + 1)[c]
                  - net.run_layers(spec, w, dn, spec.tap_layer + 1)[c]) / (2 * eps)
            route_gap = max(route_gap, abs(fd - n[idx]) / max(1.0, abs(fd)))
    secs = time.perf_counter() - t0
    ok = margin > eps and worst < 1e-4 and route_gap < 1e-9 and secs < 30
    return ok, (f"5 classes, max rel err {worst:.2e}, switch margin {margin:.3g} > eps, "
                f"route agreement {route_gap:.1e}; {secs:.1f} s")


# -- 4 -------------------------------------------------------------------------------

def _ulps(a, b):
    a = a.astype(np.float32).view(np.int32).astype(np.int64)
    b = b.astype(np.float32).view(np.int32).astype(np.int64)
    return np.abs(a - b)


def criterion_4():
    spec = net.default_spec()
    weights = pipeline.load_default_weights()
    img = synth.generate_scene(5000).image
    _, heat, zero, _ = gradcam.explain(spec, weights, img, 2, 0.0)
    one = gradcam.overlay(heat, img, 1.0)
    half = gradcam.overlay(heat, img, 0.5)
    mean = ((img.astype(np.float64) + heat.rgb.astype(np.float64)) / 2).astype(np.float32)
    ulp = int(_ulps(half.rgb, mean).max())
    ok = zero.rgb.tobytes() == img.tobytes() and one.rgb.tobytes() == heat.rgb.tobytes() and ulp <= 1
    return ok, (f"lambda 0 identical={zero.rgb.tobytes() == img.tobytes()}, "
                f"lambda 1 identical={one.rgb.tobytes() == heat.rgb.tobytes()}, lambda 0.5 max {ulp} ULP")


# -- 5 -------------------------------------------------------------------------------

def criterion_5():
    r = np.random.default_rng(5)
    anchors = np.column_stack([r.uniform(-100, 100, (1000, 2)), r.uniform(1, 64, (1000, 2))])
    gts = np.column_stack([r.uniform(-100, 100, (1000, 2)), r.uniform(1, 64, (1000, 2))])
    back = D.decode_array(anchors, D.encode_array(anchors, gts))
    round_trip = float(np.abs(back - gts).max())
    fixtures = (D.iou(BBox(5, 5, 4, 4), BBox(5, 5, 4, 4)),
                D.iou(BBox(0, 0, 2, 2), BBox(10, 10, 2, 2)),
                D.iou(BBox.from_corners(0, 0, 2, 1), BBox.from_corners(1, 0, 3, 1)))
    fixtures_ok = fixtures == (1.0, 0.0, 1 / 3)
    violations = 0
    for _ in range(1000):
        n = int(r.integers(1, 25))
        boxes = np.column_stack([r.uniform(0, 50, (n, 2)), r.uniform(1, 20, (n, 2))])
        t = float(r.uniform(0.1, 0.9))
        kept = boxes[D.nms_array(boxes, r.uniform(0, 1, n), t)]
        m = D.iou_matrix(kept, kept)
        np.fill_diagonal(m, 0)
        violations += int((m > t).any())
    ok = round_trip < 1e-5 and fixtures_ok and violations == 0
    return ok, (f"decode(encode) max err {round_trip:.1e} over 1000 pairs; IoU fixtures {fixtures_ok}; "
                f"NMS antichain violations {violations}/1000")


# -- 6 -------------------------------------------------------------------------------

def criterion_6():
    def out(deltas):
        deltas = np.asarray(deltas, float)
        return RpnOutput(logits=np.zeros(len(deltas)), deltas=deltas)

    one = D.rpn_loss(out([[0.5, 0, 0, 0]]), [0], np.zeros((1, 4)), "literal").total
    two = D.rpn_loss(out([[0.5, 0, 0, 0], [2, 0, 0, 0]]), [0, 1], np.zeros((2, 4)), "literal").total
    h = 1e-6
    value_gap = max(abs(D.smooth_l1(x - h) - D.smooth_l1(x + h)) for x in (1.0, -1.0))
    slope_gap = max(abs(float(D.smooth_l1_grad(x - math.copysign(h, x))) - float(D.smooth_l1_grad(x + math.copysign(h, x))))
                    for x in (1.0, -1.0))
    ok = abs(one - 0.125) < 1e-7 and abs(two - 0.8125) < 1e-7 and value_gap < 3 * h and slope_gap < 1e-5
    return ok, f"single {one:.9f}, two {two:.9f}; at |x|=1 value jump {value_gap:.1e}, slope jump {slope_gap:.1e}"


# -- 7 -------------------------------------------------------------------------------

def criterion_7():
    r = np.random.default_rng(7)
    classes = list(LesionClass)
    conserved = 0
    for _ in range(500):
        W, H = (int(v) for v in r.integers(2, 600, 2))
        n = int(r.integers(0, 60))
        dets = [(BBox(r.uniform(0, W), r.uniform(0, H), 3, 3), classes[r.integers(4)], 0.5) for _ in range(n)]
        rep = report.aggregate(dets, W, H)
        conserved += rep.total == n == sum(rep.quadrant_total(q) for q in report.Quadrant)
    Q = report.Quadrant
    swap = {Q.I: Q.III, Q.II: Q.IV, Q.III: Q.I, Q.IV: Q.II}
    symmetric = 0
    for seed in range(10):
        scene = synth.generate_scene(7000 + seed)
        rot = synth.rotate_scene_180(scene)
        pixels_ok = np.array_equal(rot.image, scene.image[:, ::-1, ::-1])
        a = report.aggregate([(b, c, 1.0) for b, c in scene.lesions], 256, 256)
        b = report.aggregate([(b, c, 1.0) for b, c in rot.lesions], 256, 256)
        symmetric += pixels_ok and all(b.counts[swap[q]] == a.counts[q] for q in Q)
    ok = conserved == 500 and symmetric == 10
    return ok, f"conservation {conserved}/500 fuzz inputs; I<->III, II<->IV swap on {symmetric}/10 rotated scenes"


# -- 8 -------------------------------------------------------------------------------

def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        scenes = tmp / "scenes"
        assert cli.main(["synth", "--seed", "5000", "--n", "5", "--out-dir", str(scenes)], stdio.StringIO()) == 0
        img = str(scenes / "scene_005000.ppm")
        runs = []
        for k in range(2):
            d = tmp / f"run{k}"
            d.mkdir()
            captured = []
            for argv in (["explain", img, "--out", str(d / "overlay.ppm"), "--cam-out", str(d / "cam.ppm")],
                         ["report", img, "--out", str(d / "report.txt")],
                         ["eval", "--scenes", str(scenes), "--out", str(d / "table.txt")]):
                buf = stdio.StringIO()
                captured.append((cli.main(argv, buf), buf.getvalue()))
            files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
            # provenance records name the output path, which differs by run directory
            files = {k: v.replace(str(d).encode(), b"<out>") for k, v in files.items()}
            runs.append((captured, files))
    same = runs[0] == runs[1]
    codes = [c for c, _ in runs[0][0]]
    ok = same and codes == [0, 0, 0]
    return ok, f"explain/report/eval exit codes {codes}; {len(runs[0][1])} output files byte-identical={same}"


# -- 9 -------------------------------------------------------------------------------

def _miniature_fd():
    r = np.random.default_rng(3)
    K = 3
    ts = fit.TrainingSet(
        features=r.normal(size=(1, K)), rows=np.zeros(1, int), labels=np.array([0]),
        gt_deltas=r.uniform(-0.5, 0.5, (1, 4)),
        feature_mean=np.zeros(K), whitener=np.eye(K), reg_mean=np.zeros(K), reg_whitener=np.eye(K),
        num_anchors=1,
    )
    weight = r.uniform(-0.2, 0.2, (1, 5, K))
    bias = r.uniform(-0.2, 0.2, (1, 5))
    _, gw, gb = fit.loss_and_grad(ts, weight, bias)
    worst = 0.0
    for arr, g in ((weight, gw), (bias, gb)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = fit.loss_and_grad(ts, weight, bias)[0].total
            arr[idx] = old - 1e-6
            dn = fit.loss_and_grad(ts, weight, bias)[0].total
            arr[idx] = old
            num = (up - dn) / 2e-6
            worst = max(worst, abs(num - g[idx]) / max(abs(num), 1e-8))
    return worst


def criterion_9():
    t0 = time.perf_counter()
    spec = net.default_spec()
    weights = pipeline.backbone_weights()
    scenes = [synth.generate_scene(s) for s in pipeline.TRAIN_SEEDS]
    res = fit.fit_rpn_head(spec, weights, scenes, fit.FitConfig(epochs=200))
    ratio = res.final_loss / res.initial_loss
    fd = _miniature_fd()
    secs = time.perf_counter() - t0
    ok = ratio <= 0.5 and fd < 1e-4
    return ok, (f"{len(scenes)} scenes x 200 epochs: loss {res.initial_loss:.4f} -> {res.final_loss:.4f} "
                f"({100 * (1 - ratio):.1f}% decrease); miniature FD rel err {fd:.1e}; {secs:.1f} s")


CRITERIA = [
    (1, "published table arithmetic", criterion_1),
    (2, "held-out synthetic sensitivity >= 0.90", criterion_2),
    (3, "class-score gradient vs finite differences", criterion_3),
    (4, "overlay blend exactness", criterion_4),
    (5, "geometry oracles", criterion_5),
    (6, "loss exactness", criterion_6),
    (7, "quadrant conservation and rotation symmetry", criterion_7),
    (8, "CLI determinism", criterion_8),
    (9, "training sanity", criterion_9),
]


@pytest.mark.parametrize("n,title,check", CRITERIA, ids=[f"criterion_{n}" for n, _, _ in CRITERIA])
def test_criterion(n, title, check, capsys):
    ok, detail = check()
    with capsys.disabled():
        print("\n" + _line(n, title, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for n, title, check in CRITERIA:
        ok, detail = check()
        results.append(ok)
        print(_line(n, title, ok, detail), flush=True)
    sys.exit(0 if all(results) else 1)
