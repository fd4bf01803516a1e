"""Release acceptance suite: one test per criterion, each checked against an
independently coded reference (central finite differences, per-pixel loops,
quadratic NMS, textbook AP, hand-computed ratio tables) rather than against
library internals. Criterion 6 trains and evaluates the documented benchmark
end to end and dominates the suite's runtime.
"""

import csv
import filecmp
import os
import time

import numpy as np
import pytest
import scipy.ndimage as ndi

from autozoom.cascade import merge_scores, run_stage
from autozoom.cli import main
from autozoom.grid import AbsBox, Grid2D, LabelMap, ScoreMap, argmax_labels, load_image, load_labels
from autozoom.metrics import ap_r_part, miou, size_binned_miou
from autozoom.scorer import (
    ScorerParams,
    azn_loss,
    extract_features,
    forward,
    load_params,
    part_loss,
)
from autozoom.sen import (
    OBJECT_LEVEL,
    PART_LEVEL,
    RoiProposal,
    SenLossConfig,
    SenTargets,
    build_sen_targets,
    decode_proposals,
    nms,
    sen_loss,
)
from autozoom.synth import NUM_CLASSES, SceneConfig, generate_dataset
from autozoom.zoom import ZoomConfig, unzoom_scores, zoom_ratio, zoom_region


def report(num, detail):
    print(f"criterion {num}: PASS ({detail})")


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients vs central finite differences


def _random_instance(rng, with_prior):
    h = w = 8
    img = Grid2D(rng.random((h, w, 3)))
    prior = None
    if with_prior:
        pv = rng.random((h, w, NUM_CLASSES))
        pv /= pv.sum(axis=2, keepdims=True)
        prior = ScoreMap(pv, normalized=True)
    fs = extract_features(img, prior)
    gt = LabelMap(rng.integers(0, NUM_CLASSES, (h, w)).astype(np.int32), NUM_CLASSES)
    seeds = (rng.random((h, w, 1)) < 0.2).astype(float)
    reg = rng.uniform(-0.5, 0.5, size=(h, w, 4)) * seeds
    tgt = SenTargets(reg=Grid2D(reg), seeds=Grid2D(seeds))
    size = ScorerParams.zeros(fs.num_features, NUM_CLASSES).as_vector().size
    p = ScorerParams.from_vector(
        rng.normal(scale=0.2, size=size), fs.num_features, NUM_CLASSES, fs.num_prior
    )
    return p, fs, gt, tgt


def _rel_err(a, fd):
    return abs(a - fd) / max(1.0, abs(a), abs(fd))


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(1001)
    t0 = time.monotonic()
    step = 1e-4
    worst = 0.0
    n_instances = 0

    # joint loss: every parameter coordinate, lambdas cycled per instance
    for rep in range(15):
        lam = (0.1, 1.0, 10.0)[rep % 3]
        cfg = SenLossConfig(lambda_=lam)
        p, fs, gt, tgt = _random_instance(rng, with_prior=(rep % 4 == 0))
        _, grads = azn_loss(p, fs, gt, tgt, cfg)
        avec, vec = grads.as_vector(), p.as_vector()
        for k in range(vec.size):
            up, dn = vec.copy(), vec.copy()
            up[k] += step
            dn[k] -= step
            lu, _ = azn_loss(
                ScorerParams.from_vector(up, p.num_features, p.num_classes, p.num_prior),
                fs, gt, tgt, cfg,
            )
            ld, _ = azn_loss(
                ScorerParams.from_vector(dn, p.num_features, p.num_classes, p.num_prior),
                fs, gt, tgt, cfg,
            )
            worst = max(worst, _rel_err(avec[k], (lu - ld) / (2 * step)))
        n_instances += 1

    # component losses: gradients w.r.t. their direct grid inputs
    for rep in range(6):
        lam = (0.1, 1.0, 10.0)[rep % 3]
        cfg = SenLossConfig(lambda_=lam)
        p, fs, gt, tgt = _random_instance(rng, with_prior=False)
        logits, conf, reg = forward(p, fs)

        _, g_logits = part_loss(logits, gt)
        for _ in range(40):
            y, x, c = rng.integers(0, 8), rng.integers(0, 8), rng.integers(0, NUM_CLASSES)
            up, dn = logits.values.copy(), logits.values.copy()
            up[y, x, c] += step
            dn[y, x, c] -= step
            lu, _ = part_loss(Grid2D(up), gt)
            ld, _ = part_loss(Grid2D(dn), gt)
            worst = max(worst, _rel_err(g_logits.values[y, x, c], (lu - ld) / (2 * step)))

        _, g_conf, g_reg = sen_loss(conf, reg, tgt, cfg)
        for _ in range(40):
            y, x = rng.integers(0, 8), rng.integers(0, 8)
            up, dn = conf.values.copy(), conf.values.copy()
            up[y, x, 0] += step
            dn[y, x, 0] -= step
            lu, _, _ = sen_loss(Grid2D(up), reg, tgt, cfg)
            ld, _, _ = sen_loss(Grid2D(dn), reg, tgt, cfg)
            worst = max(worst, _rel_err(g_conf.values[y, x, 0], (lu - ld) / (2 * step)))
            c = rng.integers(0, 4)
            up, dn = reg.values.copy(), reg.values.copy()
            up[y, x, c] += step
            dn[y, x, c] -= step
            lu, _, _ = sen_loss(conf, Grid2D(up), tgt, cfg)
            ld, _, _ = sen_loss(conf, Grid2D(dn), tgt, cfg)
            worst = max(worst, _rel_err(g_reg.values[y, x, c], (lu - ld) / (2 * step)))
        n_instances += 1

    elapsed = time.monotonic() - t0
    assert n_instances >= 20
    assert worst < 1e-4, f"worst gradient relative error {worst:.3g}"
    assert elapsed < 10.0, f"gradient suite took {elapsed:.1f}s"
    report(1, f"{n_instances} instances, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: score merging vs brute-force weighted sum


def _random_region(rng, cw, ch, zoom_cfg):
    w = float(rng.uniform(2.0, cw - 1))
    h = float(rng.uniform(2.0, ch - 1))
    x = float(rng.uniform(-1.0, cw - w))
    y = float(rng.uniform(-1.0, ch - h))
    img = Grid2D(rng.random((ch, cw, 3)))
    pv = rng.random((ch, cw, NUM_CLASSES))
    pv /= pv.sum(axis=2, keepdims=True)
    prop = RoiProposal(box=AbsBox(x, y, w, h), confidence=float(rng.uniform(0.05, 1.0)))
    ratio = float(rng.uniform(zoom_cfg.ratio_min, zoom_cfg.ratio_max))
    region = zoom_region(img, ScoreMap(pv, normalized=True), prop, ratio, zoom_cfg)
    sv = rng.random((region.zoomed_img.height, region.zoomed_img.width, NUM_CLASSES))
    sv /= sv.sum(axis=2, keepdims=True)
    return region, ScoreMap(sv, normalized=True)


def test_criterion_2_merge_equals_brute_force():
    rng = np.random.default_rng(2002)
    zoom_cfg = ZoomConfig()
    cw = ch = 9
    checked = 0
    for _ in range(110):
        bv = rng.random((ch, cw, NUM_CLASSES))
        bv /= bv.sum(axis=2, keepdims=True)
        base = ScoreMap(bv, normalized=True)
        contribs = [
            _random_region(rng, cw, ch, zoom_cfg)
            for _ in range(int(rng.integers(1, 5)))
        ]
        merged = merge_scores(base, contribs)

        canvases = []
        for region, scores in contribs:
            full, mask = unzoom_scores(region, scores, cw, ch)
            canvases.append((region.confidence, full.values, mask.values[:, :, 0]))
        for y in range(ch):
            for x in range(cw):
                num = np.zeros(NUM_CLASSES)
                den = 0.0
                for conf, full, mask in canvases:
                    if mask[y, x] > 0.5:
                        num += conf * full[y, x]
                        den += conf
                if den > 0.0:
                    want = num / den
                    wsum = sum(c / den for c, _, m in canvases if m[y, x] > 0.5)
                else:
                    want = bv[y, x]
                    wsum = 1.0  # uncovered: all weight on the previous level
                assert np.abs(merged.values[y, x] - want).max() < 1e-10
                assert abs(wsum - 1.0) < 1e-6
        assert np.abs(merged.values.sum(axis=2) - 1.0).max() < 1e-5
        checked += 1
    assert checked >= 100
    report(2, f"{checked} overlap configurations within 1e-10")


# ---------------------------------------------------------------------------
# criterion 3: zoom-rule table


def _leg_labels(w, h, frac):
    lab = np.zeros((h, w), dtype=np.int32)
    n = int(round(frac * w * h))
    lab.flat[:n] = 5
    return LabelMap(lab, NUM_CLASSES)


def test_criterion_3_zoom_rule_table():
    cfg = ZoomConfig()
    legs = lambda w, h: _leg_labels(w, h, 0.01)
    no_legs = lambda w, h: _leg_labels(w, h, 0.0)
    table = [
        # (level, box w, box h, in-box labels, expected ratio)
        (OBJECT_LEVEL, 510.0, 100.0, legs, 0.5),    # 255 / 510
        (OBJECT_LEVEL, 255.0, 40.0, legs, 1.0),     # already canonical
        (OBJECT_LEVEL, 102.0, 60.0, legs, 2.5),     # 255/102 lands on the clamp edge
        (OBJECT_LEVEL, 100.0, 30.0, legs, 2.5),     # 2.55 clamped down
        (OBJECT_LEVEL, 637.5, 200.0, legs, 0.4),    # 255/637.5 lands on the clamp edge
        (OBJECT_LEVEL, 800.0, 100.0, legs, 0.4),    # 0.31875 clamped up
        (OBJECT_LEVEL, 140.0, 90.0, no_legs, 1.0),  # truncated target 140
        (OBJECT_LEVEL, 280.0, 120.0, no_legs, 0.5), # 140 / 280
        (OBJECT_LEVEL, 56.0, 20.0, no_legs, 2.5),   # 140/56 lands on the clamp edge
        (OBJECT_LEVEL, 400.0, 60.0, no_legs, 0.4),  # 0.35 clamped up
        (PART_LEVEL, 510.0, 510.0, None, 0.5),      # part level always targets 255
        (PART_LEVEL, 60.0, 24.0, None, 2.5),        # 4.25 clamped down
    ]
    for level, w, h, factory, want in table:
        box = AbsBox(0.0, 0.0, w, h)
        parts = None
        if factory is not None:
            x0, y0, x1, y1 = box.pixel_rect()
            parts = factory(x1 - x0, y1 - y0)
        got = zoom_ratio(box, parts, level, cfg)
        assert got == want, f"{level} {w}x{h}: ratio {got} != {want}"
    report(3, f"{len(table)}-case table exact, both clamp edges included")


# ---------------------------------------------------------------------------
# criterion 4: NMS and metric oracles


def _naive_nms(props, thr):
    def iou(a, b):
        ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
        iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
        inter = max(ix, 0.0) * max(iy, 0.0)
        return inter / (a.area + b.area - inter)

    order = sorted(
        range(len(props)), key=lambda i: (-props[i].confidence, -props[i].box.area, i)
    )
    kept = []
    for i in order:
        if all(iou(props[i].box, props[j].box) <= thr for j in kept):
            kept.append(i)
    return [props[i] for i in kept]


def _naive_miou(pred, gt, c, select=None):
    ious = []
    for k in range(c):
        inter = union = 0
        for y in range(pred.labels.shape[0]):
            for x in range(pred.labels.shape[1]):
                if select is not None and not select[y, x]:
                    continue
                a, b = pred.labels[y, x] == k, gt.labels[y, x] == k
                inter += a and b
                union += a or b
        ious.append(inter / union if union else np.nan)
    ious = np.array(ious, dtype=float)
    mean = float(np.nanmean(ious)) if not np.isnan(ious).all() else float("nan")
    return ious, mean


def _square_instance(rng, h, w):
    side = int(rng.integers(3, 9))
    y0 = int(rng.integers(0, h - side))
    x0 = int(rng.integers(0, w - side))
    cls = int(rng.integers(1, NUM_CLASSES))
    lab = np.zeros((h, w), dtype=np.int32)
    lab[y0 : y0 + side, x0 : x0 + side] = cls
    return LabelMap(lab, NUM_CLASSES)


def _oracle_ap(preds, gts, thr=0.5):
    """Naive IOU counting, greedy matching, interpolated all-points AP."""

    def iou(a, b):
        inter = union = 0
        for y in range(a.labels.shape[0]):
            for x in range(a.labels.shape[1]):
                pa, pb = a.labels[y, x], b.labels[y, x]
                if pa > 0 and pb > 0 and pa == pb:
                    inter += 1
                if pa > 0 or pb > 0:
                    union += 1
        return inter / union if union else 0.0

    if not gts:
        return 1.0 if not preds else 0.0
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    used = set()
    flags = []
    for i in order:
        cands = [(iou(preds[i][0], g), j) for j, g in enumerate(gts) if j not in used]
        best, bj = max(cands, default=(0.0, -1))
        if best >= thr and bj >= 0:
            used.add(bj)
            flags.append(True)
        else:
            flags.append(False)
    points = []
    tp = fp = 0
    for f in flags:
        tp, fp = tp + f, fp + (not f)
        points.append((tp / len(gts), tp / (tp + fp)))
    ap = 0.0
    prev_r = 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(4004)

    # NMS against the quadratic reference on 1000 random sets
    for _ in range(1000):
        n = int(rng.integers(0, 51))
        props = []
        for _ in range(n):
            w, h = rng.uniform(1, 20, size=2)
            x, y = rng.uniform(0, 30, size=2)
            conf = float(np.round(rng.uniform(0.05, 1.0), 1))  # coarse: forces ties
            props.append(RoiProposal(box=AbsBox(x, y, w, h), confidence=conf))
        thr = float(rng.uniform(0.2, 0.7))
        got = nms(props, thr)
        want = _naive_nms(props, thr)
        assert len(got) == len(want)
        for g, w_ in zip(got, want):
            assert g is w_

    # pixel mIOU against scalar-loop tallies on 100 random pairs
    for _ in range(100):
        c = int(rng.integers(2, NUM_CLASSES + 1))
        pred = LabelMap(rng.integers(0, c, (8, 8)).astype(np.int32), c)
        gt = LabelMap(rng.integers(0, c, (8, 8)).astype(np.int32), c)
        got_ious, got_mean = miou(pred, gt, c)
        want_ious, want_mean = _naive_miou(pred, gt, c)
        assert np.allclose(got_ious, want_ious, equal_nan=True, atol=1e-12)
        assert got_mean == pytest.approx(want_mean, abs=1e-12, nan_ok=True)

    # size-binned mIOU and instance AP on 20 random instance configurations
    edges = [(0.0, 80.0), (80.0, 140.0), (140.0, 220.0), (220.0, 520.0), (520.0, None)]
    names = ["XS", "S", "M", "L", "over"]
    for _ in range(20):
        h = w = 24
        pred = LabelMap(rng.integers(0, NUM_CLASSES, (h, w)).astype(np.int32), NUM_CLASSES)
        gt = LabelMap(rng.integers(0, NUM_CLASSES, (h, w)).astype(np.int32), NUM_CLASSES)
        instances = []
        for _ in range(int(rng.integers(1, 5))):
            bw = float(rng.uniform(3.0, 700.0))
            bh = float(rng.uniform(3.0, 700.0))
            bx = float(rng.uniform(-2.0, w - 2.0))
            by = float(rng.uniform(-2.0, h - 2.0))
            instances.append((None, AbsBox(bx, by, bw, bh)))
        got = size_binned_miou(pred, gt, instances)

        for (lo, hi), name in zip(edges, names):
            members = [
                b for _, b in instances
                if np.sqrt(b.area) >= lo and (hi is None or np.sqrt(b.area) < hi)
            ]
            sel = np.zeros((h, w), dtype=bool)
            for b in members:
                x0, y0, x1, y1 = b.pixel_rect()
                sel[max(y0, 0) : min(y1, h), max(x0, 0) : min(x1, w)] = True
            g_miou, g_count = got[name]
            assert g_count == len(members)
            if not members or not sel.any():
                assert np.isnan(g_miou)
            else:
                _, want_mean = _naive_miou(pred, gt, NUM_CLASSES, select=sel)
                assert g_miou == pytest.approx(want_mean, abs=1e-12, nan_ok=True)

        gts = [_square_instance(rng, h, w) for _ in range(int(rng.integers(0, 3)))]
        preds = [
            (_square_instance(rng, h, w), float(rng.random()))
            for _ in range(int(rng.integers(0, 4)))
        ]
        assert ap_r_part(preds, gts) == pytest.approx(_oracle_ap(preds, gts), abs=1e-12)

    report(4, "1000 NMS sets, 100 mIOU pairs, 20 instance configurations")


# ---------------------------------------------------------------------------
# criterion 5: dense box encoding round trip


def _decode_perfect(tgt, stride=1):
    seeds = tgt.seeds.values[:, :, 0] > 0.5
    logit = np.where(seeds, 8.0, -8.0)[:, :, None]
    return decode_proposals(Grid2D(logit), tgt.reg, threshold=0.5, stride=stride)


def _box_close(a: AbsBox, b: AbsBox, tol=1.0):
    return (
        abs(a.x_min - b.x_min) <= tol
        and abs(a.y_min - b.y_min) <= tol
        and abs(a.x_max - b.x_max) <= tol
        and abs(a.y_max - b.y_max) <= tol
    )


def test_criterion_5_sen_round_trip():
    cfg = SceneConfig(image_size=128, min_scale=28, max_scale=110, max_instances=3)
    scenes = generate_dataset(5005, cfg, 50)
    sen_cfg = SenLossConfig()
    total_seeds = 0
    for s in scenes:
        tgt = build_sen_targets(s.instance_masks, OBJECT_LEVEL, s.gt_parts, sen_cfg)
        props = _decode_perfect(tgt)
        n_seeds = int((tgt.seeds.values > 0.5).sum())
        assert len(props) == n_seeds
        assert n_seeds > 0
        for p in props:
            assert any(_box_close(p.box, b) for b in s.instance_boxes), (
                f"decoded {p.box} matches no instance"
            )
        for b in s.instance_boxes:  # every instance is recoverable, not just hit
            assert any(_box_close(p.box, b) for p in props)
        total_seeds += n_seeds

    # part-level variant: expected boxes re-derived from connected components
    for s in scenes[:10]:
        tgt = build_sen_targets([], PART_LEVEL, s.gt_parts, sen_cfg)
        props = _decode_perfect(tgt)
        assert len(props) == int((tgt.seeds.values > 0.5).sum())
        comp_boxes = []
        for cls in range(1, NUM_CLASSES):
            lbl, n = ndi.label(s.gt_parts.labels == cls)
            for sl in ndi.find_objects(lbl):
                comp_boxes.append(
                    AbsBox(sl[1].start, sl[0].start,
                           sl[1].stop - sl[1].start, sl[0].stop - sl[0].start)
                )
        for p in props:
            assert any(_box_close(p.box, b) for b in comp_boxes)

    report(5, f"50 scenes, {total_seeds} seed pixels, every box within 1 px")


# ---------------------------------------------------------------------------
# criteria 6-8: the trained pipeline

BENCH_SCENE = [
    "--set", "scene.image_size=320",
    "--set", "scene.min_scale=44",
    "--set", "scene.max_scale=300",
    "--set", "scene.max_instances=2",
]

SMALL_SCENE = [
    "--set", "scene.image_size=96",
    "--set", "scene.min_scale=24",
    "--set", "scene.max_scale=70",
    "--set", "scene.max_instances=2",
]
SMALL_TRAIN = [
    "--set", "train.crop_size=48",
    "--set", "train.batch=4",
    "--set", "train.iterations=40",
]
SMALL_CASCADE = [
    "--set", "cascade.max_object_rois=6",
    "--set", "cascade.max_part_rois=10",
]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """A quickly trained miniature pipeline for the determinism/ablation
    criteria (the trend criterion trains its own full-size one)."""
    root = tmp_path_factory.mktemp("accept")
    data = str(root / "data")
    assert main(["synth", "--n", "6", "--seed", "5", "--out", data] + SMALL_SCENE) == 0
    mi, mo, mp = (str(root / n) for n in ("image.model", "object.model", "part.model"))
    assert main(["train", "--data", data, "--stage", "image", "--out", mi,
                 "--seed", "5"] + SMALL_TRAIN) == 0
    assert main(["train", "--data", data, "--stage", "object", "--gt-boxes",
                 "--out", mo, "--seed", "5"] + SMALL_TRAIN) == 0
    assert main(["train", "--data", data, "--stage", "part", "--gt-boxes",
                 "--image-model", mi, "--object-model", mo, "--out", mp,
                 "--seed", "5"] + SMALL_TRAIN) == 0
    return {"root": root, "data": data, "image": mi, "object": mo, "part": mp}


def _read_compare(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    return {r[0]: dict(zip(head, r)) for r in rows[1:]}


def test_criterion_6_trend_reproduction(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    t0 = time.monotonic()
    train_d, test_d = str(root / "train"), str(root / "test")
    assert main(["synth", "--n", "300", "--seed", "42", "--out", train_d] + BENCH_SCENE) == 0
    assert main(["synth", "--n", "100", "--seed", "43", "--out", test_d] + BENCH_SCENE) == 0
    mi, mo, mp = (str(root / n) for n in ("image.model", "object.model", "part.model"))
    assert main(["train", "--data", train_d, "--stage", "image",
                 "--seed", "42", "--out", mi]) == 0
    assert main(["train", "--data", train_d, "--stage", "object", "--gt-boxes",
                 "--seed", "42", "--out", mo]) == 0
    assert main(["train", "--data", train_d, "--stage", "part", "--gt-boxes",
                 "--image-model", mi, "--object-model", mo,
                 "--seed", "42", "--out", mp,
                 "--set", "train.iterations=1200",
                 "--set", "train.max_samples=2000"]) == 0
    res = str(root / "results")
    assert main(["compare", "--data", test_d, "--out", res,
                 "--image-model", mi, "--object-model", mo, "--part-model", mp]) == 0
    elapsed = time.monotonic() - t0

    rows = _read_compare(os.path.join(res, "compare.csv"))
    full, nopart, base = rows["full"], rows["no-part"], rows["msa"]
    avg = {k: float(r["avg"]) for k, r in (("full", full), ("no-part", nopart), ("msa", base))}
    assert avg["full"] > avg["no-part"] > avg["msa"], f"mean mIOU ordering violated: {avg}"
    assert full["XS"] != "-" and base["XS"] != "-", "benchmark produced no XS instances"
    gap = float(full["XS"]) - float(base["XS"])
    assert gap >= 5.0, f"XS gap {gap:.2f} < 5 points"
    assert elapsed <= 1800.0, f"benchmark took {elapsed:.0f}s"
    report(
        6,
        f"mIOU full {avg['full']:.2f} > no-part {avg['no-part']:.2f} > "
        f"baseline {avg['msa']:.2f}; XS gap {gap:.2f}; {elapsed:.0f}s",
    )


def test_criterion_7_compare_determinism(small_run, tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    args = ["compare", "--data", small_run["data"],
            "--image-model", small_run["image"], "--object-model", small_run["object"],
            "--part-model", small_run["part"]] + SMALL_CASCADE
    assert main(args + ["--out", a]) == 0
    assert main(args + ["--out", b]) == 0
    checked = 0
    for sub, _, files in os.walk(a):
        rel = os.path.relpath(sub, a)
        for name in files:
            if name.endswith(".csv") or name.endswith(".png") or name.endswith(".txt"):
                pa = os.path.join(a, rel, name)
                pb = os.path.join(b, rel, name)
                assert filecmp.cmp(pa, pb, shallow=False), os.path.join(rel, name)
                checked += 1
    assert checked >= 4 * 6 * 2 + 5  # labels+overlays per method, csvs on top
    report(7, f"{checked} files byte-identical across reruns")


def _stage_trace(path):
    levels, rois = [], {}
    for line in open(path).read().splitlines():
        if line.startswith("stage "):
            _, level, _, n = line.split()
            levels.append(level)
            rois[level] = int(n)
    return levels, rois


def _stage_block(path, level):
    """The manifest lines of one stage, header included."""
    lines = open(path).read().splitlines()
    out, active = [], False
    for line in lines:
        if line.startswith("stage "):
            active = line.split()[1] == level
        if active:
            out.append(line)
    return out


def test_criterion_8_ablation_identities(small_run, tmp_path):
    data = small_run["data"]

    # both stages off: bit-identical to the image-level argmax
    flat = str(tmp_path / "flat")
    assert main(["infer", "--data", data, "--out", flat,
                 "--image-model", small_run["image"],
                 "--no-object-scale", "--no-part-scale"] + SMALL_CASCADE) == 0
    model = load_params(small_run["image"])
    for i in range(6):
        img = load_image(os.path.join(data, f"img_{i:05d}.png"))
        scores, _, _ = run_stage(model, img)
        want = argmax_labels(scores).labels
        got = load_labels(os.path.join(flat, f"labels_{i:05d}.png"), NUM_CLASSES).labels
        assert np.array_equal(got, want)
        levels, _ = _stage_trace(os.path.join(flat, f"run_{i:05d}.txt"))
        assert levels == ["image"]

    # part stage off: the run is exactly the object-scale prefix of the full run
    full, nopart = str(tmp_path / "full"), str(tmp_path / "nopart")
    base = ["infer", "--data", data, "--image-model", small_run["image"],
            "--object-model", small_run["object"]] + SMALL_CASCADE
    assert main(base + ["--part-model", small_run["part"], "--out", full]) == 0
    assert main(base + ["--no-part-scale", "--out", nopart]) == 0
    obj_rois = 0
    for i in range(6):
        f_levels, f_rois = _stage_trace(os.path.join(full, f"run_{i:05d}.txt"))
        n_levels, n_rois = _stage_trace(os.path.join(nopart, f"run_{i:05d}.txt"))
        assert f_levels == ["image", "object", "part"]
        assert n_levels == ["image", "object"]
        assert _stage_block(os.path.join(full, f"run_{i:05d}.txt"), "object") == \
            _stage_block(os.path.join(nopart, f"run_{i:05d}.txt"), "object")
        obj_rois += n_rois["object"]
    assert obj_rois > 0
    report(8, "image-argmax identity and object-stage trace prefix verified")
