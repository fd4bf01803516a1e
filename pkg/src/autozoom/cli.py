"""Command-line front end: synthesize scenes, train the stage scorers, run
the zoom cascade, and score the results.

All tunables live in a flat key=value config. Every command writes the fully
resolved config next to its outputs, so any artifact can be reproduced from
the directory it sits in plus the package version.
"""

import argparse
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import ndimage

from .cascade import (
    IMAGE_STAGE,
    CascadeConfig,
    StageOutput,
    merge_scores,
    multi_scale_average,
    object_pass,
    parse_run_manifest,
    render_overlay,
    run_hazn,
    run_manifest,
    run_stage,
)
from .grid import (
    AbsBox,
    Grid2D,
    LabelMap,
    ScoreMap,
    argmax_labels,
    atomic_write_bytes,
    crop_labels,
    load_image,
    load_labels,
    resize_labels,
    save_image,
    save_labels,
    write_score_map,
)
from .metrics import (
    EvalAccumulator,
    build_pred_instances,
    report_csv,
    restrict_labels,
)
from .scorer import TrainConfig, TrainSample, load_params, save_params, sgd_train
from .sen import (
    OBJECT_LEVEL,
    PART_LEVEL,
    RoiProposal,
    SenLossConfig,
    SenTargets,
    build_sen_targets,
    decode_proposals,
    nms,
)
from .synth import NUM_CLASSES, PartClass, SceneConfig, generate_dataset, load_dataset, save_dataset
from .zoom import ZoomConfig, zoom_ratio, zoom_region


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration

CONFIG_MAGIC = "# autozoom-config v1"

CONFIG_DEFAULTS = {
    "seed": 0,
    "scene.image_size": 384,
    "scene.min_instances": 1,
    "scene.max_instances": 4,
    "scene.min_scale": 44.0,
    "scene.max_scale": 360.0,
    "scene.truncation_probability": 0.25,
    "scene.clutter": 6,
    "scene.noise_sigma": 0.03,
    "sen.lambda": 1.0,
    "sen.seed_window": 7,
    "train.lr": 1e-3,
    "train.classifier_lr_multiplier": 10.0,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.batch": 30,
    "train.lr_decay_every": 2000,
    "train.lr_decay_factor": 0.1,
    "train.iterations": 600,
    "train.crop_size": 128,
    "train.crops_per_image": 2,
    "train.max_samples": 0,  # 0 keeps every crop
    "zoom.s_t_full": 255.0,
    "zoom.s_t_truncated": 140.0,
    "zoom.ratio_min": 0.4,
    "zoom.ratio_max": 2.5,
    "zoom.leg_pixel_fraction": 0.001,
    "zoom.leg_class_ids": "5,6",
    "cascade.decode_threshold": 0.5,
    "cascade.object_nms_threshold": 0.4,
    "cascade.part_nms_threshold": 0.4,
    "cascade.image_decode_stride": 4,
    "cascade.roi_decode_stride": 2,
    "cascade.max_object_rois": 15,
    "cascade.max_part_rois": 40,
    "msa.scales": "0.5,1.0,1.5",
}


def _coerce(key, raw):
    want = type(CONFIG_DEFAULTS[key])
    try:
        if want is int:
            return int(raw)
        if want is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key} needs a {want.__name__}, got {raw!r}") from None


def build_config(path=None, overrides=()):
    """Defaults, then the config file, then explicit key=value overrides."""
    cfg = dict(CONFIG_DEFAULTS)
    pairs = []
    if path:
        try:
            with open(path, "r", encoding="ascii") as fh:
                for line in fh:
                    line = line.strip()
                    if line and not line.startswith("#"):
                        pairs.append(line)
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
    pairs.extend(overrides)
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"config entries look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key, value = key.strip(), value.strip()
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def resolved_config_text(cfg) -> str:
    lines = [CONFIG_MAGIC]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def _write_config(dirpath, cfg, name="config.txt"):
    atomic_write_bytes(os.path.join(dirpath, name), resolved_config_text(cfg).encode())


def _build(ctor, **kw):
    try:
        return ctor(**kw)
    except ValueError as e:
        raise UsageError(f"bad configuration: {e}") from None


def scene_config(cfg) -> SceneConfig:
    return _build(
        SceneConfig,
        image_size=cfg["scene.image_size"],
        min_instances=cfg["scene.min_instances"],
        max_instances=cfg["scene.max_instances"],
        min_scale=cfg["scene.min_scale"],
        max_scale=cfg["scene.max_scale"],
        truncation_probability=cfg["scene.truncation_probability"],
        clutter=cfg["scene.clutter"],
        noise_sigma=cfg["scene.noise_sigma"],
    )


def sen_config(cfg) -> SenLossConfig:
    return _build(SenLossConfig, lambda_=cfg["sen.lambda"], seed_window=cfg["sen.seed_window"])


def train_config(cfg) -> TrainConfig:
    return _build(
        TrainConfig,
        lr=cfg["train.lr"],
        classifier_lr_multiplier=cfg["train.classifier_lr_multiplier"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        batch=cfg["train.batch"],
        lr_decay_every=cfg["train.lr_decay_every"],
        lr_decay_factor=cfg["train.lr_decay_factor"],
        iterations=cfg["train.iterations"],
    )


def _int_list(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def zoom_config(cfg) -> ZoomConfig:
    return _build(
        ZoomConfig,
        s_t_full=cfg["zoom.s_t_full"],
        s_t_truncated=cfg["zoom.s_t_truncated"],
        ratio_min=cfg["zoom.ratio_min"],
        ratio_max=cfg["zoom.ratio_max"],
        leg_pixel_fraction=cfg["zoom.leg_pixel_fraction"],
        leg_class_ids=_int_list(cfg["zoom.leg_class_ids"]),
    )


def cascade_config(cfg, enable_object=True, enable_part=True, paths=(None, None, None)) -> CascadeConfig:
    return _build(
        CascadeConfig,
        enable_object_stage=enable_object,
        enable_part_stage=enable_part,
        zoom=zoom_config(cfg),
        decode_threshold=cfg["cascade.decode_threshold"],
        object_nms_threshold=cfg["cascade.object_nms_threshold"],
        part_nms_threshold=cfg["cascade.part_nms_threshold"],
        image_decode_stride=cfg["cascade.image_decode_stride"],
        roi_decode_stride=cfg["cascade.roi_decode_stride"],
        max_object_rois=cfg["cascade.max_object_rois"],
        max_part_rois=cfg["cascade.max_part_rois"],
        image_model_path=paths[0],
        object_model_path=paths[1],
        part_model_path=paths[2],
    )


def msa_scales(cfg):
    try:
        scales = tuple(float(t) for t in cfg["msa.scales"].split(",") if t.strip())
    except ValueError:
        raise UsageError(f"msa.scales must be comma-separated numbers, got {cfg['msa.scales']!r}") from None
    if not scales or any(s <= 0 for s in scales):
        raise UsageError("msa.scales needs at least one positive scale")
    return scales


def class_display_names():
    return [p.name.lower().replace("_", "-") for p in PartClass]


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args, cfg):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    sc = scene_config(cfg)
    samples = generate_dataset(cfg["seed"], sc, args.n)
    save_dataset(args.out, samples, sc, cfg["seed"])
    _write_config(args.out, cfg)
    print(f"[synth] seed={cfg['seed']} wrote {len(samples)} scenes to {args.out}")


# ---------------------------------------------------------------------------
# train


def _slice_targets(tg: SenTargets, x0, y0, w, h) -> SenTargets:
    sl = np.s_[y0 : y0 + h, x0 : x0 + w]
    return SenTargets(
        reg=Grid2D(tg.reg.values[sl].copy()),
        seeds=Grid2D(tg.seeds.values[sl].copy()),
    )


def _image_stage_samples(samples, cfg, sen_cfg, rng):
    """Fixed-size crops of whole scenes; half are centered on an instance so
    seed pixels stay reasonably frequent."""
    cs, per = cfg["train.crop_size"], cfg["train.crops_per_image"]
    out = []
    for s in samples:
        c = min(cs, s.image.width, s.image.height)
        tg = build_sen_targets(s.instance_masks, OBJECT_LEVEL, s.gt_parts, sen_cfg)
        for _ in range(per):
            if s.instance_boxes and rng.random() < 0.5:
                b = s.instance_boxes[int(rng.integers(len(s.instance_boxes)))]
                cx, cy = b.center
                x0 = int(np.clip(round(cx - c / 2), 0, s.image.width - c))
                y0 = int(np.clip(round(cy - c / 2), 0, s.image.height - c))
            else:
                x0 = int(rng.integers(0, s.image.width - c + 1))
                y0 = int(rng.integers(0, s.image.height - c + 1))
            sl = np.s_[y0 : y0 + c, x0 : x0 + c]
            out.append(
                TrainSample(
                    image=Grid2D(s.image.values[sl].copy()),
                    prior=None,
                    gt=LabelMap(s.gt_parts.labels[sl].copy(), s.gt_parts.num_classes),
                    sen=_slice_targets(tg, x0, y0, c, c),
                )
            )
    return out


def _zoomed_sample(img_region, prior_region, gt_z, sen_cfg, cs, rng) -> TrainSample:
    """One training sample from a zoomed region, windowed down to the crop
    size when the region is larger. Box targets are built on the full region
    first so parts cut by the window keep their true extent."""
    tg = build_sen_targets([], PART_LEVEL, gt_z, sen_cfg)
    cw, ch = min(cs, gt_z.width), min(cs, gt_z.height)
    x0 = int(rng.integers(0, gt_z.width - cw + 1))
    y0 = int(rng.integers(0, gt_z.height - ch + 1))
    sl = np.s_[y0 : y0 + ch, x0 : x0 + cw]
    prior = None
    if prior_region is not None:
        pv = prior_region.values[sl].copy()
        prior = ScoreMap(pv / pv.sum(axis=2, keepdims=True), normalized=True)
    return TrainSample(
        image=Grid2D(img_region.values[sl].copy()),
        prior=prior,
        gt=LabelMap(gt_z.labels[sl].copy(), gt_z.num_classes),
        sen=_slice_targets(tg, x0, y0, cw, ch),
    )


def _object_stage_samples(samples, cfg, sen_cfg, zcfg, ccfg, rng, gt_boxes, image_model):
    out = []
    for s in samples:
        if gt_boxes:
            rois = [RoiProposal(box=b, confidence=1.0) for b in s.instance_boxes]
            labels = s.gt_parts
        else:
            scores, conf_logit, reg = run_stage(image_model, s.image)
            rois = nms(
                decode_proposals(conf_logit, reg, ccfg.decode_threshold, ccfg.image_decode_stride),
                ccfg.object_nms_threshold,
            )[: ccfg.max_object_rois]
            labels = argmax_labels(scores)
        for p in rois:
            clipped = p.box.clip_to(s.image.width, s.image.height)
            if clipped is None:
                continue
            in_box = crop_labels(labels, clipped) if zcfg.leg_class_ids else None
            ratio = zoom_ratio(clipped, in_box, OBJECT_LEVEL, zcfg)
            region = zoom_region(
                s.image, None, RoiProposal(box=clipped, confidence=p.confidence), ratio, zcfg
            )
            gt_z = resize_labels(crop_labels(s.gt_parts, clipped), region.zoomed_w, region.zoomed_h)
            out.append(
                _zoomed_sample(region.zoomed_img, None, gt_z, sen_cfg, cfg["train.crop_size"], rng)
            )
    return out


def _gt_part_proposals(gt: LabelMap):
    """A proposal per 4-connected component of every non-background class."""
    props = []
    for c in range(1, gt.num_classes):
        comp, n = ndimage.label(gt.labels == c)
        for k in range(1, n + 1):
            b = AbsBox.from_mask(comp == k)
            if b is not None:
                props.append(RoiProposal(box=b, confidence=1.0))
    return props


def _uniform_scores(w, h):
    return ScoreMap(np.full((h, w, NUM_CLASSES), 1.0 / NUM_CLASSES), normalized=True)


def _gt_box_prior(s, image_model, object_model, zcfg):
    """Part-stage prior in isolation mode: object-model scores merged over
    the true instance boxes, on top of image-level scores when available."""
    if image_model is not None:
        base, _, _ = run_stage(image_model, s.image)
    else:
        base = _uniform_scores(s.image.width, s.image.height)
    if object_model is None:
        return base
    contribs = []
    for b in s.instance_boxes:
        clipped = b.clip_to(s.image.width, s.image.height)
        if clipped is None:
            continue
        in_box = crop_labels(s.gt_parts, clipped) if zcfg.leg_class_ids else None
        ratio = zoom_ratio(clipped, in_box, OBJECT_LEVEL, zcfg)
        region = zoom_region(
            s.image,
            base if object_model.num_prior else None,
            RoiProposal(box=clipped, confidence=1.0),
            ratio,
            zcfg,
        )
        sc, _, _ = run_stage(
            object_model, region.zoomed_img, region.zoomed_prior if object_model.num_prior else None
        )
        contribs.append((region, sc))
    return merge_scores(base, contribs) if contribs else base


def _part_stage_samples(samples, cfg, sen_cfg, zcfg, ccfg, rng, gt_boxes, image_model, object_model):
    out = []
    for s in samples:
        if gt_boxes:
            props = _gt_part_proposals(s.gt_parts)
            prior_map = _gt_box_prior(s, image_model, object_model, zcfg)
        else:
            _, _, _, prior_map, pool = object_pass(s.image, image_model, object_model, ccfg)
            props = nms(pool, ccfg.part_nms_threshold)[: ccfg.max_part_rois]
        for p in props:
            clipped = p.box.clip_to(s.image.width, s.image.height)
            if clipped is None:
                continue
            ratio = zoom_ratio(clipped, None, PART_LEVEL, zcfg)
            region = zoom_region(
                s.image, prior_map, RoiProposal(box=clipped, confidence=p.confidence), ratio, zcfg
            )
            gt_z = resize_labels(crop_labels(s.gt_parts, clipped), region.zoomed_w, region.zoomed_h)
            out.append(
                _zoomed_sample(
                    region.zoomed_img, region.zoomed_prior, gt_z, sen_cfg, cfg["train.crop_size"], rng
                )
            )
    return out


_STAGE_SALT = {"image": 11, "object": 12, "part": 13}


def cmd_train(args, cfg):
    if args.lr is not None:
        cfg["train.lr"] = args.lr
    if args.iterations is not None:
        cfg["train.iterations"] = args.iterations

    samples = load_dataset(args.data)
    if not samples:
        raise UsageError(f"no scenes under {args.data}")
    sen_cfg = sen_config(cfg)
    zcfg = zoom_config(cfg)
    ccfg = cascade_config(cfg)
    rng = np.random.default_rng([cfg["seed"], _STAGE_SALT[args.stage]])

    image_model = load_params(args.image_model) if args.image_model else None
    object_model = load_params(args.object_model) if args.object_model else None
    if args.stage == "image":
        data = _image_stage_samples(samples, cfg, sen_cfg, rng)
    elif args.stage == "object":
        if not args.gt_boxes and image_model is None:
            raise UsageError("object-stage training needs --image-model (or --gt-boxes)")
        data = _object_stage_samples(
            samples, cfg, sen_cfg, zcfg, ccfg, rng, args.gt_boxes, image_model
        )
    else:
        if not args.gt_boxes and (image_model is None or object_model is None):
            raise UsageError(
                "part-stage training needs --image-model and --object-model (or --gt-boxes)"
            )
        data = _part_stage_samples(
            samples, cfg, sen_cfg, zcfg, ccfg, rng, args.gt_boxes, image_model, object_model
        )

    cap = cfg["train.max_samples"]
    if cap and len(data) > cap:
        keep = np.sort(rng.choice(len(data), size=cap, replace=False))
        data = [data[i] for i in keep]
    if not data:
        raise RuntimeError("no training samples were produced")

    betas = [1.0 - s.sen.num_seeds / (s.gt.width * s.gt.height) for s in data]
    print(
        f"[train] stage={args.stage} samples={len(data)} lambda={sen_cfg.lambda_:g} "
        f"beta mean={np.mean(betas):.4f} min={np.min(betas):.4f} max={np.max(betas):.4f}"
    )
    params = sgd_train(
        data, train_config(cfg), seed=cfg["seed"], loss_csv_path=args.out + ".loss.csv", sen_cfg=sen_cfg
    )
    save_params(params, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_config(out_dir, cfg, name=os.path.basename(args.out) + ".config.txt")
    print(f"[train] wrote {args.out}")


# ---------------------------------------------------------------------------
# infer


_MODEL_CACHE: dict = {}


def _load_model_cached(path):
    if path not in _MODEL_CACHE:
        _MODEL_CACHE[path] = load_params(path)
    return _MODEL_CACHE[path]


def _infer_task(task):
    """One image end to end; module level so worker processes can run it."""
    cfg = task["cfg"]
    img = load_image(task["img_path"])
    if task["mode"] == "msa":
        model = _load_model_cached(task["image_model"])
        scores = multi_scale_average(img, model, msa_scales(cfg))
        final = argmax_labels(scores)
        stages = [StageOutput(IMAGE_STAGE, scores, [], [])]
    else:
        paths = (task["image_model"], task["object_model"], task["part_model"])
        models = tuple(_load_model_cached(p) if p else None for p in paths)
        ccfg = cascade_config(
            cfg,
            enable_object=task["enable_object"],
            enable_part=task["enable_part"],
            paths=paths,
        )
        final, stages = run_hazn(img, models, ccfg)
    ident = task["ident"]
    out = task["out"]
    save_labels(final, os.path.join(out, f"labels_{ident}.png"))
    save_image(render_overlay(img, final, stages), os.path.join(out, f"overlay_{ident}.png"))
    atomic_write_bytes(os.path.join(out, f"run_{ident}.txt"), run_manifest(stages).encode())
    if task["dump_scores"]:
        write_score_map(stages[-1].scores, os.path.join(out, f"scores_{ident}.hzs"))
    return ident


def _list_images(data_dir):
    try:
        names = sorted(f for f in os.listdir(data_dir) if re.fullmatch(r"img_\d{5}\.png", f))
    except OSError as e:
        raise UsageError(f"cannot list {data_dir}: {e}") from None
    if not names:
        raise UsageError(f"no img_*.png files under {data_dir}")
    return names


def _run_inference(cfg, data_dir, out_dir, mode, model_paths, enable_object, enable_part, dump_scores, jobs):
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if model_paths[0] is None:
        raise UsageError("--image-model is required")
    if mode == "cascade":
        if enable_object and model_paths[1] is None:
            raise UsageError("--object-model is required unless --no-object-scale is set")
        if enable_part and model_paths[2] is None:
            raise UsageError("--part-model is required unless --no-part-scale is set")
    for p in model_paths:
        if p is not None and not os.path.exists(p):
            raise UsageError(f"model file not found: {p}")
    names = _list_images(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    tasks = [
        {
            "cfg": cfg,
            "img_path": os.path.join(data_dir, name),
            "ident": name[4:9],
            "out": out_dir,
            "mode": mode,
            "image_model": model_paths[0],
            "object_model": model_paths[1],
            "part_model": model_paths[2],
            "enable_object": enable_object,
            "enable_part": enable_part,
            "dump_scores": dump_scores,
        }
        for name in names
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            list(ex.map(_infer_task, tasks))
    else:
        for t in tasks:
            _infer_task(t)
    _write_config(out_dir, cfg)
    return len(tasks)


def cmd_infer(args, cfg):
    if args.baseline_msa and (args.no_object_scale or args.no_part_scale):
        raise UsageError("--baseline-msa excludes the ablation flags")
    mode = "msa" if args.baseline_msa else "cascade"
    n = _run_inference(
        cfg,
        args.data,
        args.out,
        mode,
        (args.image_model, args.object_model, args.part_model),
        not args.no_object_scale,
        not args.no_part_scale,
        args.dump_scores,
        args.jobs,
    )
    print(f"[infer] {mode}: {n} images -> {args.out}")


# ---------------------------------------------------------------------------
# eval


def _predicted_instances(pred: LabelMap, run_path):
    """Person-level predictions from a run manifest: the object stage's
    regions when it ran, otherwise whatever the last zooming stage produced."""
    if not os.path.exists(run_path):
        return []
    with open(run_path, "r", encoding="ascii") as fh:
        parsed = parse_run_manifest(fh.read())
    rois = []
    for level, entries in parsed:
        if level == OBJECT_LEVEL and entries:
            rois = entries
            break
    else:
        for level, entries in parsed:
            if entries:
                rois = entries
    props, masks = [], []
    for conf, box, _ratio in rois:
        clipped = box.clip_to(pred.width, pred.height)
        if clipped is None:
            continue
        x0, y0, x1, y1 = clipped.pixel_rect()
        m = np.zeros((pred.height, pred.width, 1))
        m[y0 : min(y1, pred.height), x0 : min(x1, pred.width)] = 1.0
        props.append(RoiProposal(box=clipped, confidence=min(conf, 1.0)))
        masks.append(Grid2D(m))
    return build_pred_instances(pred, props, masks)


def _evaluate_dir(pred_dir, data_dir):
    samples = load_dataset(data_dir)
    if not samples:
        raise UsageError(f"no scenes under {data_dir}")
    acc = EvalAccumulator(NUM_CLASSES)
    for i, s in enumerate(samples):
        ident = f"{i:05d}"
        label_path = os.path.join(pred_dir, f"labels_{ident}.png")
        if not os.path.exists(label_path):
            raise RuntimeError(f"missing prediction {label_path}")
        pred = load_labels(label_path, NUM_CLASSES)
        if (pred.width, pred.height) != (s.gt_parts.width, s.gt_parts.height):
            raise RuntimeError(f"prediction size mismatch for scene {ident}")
        pred_insts = _predicted_instances(pred, os.path.join(pred_dir, f"run_{ident}.txt"))
        gt_insts = [restrict_labels(s.gt_parts, m) for m in s.instance_masks]
        acc.add_image(
            pred, s.gt_parts, list(zip(s.instance_masks, s.instance_boxes)), pred_insts, gt_insts
        )
    return acc.report()


def cmd_eval(args, cfg):
    rep = _evaluate_dir(args.pred, args.data)
    text = report_csv([(args.method, rep)], class_display_names())
    atomic_write_bytes(args.out, text.encode())
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_config(out_dir, cfg, name=os.path.basename(args.out) + ".config.txt")
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# compare

COMPARE_METHODS = (
    ("msa", "msa", True, True),
    ("no-object", "cascade", False, True),
    ("no-part", "cascade", True, False),
    ("full", "cascade", True, True),
)


def cmd_compare(args, cfg):
    paths = (args.image_model, args.object_model, args.part_model)
    rows = []
    for name, mode, enable_object, enable_part in COMPARE_METHODS:
        sub = os.path.join(args.out, name)
        n = _run_inference(
            cfg, args.data, sub, mode, paths, enable_object, enable_part, False, args.jobs
        )
        rows.append((name, _evaluate_dir(sub, args.data)))
        print(f"[compare] {name}: {n} images", file=sys.stderr)
    text = report_csv(rows, class_display_names())
    atomic_write_bytes(os.path.join(args.out, "compare.csv"), text.encode())
    _write_config(args.out, cfg)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", default=[], help="override one config entry"
    )
    common.add_argument("--seed", type=int, help="override the config seed")

    p = argparse.ArgumentParser(
        prog="autozoom",
        description="scale-adaptive object-part segmentation: synthesize, train, infer, evaluate",
    )
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sp.add_argument("--n", type=int, required=True, help="number of scenes")
    sp.add_argument("--out", required=True, help="dataset directory to create")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", parents=[common], help="train one stage scorer")
    tp.add_argument("--data", required=True, help="dataset directory")
    tp.add_argument("--stage", choices=("image", "object", "part"), required=True)
    tp.add_argument("--out", required=True, help="model file to write")
    tp.add_argument(
        "--gt-boxes",
        action="store_true",
        help="build crops from ground-truth boxes instead of running the previous stage",
    )
    tp.add_argument("--image-model", help="image-stage model (crop source / prior)")
    tp.add_argument("--object-model", help="object-stage model (part-stage priors)")
    tp.add_argument("--lr", type=float, help="shorthand for --set train.lr=...")
    tp.add_argument("--iterations", type=int, help="shorthand for --set train.iterations=...")
    tp.set_defaults(func=cmd_train)

    ip = sub.add_parser("infer", parents=[common], help="run the cascade over a directory")
    ip.add_argument("--data", required=True, help="directory holding img_*.png files")
    ip.add_argument("--out", required=True)
    ip.add_argument("--image-model", required=True)
    ip.add_argument("--object-model")
    ip.add_argument("--part-model")
    ip.add_argument("--no-object-scale", action="store_true", help="skip the object zoom stage")
    ip.add_argument("--no-part-scale", action="store_true", help="skip the part zoom stage")
    ip.add_argument(
        "--baseline-msa", action="store_true", help="fixed multi-scale averaging instead of zooming"
    )
    ip.add_argument("--dump-scores", action="store_true", help="also write final score maps")
    ip.add_argument("--jobs", type=int, default=1, help="parallel workers across images")
    ip.set_defaults(func=cmd_infer)

    ep = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    ep.add_argument("--pred", required=True, help="directory written by infer")
    ep.add_argument("--data", required=True, help="dataset directory with ground truth")
    ep.add_argument("--out", required=True, help="CSV file to write")
    ep.add_argument("--method", default="autozoom", help="row label in the CSV")
    ep.set_defaults(func=cmd_eval)

    cp = sub.add_parser(
        "compare", parents=[common], help="baseline + ablations + full cascade, one table"
    )
    cp.add_argument("--data", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--image-model", required=True)
    cp.add_argument("--object-model", required=True)
    cp.add_argument("--part-model", required=True)
    cp.add_argument("--jobs", type=int, default=1)
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        cfg = build_config(args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if "HAZN_SEED" in os.environ:
            cfg["seed"] = _coerce("seed", os.environ["HAZN_SEED"])
        args.func(args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
