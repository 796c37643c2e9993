"""Command-line driver: dataset synthesis, training, inference, evaluation,
tensor visualization and gradient checking.

Exit codes: 0 ok, 1 check failed, 2 usage error, 3 I/O error, 4 numeric
failure.  Flags override config-file values, which override built-in
defaults; the effective configuration is echoed to ``run_config.json`` in
the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import backbone as bb
from . import metrics, segmenter, synthdata
from .imaging import read_image, read_mask, write_image, write_mask
from .structure_tensor import (
    GaussianSpec,
    coherent_representation,
    gradient_stack,
    modified_tensor_set,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_DEFAULTS = {
    "synth": {
        "n": 100,
        "seed": 0,
        "occlusion": 0.3,
        "classes": "knife,gun,shuriken",
        "clutter": 3,
        "noise": 0.02,
        "canvas": 128,
        "min_items": 1,
        "max_items": 2,
        "train_fraction": 0.8,
    },
    "train": {
        "epochs": 50,
        "batch": 8,
        "lr": 1.0,
        "rho": 0.95,
        "eps": 1e-6,
        "m": 4,
        "k": 2,
        "sigma": 1.0,
        "radius": 3,
        "input_size": 128,
        "stages": "16,32,64",
        "seed": 0,
        "frontend": "tensor",
        "open_radius": 1,
        "close_radius": 3,
        "min_area": 20,
    },
    "tensor": {"m": 4, "k": 2, "sigma": 1.0, "radius": 3},
    "eval": {"iou": 0.5},
    "gradcheck": {"step": 1e-4, "threshold": 1e-4},
}


def _add_opts(parser: argparse.ArgumentParser, command: str, specs) -> None:
    """Register overridable flags; defaults are resolved at merge time so a
    config file can sit between built-ins and explicit flags."""
    for name, typ, help_text in specs:
        default = _DEFAULTS[command][name]
        parser.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            type=typ,
            default=argparse.SUPPRESS,
            help=f"{help_text} (default: {default})",
        )


def _effective(command: str, args: argparse.Namespace) -> dict:
    merged = dict(_DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            merged.update(json.load(f))
    for key, value in vars(args).items():
        if key in merged:
            merged[key] = value
    return merged


def _echo_config(out_dir: Path, merged: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as f:
        json.dump(merged, f, indent=1, sort_keys=True)


def _worker_count() -> int:
    env = os.environ.get("TST_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        return max(1, min(int(env), cpus))
    return cpus


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _effective("synth", args)
    if cfg["n"] < 1:
        raise ValueError(f"--n must be >= 1, got {cfg['n']}")
    classes = tuple(s.strip() for s in cfg["classes"].split(",") if s.strip())
    unknown = [c for c in classes if c not in synthdata.TEMPLATES]
    if unknown:
        raise ValueError(f"unknown threat classes: {unknown}")
    template = synthdata.SceneTemplate(
        canvas=(cfg["canvas"], cfg["canvas"]),
        class_names=classes,
        items_per_scene=(cfg["min_items"], cfg["max_items"]),
        clutter=cfg["clutter"],
        occlusion_level=cfg["occlusion"],
        noise_sigma=cfg["noise"],
    )
    out = Path(args.out)
    manifest = synthdata.generate_dataset(
        cfg["n"], template, cfg["seed"], out, train_fraction=cfg["train_fraction"]
    )
    _echo_config(out, cfg)
    print(f"wrote {manifest['n']} scans: {len(manifest['train'])} train, "
          f"{len(manifest['test'])} test")
    print(out / "manifest.json")
    return EXIT_OK


def _pipeline_from(cfg: dict) -> segmenter.PipelineConfig:
    return segmenter.PipelineConfig(
        m=cfg["m"],
        k=cfg["k"],
        gaussian=GaussianSpec(cfg["sigma"], cfg["radius"]),
        input_size=(cfg["input_size"], cfg["input_size"]),
        open_radius=cfg["open_radius"],
        close_radius=cfg["close_radius"],
        min_area=cfg["min_area"],
        class_names=tuple(cfg["class_names"]),
        frontend=cfg["frontend"],
    )


def _load_split(dataset_dir: Path, manifest: dict, split: str):
    scans, annotations, sizes = [], [], {}
    for image_id in manifest[split]:
        scan = read_image(dataset_dir / "images" / f"{image_id}.png")
        scans.append(scan)
        annotations.append(
            synthdata.load_annotation(dataset_dir, image_id, manifest["classes"])
        )
        sizes[image_id] = scan.shape[:2]
    return scans, annotations, sizes


def cmd_train(args) -> int:
    cfg = _effective("train", args)
    data_dir = Path(args.data)
    manifest = synthdata.load_manifest(data_dir)
    cfg["class_names"] = manifest["classes"]
    pipe = _pipeline_from(cfg)
    stages = tuple(int(s) for s in str(cfg["stages"]).split(","))
    bconf = segmenter.backbone_config_for(pipe, stage_channels=stages, seed=cfg["seed"])

    out = Path(args.out)
    _echo_config(out, cfg)
    scans, annotations, _ = _load_split(data_dir, manifest, "train")
    if not scans:
        raise ValueError("training split is empty")
    for image_id, scan in zip(manifest["train"], scans):
        if not np.all(np.isfinite(scan)):
            raise bb.TrainingDivergedError(f"non-finite pixel values in {image_id}")
    print(f"loaded {len(scans)} training scans from {data_dir}")
    print(f"optimizer: adadelta lr={cfg['lr']} rho={cfg['rho']} eps={cfg['eps']}")
    records = segmenter.make_training_records(scans, annotations, pipe)
    state = bb.OptimizerState(rho=cfg["rho"], eps=cfg["eps"], lr=cfg["lr"])
    params, history = bb.train(
        records,
        bconf,
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        state=state,
        log=lambda e, v: print(f"epoch {e + 1}/{cfg['epochs']}: loss {v:.6f}"),
    )
    ckpt = out / "checkpoint.tstb"
    bb.save_checkpoint(
        ckpt, params, {"backbone": bb.config_to_dict(bconf), "pipeline": pipe.to_dict()}
    )
    with open(out / "loss_history.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            writer.writerow([i + 1, f"{v:.8f}"])
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _load_model(path):
    params, echo = bb.load_checkpoint(path)
    bconf = bb.config_from_dict(echo["backbone"])
    pipe = segmenter.PipelineConfig.from_dict(echo["pipeline"])
    return params, bconf, pipe


_COLORS = [(230, 60, 60), (60, 200, 60), (70, 110, 240), (230, 200, 40), (200, 70, 220)]


def _overlay(scan: np.ndarray, detections) -> Image.Image:
    arr = np.clip(scan, 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    base = (arr * 255).astype(np.uint8)
    for det in detections:
        color = np.array(_COLORS[(det.class_id - 1) % len(_COLORS)], dtype=np.float64)
        m = det.mask
        base[m] = (0.65 * base[m] + 0.35 * color).astype(np.uint8)
    im = Image.fromarray(base, mode="RGB")
    draw = ImageDraw.Draw(im)
    for det in detections:
        color = _COLORS[(det.class_id - 1) % len(_COLORS)]
        x, y, w, h = det.aabb
        draw.rectangle([x, y, x + w, y + h], outline=color, width=1)
        draw.polygon([tuple(p) for p in det.rbox.corners()], outline=color)
        draw.text((x + 2, max(0.0, y - 10)), f"{det.class_name} {det.score:.2f}", fill=color)
    return im


def _infer_one(path: Path, out: Path, params, bconf, pipe) -> dict:
    scan = read_image(path)
    detections = segmenter.detect(scan, params, bconf, pipe)
    name = path.stem
    entries = []
    for i, det in enumerate(detections):
        mask_path = out / f"{name}_det{i}_mask.png"
        write_mask(mask_path, det.mask)
        entries.append(
            {
                "class": det.class_name,
                "score": det.score,
                "aabb": [float(v) for v in det.aabb],
                "rbox": {
                    "cx": det.rbox.center[0],
                    "cy": det.rbox.center[1],
                    "w": det.rbox.size[0],
                    "h": det.rbox.size[1],
                    "angle_deg": math.degrees(det.rbox.angle),
                },
                "mask": mask_path.name,
            }
        )
    with open(out / f"{name}.json", "w", encoding="utf-8") as f:
        json.dump({"image_id": name, "detections": entries}, f, indent=1)
    _overlay(scan, detections).save(out / f"{name}_overlay.png")
    return {"image_id": name, "count": len(entries)}


def cmd_infer(args) -> int:
    params, bconf, pipe = _load_model(args.model)
    src = Path(args.input)
    paths = (
        sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        if src.is_dir()
        else [src]
    )
    if not paths:
        raise ValueError(f"no images found under {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        results = list(pool.map(lambda p: _infer_one(p, out, params, bconf, pipe), paths))
    for r in results:
        print(f"{r['image_id']}: {r['count']} detections")
    return EXIT_OK


def _load_predictions(pred_dir: Path, class_names) -> dict:
    name_to_id = {name: i + 1 for i, name in enumerate(class_names)}
    preds = {}
    for path in sorted(pred_dir.glob("*.json")):
        if path.name in ("run_config.json", "manifest.json", "report.json"):
            continue
        with open(path, encoding="utf-8") as f:
            record = json.load(f)
        if "detections" not in record:
            continue
        dets = []
        for entry in record["detections"]:
            mask = read_mask(pred_dir / entry["mask"])
            rb = entry["rbox"]
            dets.append(
                segmenter.Detection(
                    class_id=name_to_id[entry["class"]],
                    score=float(entry["score"]),
                    rbox=segmenter.RotatedRect(
                        center=(rb["cx"], rb["cy"]),
                        size=(rb["w"], rb["h"]),
                        angle=math.radians(rb["angle_deg"]),
                    ),
                    aabb=tuple(entry["aabb"]),
                    mask=mask,
                    class_name=entry["class"],
                )
            )
        preds[record["image_id"]] = dets
    return preds


def cmd_eval(args) -> int:
    cfg = _effective("eval", args)
    gt_dir = Path(args.gt)
    manifest = synthdata.load_manifest(gt_dir)
    class_names = manifest["classes"]
    preds = _load_predictions(Path(args.pred), class_names)
    if not preds:
        raise ValueError(f"no prediction files found under {args.pred}")
    truths, sizes = {}, {}
    for image_id in preds:
        truths[image_id] = synthdata.load_annotation(gt_dir, image_id, class_names)
        scan = read_image(gt_dir / "images" / f"{image_id}.png")
        sizes[image_id] = scan.shape[:2]
    report = metrics.evaluate(
        preds, truths, range(1, len(class_names) + 1), sizes, iou_threshold=cfg["iou"]
    )
    print(f"mAP@{cfg['iou']}: {report.mean_ap:.4f}")
    if report.mean_dice is not None:
        print(f"mean DC: {report.mean_dice:.4f}  mean IoU: {report.mean_iou:.4f}")
    for c, name in enumerate(class_names, start=1):
        counts = report.per_class_counts[c]
        ap = report.per_class_ap.get(c)
        ap_text = f"{ap:.4f}" if ap is not None else "n/a"
        print(f"  {name}: AP {ap_text} tp={counts.tp} fp={counts.fp} fn={counts.fn}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=1)
        print(f"report: {args.report}")
    if args.pr:
        with open(args.pr, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "recall", "precision"])
            for c, name in enumerate(class_names, start=1):
                flags, n_gt = [], 0
                for image_id, dets in preds.items():
                    cls_dets = sorted(
                        (d for d in dets if d.class_id == c), key=lambda d: -d.score
                    )
                    gts = [g for g in truths[image_id] if g.class_id == c]
                    n_gt += len(gts)
                    f2, _ = metrics.match_detections(cls_dets, gts, cfg["iou"])
                    flags.extend(f2)
                for rec, prec in metrics.precision_recall_points(flags, n_gt):
                    writer.writerow([name, f"{rec:.6f}", f"{prec:.6f}"])
        print(f"pr points: {args.pr}")
    return EXIT_OK


def cmd_tensor(args) -> int:
    cfg = _effective("tensor", args)
    img = read_image(args.input)
    from .imaging import to_luminance

    gray = to_luminance(img)
    stack = gradient_stack(gray, cfg["m"])
    tset = modified_tensor_set(stack, GaussianSpec(cfg["sigma"], cfg["radius"]))
    rep = coherent_representation(tset, cfg["k"])
    write_image(args.out, rep.values)
    print(f"coherent representation ({cfg['m']} orientations, top {cfg['k']}): {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _effective("gradcheck", args)
    worst = bb.gradient_check(step=cfg["step"])
    print(f"max relative error: {worst:.3e} (threshold {cfg['threshold']:.1e})")
    if worst >= cfg["threshold"]:
        print("gradient check FAILED")
        return EXIT_CHECK_FAILED
    print("gradient check passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensorseg",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scan dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_opts(p, "synth", [
        ("n", int, "number of scans"),
        ("seed", int, "dataset seed"),
        ("occlusion", float, "target fraction of each item covered by other shapes"),
        ("classes", str, "comma-separated threat class names"),
        ("clutter", int, "benign shapes per scene"),
        ("noise", float, "additive noise sigma"),
        ("canvas", int, "square canvas size in pixels"),
        ("min_items", int, "minimum threat items per scene"),
        ("max_items", int, "maximum threat items per scene"),
        ("train_fraction", float, "fraction of scans assigned to the train split"),
    ])
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the encoder-decoder on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (from synth or compatible)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_opts(p, "train", [
        ("epochs", int, "training epochs"),
        ("batch", int, "batch size"),
        ("lr", float, "optimizer learning rate"),
        ("rho", float, "optimizer decay rate"),
        ("eps", float, "optimizer epsilon"),
        ("m", int, "number of gradient orientations"),
        ("k", int, "number of coherent tensors summed"),
        ("sigma", float, "tensor smoothing sigma"),
        ("radius", int, "tensor smoothing kernel radius"),
        ("input_size", int, "square network input size"),
        ("stages", str, "comma-separated encoder stage channels"),
        ("seed", int, "weight init / shuffle seed"),
        ("frontend", str, "network input: 'tensor' or 'luminance'"),
        ("open_radius", int, "postprocess opening radius"),
        ("close_radius", int, "contour-fill closing radius"),
        ("min_area", int, "minimum component area in pixels"),
    ])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run detection on an image or directory")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of infer outputs")
    p.add_argument("--gt", required=True, help="dataset directory with annotations")
    p.add_argument("--report", help="write the full report to this JSON file")
    p.add_argument("--pr", help="write per-class precision-recall points to this CSV")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_opts(p, "eval", [("iou", float, "IoU threshold for box matching")])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("tensor", help="write the coherent tensor representation as PNG")
    p.add_argument("--input", required=True, help="input image")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_opts(p, "tensor", [
        ("m", int, "number of gradient orientations"),
        ("k", int, "number of coherent tensors summed"),
        ("sigma", float, "smoothing sigma"),
        ("radius", int, "smoothing kernel radius"),
    ])
    p.set_defaults(fn=cmd_tensor)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_opts(p, "gradcheck", [
        ("step", float, "central difference step"),
        ("threshold", float, "maximum allowed relative error"),
    ])
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except bb.TrainingDivergedError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
