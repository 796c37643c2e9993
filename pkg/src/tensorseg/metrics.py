"""Detection and segmentation quality metrics.

Box-level: greedy score-ordered matching at an IoU threshold, per-class
average precision (all-points interpolation) and their mean (mAP).
Mask-level: Dice coefficient 2Tp/(2Tp+Fp+Fn) and IoU Tp/(Tp+Fp+Fn) between
the union of predicted masks and the union of rasterized ground-truth
polygons, per image and class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import rasterize_polygon


@dataclass
class GroundTruthItem:
    """One annotated item: class, tight box, optional outline polygon."""

    class_id: int
    bbox: tuple[float, float, float, float]
    polygon: list[tuple[float, float]] | None = None
    image_id: str = ""


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class EvalReport:
    """Per-class AP/DC/IoU with their means and detection-level counts."""

    per_class_ap: dict = field(default_factory=dict)
    per_class_dice: dict = field(default_factory=dict)
    per_class_iou: dict = field(default_factory=dict)
    per_class_counts: dict = field(default_factory=dict)
    mean_ap: float = 0.0
    mean_dice: float | None = None
    mean_iou: float | None = None

    def to_dict(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "per_class": {
                str(c): {
                    "ap": self.per_class_ap.get(c),
                    "dice": self.per_class_dice.get(c),
                    "iou": self.per_class_iou.get(c),
                    "tp": self.per_class_counts[c].tp,
                    "fp": self.per_class_counts[c].fp,
                    "fn": self.per_class_counts[c].fn,
                }
                for c in sorted(self.per_class_counts)
            },
        }


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two masks; both empty counts as 1."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mask_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient 2|A∩B| / (|A| + |B|); both empty counts as 1."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def box_iou(a, b) -> float:
    """IoU of axis-aligned (x, y, w, h) boxes; zero-area union gives 0."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    inter = max(0.0, ix) * max(0.0, iy)
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def match_detections(dets, gts, iou_threshold: float = 0.5):
    """Greedy matching of score-sorted detections to ground truth boxes.

    ``dets`` must be sorted by descending score; each matches the
    highest-IoU still-unmatched ground truth at or above the threshold.
    Returns (per-detection TP flags, number of unmatched ground truths).
    Callers are expected to pass a single image and class at a time.
    """
    scores = [d.score for d in dets]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("detections must be sorted by descending score")
    matched = [False] * len(gts)
    flags = []
    for det in dets:
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = box_iou(det.aabb, gt.bbox)
            if iou > best_iou or (best < 0 and iou >= iou_threshold):
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, matched.count(False)


def average_precision(flags, n_gt: int) -> float | None:
    """Area under the precision-envelope/recall curve.

    ``flags`` are TP/FP indicators ordered by descending score.  Classes
    with no ground truth have undefined AP and return None.
    """
    if n_gt == 0:
        return None
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: running max from the right, integrated over recall
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([1.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, len(mrec)):
        ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return float(ap)


def _class_mask_union(shape, masks) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= m
    return out


def evaluate(
    detections: dict,
    truths: dict,
    class_ids,
    image_sizes: dict,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Full evaluation over a dataset.

    ``detections``/``truths`` map image id to lists of detections and
    GroundTruthItems; ``image_sizes`` maps image id to (H, W) for polygon
    rasterization.  mAP averages AP over classes with at least one ground
    truth; mask scores average per-image Dice/IoU over images where the
    class appears in either prediction or truth.
    """
    class_ids = list(class_ids)
    total_gt = sum(len(v) for v in truths.values())
    if total_gt == 0:
        raise ValueError("evaluation requires at least one ground-truth item")
    image_ids = sorted(set(truths) | set(detections))
    report = EvalReport()

    for c in class_ids:
        scored = []  # (score, image_id, rank within image, tp flag)
        n_gt = 0
        dice_scores = []
        iou_scores = []
        for image_id in image_ids:
            dets = [d for d in detections.get(image_id, []) if d.class_id == c]
            dets.sort(key=lambda d: -d.score)
            gts = [g for g in truths.get(image_id, []) if g.class_id == c]
            n_gt += len(gts)
            flags, _ = match_detections(dets, gts, iou_threshold)
            for rank, (det, flag) in enumerate(zip(dets, flags)):
                scored.append((-det.score, image_id, rank, flag))

            polys = [g.polygon for g in gts if g.polygon is not None]
            if image_id in image_sizes and (dets or polys):
                shape = tuple(image_sizes[image_id])
                pred = _class_mask_union(shape, [d.mask for d in dets])
                gt = _class_mask_union(shape, [rasterize_polygon(p, shape) for p in polys])
                dice_scores.append(mask_dice(pred, gt))
                iou_scores.append(mask_iou(pred, gt))

        scored.sort()
        flags = [f for _, _, _, f in scored]
        ap = average_precision(flags, n_gt)
        tp = sum(flags)
        report.per_class_counts[c] = ConfusionCounts(tp=tp, fp=len(flags) - tp, fn=n_gt - tp)
        if ap is not None:
            report.per_class_ap[c] = ap
        if dice_scores:
            report.per_class_dice[c] = float(np.mean(dice_scores))
            report.per_class_iou[c] = float(np.mean(iou_scores))

    aps = list(report.per_class_ap.values())
    report.mean_ap = float(np.mean(aps)) if aps else 0.0
    if report.per_class_dice:
        report.mean_dice = float(np.mean(list(report.per_class_dice.values())))
        report.mean_iou = float(np.mean(list(report.per_class_iou.values())))
    return report


def precision_recall_points(flags, n_gt: int):
    """(recall, precision) points in score order, for PR-curve dumps."""
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / max(n_gt, 1)
    precision = tp / np.maximum(tp + fp, 1e-12)
    return list(zip(recall.tolist(), precision.tolist()))
