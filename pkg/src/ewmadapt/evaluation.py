"""Detection scoring: IoU matching, NMS, precision/recall/F1, PR curves.

Matching follows the protocol used for the head-detection benchmarks:
a prediction counts only when intersection over union strictly exceeds
the threshold, and extra detections of an already-matched ground truth
box are folded into that one correct prediction rather than punished as
false positives. A ``voc_strict`` switch restores the PASCAL VOC rule
(duplicates count as false positives).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, no_grad, softmax_probs


@dataclass(frozen=True)
class Detection:
    box: tuple  # (x, y, w, h)
    confidence: float


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    duplicates: int = 0
    pairs: list = field(default_factory=list)  # (detection_index, gt_index) per tp

    def __iadd__(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.duplicates += other.duplicates
        return self


def iou(a, b):
    """Intersection over union of two (x, y, w, h) boxes, in [0, 1]."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ContractError(f"iou needs positive extents, got {a} and {b}")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union


def _det_order(detections):
    """Descending confidence; confidence ties broken by lower x, then y."""
    return sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].confidence, detections[i].box[0], detections[i].box[1]),
    )


def nms(detections, iou_thresh=0.3):
    """Greedy non-maximum suppression, keeping higher-confidence boxes."""
    kept = []
    for i in _det_order(detections):
        d = detections[i]
        if all(iou(d.box, k.box) < iou_thresh for k in kept):
            kept.append(d)
    return kept


def match_detections(detections, gt_boxes, iou_thresh=0.5):
    """Greedy matching of detections against ground truth boxes.

    Each detection is assigned to the ground truth of highest IoU,
    matched or not, provided that IoU strictly exceeds ``iou_thresh``.
    The first detection on a ground truth is a true positive; further
    detections on the same box are tallied as duplicates and are neither
    correct nor false. Detections with no qualifying ground truth are
    false positives; unmatched ground truths are false negatives.
    """
    result = MatchResult()
    matched = [False] * len(gt_boxes)
    for i in _det_order(detections):
        d = detections[i]
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gt_boxes):
            v = iou(d.box, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou > iou_thresh:
            if matched[best_j]:
                result.duplicates += 1
            else:
                matched[best_j] = True
                result.tp += 1
                result.pairs.append((i, best_j))
        else:
            result.fp += 1
    result.fn = len(gt_boxes) - result.tp
    return result


def precision_recall_f1(match, voc_strict=False):
    """(precision, recall, F1) from counts; zero denominators give zeros.

    Duplicates stay out of the precision denominator by default; with
    ``voc_strict`` they are charged as false positives.
    """
    fp = match.fp + (match.duplicates if voc_strict else 0)
    p = match.tp / (match.tp + fp) if match.tp + fp > 0 else 0.0
    r = match.tp / (match.tp + match.fn) if match.tp + match.fn > 0 else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float
    f1: float


def pr_curve(detections_per_image, gt_per_image, n_thresholds=101, iou_thresh=0.5, voc_strict=False):
    """Sweep confidence thresholds over [0, 1] and score each operating point.

    ``detections_per_image`` and ``gt_per_image`` are parallel lists; the
    counts are pooled across images at every threshold.
    """
    if n_thresholds < 2:
        raise ContractError(f"need at least 2 thresholds, got {n_thresholds}")
    if len(detections_per_image) != len(gt_per_image):
        raise ContractError("detections and ground truth lists differ in length")
    points = []
    for t in np.linspace(0.0, 1.0, n_thresholds):
        total = MatchResult()
        for dets, gts in zip(detections_per_image, gt_per_image):
            kept = [d for d in dets if d.confidence >= t]
            total += match_detections(kept, gts, iou_thresh)
        p, r, f1 = precision_recall_f1(total, voc_strict)
        points.append(PrPoint(float(t), p, r, f1))
    return points


def best_f1_point(points):
    """Highest-F1 point; ties resolved toward the lowest threshold."""
    best = points[0]
    for pt in points[1:]:
        if pt.f1 > best.f1:
            best = pt
    return best


def write_pr_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f1"])
        for pt in points:
            w.writerow([f"{pt.threshold:.6f}", f"{pt.precision:.6f}", f"{pt.recall:.6f}", f"{pt.f1:.6f}"])


def classification_accuracy(model, x, labels):
    """Fraction of argmax-correct predictions on a labeled set."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("classification_accuracy needs a non-empty set")
    with no_grad():
        logits = model.forward(np.asarray(x, dtype=np.float64)).logits.data
    pred = softmax_probs(logits).argmax(axis=1)
    return float(np.mean(pred == labels))
