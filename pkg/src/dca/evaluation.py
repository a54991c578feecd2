"""Detection metrics: IoU/GIoU, interpolated average precision, class-agnostic
localization recall, recognition accuracy at ground-truth boxes, gap metrics
against a joint-training upper bound, and the per-phase forgetting report.

Detections are (image_id, class_id, score, box) tuples and ground truths are
(image_id, class_id, box) tuples with boxes in normalized (cx, cy, w, h).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BoxError, NumericError
from .semantics import SemanticTable

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))


# -- box geometry -----------------------------------------------------------


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def _validate_box(box) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box[2] <= 0 or box[3] <= 0:
        raise BoxError(f"box {box.tolist()} has non-positive width/height")
    return box


def iou(b1, b2) -> float:
    """IoU of two (cx, cy, w, h) boxes; 0 for disjoint boxes."""
    return float(iou_matrix(_validate_box(b1)[None], _validate_box(b2)[None])[0, 0])


def giou(b1, b2) -> float:
    """Generalized IoU in (-1, 1]; equals IoU when the boxes' hull is their union."""
    return float(giou_matrix(_validate_box(b1)[None], _validate_box(b2)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (N, 4) x (M, 4) cxcywh boxes."""
    inter, union = _inter_union(a, b)
    return inter / np.maximum(union, 1e-12)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64))
    bx = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64))
    inter, union = _inter_union(a, b)
    lo = np.minimum(ax[:, None, :2], bx[None, :, :2])
    hi = np.maximum(ax[:, None, 2:], bx[None, :, 2:])
    hull = np.prod(np.maximum(hi - lo, 0.0), axis=-1)
    iou_vals = inter / np.maximum(union, 1e-12)
    return iou_vals - (hull - union) / np.maximum(hull, 1e-12)


def _inter_union(a, b) -> tuple[np.ndarray, np.ndarray]:
    ax = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64))
    bx = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64))
    lo = np.maximum(ax[:, None, :2], bx[None, :, :2])
    hi = np.minimum(ax[:, None, 2:], bx[None, :, 2:])
    inter = np.prod(np.maximum(hi - lo, 0.0), axis=-1)
    area_a = np.prod(ax[:, 2:] - ax[:, :2], axis=-1)
    area_b = np.prod(bx[:, 2:] - bx[:, :2], axis=-1)
    return inter, area_a[:, None] + area_b[None, :] - inter


# -- average precision --------------------------------------------------------


def _greedy_flags(dets: list, gts: list, iou_threshold: float) -> np.ndarray:
    """TP/FP flags for score-ordered detections of one class.

    Each ground truth is consumed at most once; a detection takes the
    unmatched ground truth of highest IoU >= threshold in its image (lowest
    index on ties).
    """
    taken = [False] * len(gts)
    flags = np.zeros(len(dets), dtype=bool)
    for di, (_, img, box, _) in enumerate(dets):
        best_v, best_j = -1.0, -1
        for j, (gimg, gbox) in enumerate(gts):
            if gimg != img or taken[j]:
                continue
            v = iou_matrix(np.asarray(box)[None], np.asarray(gbox)[None])[0, 0]
            if v >= iou_threshold and v > best_v:  # strict > keeps lowest index on ties
                best_v, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            flags[di] = True
    return flags


def average_precision(detections: Sequence, ground_truths: Sequence,
                      iou_threshold: float = 0.5, recall_points: int = 101) -> dict:
    """Interpolated AP per class (101-point grid by default, 11 for VOC-style).

    Classes without any ground truth are excluded from the result (a warning
    flags them if they carry detections).
    """
    gts_by_class: dict[int, list] = {}
    for img, cid, box in ground_truths:
        gts_by_class.setdefault(int(cid), []).append((img, box))
    det_classes = {int(d[1]) for d in detections}
    ghost = det_classes - set(gts_by_class)
    if ghost:
        warnings.warn(f"classes {sorted(ghost)} have detections but no ground truth; "
                      "excluded from AP")
    out: dict[int, float] = {}
    grid = np.linspace(0.0, 1.0, recall_points)
    for cid, gts in sorted(gts_by_class.items()):
        dets = [(float(s), img, box, i)
                for i, (img, c, s, box) in enumerate(detections) if int(c) == cid]
        dets.sort(key=lambda r: (-r[0], r[3]))
        if not dets:
            out[cid] = 0.0
            continue
        flags = _greedy_flags(dets, gts, iou_threshold)
        tp = np.cumsum(flags)
        fp = np.cumsum(~flags)
        recall = tp / len(gts)
        precision = tp / np.maximum(tp + fp, 1)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, grid, side="left")
        interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
        out[cid] = float(interp.mean())
    return out


def mean_average_precision(detections, ground_truths,
                           thresholds=COCO_THRESHOLDS, recall_points: int = 101) -> float:
    """AP averaged over classes and IoU thresholds (COCO style)."""
    values = []
    for thr in thresholds:
        per_class = average_precision(detections, ground_truths, thr, recall_points)
        if per_class:
            values.append(float(np.mean(list(per_class.values()))))
    return float(np.mean(values)) if values else 0.0


# -- recall / recognition accuracy -------------------------------------------


def class_agnostic_recall(pred_boxes_per_image: Sequence[np.ndarray],
                          gt_boxes_per_image: Sequence[np.ndarray],
                          iou_threshold: float = 0.5):
    """Fraction of ground-truth boxes covered by any predicted box.

    Labels are ignored; matching is greedy one-to-one by descending IoU
    (ties broken by prediction index, then ground-truth index). Returns None
    when there is no ground truth at all.
    """
    total, hit = 0, 0
    for preds, gts in zip(pred_boxes_per_image, gt_boxes_per_image):
        preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        total += len(gts)
        if len(preds) == 0 or len(gts) == 0:
            continue
        scores = iou_matrix(preds, gts)
        while True:
            i, j = np.unravel_index(np.argmax(scores), scores.shape)
            if scores[i, j] < iou_threshold:
                break
            hit += 1
            scores[i, :] = -1.0
            scores[:, j] = -1.0
    if total == 0:
        return None
    return hit / total


def recognition_accuracy(query_boxes_per_image: Sequence[np.ndarray],
                         probs_per_image: Sequence[np.ndarray],
                         gt_per_image: Sequence[tuple],
                         eval_class_ids, column_class_ids):
    """Recognition isolated from localization.

    Every ground-truth box with a class in `eval_class_ids` is assigned the
    query whose predicted box overlaps it most; the prediction is correct
    when the argmax over that query's fused probabilities names the ground
    truth class. Returns None when no qualifying ground truth exists.
    """
    eval_set = set(int(c) for c in eval_class_ids)
    columns = np.asarray(list(column_class_ids), dtype=np.int64)
    total, correct = 0, 0
    for boxes, probs, (gt_classes, gt_boxes) in zip(
            query_boxes_per_image, probs_per_image, gt_per_image):
        keep = [k for k, c in enumerate(gt_classes) if int(c) in eval_set]
        if not keep:
            continue
        overlap = iou_matrix(np.asarray(boxes), np.asarray(gt_boxes)[keep])
        best_query = np.argmax(overlap, axis=0)
        for row, k in enumerate(keep):
            total += 1
            predicted = columns[int(np.argmax(probs[best_query[row]]))]
            if predicted == int(gt_classes[k]):
                correct += 1
    if total == 0:
        return None
    return correct / total


def gap_metrics(final_metric: float, upper_bound_metric: float) -> tuple[float, float]:
    """Absolute and relative shortfall versus the joint-training upper bound."""
    if upper_bound_metric <= 0:
        raise NumericError("upper-bound metric must be positive")
    abs_gap = upper_bound_metric - final_metric
    return abs_gap, abs_gap / upper_bound_metric


# -- model-level evaluation ----------------------------------------------------


@dataclass
class EvalReport:
    per_class_ap: dict
    map50: float
    map_coco: float
    class_agnostic_recall: float | None
    old_class_accuracy: float | None = None
    abs_gap: float | None = None
    rel_gap: float | None = None

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "map50": self.map50,
            "map_coco": self.map_coco,
            "class_agnostic_recall": self.class_agnostic_recall,
            "old_class_accuracy": self.old_class_accuracy,
            "abs_gap": self.abs_gap,
            "rel_gap": self.rel_gap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _batched_outputs(state, table: SemanticTable, samples, batch_size: int = 16,
                     beta: float | None = None):
    from . import detector

    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        images = np.stack([s.image for s in chunk])
        out = detector.forward(state, images, table, beta=beta)
        for i, sample in enumerate(chunk):
            yield sample, out.image(i)


def model_predictions(state, table: SemanticTable, samples, top_k: int = 50,
                      batch_size: int = 16, beta: float | None = None):
    """Detections plus per-image raw query boxes and fused probabilities."""
    from . import detector

    detections, query_boxes, query_probs = [], [], []
    for sample, out in _batched_outputs(state, table, samples, batch_size, beta):
        for det in detector.postprocess(out, top_k, class_ids=state.visible_class_ids):
            detections.append((sample.sample_id, det.class_id, det.score, det.box))
        query_boxes.append(out.boxes.data.copy())
        query_probs.append(out.p.data.copy())
    return detections, query_boxes, query_probs


def evaluate_model(state, table: SemanticTable, samples, old_class_ids=None,
                   top_k: int = 50, batch_size: int = 16,
                   beta: float | None = None) -> EvalReport:
    """Full report over held-out samples annotated for all seen classes."""
    detections, query_boxes, query_probs = model_predictions(
        state, table, samples, top_k, batch_size, beta)
    ground_truths = [(s.sample_id, ann.class_id, np.asarray(ann.box))
                     for s in samples for ann in s.annotations]
    per_class = average_precision(detections, ground_truths, 0.5)
    map50 = float(np.mean(list(per_class.values()))) if per_class else 0.0
    map_coco = mean_average_precision(detections, ground_truths)
    recall = class_agnostic_recall(
        query_boxes, [np.asarray([ann.box for ann in s.annotations]) for s in samples])
    old_acc = None
    if old_class_ids:
        gt_pairs = [([ann.class_id for ann in s.annotations],
                     [ann.box for ann in s.annotations]) for s in samples]
        old_acc = recognition_accuracy(query_boxes, query_probs, gt_pairs,
                                       old_class_ids, state.visible_class_ids)
    return EvalReport(per_class_ap=per_class, map50=map50, map_coco=map_coco,
                      class_agnostic_recall=recall, old_class_accuracy=old_acc)


def old_class_accuracy(state, table: SemanticTable, samples, old_class_ids,
                       batch_size: int = 16):
    """Recognition accuracy at ground-truth box locations for old classes."""
    _, query_boxes, query_probs = model_predictions(
        state, table, samples, top_k=1, batch_size=batch_size)
    gt_pairs = [([ann.class_id for ann in s.annotations],
                 [ann.box for ann in s.annotations]) for s in samples]
    return recognition_accuracy(query_boxes, query_probs, gt_pairs,
                                old_class_ids, state.visible_class_ids)


# -- forgetting analysis --------------------------------------------------------


def _subset_recall(query_boxes, samples, class_ids, iou_threshold=0.5):
    wanted = set(int(c) for c in class_ids)
    gt = [np.asarray([ann.box for ann in s.annotations if ann.class_id in wanted])
          for s in samples]
    if sum(len(g) for g in gt) == 0:
        return None
    return class_agnostic_recall(query_boxes, gt, iou_threshold)


def forgetting_report(checkpoint_paths: Sequence, eval_samples, protocol, table,
                      batch_size: int = 16, feature_cap: int = 20):
    """Per-phase localization-vs-recognition forgetting measurements.

    For every checkpoint: class-agnostic recall on seen / old / future class
    ground truth, recognition accuracy on seen and old classes, and deltas
    against the previous phase. Also samples location/class embedding rows
    (labelled by the ground-truth class of their best-overlap box) for
    external feature-space plotting.
    """
    from . import detector

    rows, feature_rows = [], []
    prev = None
    for path in checkpoint_paths:
        state = detector.load_state(path)
        t = state.phase
        seen = protocol.visible_classes(t)
        old = protocol.visible_classes(t - 1) if t > 1 else []
        future = protocol.future_classes(t)

        query_boxes, query_probs = [], []
        e_local_rows, e_cls_rows = [], []
        per_class_count: dict[int, int] = {}
        gt_pairs = []
        for sample, out in _batched_outputs(state, table, eval_samples, batch_size):
            query_boxes.append(out.boxes.data.copy())
            query_probs.append(out.p.data.copy())
            classes = [ann.class_id for ann in sample.annotations]
            boxes = [ann.box for ann in sample.annotations]
            gt_pairs.append((classes, boxes))
            overlap = iou_matrix(out.boxes.data, np.asarray(boxes))
            for k, cid in enumerate(classes):
                if per_class_count.get(cid, 0) >= feature_cap:
                    continue
                per_class_count[cid] = per_class_count.get(cid, 0) + 1
                q = int(np.argmax(overlap[:, k]))
                e_local_rows.append((t, "local", cid, out.e_local.data[q]))
                e_cls_rows.append((t, "cls", cid, out.e_cls.data[q]))

        row = {
            "phase": t,
            "recall_seen": _subset_recall(query_boxes, eval_samples, seen),
            "recall_old": _subset_recall(query_boxes, eval_samples, old) if old else None,
            "recall_future": _subset_recall(query_boxes, eval_samples, future)
            if future else None,
            "acc_seen": recognition_accuracy(query_boxes, query_probs, gt_pairs,
                                             seen, state.visible_class_ids),
            "acc_old": recognition_accuracy(query_boxes, query_probs, gt_pairs,
                                            old, state.visible_class_ids)
            if old else None,
        }
        row["delta_recall_old"] = (
            row["recall_old"] - prev["recall_seen"]
            if prev is not None and row["recall_old"] is not None
            and prev["recall_seen"] is not None else None)
        row["delta_acc_old"] = (
            row["acc_old"] - prev["acc_seen"]
            if prev is not None and row["acc_old"] is not None
            and prev["acc_seen"] is not None else None)
        rows.append(row)
        feature_rows.extend(e_local_rows)
        feature_rows.extend(e_cls_rows)
        prev = row
    return rows, feature_rows


def write_forgetting_csv(rows, path) -> None:
    import csv

    columns = ["phase", "recall_seen", "recall_old", "recall_future",
               "acc_seen", "acc_old", "delta_recall_old", "delta_acc_old"]
    def cell(row, col):
        if row[col] is None:
            return ""
        return row[col] if col == "phase" else repr(float(row[col]))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([cell(row, c) for c in columns])


def write_feature_csv(feature_rows, path) -> None:
    import csv

    if not feature_rows:
        dim = 0
    else:
        dim = len(feature_rows[0][3])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "kind", "class_id"] + [f"dim_{i}" for i in range(dim)])
        for phase, kind, cid, vec in feature_rows:
            writer.writerow([phase, kind, cid] + [repr(float(v)) for v in vec])
