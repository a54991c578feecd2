"""Bipartite matching, the set-prediction detection loss, the semantic
consistency loss, pseudo-labeling from a frozen old model, and the hybrid
knowledge distillation terms (output-level plus masked feature-level).

Loss functions consume autodiff Tensors so gradients flow back through the
detector; costs and assignments operate on plain arrays and never enter the
tape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .detector import ForwardOutput, ModelState, forward, postprocess
from .errors import ConfigurationError, NumericError, ShapeError
from .evaluation import giou_matrix, iou_matrix
from .semantics import SemanticTable

BCE_EPS = 1e-12


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


DEFAULT_WEIGHTS = MatchWeights()


@dataclass
class MatchAssignment:
    pairs: list  # (query index, target index), sorted by query index
    unmatched_queries: set


@dataclass
class Targets:
    """Per-image matching targets; `columns` index the model's P columns."""

    columns: np.ndarray        # (G,) int
    boxes: np.ndarray          # (G, 4) cxcywh
    n_real: int = -1           # targets beyond this index are pseudo labels

    def __post_init__(self):
        self.columns = np.asarray(self.columns, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.n_real < 0:
            self.n_real = len(self.columns)


@dataclass
class PseudoLabelSet:
    boxes: np.ndarray          # (M, 4)
    class_ids: np.ndarray      # (M,) global taxonomy ids, old classes only
    scores: np.ndarray         # (M,)
    source_query: np.ndarray   # (M,) query index in the old model

    def __len__(self):
        return len(self.class_ids)

    @classmethod
    def empty(cls) -> "PseudoLabelSet":
        return cls(boxes=np.zeros((0, 4)), class_ids=np.zeros(0, dtype=np.int64),
                   scores=np.zeros(0), source_query=np.zeros(0, dtype=np.int64))


@dataclass
class LossBreakdown:
    l_det: float = 0.0
    l_cls: float = 0.0
    l_box_l1: float = 0.0
    l_box_giou: float = 0.0
    l_cons: float = 0.0
    l_kd_out: float = 0.0
    l_kd_vis: float = 0.0
    l_kd_proj: float = 0.0
    l_total: float = 0.0

    FIELDS = ("l_det", "l_cls", "l_box_l1", "l_box_giou", "l_cons",
              "l_kd_out", "l_kd_vis", "l_kd_proj", "l_total")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


# -- bipartite matching -------------------------------------------------------


def match_cost(p_probs, boxes, targets: Targets,
               weights: MatchWeights = DEFAULT_WEIGHTS) -> np.ndarray:
    """(N, G) assignment costs: -w_cls * P[i, c_j] + w_l1 * L1 + w_iou * (1 - GIoU)."""
    p = p_probs.data if isinstance(p_probs, Tensor) else np.asarray(p_probs)
    b = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes)
    if len(targets.columns) == 0:
        return np.zeros((p.shape[0], 0))
    cls_term = -p[:, targets.columns]
    l1_term = np.abs(b[:, None, :] - targets.boxes[None, :, :]).sum(axis=-1)
    giou_term = 1.0 - giou_matrix(b, targets.boxes)
    return weights.cls * cls_term + weights.l1 * l1_term + weights.giou * giou_term


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective assignment; |pairs| = min(N, G)."""
    cost = np.asarray(cost, dtype=np.float64)
    if np.isnan(cost).any():
        raise NumericError("cost matrix contains NaN")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {q for q, _ in pairs}
    return MatchAssignment(pairs=pairs,
                           unmatched_queries=set(range(cost.shape[0])) - matched)


# -- detection loss -----------------------------------------------------------


def _as_batched(output: ForwardOutput, targets, assignments):
    if output.p.ndim == 2:
        return ([targets] if isinstance(targets, Targets) else targets,
                [assignments] if isinstance(assignments, MatchAssignment)
                else assignments, True)
    return targets, assignments, False


def giou_pairs(pred: Tensor, target: Tensor) -> Tensor:
    """Differentiable elementwise GIoU for aligned (M, 4) cxcywh boxes."""

    def corners(t):
        cx, cy = t[:, 0:1], t[:, 1:2]
        hw, hh = t[:, 2:3] * 0.5, t[:, 3:4] * 0.5
        return cx - hw, cy - hh, cx + hw, cy + hh

    ax1, ay1, ax2, ay2 = corners(pred)
    bx1, by1, bx2, by2 = corners(target)
    iw = ad.relu(ad.minimum(ax2, bx2) - ad.maximum(ax1, bx1))
    ih = ad.relu(ad.minimum(ay2, by2) - ad.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    iou = inter / union
    hull = (ad.maximum(ax2, bx2) - ad.minimum(ax1, bx1)) \
        * (ad.maximum(ay2, by2) - ad.minimum(ay1, by1))
    out = iou - (hull - union) / hull
    return out.reshape((-1,))


def detection_loss(output: ForwardOutput, targets, assignments,
                   weights: MatchWeights = DEFAULT_WEIGHTS, focal: bool = False):
    """Set-prediction loss on the fused probabilities and matched boxes.

    Classification is per-class sigmoid BCE against one-hot rows for matched
    queries and all-zero rows for unmatched ("no object") queries, normalized
    by the query count. Box L1/GIoU penalties apply to matched queries only
    and are normalized by the match count. `focal=True` swaps the BCE for the
    focal variant (alpha 0.25, gamma 2, weighted and normalized by matches,
    the detection-transformer convention).
    """
    targets, assignments, _ = _as_batched(output, targets, assignments)
    p = output.p if output.p.ndim == 3 else output.p.reshape((1,) + output.p.shape)
    boxes = output.boxes if output.boxes.ndim == 3 \
        else output.boxes.reshape((1,) + output.boxes.shape)
    return _detection_loss_terms(p, boxes, targets, assignments, weights, focal)


FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def _detection_loss_terms(p: Tensor, boxes: Tensor, targets, assignments,
                          weights: MatchWeights, focal: bool = False):
    b, n, k = p.shape
    onehot = np.zeros((b, n, k))
    b_idx, q_idx, t_boxes = [], [], []
    for bi, (tgt, asg) in enumerate(zip(targets, assignments)):
        for q, j in asg.pairs:
            onehot[bi, q, tgt.columns[j]] = 1.0
            b_idx.append(bi)
            q_idx.append(q)
            t_boxes.append(tgt.boxes[j])
    m = len(b_idx)
    pc = ad.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    if focal:
        pos = ad.log(pc) * ((1.0 - pc) * (1.0 - pc)) * (FOCAL_ALPHA * onehot)
        neg = ad.log(1.0 - pc) * (pc * pc) * ((1.0 - FOCAL_ALPHA) * (1.0 - onehot))
        l_cls = (pos + neg).sum() * (-weights.cls / max(m, 1))
    else:
        bce = ad.log(pc) * onehot + ad.log(1.0 - pc) * (1.0 - onehot)
        l_cls = bce.sum() * (-1.0 / (b * n))
    if b_idx:
        pred = boxes[np.asarray(b_idx), np.asarray(q_idx)]
        ref = Tensor(np.asarray(t_boxes))
        l_l1 = ad.absolute(pred - ref).sum() * (weights.l1 / m)
        l_giou = (1.0 - giou_pairs(pred, ref)).sum() * (weights.giou / m)
    else:
        l_l1, l_giou = Tensor(0.0), Tensor(0.0)
    return l_cls, l_l1, l_giou


# -- semantic consistency -------------------------------------------------------


def consistency_loss(q_se_adapted, e_se_list) -> Tensor:
    """Sum over blocks of the mean per-class cosine gap to the semantic anchors.

    Zero-norm rows would make the cosine undefined; they are treated as
    cosine 0 and flagged with a warning.
    """
    if not e_se_list:
        return Tensor(0.0)
    anchors = q_se_adapted if isinstance(q_se_adapted, Tensor) else Tensor(q_se_adapted)
    total = None
    for e_se in e_se_list:
        term = 1.0 - _cosine_rows(anchors, e_se)
        layer_mean = term.mean()
        total = layer_mean if total is None else total + layer_mean
    return total


def _cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    tiny = 1e-12
    if np.any(np.linalg.norm(a.data, axis=-1) < tiny) \
            or np.any(np.linalg.norm(b.data, axis=-1) < tiny):
        warnings.warn("zero-norm vector in cosine; treating its similarity as 0")
    dot = (a * b).sum(axis=-1)
    na = ad.maximum(ad.sqrt((a * a).sum(axis=-1)), tiny)
    nb = ad.maximum(ad.sqrt((b * b).sum(axis=-1)), tiny)
    return dot / (na * nb)


# -- pseudo labels ----------------------------------------------------------------


def pseudo_labels_from_output(single_output: ForwardOutput, old_class_ids,
                              score_threshold: float = 0.4,
                              current_gt_boxes=None, overlap_iou: float = 0.7,
                              top_k: int = 50) -> PseudoLabelSet:
    """Confident old-model detections, minus any that sit on current ground truth."""
    if not 0.0 < score_threshold < 1.0:
        raise ConfigurationError("pseudo-label threshold must lie in (0, 1)")
    dets = [d for d in postprocess(single_output, top_k, class_ids=list(old_class_ids))
            if d.score >= score_threshold]
    if current_gt_boxes is not None and len(current_gt_boxes) and dets:
        overlap = iou_matrix(np.asarray([d.box for d in dets]),
                             np.asarray(current_gt_boxes))
        dets = [d for d, row in zip(dets, overlap) if row.max() <= overlap_iou]
    if not dets:
        return PseudoLabelSet.empty()
    return PseudoLabelSet(
        boxes=np.asarray([d.box for d in dets]),
        class_ids=np.asarray([d.class_id for d in dets], dtype=np.int64),
        scores=np.asarray([d.score for d in dets]),
        source_query=np.asarray([d.query_index for d in dets], dtype=np.int64),
    )


def pseudo_label(old_state: ModelState | None, image, table: SemanticTable,
                 score_threshold: float = 0.4, current_gt_boxes=None,
                 overlap_iou: float = 0.7, top_k: int = 50) -> PseudoLabelSet:
    """Run the frozen old model on one image and harvest pseudo labels."""
    if old_state is None:
        return PseudoLabelSet.empty()
    out = forward(old_state, image, table)
    return pseudo_labels_from_output(out, old_state.visible_class_ids,
                                     score_threshold, current_gt_boxes,
                                     overlap_iou, top_k)


# -- hybrid knowledge distillation -------------------------------------------------


def kd_output_loss(new_output: ForwardOutput, old_output: ForwardOutput,
                   fg_pairs, n_old_classes: int,
                   weights: MatchWeights = DEFAULT_WEIGHTS) -> Tensor:
    """Output-level distillation on queries the old model marked as foreground.

    Per selected query: mean squared error between new and old probabilities
    over the old classes, plus the weighted L1/GIoU box penalty between the
    two predicted boxes. Queries are paired by index (the location queries
    are the same learned objects in both snapshots).
    """
    if not fg_pairs:
        return Tensor(0.0)
    b_idx = np.asarray([b for b, _ in fg_pairs])
    q_idx = np.asarray([q for _, q in fg_pairs])
    m = len(fg_pairs)
    p_new = _batched_tensor(new_output.p)[b_idx, q_idx][:, :n_old_classes]
    p_old = _batched_array(old_output.p)[b_idx, q_idx][:, :n_old_classes]
    diff = p_new - Tensor(p_old)
    mse = (diff * diff).sum() * (1.0 / (m * n_old_classes))
    b_new = _batched_tensor(new_output.boxes)[b_idx, q_idx]
    b_old = Tensor(_batched_array(old_output.boxes)[b_idx, q_idx])
    l1 = ad.absolute(b_new - b_old).sum() * (weights.l1 / m)
    gi = (1.0 - giou_pairs(b_new, b_old)).sum() * (weights.giou / m)
    return mse + l1 + gi


def _batched_tensor(t: Tensor) -> Tensor:
    return t if t.ndim == 3 else t.reshape((1,) + t.shape)


def _batched_array(t: Tensor) -> np.ndarray:
    return t.data if t.data.ndim == 3 else t.data[None]


def masked_feature_distill(f_new, f_old, mask, n_old: int) -> Tensor:
    """(1 / N_old) * sum over masked positions of the featurewise L1 distance."""
    if n_old == 0:
        return Tensor(0.0)
    new_t = f_new if isinstance(f_new, Tensor) else Tensor(f_new)
    old_a = f_old.data if isinstance(f_old, Tensor) else np.asarray(f_old)
    if new_t.shape != old_a.shape:
        raise ShapeError(f"feature shapes differ: {new_t.shape} vs {old_a.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != new_t.shape[:mask.ndim]:
        raise ShapeError(f"mask shape {mask.shape} does not prefix {new_t.shape}")
    if not mask.any():
        return Tensor(0.0)
    per_pos = ad.absolute(new_t - Tensor(old_a)).sum(axis=-1)
    return (per_pos * mask).sum() * (1.0 / n_old)


def token_mask_for_boxes(grid_h: int, grid_w: int, boxes: np.ndarray) -> np.ndarray:
    """Flags feature tokens whose receptive centers fall inside any box."""
    mask = np.zeros(grid_h * grid_w, dtype=bool)
    if len(boxes) == 0:
        return mask
    ys = (np.arange(grid_h) + 0.5) / grid_h
    xs = (np.arange(grid_w) + 0.5) / grid_w
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=-1)
    for cx0, cy0, w, h in np.asarray(boxes).reshape(-1, 4):
        inside = (np.abs(centers[:, 0] - cx0) <= w / 2.0) \
            & (np.abs(centers[:, 1] - cy0) <= h / 2.0)
        mask |= inside
    return mask


# -- total loss ---------------------------------------------------------------------


def total_loss(terms: dict, phase: int):
    """Assemble the overall objective and its logged breakdown.

    `terms` maps {"cls", "box_l1", "box_giou", "cons", "kd_out", "kd_vis",
    "kd_proj"} to Tensors (missing/None entries count as zero). In the base
    phase every distillation term is forced to zero. Returns the total as a
    Tensor for backprop plus the float LossBreakdown.
    """
    def get(name):
        v = terms.get(name)
        return v if v is not None else Tensor(0.0)

    cls_t, l1_t, giou_t = get("cls"), get("box_l1"), get("box_giou")
    cons_t = get("cons")
    if phase <= 1:
        kd_terms = {"kd_out": Tensor(0.0), "kd_vis": Tensor(0.0),
                    "kd_proj": Tensor(0.0)}
    else:
        kd_terms = {name: get(name) for name in ("kd_out", "kd_vis", "kd_proj")}
    total = cls_t + l1_t + giou_t + cons_t \
        + kd_terms["kd_out"] + kd_terms["kd_vis"] + kd_terms["kd_proj"]

    values = {
        "l_cls": float(cls_t.data), "l_box_l1": float(l1_t.data),
        "l_box_giou": float(giou_t.data), "l_cons": float(cons_t.data),
        "l_kd_out": float(kd_terms["kd_out"].data),
        "l_kd_vis": float(kd_terms["kd_vis"].data),
        "l_kd_proj": float(kd_terms["kd_proj"].data),
    }
    for name, value in values.items():
        if not np.isfinite(value):
            raise NumericError(f"loss term {name} is not finite ({value})")
    breakdown = LossBreakdown(
        l_det=values["l_cls"] + values["l_box_l1"] + values["l_box_giou"],
        l_cons=values["l_cons"], l_kd_out=values["l_kd_out"],
        l_kd_vis=values["l_kd_vis"], l_kd_proj=values["l_kd_proj"],
        l_total=float(total.data), **{k: values[k] for k in
                                      ("l_cls", "l_box_l1", "l_box_giou")})
    return total, breakdown
