"""Independent oracles and checking utilities shared across the test suite.

These deliberately avoid the library's own computation paths: gradients are
verified by central finite differences, assignments by exhaustive permutation
search, and average precision by a from-scratch prefix-rescan PR curve.
"""

from __future__ import annotations

import itertools

import numpy as np

from dca.autodiff import Tensor


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(fn, arrays: dict, rng, samples_per_param: int = 3,
                            h: float = 1e-6, rel_tol: float = 1e-4,
                            abs_tol: float = 1e-7):
    """Compare analytic gradients of `fn` against central differences.

    `fn` maps {name: ndarray} -> scalar Tensor and must rebuild its graph on
    every call. Returns a list of (name, index, numeric, analytic, rel)
    mismatches; empty means every sampled coordinate agrees within rel_tol
    (absolute differences below abs_tol count as agreement -- they are
    indistinguishable from central-difference roundoff).
    """
    # own fresh buffers: perturbation must survive 0-d scalar coercion
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    bound = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    out = fn(bound)
    out.backward()
    failures = []
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        count = min(samples_per_param, flat.size)
        idxs = rng.choice(flat.size, size=count, replace=False)
        grad = bound[name].grad
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(fn({k: Tensor(v) for k, v in arrays.items()}).data)
            flat[idx] = orig - h
            down = float(fn({k: Tensor(v) for k, v in arrays.items()}).data)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = 0.0 if grad is None else float(grad.reshape(-1)[idx])
            rel = rel_err(numeric, analytic)
            if rel > rel_tol and abs(numeric - analytic) > abs_tol:
                failures.append((name, int(idx), numeric, analytic, rel))
    return failures


def brute_force_assignment(cost: np.ndarray):
    """Exhaustive minimum-cost injective assignment (small matrices only)."""
    n, g = cost.shape
    best_cost, best_pairs = np.inf, None
    if n >= g:
        for rows in itertools.permutations(range(n), g):
            total = sum(cost[r, c] for c, r in enumerate(rows))
            if total < best_cost:
                best_cost = total
                best_pairs = sorted((r, c) for c, r in enumerate(rows))
    else:
        for cols in itertools.permutations(range(g), n):
            total = sum(cost[r, c] for r, c in enumerate(cols))
            if total < best_cost:
                best_cost = total
                best_pairs = sorted((r, c) for r, c in enumerate(cols))
    return best_cost, best_pairs


def _iou_xyxy_free(box_a, box_b) -> float:
    """Scalar IoU written independently of the library's vectorized path."""
    acx, acy, aw, ah = box_a
    bcx, bcy, bw, bh = box_b
    ax1, ax2 = acx - aw / 2, acx + aw / 2
    ay1, ay2 = acy - ah / 2, acy + ah / 2
    bx1, bx2 = bcx - bw / 2, bcx + bw / 2
    by1, by2 = bcy - bh / 2, bcy + bh / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def brute_force_ap(detections, ground_truths, iou_threshold: float = 0.5,
                   recall_points: int = 101):
    """From-scratch interpolated AP per class.

    For every prefix of the score-ordered detections the TP/FP counts are
    recomputed by a fresh greedy matching pass (no cumulative-sum shortcut),
    and the interpolation maximum is an explicit scan over the PR points.
    """
    classes = sorted({int(c) for _, c, _ in ground_truths})
    grid = np.linspace(0.0, 1.0, recall_points)
    out = {}
    for cid in classes:
        gts = [(img, box) for img, c, box in ground_truths if int(c) == cid]
        dets = [(float(s), img, box, i)
                for i, (img, c, s, box) in enumerate(detections) if int(c) == cid]
        dets.sort(key=lambda r: (-r[0], r[3]))
        points = []
        for cut in range(1, len(dets) + 1):
            taken = [False] * len(gts)
            tp = 0
            for _, img, box, _ in dets[:cut]:
                best_v, best_j = -1.0, -1
                for j, (gimg, gbox) in enumerate(gts):
                    if gimg != img or taken[j]:
                        continue
                    v = _iou_xyxy_free(box, gbox)
                    if v >= iou_threshold and v > best_v:
                        best_v, best_j = v, j
                if best_j >= 0:
                    taken[best_j] = True
                    tp += 1
            points.append((tp / len(gts), tp / cut))
        total = 0.0
        for r in grid:
            candidates = [p for rec, p in points if rec >= r]
            total += max(candidates) if candidates else 0.0
        out[cid] = total / recall_points
    return out
