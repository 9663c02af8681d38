"""TuSimple vertex accuracy and CULane-style IoU F1."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datagen import ABSENT, LaneLabel


@dataclass
class MetricReport:
    accuracy: float | None = None  # TuSimple only
    fp_rate: float = 0.0
    fn_rate: float = 0.0
    precision: float = 1.0
    recall: float = 1.0
    f1: float = 1.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        rows = [
            ("accuracy", "n/a" if self.accuracy is None else f"{self.accuracy:.4f}"),
            ("fp_rate", f"{self.fp_rate:.4f}"),
            ("fn_rate", f"{self.fn_rate:.4f}"),
            ("precision", f"{self.precision:.4f}"),
            ("recall", f"{self.recall:.4f}"),
            ("f1", f"{self.f1:.4f}"),
            ("tp / fp / fn", f"{self.tp} / {self.fp} / {self.fn}"),
            ("images", str(len(self.per_image))),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # no predictions and no ground truth counts as perfect
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _greedy_pairs(score: np.ndarray, minimum: float) -> list[tuple[int, int]]:
    """Repeatedly take the best remaining (row, col); scores must exceed ``minimum``.

    Ties go to the lowest (row, col) in row-major order.
    """
    pairs = []
    if score.size == 0:
        return pairs
    s = score.astype(np.float64).copy()
    while True:
        k = int(np.argmax(s))
        i, j = divmod(k, s.shape[1])
        if not s[i, j] > minimum:
            break
        pairs.append((i, j))
        s[i, :] = -np.inf
        s[:, j] = -np.inf
    return pairs


def tusimple_eval(
    preds: list[LaneLabel],
    gts: list[LaneLabel],
    px_thresh: float = 20.0,
    lane_acc_thresh: float = 0.85,
) -> MetricReport:
    """Vertex accuracy with lane-level FP / FN.

    ``preds[k]`` must be sampled on ``gts[k].h_samples`` (see ``decode.to_label``).
    A predicted vertex is correct when |x_pred - x_gt| < px_thresh at a row where
    the ground truth exists. Lanes are paired greedily by correct-vertex count;
    a pair below ``lane_acc_thresh`` counts as one FP and one FN.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    n_correct = n_gt_pts = n_pred = n_gt = fp = fn = 0
    per_image = []
    for pred, gt in zip(preds, gts):
        if list(pred.h_samples) != list(gt.h_samples):
            raise ValueError(f"{gt.raw_file or 'image'}: prediction is on a different h_samples grid")
        p_lanes = [np.asarray(l) for l in pred.lanes if any(x != ABSENT for x in l)]
        g_lanes = [np.asarray(l) for l in gt.lanes if any(x != ABSENT for x in l)]
        correct = np.zeros((len(p_lanes), len(g_lanes)), dtype=np.int64)
        for i, p in enumerate(p_lanes):
            for j, g in enumerate(g_lanes):
                ok = (g != ABSENT) & (p != ABSENT) & (np.abs(p - g) < px_thresh)
                correct[i, j] = int(ok.sum())
        img_correct = img_fp = img_fn = 0
        matched_p, matched_g = set(), set()
        for i, j in _greedy_pairs(correct, 0):
            matched_p.add(i)
            matched_g.add(j)
            img_correct += int(correct[i, j])
            if correct[i, j] / int((g_lanes[j] != ABSENT).sum()) < lane_acc_thresh:
                img_fp += 1
                img_fn += 1
        img_fp += len(p_lanes) - len(matched_p)
        img_fn += len(g_lanes) - len(matched_g)
        img_gt_pts = int(sum((g != ABSENT).sum() for g in g_lanes))
        per_image.append(
            {
                "raw_file": gt.raw_file,
                "correct": img_correct,
                "gt_vertices": img_gt_pts,
                "pred_lanes": len(p_lanes),
                "gt_lanes": len(g_lanes),
                "fp": img_fp,
                "fn": img_fn,
            }
        )
        n_correct += img_correct
        n_gt_pts += img_gt_pts
        n_pred += len(p_lanes)
        n_gt += len(g_lanes)
        fp += img_fp
        fn += img_fn
    tp = n_pred - fp
    precision, recall, f1 = _prf(tp, fp, fn)
    return MetricReport(
        accuracy=n_correct / n_gt_pts if n_gt_pts else 1.0,
        fp_rate=fp / n_pred if n_pred else 0.0,
        fn_rate=fn / n_gt if n_gt else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp,
        fp=fp,
        fn=fn,
        per_image=per_image,
    )


def render_lane_mask(
    lane: list[tuple[float, float]], image_hw: tuple[int, int], width: float = 30.0
) -> np.ndarray:
    """Binary raster of a polyline thickened to ``width`` pixels.

    Pixel (r, c) is set when its centre (c + 0.5, r + 0.5) is closer than
    width / 2 to the polyline. Segment ends are flat (perpendicular cut); interior
    joints are rounded so bends leave no gaps.
    """
    h, w = image_hw
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(lane, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return mask
    half = width / 2.0
    cy, cx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if len(pts) == 1:
        x, y = pts[0]
        return (cx - x) ** 2 + (cy - y) ** 2 < half * half
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        if seg2 == 0:
            continue
        # restrict work to the segment's bounding box
        r0 = max(int(np.floor(min(y0, y1) - half)), 0)
        r1 = min(int(np.ceil(max(y0, y1) + half)) + 1, h)
        c0 = max(int(np.floor(min(x0, x1) - half)), 0)
        c1 = min(int(np.ceil(max(x0, x1) + half)) + 1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        px = cx[r0:r1, c0:c1] - x0
        py = cy[r0:r1, c0:c1] - y0
        t = (px * dx + py * dy) / seg2
        perp = np.abs(px * dy - py * dx) / np.sqrt(seg2)
        mask[r0:r1, c0:c1] |= (t >= 0) & (t <= 1) & (perp < half)
    for x, y in pts[1:-1]:
        mask |= (cx - x) ** 2 + (cy - y) ** 2 < half * half
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def culane_eval(
    preds: list[list[list[tuple[float, float]]]],
    gts: list[list[list[tuple[float, float]]]],
    image_hw: tuple[int, int],
    iou_thresh: float = 0.5,
    width: float = 30.0,
    matching: str = "greedy",
) -> MetricReport:
    """Lane-level detection F1: pairs matched by IoU, TP when IoU > iou_thresh.

    ``preds`` and ``gts`` are per image lists of vertex lists (x, y) in original
    image coordinates. ``matching`` is "greedy" (descending IoU) or "optimal"
    (maximum total IoU assignment).
    """
    if matching not in ("greedy", "optimal"):
        raise ValueError(f"matching must be 'greedy' or 'optimal', got {matching!r}")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    tp = fp = fn = 0
    per_image = []
    for p_img, g_img in zip(preds, gts):
        p_img = [l for l in p_img if len(l)]
        g_img = [l for l in g_img if len(l)]
        p_masks = [render_lane_mask(l, image_hw, width) for l in p_img]
        g_masks = [render_lane_mask(l, image_hw, width) for l in g_img]
        iou = np.zeros((len(p_masks), len(g_masks)))
        for i, pm in enumerate(p_masks):
            for j, gm in enumerate(g_masks):
                iou[i, j] = mask_iou(pm, gm)
        if matching == "greedy":
            pairs = _greedy_pairs(iou, -1.0)
        else:
            pairs = list(zip(*linear_sum_assignment(iou, maximize=True)))
        img_tp = sum(1 for i, j in pairs if iou[i, j] > iou_thresh)
        per_image.append(
            {
                "tp": img_tp,
                "fp": len(p_img) - img_tp,
                "fn": len(g_img) - img_tp,
                "iou": iou.round(6).tolist(),
            }
        )
        tp += img_tp
        fp += len(p_img) - img_tp
        fn += len(g_img) - img_tp
    precision, recall, f1 = _prf(tp, fp, fn)
    return MetricReport(
        fp_rate=fp / (tp + fp) if tp + fp else 0.0,
        fn_rate=fn / (tp + fn) if tp + fn else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp,
        fp=fp,
        fn=fn,
        per_image=per_image,
    )


def label_to_vertices(label: LaneLabel) -> list[list[tuple[int, int]]]:
    return [label.points(i) for i in range(len(label.lanes))]
