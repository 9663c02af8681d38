"""Lane slot assignment and network-resolution row-wise targets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import ABSENT, LaneLabel


@dataclass
class RowwiseTarget:
    """Supervision for N lane slots over K = net_h / 2 rows.

    ``x_gt`` holds integer columns in [0, w') or -1, ``x_sub`` the same
    positions before rounding (NaN where absent), used by the PL loss.
    """

    x_gt: np.ndarray  # (N, K) int64
    x_sub: np.ndarray  # (N, K) float64
    e: np.ndarray  # (N, K) float32 in {0, 1}
    lane_exists: np.ndarray  # (N,) float32 in {0, 1}


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def lane_mean_x(lane: list[int]) -> float:
    xs = [x for x in lane if x != ABSENT]
    return float(np.mean(xs)) if xs else float("nan")


def assign_lane_slots(
    label: LaneLabel, image_width: int, n_slots: int = 4
) -> list[list[int] | None]:
    """Order lanes outward from the image centre, alternating left and right.

    Slot 2k holds the (k+1)-th nearest lane left of centre, slot 2k+1 the
    (k+1)-th nearest on the right. Lanes whose mean x equals the centre count
    as left. Slots without a lane are ``None``; lanes past ``n_slots`` are dropped.
    """
    center = image_width / 2.0
    left, right = [], []
    for lane in label.lanes:
        m = lane_mean_x(lane)
        if math.isnan(m):
            continue
        (left if m <= center else right).append((abs(m - center), lane))
    left.sort(key=lambda t: t[0])
    right.sort(key=lambda t: t[0])
    slots: list[list[int] | None] = [None] * n_slots
    for k, (_, lane) in enumerate(left):
        if 2 * k < n_slots:
            slots[2 * k] = lane
    for k, (_, lane) in enumerate(right):
        if 2 * k + 1 < n_slots:
            slots[2 * k + 1] = lane
    return slots


def _rows_for_lane(lane, h_samples, sy: float) -> dict[int, float]:
    """Map one lane's samples to network rows, interpolating between consecutive samples."""
    rows: dict[int, float] = {}
    # split into runs of consecutive h_samples so gaps in the label stay gaps
    runs, cur = [], []
    for x, y in zip(lane, h_samples):
        if x != ABSENT:
            cur.append((y * sy, float(x)))
        elif cur:
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    for run in runs:
        if len(run) == 1:
            rows[round_half_up(run[0][0])] = run[0][1]
            continue
        ys = np.array([p[0] for p in run])
        xs = np.array([p[1] for p in run])
        j0, j1 = round_half_up(ys[0]), round_half_up(ys[-1])
        for j in range(j0, j1 + 1):
            rows[j] = float(np.interp(np.clip(j, ys[0], ys[-1]), ys, xs))
    return rows


def encode_targets(
    label: LaneLabel,
    net_h: int,
    net_w: int,
    image_height: int,
    image_width: int,
    n_lanes: int = 4,
) -> RowwiseTarget:
    """Turn an original-resolution label into per-slot row-wise targets at (net_h/2, net_w/2)."""
    k_rows, w_out = net_h // 2, net_w // 2
    sy = k_rows / image_height
    sx = w_out / image_width
    x_gt = np.full((n_lanes, k_rows), -1, dtype=np.int64)
    x_sub = np.full((n_lanes, k_rows), np.nan)
    e = np.zeros((n_lanes, k_rows), dtype=np.float32)
    for i, lane in enumerate(assign_lane_slots(label, image_width, n_lanes)):
        if lane is None:
            continue
        for j, x in _rows_for_lane(lane, label.h_samples, sy).items():
            if not 0 <= j < k_rows:
                continue
            xs = min(max(x * sx, 0.0), w_out - 1.0)
            x_sub[i, j] = xs
            x_gt[i, j] = min(max(round_half_up(x * sx), 0), w_out - 1)
            e[i, j] = 1.0
    lane_exists = (e.sum(axis=1) > 0).astype(np.float32)
    return RowwiseTarget(x_gt, x_sub, e, lane_exists)


def stack_targets(targets: list[RowwiseTarget]) -> dict[str, np.ndarray]:
    return {
        "x_gt": np.stack([t.x_gt for t in targets]),
        "x_sub": np.stack([t.x_sub for t in targets]),
        "e": np.stack([t.e for t in targets]),
        "lane_exists": np.stack([t.lane_exists for t in targets]),
    }
