"""Threshold-gated vertex extraction and resampling to the original image grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .datagen import ABSENT, LaneLabel
from .model import Prediction

Lane = list[tuple[float, float]]


@dataclass
class DecodeConfig:
    t_vc: float = 0.6
    t_lc: float = 0.5
    loss_type: str = "CE"

    def validate(self) -> None:
        for name in ("t_vc", "t_lc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.loss_type not in ("CE", "KL", "PL"):
            raise ValueError(f"unknown loss_type {self.loss_type!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _softargmax(f: np.ndarray) -> np.ndarray:
    z = f - f.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return (p * np.arange(f.shape[-1])).sum(-1)


def decode(pred, cfg: DecodeConfig | None = None) -> list[Lane]:
    """Vertices for a single image at network resolution.

    ``pred`` is an unbatched Prediction: ``f`` (N, K, W), ``vc_logit`` (N, K),
    ``lc_logit`` (N,); tensors or arrays. A lane is kept
    only if sigmoid(lc) > t_lc; inside it, row j contributes (x, j) when
    sigmoid(vc) > t_vc. x is the argmax column (lowest index on ties) for CE/PL
    and the softargmax mean for KL.
    """
    cfg = cfg or DecodeConfig()
    f = _as_numpy(pred.f)
    vc = _sigmoid(_as_numpy(pred.vc_logit))
    lc = _sigmoid(_as_numpy(pred.lc_logit))
    if cfg.loss_type == "KL":
        xs = _softargmax(f)
    else:
        xs = f.argmax(axis=-1)
    lanes: list[Lane] = []
    for i in range(f.shape[0]):
        if not lc[i] > cfg.t_lc:
            lanes.append([])
            continue
        rows = np.nonzero(vc[i] > cfg.t_vc)[0]
        if cfg.loss_type == "KL":
            lanes.append([(float(xs[i, j]), int(j)) for j in rows])
        else:
            lanes.append([(int(xs[i, j]), int(j)) for j in rows])
    return lanes


def decode_batch(pred, cfg: DecodeConfig | None = None) -> list[list[Lane]]:
    return [
        decode(Prediction(pred.f[b], pred.vc_logit[b], pred.lc_logit[b]), cfg)
        for b in range(pred.f.shape[0])
    ]


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def rescale(
    lanes: list[Lane],
    net_hw: tuple[int, int],
    orig_hw: tuple[int, int],
    h_samples: list[int] | None = None,
):
    """Scale network-resolution vertices (on an h' x w' grid) to the original image.

    Without ``h_samples`` returns integer vertex lists. With ``h_samples``
    returns, per lane, x values on that grid (ABSENT outside the lane's vertical
    extent), interpolating linearly along the decoded polyline.
    """
    (hp, wp), (oh, ow) = net_hw, orig_hw
    sx, sy = ow / wp, oh / hp
    scaled = [[(x * sx, y * sy) for x, y in lane] for lane in lanes]
    if h_samples is None:
        return [[(_clip_x(_round(x), ow), _round(y)) for x, y in lane] for lane in scaled]
    out = []
    for lane in scaled:
        row = [ABSENT] * len(h_samples)
        if lane:
            ys = np.array([p[1] for p in lane])
            xs = np.array([p[0] for p in lane])
            for k, y in enumerate(h_samples):
                if ys[0] <= y <= ys[-1]:
                    row[k] = _clip_x(_round(float(np.interp(y, ys, xs))), ow)
        out.append(row)
    return out


def _clip_x(x: int, width: int) -> int:
    return min(max(x, 0), width - 1)


def to_label(
    lanes: list[Lane],
    net_hw: tuple[int, int],
    orig_hw: tuple[int, int],
    h_samples: list[int],
    raw_file: str = "",
) -> LaneLabel:
    """Decoded lanes as a TuSimple-style record; lanes with no vertex are omitted."""
    rows = rescale(lanes, net_hw, orig_hw, h_samples)
    rows = [r for r in rows if any(x != ABSENT for x in r)]
    return LaneLabel(list(h_samples), rows, raw_file)
