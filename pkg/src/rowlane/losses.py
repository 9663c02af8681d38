"""Vertex-location losses (CE / KL / PL), confidence losses and their weighted sum.

Shapes: logits ``f`` are (B, N, K, W), ``vc_logit`` (B, N, K), ``lc_logit``
(B, N). Every loss returns the mean over the batch of the per-image value.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

VERTEX_LOSSES = ("CE", "KL", "PL")
B_FLOOR = 1e-3
PL_EPS = 1e-12


@dataclass
class LossConfig:
    vertex_loss_type: str = "CE"
    lambda1: float = 10.0
    lambda2: float = 1.0
    laplace_b_gt: float = 1.0

    def validate(self) -> None:
        if self.vertex_loss_type not in VERTEX_LOSSES:
            raise ValueError(f"vertex_loss_type must be one of {VERTEX_LOSSES}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.laplace_b_gt <= 0:
            raise ValueError("laplace_b_gt must be > 0")


def softargmax_stats(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and mean absolute deviation of the column index under softmax(f) (last dim)."""
    p = torch.softmax(f, dim=-1)
    cols = torch.arange(f.shape[-1], dtype=f.dtype, device=f.device)
    mu = (p * cols).sum(-1)
    b = (p * (cols - mu.unsqueeze(-1)).abs()).sum(-1)
    return mu, b


def aggregate_rows(per_row: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Per-lane mean over existing rows, then mean over lanes; lanes without rows add 0."""
    e = e.to(per_row.dtype)
    per_row = torch.where(e > 0, per_row, torch.zeros_like(per_row))
    count = e.sum(-1)
    per_lane = per_row.sum(-1) / count.clamp(min=1.0)
    return per_lane.mean(-1).mean()


def vertex_loss_ce(f: torch.Tensor, x_gt: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(f, dim=-1)
    idx = x_gt.clamp(min=0).long().unsqueeze(-1)
    nll = -logp.gather(-1, idx).squeeze(-1)
    return aggregate_rows(nll, e)


def laplace_kl(mu_gt, b_gt, mu, b):
    """KL(Laplace(mu_gt, b_gt) || Laplace(mu, b)), closed form."""
    d = (mu_gt - mu).abs()
    return torch.log(b / b_gt) + (b_gt * torch.exp(-d / b_gt) + d) / b - 1.0


def vertex_loss_kl(
    f: torch.Tensor, x_gt: torch.Tensor, e: torch.Tensor, laplace_b_gt: float = 1.0
) -> torch.Tensor:
    mu, b = softargmax_stats(f)
    b = b.clamp(min=B_FLOOR)
    kl = laplace_kl(x_gt.to(f.dtype), torch.as_tensor(laplace_b_gt, dtype=f.dtype), mu, b)
    return aggregate_rows(kl, e)


def vertex_loss_pl(f: torch.Tensor, x_sub: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """-log of the piecewise-linear interpolation of softmax(f) at real-valued targets."""
    w = f.shape[-1]
    x = torch.nan_to_num(x_sub.to(f.dtype), nan=0.0)
    out_of_range = (e > 0) & ((x < 0) | (x > w - 1))
    if bool(out_of_range.any()):
        log.warning("clamping %d PL targets into [0, %d]", int(out_of_range.sum()), w - 1)
    x = x.clamp(0.0, w - 1.0)
    k = x.floor().clamp(max=w - 2 if w > 1 else 0)
    frac = x - k
    p = torch.softmax(f, dim=-1)
    k_idx = k.long().unsqueeze(-1)
    p_lo = p.gather(-1, k_idx).squeeze(-1)
    if w > 1:
        p_hi = p.gather(-1, k_idx + 1).squeeze(-1)
    else:
        p_hi = torch.zeros_like(p_lo)
    prob = p_lo * (1.0 - frac) + p_hi * frac
    return aggregate_rows(-torch.log(prob + PL_EPS), e)


def vertex_confidence_loss(vc_logit: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Mean BCE over all N x K cells; averaged per image then over the batch."""
    return F.binary_cross_entropy_with_logits(vc_logit, e.to(vc_logit.dtype))


def lane_label_loss(lc_logit: torch.Tensor, lane_exists: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(lc_logit, lane_exists.to(lc_logit.dtype))


def total_loss(l_vl, l_vc, l_lc, cfg: LossConfig):
    return l_vl + cfg.lambda1 * l_vc + cfg.lambda2 * l_lc


def compute_losses(pred, target: dict[str, torch.Tensor], cfg: LossConfig) -> dict[str, torch.Tensor]:
    """All loss terms for a batch; ``target`` holds tensors x_gt, x_sub, e, lane_exists."""
    e = target["e"]
    if cfg.vertex_loss_type == "CE":
        l_vl = vertex_loss_ce(pred.f, target["x_gt"], e)
    elif cfg.vertex_loss_type == "KL":
        l_vl = vertex_loss_kl(pred.f, target["x_gt"], e, cfg.laplace_b_gt)
    elif cfg.vertex_loss_type == "PL":
        l_vl = vertex_loss_pl(pred.f, target["x_sub"], e)
    else:
        raise ValueError(f"unknown vertex loss {cfg.vertex_loss_type!r}")
    l_vc = vertex_confidence_loss(pred.vc_logit, e)
    l_lc = lane_label_loss(pred.lc_logit, target["lane_exists"])
    return {"vl": l_vl, "vc": l_vc, "lc": l_lc, "total": total_loss(l_vl, l_vc, l_lc, cfg)}
