"""Horizontal reduction modules and the shared / per-lane stack built from them."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

SE_POSITIONS = ("none", "pre", "standard", "post")


class ConfigError(ValueError):
    pass


def horizontal_unshuffle(x: torch.Tensor, ratio: int) -> torch.Tensor:
    """Move width phase into channels: (B, C, H, W) -> (B, C*r, H, W/r).

    Element (c, h, w) lands at channel ``c*r + w % r``, column ``w // r``.
    """
    if ratio == 1:
        return x
    b, c, h, w = x.shape
    if w % ratio:
        raise ValueError(f"width {w} is not divisible by ratio {ratio}")
    x = x.reshape(b, c, h, w // ratio, ratio)
    x = x.permute(0, 1, 4, 2, 3)
    return x.reshape(b, c * ratio, h, w // ratio)


def horizontal_shuffle(x: torch.Tensor, ratio: int) -> torch.Tensor:
    """Inverse of :func:`horizontal_unshuffle`."""
    if ratio == 1:
        return x
    b, cr, h, w = x.shape
    if cr % ratio:
        raise ValueError(f"channels {cr} are not divisible by ratio {ratio}")
    x = x.reshape(b, cr // ratio, ratio, h, w)
    x = x.permute(0, 1, 3, 4, 2)
    return x.reshape(b, cr // ratio, h, w * ratio)


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gate."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by SE reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return s[:, :, None, None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class ConvBN(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(cout),
        )


@dataclass
class HRMConfig:
    channels: int = 96
    ratio: int = 2
    kernel: int = 3
    se_position: str = "post"
    se_reduction: int = 16
    dropout_p: float = 0.1

    def validate(self) -> None:
        if self.ratio < 1:
            raise ConfigError(f"ratio must be >= 1, got {self.ratio}")
        if self.kernel < 1 or (self.kernel != 1 and self.kernel % 2 == 0):
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.se_position not in SE_POSITIONS:
            raise ConfigError(f"se_position must be one of {SE_POSITIONS}, got {self.se_position!r}")
        if self.se_position != "none" and self.channels % self.se_reduction:
            raise ConfigError(
                f"channels {self.channels} not divisible by se_reduction {self.se_reduction}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


class HRM(nn.Module):
    """Residual block that divides width by ``ratio`` and keeps channel count.

    skip: average-pool over width, then 1x1 ConvBN.
    main: (pre-SE) -> unshuffle -> kxk ConvBN (rC -> C) -> ReLU -> (standard SE).
    The two paths are summed, then optionally post-SE, then dropout.
    """

    def __init__(self, cfg: HRMConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, r = cfg.channels, cfg.ratio
        self.skip = ConvBN(c, c, 1)
        self.reduce = ConvBN(c * r, c, cfg.kernel)
        self.se = SEBlock(c, cfg.se_reduction) if cfg.se_position != "none" else None
        self.dropout = nn.Dropout(cfg.dropout_p)
        # optional taps used by the feature visualizer
        self.record = False
        self.taps: dict[str, torch.Tensor] = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = self.cfg.ratio
        pos = self.cfg.se_position
        if x.shape[-1] % r:
            raise ValueError(f"width {x.shape[-1]} is not divisible by ratio {r}")
        skip = self.skip(F.avg_pool2d(x, (1, r)) if r > 1 else x)
        main = self.se(x) if pos == "pre" else x
        main = F.relu(self.reduce(horizontal_unshuffle(main, r)))
        if pos == "standard":
            main = self.se(main)
        out = skip + main
        if self.record:
            self.taps["pre_se"] = out.detach()
        if pos == "post":
            out = self.se(out)
        if self.record:
            self.taps["post_se"] = out.detach()
        return self.dropout(out)


@dataclass
class HRMStackPlan:
    shared_stages: list[HRMConfig] = field(default_factory=list)
    lane_stages: list[HRMConfig] = field(default_factory=list)
    final_collapse_ratio: int = 4

    def widths(self, decoder_width: int) -> list[int]:
        out = [decoder_width]
        for st in self.shared_stages + self.lane_stages:
            out.append(out[-1] // st.ratio)
        return out


def build_hrm_stack(
    decoder_width: int,
    shared_count: int = 3,
    n_lanes: int = 4,
    defaults: HRMConfig | None = None,
    final_collapse_ratio: int = 4,
) -> HRMStackPlan:
    """Plan the stages that squeeze ``decoder_width`` down to 1.

    ``shared_count`` halving stages are shared by every lane; lane-wise halving
    stages continue until the width is at most ``final_collapse_ratio``, and a
    last lane-wise stage with a 1x1 kernel collapses whatever width is left.
    ``n_lanes`` is only validated here; each lane gets its own copy of
    ``lane_stages`` when the model is built.
    """
    base = defaults or HRMConfig()
    if n_lanes < 1:
        raise ConfigError("need at least one lane")
    if shared_count < 0:
        raise ConfigError("shared_count must be >= 0")
    if decoder_width < 2:
        raise ConfigError(f"decoder width {decoder_width} cannot be reduced")
    width = decoder_width
    shared = []
    for _ in range(shared_count):
        if width % 2 or width // 2 < 2:
            raise ConfigError(
                f"cannot place {shared_count} shared stages on width {decoder_width}"
            )
        shared.append(replace(base, ratio=2, kernel=3))
        width //= 2
    lane = []
    while width > final_collapse_ratio:
        if width % 2:
            raise ConfigError(f"width {decoder_width} does not factor into halving stages")
        lane.append(replace(base, ratio=2, kernel=3))
        width //= 2
    lane.append(replace(base, ratio=width, kernel=1))
    plan = HRMStackPlan(shared, lane, final_collapse_ratio)
    for st in plan.shared_stages + plan.lane_stages:
        st.validate()
    return plan
