"""Small residual encoder-decoder that returns a C x H/2 x W/2 feature map."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .hrm import ConfigError


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 96, 96])
    out_channels: int = 96
    net_h: int = 256
    net_w: int = 512

    def validate(self) -> None:
        if len(self.stage_channels) != 4:
            raise ConfigError("backbone needs exactly 4 stage widths")
        if self.net_h % 16 or self.net_w % 16:
            raise ConfigError(f"network input {self.net_h}x{self.net_w} must be divisible by 16")
        if min(self.stage_channels) < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualDown(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = conv_bn_relu(cin, cout, stride=2)
        self.conv2 = nn.Sequential(
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout)
        )
        self.skip = nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride=2, bias=False), nn.BatchNorm2d(cout)
        )

    def forward(self, x):
        return F.relu(self.conv2(self.conv1(x)) + self.skip(x))


class UpFuse(nn.Module):
    """Nearest-neighbour x2 upsample, concatenate the encoder skip, 3x3 conv."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.conv = conv_bn_relu(cin + cskip, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.conv(torch.cat([x, skip], dim=1))


class EncoderDecoder(nn.Module):
    """Four stride-2 residual stages down to 1/16, three fusing upsamples back to 1/2."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        s1, s2, s3, s4 = cfg.stage_channels
        self.down1 = ResidualDown(cfg.in_channels, s1)
        self.down2 = ResidualDown(s1, s2)
        self.down3 = ResidualDown(s2, s3)
        self.down4 = ResidualDown(s3, s4)
        self.up3 = UpFuse(s4, s3, s3)
        self.up2 = UpFuse(s3, s2, s2)
        self.up1 = UpFuse(s2, s1, cfg.out_channels)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if x.shape[1] != self.cfg.in_channels or (h, w) != (self.cfg.net_h, self.cfg.net_w):
            raise ConfigError(
                f"expected input (*, {self.cfg.in_channels}, {self.cfg.net_h}, {self.cfg.net_w}),"
                f" got {tuple(x.shape)}"
            )
        e1 = self.down1(x)
        e2 = self.down2(e1)
        e3 = self.down3(e2)
        e4 = self.down4(e3)
        d = self.up3(e4, e3)
        d = self.up2(d, e2)
        return self.up1(d, e1)
