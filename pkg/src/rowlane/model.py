"""Output branches and the full lane detector."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from .backbone import BackboneConfig, EncoderDecoder
from .hrm import HRM, ConfigError, HRMConfig, build_hrm_stack

CHECKPOINT_FORMAT = "rowlane-ckpt/1"


class Prediction(NamedTuple):
    f: torch.Tensor  # (B, N, h', w') vertex-location logits
    vc_logit: torch.Tensor  # (B, N, h')
    lc_logit: torch.Tensor  # (B, N)


class VertexLocationHead(nn.Module):
    """1x1 conv C -> w' on a width-collapsed lane feature; returns (B, h', w')."""

    def __init__(self, channels: int, out_width: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, out_width, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != 1:
            raise ValueError(f"lane feature must have width 1, got {x.shape[-1]}")
        return self.conv(x).squeeze(-1).transpose(1, 2)


class VertexConfidenceHead(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != 1:
            raise ValueError(f"lane feature must have width 1, got {x.shape[-1]}")
        return self.conv(x)[:, 0, :, 0]


class LaneConfidenceHead(nn.Module):
    """Global average pool followed by a fully connected layer C -> N."""

    def __init__(self, channels: int, n_lanes: int):
        super().__init__()
        self.fc = nn.Linear(channels, n_lanes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x.mean(dim=(2, 3)))


@dataclass
class ModelConfig:
    n_lanes: int = 4
    channels: int = 96
    net_h: int = 256
    net_w: int = 512
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 96, 96])
    shared_hrms: int = 3
    se_position: str = "post"
    se_reduction: int = 16
    dropout_p: float = 0.1
    final_collapse_ratio: int = 4

    @property
    def out_h(self) -> int:
        return self.net_h // 2

    @property
    def out_w(self) -> int:
        return self.net_w // 2

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            in_channels=3,
            stage_channels=list(self.stage_channels),
            out_channels=self.channels,
            net_h=self.net_h,
            net_w=self.net_w,
        )

    def hrm_defaults(self) -> HRMConfig:
        return HRMConfig(
            channels=self.channels,
            se_position=self.se_position,
            se_reduction=self.se_reduction,
            dropout_p=self.dropout_p,
        )


class LaneDetector(nn.Module):
    """Backbone -> shared HRMs -> {lane confidence; per-lane HRMs -> location, vertex confidence}."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.n_lanes < 1:
            raise ConfigError("n_lanes must be >= 1")
        self.cfg = cfg
        self.backbone = EncoderDecoder(cfg.backbone_config())
        plan = build_hrm_stack(
            cfg.out_w, cfg.shared_hrms, cfg.n_lanes, cfg.hrm_defaults(), cfg.final_collapse_ratio
        )
        self.plan = plan
        self.shared = nn.ModuleList(HRM(st) for st in plan.shared_stages)
        self.lanes = nn.ModuleList(
            nn.Sequential(*(HRM(st) for st in plan.lane_stages)) for _ in range(cfg.n_lanes)
        )
        self.loc_heads = nn.ModuleList(
            VertexLocationHead(cfg.channels, cfg.out_w) for _ in range(cfg.n_lanes)
        )
        self.vc_heads = nn.ModuleList(VertexConfidenceHead(cfg.channels) for _ in range(cfg.n_lanes))
        self.lc_head = LaneConfidenceHead(cfg.channels, cfg.n_lanes)

    def forward(self, image: torch.Tensor) -> Prediction:
        x = self.backbone(image)
        for stage in self.shared:
            x = stage(x)
        lc = self.lc_head(x)
        f, vc = [], []
        for chain, loc, conf in zip(self.lanes, self.loc_heads, self.vc_heads):
            z = chain(x)
            f.append(loc(z))
            vc.append(conf(z))
        return Prediction(torch.stack(f, 1), torch.stack(vc, 1), lc)


def count_macs(model: nn.Module, image_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulate estimate of one forward pass (convs and linears only)."""
    total = 0

    def conv_hook(m: nn.Conv2d, inp, out):
        nonlocal total
        kh, kw = m.kernel_size
        total += out.numel() * (m.in_channels // m.groups) * kh * kw

    def linear_hook(m: nn.Linear, inp, out):
        nonlocal total
        total += out.numel() * m.in_features

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, *image_shape))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total


def save_checkpoint(model: LaneDetector, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``weights.pt``, ``config.json`` and ``manifest.txt`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    torch.save(state, path / "weights.pt")
    meta = {"format": CHECKPOINT_FORMAT, "model": asdict(model.cfg)}
    if extra:
        meta.update(extra)
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    lines = [f"format {CHECKPOINT_FORMAT}"]
    for name, tensor in state.items():
        lines.append(f"{name} {'x'.join(str(s) for s in tensor.shape) or 'scalar'}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[LaneDetector, dict]:
    path = Path(path)
    meta = json.loads((path / "config.json").read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    model = LaneDetector(ModelConfig(**meta["model"]))
    state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, meta
