"""Synthetic lane scenes and TuSimple-style label files.

A label file holds one JSON object per line::

    {"raw_file": "images/0000.png", "h_samples": [0, 4, ...], "lanes": [[-2, 131, ...], ...]}

``-2`` marks a row where the lane has no vertex.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ABSENT = -2
BACKGROUNDS = ("flat", "gradient", "textured")


class LabelFormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    """Generator knobs.

    ``curvature_range`` is the quadratic coefficient in normalised units: a lane
    bends by ``c * image_width`` pixels over the full image height.
    ``lane_spacing_range`` is the distance between neighbouring lanes at the
    bottom row, in pixels.
    """

    image_height: int = 128
    image_width: int = 256
    max_lanes: int = 2
    curvature_range: tuple[float, float] = (-0.25, 0.25)
    lane_spacing_range: tuple[float, float] = (90.0, 150.0)
    line_thickness: int = 3
    noise_level: float = 0.02
    background_mode: str = "textured"
    seed: int = 0
    horizon_range: tuple[float, float] = (0.3, 0.45)
    h_sample_step: int = 4

    def validate(self) -> None:
        if self.image_height <= 0 or self.image_width <= 0:
            raise ValueError("image dimensions must be positive")
        if self.image_height % 16 or self.image_width % 16:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} must be divisible by 16"
            )
        if self.max_lanes < 1:
            raise ValueError("max_lanes must be >= 1")
        if self.line_thickness < 1:
            raise ValueError("line_thickness must be >= 1")
        lo, hi = self.lane_spacing_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad lane_spacing_range {self.lane_spacing_range}")
        if (self.max_lanes - 1) * lo >= self.image_width:
            raise ValueError(
                f"{self.max_lanes} lanes spaced >= {lo}px do not fit in width {self.image_width}"
            )
        if self.background_mode not in BACKGROUNDS:
            raise ValueError(f"background_mode must be one of {BACKGROUNDS}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must be in [0, 1]")

    def h_samples(self) -> list[int]:
        return list(range(0, self.image_height, self.h_sample_step))


@dataclass
class LaneCurve:
    """x(y) = a + b (y - y0) + c (y - y0)^2, drawn for y_top <= y <= y_bottom."""

    a: float
    b: float
    c: float
    y0: float
    y_top: float
    y_bottom: float

    def x_at(self, y):
        d = np.asarray(y, dtype=np.float64) - self.y0
        return self.a + self.b * d + self.c * d * d

    def slope_at(self, y):
        return self.b + 2.0 * self.c * (np.asarray(y, dtype=np.float64) - self.y0)


@dataclass
class LaneLabel:
    h_samples: list[int]
    lanes: list[list[int]] = field(default_factory=list)
    raw_file: str = ""

    def validate(self, image_width: int | None = None) -> None:
        hs = self.h_samples
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise LabelFormatError("h_samples must be strictly increasing")
        for i, lane in enumerate(self.lanes):
            if len(lane) != len(hs):
                raise LabelFormatError(
                    f"lane {i} has {len(lane)} entries but there are {len(hs)} h_samples"
                )
            if image_width is not None:
                bad = [x for x in lane if x != ABSENT and not 0 <= x < image_width]
                if bad:
                    raise LabelFormatError(f"lane {i} has x outside [0, {image_width}): {bad[:3]}")

    def points(self, lane_index: int) -> list[tuple[int, int]]:
        return [(x, y) for x, y in zip(self.lanes[lane_index], self.h_samples) if x != ABSENT]

    def to_record(self) -> dict:
        return {"raw_file": self.raw_file, "h_samples": list(self.h_samples), "lanes": self.lanes}


def _rng(cfg: SceneConfig, index: int) -> np.random.Generator:
    if index < 0:
        raise ValueError("index must be >= 0")
    return np.random.default_rng([cfg.seed, index])


def sample_lanes(cfg: SceneConfig, rng: np.random.Generator) -> list[LaneCurve]:
    """Lanes converging to a shared vanishing point with a common bend."""
    h, w = cfg.image_height, cfg.image_width
    y0 = float(h - 1)
    y_h = rng.uniform(*cfg.horizon_range) * h
    vp_x = w / 2 + rng.uniform(-0.08, 0.08) * w
    spacing = rng.uniform(*cfg.lane_spacing_range)
    offset = rng.uniform(-0.3, 0.3) * spacing
    c = rng.uniform(*cfg.curvature_range) * w / (h * h)

    # candidate bottom positions ordered host-left, host-right, 2nd-left, ...
    cands = []
    for k in range(cfg.max_lanes):
        side = -1 if k % 2 == 0 else 1
        rank = k // 2
        cands.append(w / 2 + offset + side * (0.5 + rank) * spacing)
    n = int(rng.integers(1, cfg.max_lanes + 1))
    chosen = sorted(rng.choice(cfg.max_lanes, size=n, replace=False).tolist())

    lanes = []
    dy = y_h - y0
    # stop short of the vanishing point, where neighbouring lanes merge; the end
    # sits on an h_sample row so the drawn end and the first labelled vertex agree
    step = cfg.h_sample_step
    y_top = float(np.ceil((y_h - 0.2 * dy) / step) * step)
    for k in chosen:
        a = cands[k]
        b = (vp_x - a - c * dy * dy) / dy
        lanes.append(LaneCurve(a, b, c, y0, y_top=y_top, y_bottom=y0))
    return lanes


def label_from_curves(curves: list[LaneCurve], cfg: SceneConfig) -> LaneLabel:
    hs = cfg.h_samples()
    lanes = []
    for cur in curves:
        row = []
        for y in hs:
            x = float(cur.x_at(y))
            if cur.y_top <= y <= cur.y_bottom and 0 <= x < cfg.image_width:
                row.append(int(np.floor(x + 0.5)))
            else:
                row.append(ABSENT)
        if any(x != ABSENT for x in row):
            lanes.append(row)
    return LaneLabel(hs, lanes)


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    base = rng.uniform(0.15, 0.4)
    tint = rng.uniform(-0.03, 0.03, size=3)
    if cfg.background_mode == "flat":
        img = np.full((h, w, 1), base)
    elif cfg.background_mode == "gradient":
        ramp = np.linspace(rng.uniform(0.4, 0.7), base, h)
        img = np.broadcast_to(ramp[:, None, None], (h, w, 1)).copy()
    else:
        img = np.full((h, w, 1), base)
        coarse = rng.normal(0, 0.05, size=(h // 8 + 1, w // 8 + 1))
        img = img + np.kron(coarse, np.ones((8, 8)))[:h, :w, None]
        sky = int(cfg.horizon_range[0] * h)
        img[:sky] += rng.uniform(0.1, 0.3)
    return img + tint


def render_scene(
    cfg: SceneConfig, curves: list[LaneCurve], rng: np.random.Generator | None = None
) -> np.ndarray:
    """Rasterise lanes onto a background; returns uint8 RGB (H, W, 3)."""
    rng = rng or np.random.default_rng(0)
    w = cfg.image_width
    img = _background(cfg, rng) * np.ones((1, 1, 3))
    cols = np.arange(w, dtype=np.float64)
    half = cfg.line_thickness / 2.0
    for cur in curves:
        color = np.array([0.95, 0.95, 0.95]) if rng.random() < 0.6 else np.array([0.95, 0.8, 0.25])
        color = color * rng.uniform(0.8, 1.0)
        for y in range(int(np.ceil(cur.y_top)), int(np.floor(cur.y_bottom)) + 1):
            xc = float(cur.x_at(y))
            # horizontal half-span giving perpendicular half-thickness ``half``
            span = half * np.sqrt(1.0 + float(cur.slope_at(y)) ** 2)
            hit = np.abs(cols - xc) <= span
            img[y, hit] = color
    if cfg.noise_level > 0:
        img = img + rng.normal(0.0, cfg.noise_level, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def generate_scene(cfg: SceneConfig, index: int) -> tuple[np.ndarray, LaneLabel]:
    """Deterministic (image, label) pair for ``(cfg.seed, index)``."""
    cfg.validate()
    rng = _rng(cfg, index)
    curves = sample_lanes(cfg, rng)
    label = label_from_curves(curves, cfg)
    image = render_scene(cfg, curves, rng)
    return image, label


def write_labels(labels: list[LaneLabel], path: str | Path) -> None:
    with open(path, "w") as fh:
        for lab in labels:
            lab.validate()
            fh.write(json.dumps(lab.to_record(), separators=(",", ":")) + "\n")


def read_labels(path: str | Path) -> list[LaneLabel]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LabelFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise LabelFormatError(f"{path}:{lineno}: record is not an object")
            missing = [k for k in ("raw_file", "h_samples", "lanes") if k not in rec]
            if missing:
                raise LabelFormatError(f"{path}:{lineno}: missing key(s) {', '.join(missing)}")
            lab = LaneLabel(
                h_samples=[int(v) for v in rec["h_samples"]],
                lanes=[[int(v) for v in lane] for lane in rec["lanes"]],
                raw_file=str(rec["raw_file"]),
            )
            try:
                lab.validate()
            except LabelFormatError as exc:
                raise LabelFormatError(f"{path}:{lineno}: {exc}") from None
            out.append(lab)
    return out


def write_dataset(cfg: SceneConfig, out_dir: str | Path, count: int, start: int = 0) -> Path:
    """Generate ``count`` scenes into ``out_dir/images`` plus ``out_dir/labels.json``."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    labels = []
    for i in range(start, start + count):
        image, label = generate_scene(cfg, i)
        rel = f"images/{i:05d}.png"
        Image.fromarray(image).save(out_dir / rel)
        label.raw_file = rel
        labels.append(label)
    write_labels(labels, out_dir / "labels.json")
    return out_dir / "labels.json"


def load_dataset(label_path: str | Path) -> tuple[list[np.ndarray], list[LaneLabel]]:
    """Read a label file and the RGB images it references (paths relative to the file)."""
    from PIL import Image

    label_path = Path(label_path)
    labels = read_labels(label_path)
    images = [
        np.asarray(Image.open(label_path.parent / lab.raw_file).convert("RGB")) for lab in labels
    ]
    return images, labels
