"""Training loop, schedule, augmentation, flat config files and evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datagen import ABSENT, LaneLabel, load_dataset
from .decode import DecodeConfig, decode_batch, rescale, to_label
from .encoding import encode_targets, stack_targets
from .losses import LossConfig, compute_losses
from .metrics import MetricReport, culane_eval, label_to_vertices, tusimple_eval
from .model import LaneDetector, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

BENCHMARKS = ("tusimple", "culane")


class TrainingError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.85, 1.0)
    hflip_prob: float = 0.5
    brightness: float = 0.15
    contrast: float = 0.15


@dataclass
class TrainConfig:
    train_labels: str = ""
    val_labels: str = ""
    epochs: int = 40
    max_steps: int = 0
    batch_size: int = 8
    base_lr: float = 8e-4
    warmup_epochs: float = 3.0
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 1
    eval_benchmark: str = "tusimple"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps <= 0 and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.eval_benchmark not in BENCHMARKS:
            raise ValueError(f"eval_benchmark must be one of {BENCHMARKS}")
        self.loss.validate()
        self.decode.validate()


# --------------------------------------------------------------------------- config files

CONFIG_DOCS = {
    "train_labels": "label file of the training set (required)",
    "val_labels": "label file evaluated every eval_every epochs; empty = training set",
    "epochs": "number of passes over the training set",
    "max_steps": "total optimizer steps; 0 derives it from epochs",
    "batch_size": "images per step",
    "base_lr": "peak learning rate after warmup",
    "warmup_epochs": "linear warmup length in epochs (may be fractional)",
    "weight_decay": "decoupled weight decay",
    "seed": "seed for weights, sampling, augmentation and dropout",
    "checkpoint_every": "save a checkpoint every this many steps; 0 = final only",
    "eval_every": "validate every this many epochs; 0 = never during training",
    "eval_benchmark": "tusimple or culane",
    "model.n_lanes": "lane slots N",
    "model.channels": "feature channels C of decoder output and every HRM",
    "model.net_h": "network input height",
    "model.net_w": "network input width",
    "model.stage_channels": "comma separated widths of the 4 encoder stages",
    "model.shared_hrms": "number of HRMs shared by all lanes",
    "model.se_position": "none, pre, standard or post",
    "model.se_reduction": "SE bottleneck divisor",
    "model.dropout_p": "dropout after every HRM",
    "model.final_collapse_ratio": "width left for the last 1x1 lane-wise HRM",
    "loss.vertex_loss_type": "CE, KL or PL",
    "loss.lambda1": "weight of the vertex confidence loss",
    "loss.lambda2": "weight of the lane existence loss",
    "loss.laplace_b_gt": "scale of the target Laplace for KL",
    "aug.crop_scale_range": "min,max side fraction of the random crop",
    "aug.hflip_prob": "probability of a horizontal flip",
    "aug.brightness": "max additive brightness shift (fraction of 255)",
    "aug.contrast": "max relative contrast change",
    "decode.t_vc": "vertex confidence threshold",
    "decode.t_lc": "lane confidence threshold",
    "decode.loss_type": "overridden by loss.vertex_loss_type",
}


def _coerce(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        items = [v.strip() for v in raw.split(",") if v.strip()]
        kind = type(current[0]) if current else float
        vals = [kind(v) for v in items]
        return tuple(vals) if isinstance(current, tuple) else vals
    return raw


def set_config_value(cfg: TrainConfig, key: str, raw: str) -> None:
    target = cfg
    *sections, name = key.split(".")
    for sec in sections:
        if not dataclasses.is_dataclass(getattr(target, sec, None)):
            raise KeyError(key)
        target = getattr(target, sec)
    names = {f.name for f in dataclasses.fields(target)}
    if name not in names or dataclasses.is_dataclass(getattr(target, name)):
        raise KeyError(key)
    setattr(target, name, _coerce(raw, getattr(target, name)))


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments). Unknown keys are an error."""
    cfg = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            set_config_value(cfg, key, raw)
        except KeyError:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg.decode.loss_type = cfg.loss.vertex_loss_type
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(), str(path))
    # relative dataset paths are relative to the config file
    for attr in ("train_labels", "val_labels"):
        val = getattr(cfg, attr)
        if val and not Path(val).is_absolute():
            setattr(cfg, attr, str(path.parent / val))
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val):
                walk(val, f"{prefix}{f.name}.")
                continue
            if isinstance(val, (list, tuple)):
                val = ",".join(str(v) for v in val)
            lines.append(f"{prefix}{f.name} = {val}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- schedule


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine annealing to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- augmentation


def _lane_runs(lane, h_samples):
    runs, cur = [], []
    for x, y in zip(lane, h_samples):
        if x != ABSENT:
            cur.append((float(y), float(x)))
        elif cur:
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    return runs


def _x_at(runs, y: float, reach: float = 0.0) -> float | None:
    """x of the labelled polyline at ``y``; ends extend linearly by ``reach`` rows."""
    for run in runs:
        ys = [p[0] for p in run]
        xs = [p[1] for p in run]
        if ys[0] <= y <= ys[-1]:
            return float(np.interp(y, ys, xs))
        if len(run) > 1 and ys[0] - reach <= y < ys[0]:
            return xs[0] + (y - ys[0]) * (xs[1] - xs[0]) / (ys[1] - ys[0])
        if len(run) > 1 and ys[-1] < y <= ys[-1] + reach:
            return xs[-1] + (y - ys[-1]) * (xs[-1] - xs[-2]) / (ys[-1] - ys[-2])
    return None


def hflip_label(label: LaneLabel, image_width: int) -> LaneLabel:
    lanes = [[x if x == ABSENT else image_width - 1 - x for x in lane] for lane in label.lanes]
    return LaneLabel(list(label.h_samples), lanes, label.raw_file)


def crop_label(
    label: LaneLabel, box: tuple[int, int, int, int], image_hw: tuple[int, int]
) -> LaneLabel:
    """Map a label through crop ``box`` = (x0, y0, w, h) resized back to ``image_hw``.

    The result is resampled on the original h_samples grid.
    """
    x0, y0, cw, ch = box
    h, w = image_hw
    if (x0, y0, cw, ch) == (0, 0, w, h):
        return LaneLabel(list(label.h_samples), [list(l) for l in label.lanes], label.raw_file)
    sx, sy = w / cw, h / ch
    # lane ends snap to the nearest output row rather than the next one inside
    steps = np.diff(label.h_samples)
    reach = 0.5 * float(steps.min()) / sy if len(steps) else 0.0
    lanes = []
    for lane in label.lanes:
        runs = _lane_runs(lane, label.h_samples)
        row = []
        for yo in label.h_samples:
            ys = (yo + 0.5) / sy + y0 - 0.5
            xs = _x_at(runs, ys, reach)
            if xs is None:
                row.append(ABSENT)
                continue
            # pixel centres map as (x + 0.5) -> (x + 0.5 - x0) * sx; round half up
            xo = int(math.floor((xs + 0.5 - x0) * sx))
            row.append(xo if 0 <= xo < w else ABSENT)
        if any(x != ABSENT for x in row):
            lanes.append(row)
    return LaneLabel(list(label.h_samples), lanes, label.raw_file)


def augment(
    image: np.ndarray, label: LaneLabel, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, LaneLabel]:
    """Random crop (resized back), horizontal flip and brightness/contrast jitter.

    Geometric changes are applied to the label too; slot assignment happens
    later in ``encode_targets`` so a flip swaps left and right slots.
    """
    h, w = image.shape[:2]
    lo, hi = cfg.crop_scale_range
    s = rng.uniform(lo, hi) if hi > lo else lo
    cw, ch = min(w, int(round(s * w))), min(h, int(round(s * h)))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    if (cw, ch) != (w, h):
        image = np.asarray(
            Image.fromarray(image).resize((w, h), Image.BILINEAR, box=(x0, y0, x0 + cw, y0 + ch))
        )
        label = crop_label(label, (x0, y0, cw, ch), (h, w))
    if rng.random() < cfg.hflip_prob:
        image = image[:, ::-1]
        label = hflip_label(label, w)
    if cfg.brightness > 0 or cfg.contrast > 0:
        alpha = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        beta = rng.uniform(-cfg.brightness, cfg.brightness) * 255.0
        img = image.astype(np.float32)
        img = (img - img.mean()) * alpha + img.mean() + beta
        image = np.clip(img + 0.5, 0, 255).astype(np.uint8)
    return np.ascontiguousarray(image), label


# --------------------------------------------------------------------------- batching


def image_to_tensor(image: np.ndarray, net_hw: tuple[int, int]) -> torch.Tensor:
    """uint8 (H, W, 3) -> normalised float (3, net_h, net_w)."""
    nh, nw = net_hw
    if image.shape[:2] != (nh, nw):
        image = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    x = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)
    return (x / 255.0 - 0.45) / 0.25


def make_batch(images, labels, mcfg: ModelConfig):
    xs, targets = [], []
    for img, lab in zip(images, labels):
        h, w = img.shape[:2]
        xs.append(image_to_tensor(img, (mcfg.net_h, mcfg.net_w)))
        targets.append(encode_targets(lab, mcfg.net_h, mcfg.net_w, h, w, mcfg.n_lanes))
    t = stack_targets(targets)
    return torch.stack(xs), {
        "x_gt": torch.from_numpy(t["x_gt"]),
        "x_sub": torch.from_numpy(t["x_sub"]).float(),
        "e": torch.from_numpy(t["e"]),
        "lane_exists": torch.from_numpy(t["lane_exists"]),
    }


# --------------------------------------------------------------------------- evaluation


@torch.no_grad()
def predict_labels(
    model: LaneDetector,
    images: list[np.ndarray],
    labels: list[LaneLabel],
    dcfg: DecodeConfig,
    batch_size: int = 16,
):
    """Decode every image; returns (TuSimple-style labels, per-image vertex lists)."""
    was_training = model.training
    model.eval()
    mcfg = model.cfg
    net_hw = (mcfg.out_h, mcfg.out_w)
    pred_labels, pred_vertices = [], []
    try:
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            x = torch.stack([image_to_tensor(im, (mcfg.net_h, mcfg.net_w)) for im in chunk])
            decoded = decode_batch(model(x), dcfg)
            for k, lanes in enumerate(decoded):
                img = chunk[k]
                lab = labels[start + k]
                orig = img.shape[:2]
                pred_labels.append(to_label(lanes, net_hw, orig, lab.h_samples, lab.raw_file))
                pred_vertices.append([l for l in rescale(lanes, net_hw, orig) if l])
    finally:
        model.train(was_training)
    return pred_labels, pred_vertices


def evaluate_model(
    model: LaneDetector,
    images: list[np.ndarray],
    labels: list[LaneLabel],
    benchmark: str = "tusimple",
    dcfg: DecodeConfig | None = None,
) -> MetricReport:
    if benchmark not in BENCHMARKS:
        raise ValueError(f"benchmark must be one of {BENCHMARKS}")
    dcfg = dcfg or DecodeConfig()
    pred_labels, pred_vertices = predict_labels(model, images, labels, dcfg)
    if benchmark == "tusimple":
        return tusimple_eval(pred_labels, labels)
    hw = images[0].shape[:2]
    return culane_eval(pred_vertices, [label_to_vertices(l) for l in labels], hw)


def evaluate(checkpoint: str | Path, label_path: str | Path, benchmark: str = "tusimple"):
    model, meta = load_checkpoint(checkpoint)
    dcfg = DecodeConfig(**meta.get("decode", {}))
    images, labels = load_dataset(label_path)
    return evaluate_model(model, images, labels, benchmark, dcfg)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: LaneDetector
    history: list[dict]
    steps: int
    final_checkpoint: Path | None = None


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    train_data: tuple[list[np.ndarray], list[LaneLabel]] | None = None,
    val_data: tuple[list[np.ndarray], list[LaneLabel]] | None = None,
) -> TrainResult:
    """Optimise a fresh model; deterministic for a given ``cfg.seed`` on one device.

    Data comes from ``train_data`` / ``val_data`` when given, else from the
    label files in the config. With ``out_dir`` set, checkpoints and a
    line-delimited ``metrics.jsonl`` are written there.
    """
    cfg.decode.loss_type = cfg.loss.vertex_loss_type
    cfg.validate()
    if train_data is None:
        if not cfg.train_labels:
            raise ValueError("no training data: set train_labels")
        train_data = load_dataset(cfg.train_labels)
    if val_data is None and cfg.val_labels:
        val_data = load_dataset(cfg.val_labels)
    images, labels = train_data
    if not images:
        raise ValueError("training set is empty")
    val_images, val_labels = val_data if val_data is not None else train_data

    _seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = LaneDetector(cfg.model)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)

    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * steps_per_epoch
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    if warmup >= total:
        raise ValueError(f"warmup ({warmup} steps) must be shorter than training ({total} steps)")

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.txt").write_text(dump_config(cfg))
        log_fh = open(out / "metrics.jsonl", "w")

    meta = {"decode": dataclasses.asdict(cfg.decode), "loss": dataclasses.asdict(cfg.loss)}
    history: list[dict] = []
    step = epoch = 0
    try:
        while step < total:
            epoch += 1
            order = rng.permutation(n)
            losses = []
            for b in range(0, n, cfg.batch_size):
                if step >= total:
                    break
                idx = order[b : b + cfg.batch_size]
                pairs = [augment(images[i], labels[i], cfg.aug, rng) for i in idx]
                x, target = make_batch([p[0] for p in pairs], [p[1] for p in pairs], cfg.model)
                lr = lr_at(step + 1, total, warmup, cfg.base_lr)
                for group in opt.param_groups:
                    group["lr"] = lr
                parts = compute_losses(model(x), target, cfg.loss)
                loss = parts["total"]
                if not torch.isfinite(loss):
                    dump = None
                    if out is not None:
                        dump = out / f"nan_batch_step{step}.pt"
                        torch.save({"x": x, "target": target, "indices": idx.tolist()}, dump)
                    raise TrainingError(
                        f"non-finite loss at step {step} (epoch {epoch}, batch {b // cfg.batch_size},"
                        f" images {idx.tolist()}); "
                        + ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items())
                        + (f"; batch dumped to {dump}" if dump else "")
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                losses.append(loss.item())
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(model, out / f"ckpt_step{step:06d}", meta)
            record = {
                "epoch": epoch,
                "step": step,
                "lr": lr,
                "loss": float(np.mean(losses)) if losses else None,
            }
            last = step >= total
            if (cfg.eval_every and epoch % cfg.eval_every == 0) or last:
                report = evaluate_model(
                    model, val_images, val_labels, cfg.eval_benchmark, cfg.decode
                )
                record["val"] = {k: v for k, v in report.to_dict().items() if k != "per_image"}
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps({**record, "time": time.time()}) + "\n")
                log_fh.flush()
            log.info("epoch %d step %d loss %.4f", epoch, step, record["loss"] or float("nan"))
    finally:
        if log_fh is not None:
            log_fh.close()

    model.eval()
    final = save_checkpoint(model, out / "ckpt_final", meta) if out is not None else None
    return TrainResult(model, history, step, final)
