"""Command-line entry points: gen, train, eval, infer, viz-features."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .datagen import SceneConfig, write_dataset
from .decode import DecodeConfig, decode, rescale, to_label
from .model import LaneDetector, Prediction, load_checkpoint
from .trainer import BENCHMARKS, evaluate, image_to_tensor, load_config, train

log = logging.getLogger("rowlane")


class CliError(Exception):
    pass


# --------------------------------------------------------------------------- PCA visualisation


def pca_rgb(feature: np.ndarray) -> np.ndarray:
    """Map a (C, H, W) feature map to an (H, W, 3) uint8 image of its top-3 PCA scores.

    Positions are samples and channels are variables. Each component's sign is
    chosen so its largest-magnitude loading is positive; scores are min-max
    scaled per component. Components with no variance render as 0.
    """
    if feature.ndim != 3:
        raise ValueError(f"expected a (C, H, W) feature map, got shape {feature.shape}")
    c, h, w = feature.shape
    if c < 3:
        raise ValueError(f"need at least 3 channels for an RGB projection, got {c}")
    x = feature.reshape(c, h * w).T.astype(np.float64)
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = (s[0] if s.size else 0.0) * max(x.shape) * np.finfo(np.float64).eps
    rgb = np.zeros((h * w, 3))
    for k in range(min(3, len(s))):
        if s[k] <= tol:
            continue
        v = vt[k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        score = x @ v
        lo, hi = score.min(), score.max()
        if hi > lo:
            rgb[:, k] = (score - lo) / (hi - lo)
    return np.round(rgb.reshape(h, w, 3) * 255).astype(np.uint8)


def collect_features(model: LaneDetector, image: np.ndarray) -> dict[str, np.ndarray]:
    """Named (C, H, W) features of one image: decoder output and every shared HRM tap."""
    cfg = model.cfg
    x = image_to_tensor(image, (cfg.net_h, cfg.net_w))[None]
    model.eval()
    feats: dict[str, np.ndarray] = {}
    for m in model.shared:
        m.record = True
    try:
        with torch.no_grad():
            z = model.backbone(x)
            feats["decoder"] = z[0].numpy()
            for i, stage in enumerate(model.shared, 1):
                z = stage(z)
                feats[f"shared{i}"] = z[0].numpy()
                feats[f"shared{i}.pre_se"] = stage.taps["pre_se"][0].numpy()
                feats[f"shared{i}.post_se"] = stage.taps["post_se"][0].numpy()
    finally:
        for m in model.shared:
            m.record = False
            m.taps.clear()
    return feats


# --------------------------------------------------------------------------- commands


def _read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {path}: {exc}") from None


def _load_model(path: str | Path):
    p = Path(path)
    if not (p / "config.json").exists():
        raise CliError(f"{p} is not a checkpoint directory (config.json missing)")
    return load_checkpoint(p)


def cmd_gen(args) -> None:
    cfg = SceneConfig(
        image_height=args.height,
        image_width=args.width,
        max_lanes=args.lanes,
        noise_level=args.noise,
        seed=args.seed,
    )
    cfg.validate()
    path = write_dataset(cfg, args.out, args.count)
    print(f"wrote {args.count} scenes to {path}")


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    if not cfg.train_labels:
        raise CliError(f"{args.config}: train_labels is not set")
    res = train(cfg, args.out)
    print(f"trained {res.steps} steps; final checkpoint {res.final_checkpoint}")


def cmd_eval(args) -> None:
    model_dir = Path(args.ckpt)
    _load_model(model_dir)
    report = evaluate(model_dir, args.data, args.benchmark)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = f"benchmark  {args.benchmark}\n{report.summary()}\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")


def cmd_infer(args) -> None:
    model, meta = _load_model(args.ckpt)
    image = _read_image(args.image)
    dcfg = DecodeConfig(**meta.get("decode", {}))
    cfg = model.cfg
    with torch.no_grad():
        pred = model(image_to_tensor(image, (cfg.net_h, cfg.net_w))[None])
    lanes = decode(Prediction(pred.f[0], pred.vc_logit[0], pred.lc_logit[0]), dcfg)
    net_hw, orig_hw = (cfg.out_h, cfg.out_w), image.shape[:2]
    h_samples = list(range(0, orig_hw[0], 4))
    label = to_label(lanes, net_hw, orig_hw, h_samples, Path(args.image).name)
    vertices = rescale(lanes, net_hw, orig_hw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "lanes.json").write_text(json.dumps(label.to_record()) + "\n")
    overlay = Image.fromarray(image)
    draw = ImageDraw.Draw(overlay)
    for lane in vertices:
        for x, y in lane:
            draw.ellipse((x - 2, y - 2, x + 2, y + 2), fill=(0, 255, 0))
    overlay.save(out / "overlay.png")
    print(f"{sum(1 for l in vertices if l)} lanes; wrote {out / 'lanes.json'} and {out / 'overlay.png'}")


def cmd_viz_features(args) -> None:
    model, _ = _load_model(args.ckpt)
    feats = collect_features(model, _read_image(args.image))
    wanted = list(feats) if args.layers == "all" else [s.strip() for s in args.layers.split(",") if s.strip()]
    unknown = [n for n in wanted if n not in feats]
    if unknown:
        raise CliError(f"unknown layer(s) {', '.join(unknown)}; available: {', '.join(feats)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in wanted:
        try:
            rgb = pca_rgb(feats[name])
        except ValueError as exc:
            raise CliError(f"{name}: {exc}") from None
        Image.fromarray(rgb).save(out / f"{name}.png")
    print(f"wrote {len(wanted)} images to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rowlane", description="Row-wise lane marker detection.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--width", type=int, default=256)
    g.add_argument("--lanes", type=int, default=2, help="maximum lanes per image")
    g.add_argument("--noise", type=float, default=0.02)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a label file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="labels.json of the dataset")
    e.add_argument("--benchmark", choices=BENCHMARKS, default="tusimple")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="decode lanes of one image and draw them")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("viz-features", help="PCA-to-RGB images of intermediate features")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--image", required=True)
    v.add_argument(
        "--layers",
        default="decoder,shared1",
        help="comma separated: decoder, sharedK, sharedK.pre_se, sharedK.post_se, or all",
    )
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_features)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"rowlane {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
