import json
import math

import numpy as np
import pytest
import torch

from rowlane.datagen import ABSENT, LaneLabel, SceneConfig, generate_scene, write_dataset
from rowlane.encoding import assign_lane_slots
from rowlane.losses import LossConfig, compute_losses
from rowlane.model import LaneDetector, ModelConfig
from rowlane.trainer import (
    AugmentConfig,
    TrainConfig,
    augment,
    crop_label,
    dump_config,
    evaluate,
    evaluate_model,
    hflip_label,
    lr_at,
    make_batch,
    parse_config,
    train,
)

TINY_MODEL = dict(n_lanes=2, channels=16, net_h=64, net_w=128, stage_channels=[8, 8, 16, 16],
                  shared_hrms=2, se_reduction=4)


def test_lr_schedule_anchors():
    assert lr_at(0, 1000, 100, 8e-4) == 0.0
    assert lr_at(100, 1000, 100, 8e-4) == pytest.approx(8e-4)
    assert lr_at(1000, 1000, 100, 8e-4) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(550, 1000, 100, 8e-4) == pytest.approx(4e-4)
    assert lr_at(50, 1000, 100, 8e-4) == pytest.approx(4e-4)


def test_lr_continuous_at_junction():
    a, b = lr_at(99.999, 1000, 100, 1.0), lr_at(100.001, 1000, 100, 1.0)
    assert abs(a - b) < 1e-4


def test_lr_without_warmup_starts_at_peak():
    assert lr_at(0, 10, 0, 1.0) == 1.0


def make_label():
    hs = list(range(0, 128, 4))
    left = [ABSENT] * 8 + [int(100 - 0.5 * (y - 32)) for y in hs[8:]]
    right = [ABSENT] * 8 + [int(150 + 0.5 * (y - 32)) for y in hs[8:]]
    return LaneLabel(hs, [left, right])


def test_double_flip_is_identity():
    lab = make_label()
    assert hflip_label(hflip_label(lab, 256), 256) == lab


def test_flip_moves_host_left_to_slot_one():
    lab = make_label()
    before = assign_lane_slots(lab, 256, 2)
    after = assign_lane_slots(hflip_label(lab, 256), 256, 2)
    mirrored_left = [x if x == ABSENT else 255 - x for x in before[0]]
    assert after[1] == mirrored_left


def test_flip_only_augment_mirrors_image_and_label():
    img = np.random.default_rng(0).integers(0, 256, (128, 256, 3), dtype=np.uint8)
    cfg = AugmentConfig(crop_scale_range=(1.0, 1.0), hflip_prob=1.0, brightness=0, contrast=0)
    out_img, out_lab = augment(img, make_label(), cfg, np.random.default_rng(0))
    assert np.array_equal(out_img, img[:, ::-1])
    assert out_lab == hflip_label(make_label(), 256)


def test_zero_jitter_leaves_image_unchanged():
    img = np.random.default_rng(1).integers(0, 256, (128, 256, 3), dtype=np.uint8)
    cfg = AugmentConfig(crop_scale_range=(1.0, 1.0), hflip_prob=0.0, brightness=0, contrast=0)
    out_img, out_lab = augment(img, make_label(), cfg, np.random.default_rng(0))
    assert np.array_equal(out_img, img) and out_lab == make_label()


def test_photometric_jitter_keeps_label():
    img = np.full((128, 256, 3), 100, np.uint8)
    cfg = AugmentConfig(crop_scale_range=(1.0, 1.0), hflip_prob=0.0, brightness=0.3, contrast=0.3)
    out_img, out_lab = augment(img, make_label(), cfg, np.random.default_rng(5))
    assert out_lab == make_label() and not np.array_equal(out_img, img)


def test_crop_label_follows_the_image_mapping():
    # a vertical line at column 120 inside a half-size crop starting at x0=60
    hs = list(range(0, 128, 4))
    lab = LaneLabel(hs, [[120] * len(hs)])
    out = crop_label(lab, (60, 32, 128, 64), (128, 256))
    xs = {x for x in out.lanes[0] if x != ABSENT}
    assert xs == {int(math.floor((120 + 0.5 - 60) * 2))}


def test_crop_drops_lanes_leaving_the_frame():
    hs = list(range(0, 128, 4))
    lab = LaneLabel(hs, [[10] * len(hs), [128] * len(hs)])
    out = crop_label(lab, (64, 0, 128, 64), (128, 256))
    assert len(out.lanes) == 1


def test_config_parse_sections_and_defaults():
    cfg = parse_config("epochs = 5\nloss.lambda1 = 5  # comment\nmodel.stage_channels = 8,8,16,16\n"
                       "loss.vertex_loss_type = KL\naug.crop_scale_range = 0.9, 1.0\n")
    assert cfg.epochs == 5 and cfg.loss.lambda1 == 5.0
    assert cfg.model.stage_channels == [8, 8, 16, 16]
    assert cfg.aug.crop_scale_range == (0.9, 1.0)
    assert cfg.decode.loss_type == "KL"
    assert cfg.base_lr == 8e-4 and cfg.batch_size == 8


def test_config_round_trip():
    cfg = parse_config("model.shared_hrms = 1\nseed = 4\n")
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


@pytest.mark.parametrize("text,match", [
    ("epochs = 3\nloss.lambda3 = 1\n", ":2: unknown key 'loss.lambda3'"),
    ("model = 3\n", ":1: unknown key"),
    ("epochs\n", ":1: expected"),
    ("epochs = many\n", ":1: bad value"),
])
def test_config_errors_name_the_line(text, match):
    with pytest.raises(ValueError, match=match):
        parse_config(text, "cfg.txt")


def fixed_batch():
    cfg = SceneConfig(seed=0)
    pairs = [generate_scene(cfg, i) for i in range(4)]
    return make_batch([p[0] for p in pairs], [p[1] for p in pairs], ModelConfig(**TINY_MODEL))


@pytest.mark.parametrize("loss_type", ["CE", "KL", "PL"])
def test_loss_decreases_on_a_fixed_batch(loss_type):
    torch.manual_seed(0)
    x, target = fixed_batch()
    model = LaneDetector(ModelConfig(**TINY_MODEL))
    opt = torch.optim.AdamW(model.parameters(), lr=8e-4, weight_decay=1e-4)
    lcfg = LossConfig(vertex_loss_type=loss_type)
    losses = []
    for _ in range(50):
        loss = compute_losses(model(x), target, lcfg)["total"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert np.mean(losses[-5:]) < 0.7 * np.mean(losses[:5])


def small_train_config(**kw):
    return TrainConfig(max_steps=6, batch_size=4, warmup_epochs=0.5, eval_every=1,
                       model=ModelConfig(**TINY_MODEL), **kw)


def small_data(start, n=8):
    cfg = SceneConfig(seed=0)
    pairs = [generate_scene(cfg, start + i) for i in range(n)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def test_train_writes_log_and_checkpoint_round_trips(tmp_path):
    val = small_data(100)
    res = train(small_train_config(checkpoint_every=3), tmp_path, small_data(0), val)
    assert res.steps == 6
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 3 and all("val" in l and "time" in l for l in lines)
    assert (tmp_path / "ckpt_step000003" / "manifest.txt").exists()
    assert (tmp_path / "train_config.txt").exists()
    before = evaluate_model(res.model, *val, "culane")
    label_path = write_dataset(SceneConfig(seed=0), tmp_path / "val", count=8, start=100)
    after = evaluate(res.final_checkpoint, label_path, "culane")
    assert after.to_dict() == before.to_dict()


def test_nan_loss_aborts_with_batch_index(tmp_path):
    cfg = small_train_config()
    cfg.base_lr = 1e30
    cfg.max_steps = 20
    with pytest.raises(RuntimeError, match="non-finite loss at step"):
        train(cfg, tmp_path, small_data(0), small_data(0))


def test_warmup_must_fit():
    cfg = small_train_config()
    cfg.warmup_epochs = 10
    with pytest.raises(ValueError, match="warmup"):
        train(cfg, None, small_data(0), small_data(0))


def test_crop_snaps_lane_end_to_nearest_row():
    # lane drawn from y = 32; after a slight zoom its end maps to y = 32.03,
    # so the first labelled output row is 32 rather than the next grid row 36
    hs = list(range(0, 128, 4))
    lab = LaneLabel(hs, [[ABSENT] * 8 + [100] * 24])
    out = crop_label(lab, (8, 2, 240, 120), (128, 256))
    first = next(y for x, y in zip(out.lanes[0], hs) if x != ABSENT)
    assert (32 - 2 + 0.5) * 128 / 120 - 0.5 == pytest.approx(32.03, abs=0.01)
    assert first == 32
