import csv

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tinydistill.adapt import (
    EVAL_COLUMNS,
    ProbeConfig,
    SegHeadConfig,
    accuracy,
    build_seg_head,
    dice,
    evaluate,
    lr_schedule,
    train_probe,
    train_probe_on_features,
    train_seg,
    write_eval_csv,
)
from tinydistill.data import generate_phantoms, load_images, load_masks
from tinydistill.encoder import build_encoder, embed_images, state_checksum, student_config, to_tensor
from tinydistill.schedule import default_warmup, warmup_poly

SHALLOW = student_config(depth=2, mid_layer=1, tap_layers=(1, 2))


class TestSchedule:
    def test_boundary_is_lr0(self):
        assert warmup_poly(10, 100, 0.5, 10) == 0.5

    def test_warmup_ramp(self):
        assert warmup_poly(0, 100, 1.0, 10) == pytest.approx(0.1)

    def test_last_step_power_one(self):
        assert warmup_poly(100, 100, 1.0, 10, power=1.0) == 0.0
        assert warmup_poly(99, 100, 1.0, 10, power=1.0) <= 1.0 / 90 + 1e-15

    def test_hand_value(self):
        assert warmup_poly(55, 100, 2.0, 10) == pytest.approx(2.0 * 0.5**0.9)

    def test_errors(self):
        with pytest.raises(ValueError):
            warmup_poly(0, 10, 1.0, 10)
        with pytest.raises(ValueError):
            warmup_poly(11, 10, 1.0, 2)

    def test_default_warmup(self):
        assert default_warmup(100) == 5 and default_warmup(2) == 1

    @given(st.integers(2, 500), st.floats(1e-6, 1.0), st.floats(0.1, 3.0))
    def test_shape(self, total, lr0, power):
        w = default_warmup(total)
        lrs = [warmup_poly(s, total, lr0, w, power) for s in range(total + 1)]
        assert all(a <= b for a, b in zip(lrs[:w], lrs[1 : w + 1]))
        assert all(a >= b for a, b in zip(lrs[w:], lrs[w + 1 :]))
        assert max(lrs) == pytest.approx(lr0) and min(lrs) >= 0.0

    def test_probe_schedule_override(self):
        cfg = ProbeConfig(lr0=1.0, warmup_steps=4)
        assert lr_schedule(4, 20, cfg) == 1.0


class TestMetrics:
    def test_accuracy(self):
        assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
        assert accuracy([0, 1], [1, 0]) == 0.0
        with pytest.raises(ValueError):
            accuracy([], [])

    def test_dice_cases(self):
        a = np.zeros((4, 4), int)
        a[:2] = 1
        b = np.zeros((4, 4), int)
        b[2:] = 1
        assert dice(a, a, 2)[1] == 1.0
        assert dice(a, b, 2)[0][1] == 0.0
        half = np.zeros((4, 4), int)
        half[1:3] = 1
        assert dice(a, half, 2)[0][1] == pytest.approx(0.5)

    def test_empty_both(self):
        per, agg = dice(np.zeros((3, 3), int), np.zeros((3, 3), int), 3)
        assert per.tolist() == [1.0, 1.0, 1.0] and agg == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2)), np.zeros((3, 3)), 2)

    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_dice_symmetric_bounded(self, seed, k):
        r = np.random.default_rng(seed)
        a, b = r.integers(0, k, (8, 8)), r.integers(0, k, (8, 8))
        pa, _ = dice(a, b, k)
        pb, _ = dice(b, a, k)
        np.testing.assert_array_equal(pa, pb)
        assert ((0 <= pa) & (pa <= 1)).all()


class TestProbe:
    def test_separable_features(self):
        r = np.random.default_rng(0)
        x = np.concatenate([r.normal(-2, 0.3, (20, 5)), r.normal(2, 0.3, (20, 5))])
        y = np.array([0] * 20 + [1] * 20)
        res = train_probe_on_features(x, y, ProbeConfig(num_classes=2, epochs=40, lr0=1e-2), seed=1)
        assert res.train_accuracy == 1.0 and len(res.log) == 40

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            train_probe_on_features(np.zeros((4, 2)), np.zeros(4, int), ProbeConfig(), 0)

    def test_missing_labels(self, rng):
        with pytest.raises(ValueError, match="label"):
            train_probe(build_encoder(SHALLOW), rng.random((2, 64, 64)), [0, None], ProbeConfig())

    def test_frozen_and_deterministic(self, phantom_dir):
        _, recs = phantom_dir
        images, labels = load_images(recs, (64, 64)), [r.label for r in recs]
        enc = build_encoder(SHALLOW, 1)
        before = state_checksum(enc)
        x = to_tensor(images[:2])
        out0 = enc(x).final.clone()
        cfg = ProbeConfig(num_classes=3, epochs=3, lr0=1e-2)
        a, b = train_probe(enc, images, labels, cfg, 5), train_probe(enc, images, labels, cfg, 5)
        assert state_checksum(enc) == before and torch.equal(enc(x).final, out0)
        assert a.log == b.log
        r1 = evaluate(enc, a.head, images, labels, "cls", 3)
        r2 = evaluate(enc, b.head, images, labels, "cls", 3)
        assert r1 == r2 and 0 <= r1.aggregate <= 1
        feats = embed_images(enc, images, kind="heads")
        preds = a.head(torch.as_tensor(feats)).argmax(1).numpy()
        assert r1.aggregate == pytest.approx(np.mean(preds == np.array(labels)))

    def test_token_readout(self, phantom_dir):
        _, recs = phantom_dir
        images = load_images(recs, (64, 64))
        enc = build_encoder(SHALLOW, 1)
        cfg = ProbeConfig(num_classes=3, epochs=2, augment=False, readout="tokens")
        res = train_probe(enc, images, [r.label for r in recs], cfg)
        assert res.head.linear.in_features == 32 and res.head.readout == "tokens"
        with pytest.raises(ValueError):
            ProbeConfig(readout="cls-token")

    def test_single_sample_eval(self, phantom_dir):
        _, recs = phantom_dir
        images = load_images(recs, (64, 64))
        enc = build_encoder(SHALLOW, 1)
        res = train_probe(enc, images, [r.label for r in recs], ProbeConfig(num_classes=3, epochs=1, augment=False))
        assert evaluate(enc, res.head, images[:1], [recs[0].label], "cls", 3).n_samples == 1

    def test_finetune_changes_backbone(self, phantom_dir):
        _, recs = phantom_dir
        images = load_images(recs[:8], (64, 64))
        enc = build_encoder(SHALLOW, 1)
        before = state_checksum(enc)
        cfg = ProbeConfig(num_classes=3, epochs=1, lr0=1e-3, freeze_backbone=False, augment=False, batch_size=4)
        train_probe(enc, images, [r.label for r in recs[:8]], cfg)
        assert state_checksum(enc) != before


class TestSeg:
    def test_head_shapes(self, rng):
        enc = build_encoder(student_config())
        head = build_seg_head(enc, SegHeadConfig(num_classes=4))
        taps = enc(to_tensor(rng.random((2, 64, 64))), taps=(3, 5, 7, 11)).taps
        assert head([taps[l] for l in (3, 5, 7, 11)]).shape == (2, 4, 64, 64)

    def test_taps_out_of_depth(self):
        with pytest.raises(ValueError):
            build_seg_head(build_encoder(SHALLOW), SegHeadConfig())

    def test_mask_mismatch(self, rng):
        with pytest.raises(ValueError, match="shape"):
            train_seg(build_encoder(SHALLOW), rng.random((2, 64, 64)), np.zeros((2, 32, 32), int), SegHeadConfig(tap_layers=(1, 2)), ProbeConfig())

    def test_all_background(self, rng):
        enc = build_encoder(SHALLOW)
        images, masks = rng.random((6, 64, 64)), np.zeros((6, 64, 64), int)
        cfg = ProbeConfig(num_classes=2, epochs=5, lr0=1e-2, augment=False)
        res = train_seg(enc, images, masks, SegHeadConfig(tap_layers=(1, 2), num_classes=2), cfg)
        ev = evaluate(enc, res.head, images, masks, "seg", 2)
        assert ev.per_class[0] == 1.0

    @pytest.mark.slow
    def test_single_ellipse_dice(self, tmp_path):
        recs = generate_phantoms(96, 1, seed=3, out_dir=tmp_path)
        images, masks = load_images(recs, (64, 64)), load_masks(recs, (64, 64))
        enc = build_encoder(SHALLOW, 0)
        cfg = ProbeConfig(num_classes=2, epochs=60, lr0=3e-2, augment=False, batch_size=16)
        res = train_seg(enc, images[:80], masks[:80], SegHeadConfig(tap_layers=(1, 2), num_classes=2), cfg)
        ev = evaluate(enc, res.head, images[80:], masks[80:], "seg", 2)
        assert ev.aggregate > 0.8
        assert ev.aggregate == pytest.approx(np.mean([ev.per_class[c] for c in range(1, 2)]))

    def test_eval_csv(self, tmp_path, rng):
        enc = build_encoder(SHALLOW)
        images, masks = rng.random((3, 64, 64)), rng.integers(0, 2, (3, 64, 64))
        res = train_seg(enc, images, masks, SegHeadConfig(tap_layers=(1, 2), num_classes=2), ProbeConfig(num_classes=2, epochs=1, augment=False))
        ev = evaluate(enc, res.head, images, masks, "seg", 2, seed=4)
        write_eval_csv([ev], tmp_path / "e.csv", {"delta": lambda r, row: 0.0})
        rows = list(csv.DictReader(open(tmp_path / "e.csv")))
        assert tuple(rows[0])[: len(EVAL_COLUMNS)] == EVAL_COLUMNS and "delta" in rows[0]
        assert rows[-1]["class"] == "all" and rows[-1]["seed"] == "4"

    def test_unknown_task(self, rng):
        with pytest.raises(ValueError):
            evaluate(build_encoder(SHALLOW), None, rng.random((1, 64, 64)), [0], "detect", 2)
