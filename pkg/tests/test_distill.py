import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tinydistill.data import load_images
from tinydistill.distill import (
    DistillConfig,
    HeadProjection,
    LOG_COLUMNS,
    ablation_variants,
    build_projection,
    consistency_score,
    cosine_consistency,
    distill_loss,
    distill_step,
    recon_loss,
    run_distillation,
    total_loss,
)
from tinydistill.encoder import build_encoder, state_checksum, student_config, teacher_config, to_tensor
from tinydistill.masking import FrequencyMaskSpec, SpatialMaskSpec, make_view_pair

from oracles import central_difference_check, tiny_models

TINY_T = teacher_config(depth=2, dim=16, heads=2, mid_layer=1, tap_layers=(1, 2))
TINY_S = student_config(depth=2, dim=8, heads=2, mid_layer=1, tap_layers=(1, 2))


def _views(n=2, seed=0, size=16, patch=4):
    r = np.random.default_rng(seed)
    imgs = r.random((n, size, size))
    pairs = [make_view_pair(im, SpatialMaskSpec(patch_size=patch, seed=seed + i), FrequencyMaskSpec(seed=seed + i)) for i, im in enumerate(imgs)]
    spa = np.stack([p[0].image for p in pairs])
    freq = np.stack([p[1].image for p in pairs])
    return (to_tensor(x, torch.float64) for x in (spa, freq, imgs))


class TestConsistency:
    def test_identical(self):
        a = torch.randn(4, 6)
        assert torch.allclose(cosine_consistency(a, a), torch.ones(4))

    def test_opposite(self):
        a = torch.randn(3, 5)
        assert torch.allclose(cosine_consistency(a, -a), torch.zeros(3), atol=1e-7)

    def test_zero_guard(self):
        assert cosine_consistency(torch.zeros(1, 4), torch.ones(1, 4)).item() == 0.5

    @given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
    def test_bounds(self, a, b):
        s = cosine_consistency(torch.tensor([a], dtype=torch.float64), torch.tensor([b], dtype=torch.float64))
        assert 0.0 <= s.item() <= 1.0

    def test_teacher_identical_views(self, rng):
        t = build_encoder(TINY_T)
        x = to_tensor(rng.random((3, 64, 64)))
        assert torch.allclose(consistency_score(t, x, x), torch.ones(3), atol=1e-6)


class TestDistillLoss:
    def _heads(self, b=3):
        g = torch.Generator().manual_seed(0)
        s = [torch.randn(b, 2, 5, 4, generator=g, dtype=torch.float64) for _ in range(2)]
        t = [torch.randn(b, 2, 5, 6, generator=g, dtype=torch.float64) for _ in range(2)]
        proj = HeadProjection(2, 4, 6).double()
        return s, t, proj

    def test_zero_gate(self):
        s, t, p = self._heads()
        assert distill_loss(s, t, p, torch.zeros(3, dtype=torch.float64)).item() == 0.0

    def test_linear_in_gate(self):
        s, t, p = self._heads()
        full = distill_loss(s, t, p, torch.ones(3, dtype=torch.float64))
        half = distill_loss(s, t, p, torch.full((3,), 0.5, dtype=torch.float64))
        assert abs(half.item() / full.item() - 0.5) < 1e-6

    def test_matches_explicit_sum(self):
        s, t, p = self._heads(b=2)
        gate = torch.tensor([0.2, 0.9], dtype=torch.float64)
        expect = 0.0
        for i in range(2):
            per_view = []
            for v in range(2):
                hs = [((s[v][i, h] @ p.weight[h].T - t[v][i, h]) ** 2).mean().item() for h in range(2)]
                per_view.append(sum(hs) / 2)
            expect += gate[i].item() * sum(per_view) / 2
        assert distill_loss(s, t, p, gate).item() == pytest.approx(expect / 2, rel=1e-12)

    def test_head_mismatch(self):
        s, t, p = self._heads()
        with pytest.raises(ValueError):
            distill_loss(s, [x[:, :1] for x in t], p, torch.ones(3))

    def test_projection_shape(self):
        proj = build_projection(student_config(), teacher_config())
        assert proj.weight.shape == (4, 16, 8)
        assert proj(torch.zeros(2, 4, 64, 8)).shape == (2, 4, 64, 16)

    def test_projection_head_count(self):
        with pytest.raises(ValueError, match="heads"):
            build_projection(student_config(heads=2), teacher_config())


class TestTotal:
    def test_lambda(self):
        assert total_loss(1.0, 2.0, 3.0, 0.5) == 3.5
        assert total_loss(1.0, 2.0, 3.0, 0.0) == 1.0

    def test_non_finite_named(self):
        with pytest.raises(FloatingPointError, match="loss_recon_frequency"):
            total_loss(1.0, 0.0, float("nan"))

    def test_recon_zero_for_perfect_decoder(self):
        teacher, student, decoder, _ = tiny_models()
        spa, freq, orig = _views()
        with torch.no_grad():
            decoder.proj.weight.zero_()
            decoder.proj.bias.fill_(0.25)
        ls, lf = recon_loss(student, decoder, spa, freq, torch.full_like(orig, 0.25), 1)
        assert ls.item() == lf.item() == 0.0


def _step_fn(config):
    teacher, student, decoder, proj = tiny_models()
    spa, freq, orig = _views(n=2, seed=3)
    return (lambda: distill_step(teacher, student, decoder, proj, spa, freq, orig, config).loss_total), [
        *student.parameters(),
        *decoder.parameters(),
        proj.weight,
    ], teacher


class TestGradients:
    @pytest.mark.parametrize(
        "cfg",
        [
            DistillConfig(mid_layer=1, lambda_recon=0.7),
            DistillConfig(mid_layer=1, dynamic_weighting=False, recon_domains=("frequency",)),
        ],
        ids=["full", "fixed-F"],
    )
    def test_central_differences(self, cfg):
        fn, params, _ = _step_fn(cfg)
        assert central_difference_check(fn, params) < 1e-4

    def test_teacher_receives_no_gradient(self):
        fn, _, teacher = _step_fn(DistillConfig(mid_layer=1))
        fn().backward()
        assert all(p.grad is None for p in teacher.parameters())


@pytest.fixture(scope="module")
def data(phantom_dir):
    _, recs = phantom_dir
    return load_images(recs[:12], (64, 64)), [r.id for r in recs[:12]]


class TestRun:
    def _run(self, data, **kw):
        images, ids = data
        teacher = build_encoder(TINY_T, 5)
        cfg = DistillConfig(mid_layer=1, epochs=3, batch_size=4, lr=1e-3, **kw)
        return teacher, run_distillation(teacher, images, ids, cfg, TINY_S, val_images=images[:4], val_ids=ids[:4])

    def test_frozen_teacher_and_log(self, data):
        teacher, res = self._run(data)
        assert state_checksum(teacher) == res.teacher_checksum
        assert [tuple(row) for row in res.log] == [LOG_COLUMNS] * 3
        assert all(0.0 <= row["mean_s_cons"] <= 1.0 for row in res.log)
        assert res.val_loss is not None and np.isfinite(res.val_loss)

    def test_determinism(self, data):
        _, a = self._run(data, seed=2)
        _, b = self._run(data, seed=2)
        assert a.log == b.log
        assert state_checksum(a.student, a.decoder, a.projections) == state_checksum(b.student, b.decoder, b.projections)

    def test_no_mim(self, data):
        _, res = self._run(data, recon_domains=())
        assert all(row["loss_recon_spa"] == row["loss_recon_freq"] == 0.0 for row in res.log)

    def test_empty(self, data):
        with pytest.raises(ValueError, match="empty"):
            run_distillation(build_encoder(TINY_T), data[0][:0], [], DistillConfig(mid_layer=1), TINY_S)

    def test_mid_layer_too_deep(self, data):
        with pytest.raises(ValueError, match="mid_layer"):
            run_distillation(build_encoder(TINY_T), *data, DistillConfig(mid_layer=5), TINY_S)


def test_ablation_grid():
    names = [c.name for c in ablation_variants(DistillConfig())]
    assert len(names) == 14 and len(set(names)) == 14
    assert {"no-MIM/fixed", "S-MIM/dynamic", "F-MIM/fixed", "S+F-MIM/dynamic"} <= set(names)
    assert "S+F-MIM/dynamic/L12" in names


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(recon_domains=("audio",))
    with pytest.raises(ValueError):
        DistillConfig(lambda_recon=-1)
