"""Acceptance criteria 1-10, each at its stated tolerance and time limit.

Every test prints one ``[PASS]``/``[FAIL]`` line; the lines are also repeated in
the terminal summary by ``conftest.py``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from tinydistill import pipeline
from tinydistill.config import load_config
from tinydistill.coreset import curate, quality_scores
from tinydistill.distill import (
    DistillConfig,
    HeadProjection,
    ablation_variants,
    consistency_score,
    cosine_consistency,
    distill_loss,
    run_distillation,
)
from tinydistill.encoder import GradientTrace, build_encoder, state_checksum, student_config, teacher_config, to_tensor
from tinydistill.experiments import build_bench, coreset_benefit, vanilla_gap
from tinydistill.masking import FrequencyMaskSpec, SpatialMaskSpec, default_center_preserve, frequency_mask, spatial_mask

from oracles import blob_instance, central_difference_check, curate_loop, tiny_models

VERDICTS: list[str] = []


def verdict(n: int, title: str, ok: bool, seconds: float, limit: float, detail: str = "") -> None:
    within = seconds < limit
    passed = ok and within
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d} {title}: {detail} ({seconds:.1f}s / limit {limit:.0f}s)"
    VERDICTS.append(line)
    print(line)
    assert ok, line
    assert within, line


# ----------------------------------------------------------------- 1 to 7


def test_c01_masking_counts_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = 0
    for seed in range(100):
        patch = int(rng.choice([4, 8, 16]))
        h, w = patch * int(rng.integers(2, 9)), patch * int(rng.integers(2, 9))
        img = rng.random((h, w))
        spa = spatial_mask(img, SpatialMaskSpec(patch_size=patch, mask_ratio=0.75, seed=seed))
        p = (h // patch) * (w // patch)
        failures += int(spa.mask_map.sum() != int(np.floor(0.75 * p + 0.5)))
        shape = tuple(int(s) for s in rng.choice([16, 32, 48, 64], size=2))
        freq = frequency_mask(rng.random(shape), FrequencyMaskSpec(mask_ratio=0.4, seed=seed))
        ph, pw = default_center_preserve(shape)
        e = shape[0] * shape[1] - ph * pw
        failures += int(freq.mask_map.sum() != int(np.floor(0.4 * e + 0.5)))
    verdict(1, "masking exactness", failures == 0, time.perf_counter() - t0, 10, f"{failures} count mismatches over 200 masks")


def test_c02_frequency_identity_and_phase():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_id = worst_phase = worst_imag = 0.0
    for seed in range(20):
        img = 0.2 + 0.6 * rng.random((64, 64))
        empty = frequency_mask(img, FrequencyMaskSpec(mask_ratio=0.0, seed=seed), clip=False)
        worst_id = max(worst_id, float(np.abs(empty.image - img).max()))
        view = frequency_mask(img, FrequencyMaskSpec(mask_ratio=0.4, seed=seed), clip=False)
        f0 = np.fft.fftshift(np.fft.fft2(img))
        f1 = np.fft.fftshift(np.fft.fft2(view.image))
        keep = ~view.mask_map & (np.abs(f0) > 1e-8)
        worst_phase = max(worst_phase, float(np.abs(np.angle(f1[keep] * np.conj(f0[keep]))).max()))
        worst_imag = max(worst_imag, view.imag_residual, empty.imag_residual)
    ok = worst_id < 1e-5 and worst_phase < 1e-4 and worst_imag < 1e-6
    verdict(2, "frequency identity and phase", ok, time.perf_counter() - t0, 10,
            f"identity {worst_id:.2e}, phase {worst_phase:.2e} rad, imag {worst_imag:.2e}")


def test_c03_coreset_oracle_equivalence():
    t0 = time.perf_counter()
    mismatches = 0
    for k in range(20):
        ids, feats, norms = blob_instance(500 + k)
        traces = [GradientTrace(i, norms[i]) for i in ids]
        budget = 1 + k % max(1, len(ids) // 2)
        sel, _, _ = curate(ids, feats, traces, budget, 2, 2, 0.5, 0.5, seed=k)
        mismatches += int(sel.ids != curate_loop(ids, feats, norms, budget, 2, 2, 0.5, 0.5, k))
    verdict(3, "coreset oracle equivalence", mismatches == 0, time.perf_counter() - t0, 60, f"{mismatches}/20 instances differ")


def test_c04_score_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    const = quality_scores([GradientTrace("c", [2.5] * 6), GradientTrace("v", [1.0, 3.0, 2.0, 4.0, 0.5, 2.0])])
    ok_const = const[0].s_stb == 1.0
    traces = [GradientTrace(f"t{i}", list(rng.gamma(2.0, 1.0, size=5))) for i in range(40)]
    q = quality_scores(traces)
    mus = [np.mean(t.norms) for t in traces]
    ok_ends = q[int(np.argmin(mus))].s_mag == 0.0 and q[int(np.argmax(mus))].s_mag == 1.0
    ok_range = all(0.0 <= v <= 1.0 for s in q for v in (s.s_stb, s.s_mag, s.s))
    ids, feats, norms = blob_instance(44)
    base = [GradientTrace(i, norms[i]) for i in ids]
    scaled = [GradientTrace(t.id, [7.3 * v for v in t.norms]) for t in base]
    a, _, _ = curate(ids, feats, base, 10, 2, 2)
    b, _, _ = curate(ids, feats, scaled, 10, 2, 2)
    ok_scale = a.ids == b.ids and [s.r for s in a.selected] == [s.r for s in b.selected]
    ok = ok_const and ok_ends and ok_range and ok_scale
    verdict(4, "score properties", ok, time.perf_counter() - t0, 5,
            f"constant {ok_const}, endpoints {ok_ends}, range {ok_range}, rescaling {ok_scale}")


def test_c05_consistency_contract():
    t0 = time.perf_counter()
    torch.manual_seed(5)
    teacher = build_encoder(teacher_config(depth=2, dim=16, heads=2, mid_layer=1, tap_layers=(1, 2)), 5)
    x = to_tensor(np.random.default_rng(5).random((4, 64, 64)))
    y = to_tensor(np.random.default_rng(6).random((4, 64, 64)))
    s_same = consistency_score(teacher, x, x)
    s_diff = consistency_score(teacher, x, y)
    rand = cosine_consistency(torch.randn(256, 12, dtype=torch.float64), torch.randn(256, 12, dtype=torch.float64))
    ok_range = bool(((rand >= 0) & (rand <= 1)).all() and ((s_diff >= 0) & (s_diff <= 1)).all())
    ok_ident = bool(torch.allclose(s_same, torch.ones(4), atol=1e-6))
    g = torch.Generator().manual_seed(0)
    s = [torch.randn(3, 2, 5, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    t = [torch.randn(3, 2, 5, 6, generator=g, dtype=torch.float64) for _ in range(2)]
    proj = HeadProjection(2, 4, 6).double()
    full = distill_loss(s, t, proj, torch.ones(3, dtype=torch.float64)).item()
    half = distill_loss(s, t, proj, torch.full((3,), 0.5, dtype=torch.float64)).item()
    zero = distill_loss(s, t, proj, torch.zeros(3, dtype=torch.float64)).item()
    ratio_err = abs(half / full - 0.5)
    ok = ok_range and ok_ident and ratio_err < 1e-6 and zero == 0.0
    verdict(5, "consistency-score contract", ok, time.perf_counter() - t0, 30,
            f"range {ok_range}, identical->1 {ok_ident}, ratio error {ratio_err:.1e}, zero gate {zero}")


def test_c06_gradient_check():
    t0 = time.perf_counter()
    from tinydistill.distill import distill_step
    from tinydistill.masking import make_view_pair

    teacher, student, decoder, proj = tiny_models(torch.float64)
    imgs = np.random.default_rng(3).random((2, 16, 16))
    pairs = [make_view_pair(im, SpatialMaskSpec(patch_size=4, seed=i), FrequencyMaskSpec(seed=i)) for i, im in enumerate(imgs)]
    spa, freq, orig = (to_tensor(np.stack(a), torch.float64) for a in ([p[0].image for p in pairs], [p[1].image for p in pairs], imgs))
    cfg = DistillConfig(mid_layer=1, lambda_recon=0.7)
    fn = lambda: distill_step(teacher, student, decoder, proj, spa, freq, orig, cfg).loss_total  # noqa: E731
    err = central_difference_check(fn, [*student.parameters(), *decoder.parameters(), proj.weight])
    verdict(6, "gradient check", err < 1e-4, time.perf_counter() - t0, 120, f"relative error {err:.2e}")


def test_c07_frozen_teacher_and_determinism(phantom_dir):
    from tinydistill.data import load_images

    t0 = time.perf_counter()
    _, recs = phantom_dir
    images, ids = load_images(recs[:12], (64, 64)), [r.id for r in recs[:12]]
    tcfg = teacher_config(depth=2, dim=16, heads=2, mid_layer=1, tap_layers=(1, 2))
    scfg = student_config(depth=2, dim=8, heads=2, mid_layer=1, tap_layers=(1, 2))
    teacher = build_encoder(tcfg, 7)
    before = state_checksum(teacher)
    dcfg = DistillConfig(mid_layer=1, epochs=3, batch_size=4, seed=3)
    a = run_distillation(teacher, images, ids, dcfg, scfg)
    b = run_distillation(teacher, images, ids, dcfg, scfg)
    frozen = state_checksum(teacher) == before == a.teacher_checksum == b.teacher_checksum
    same_log = a.log == b.log
    same_ckpt = state_checksum(a.student, a.decoder, a.projections) == state_checksum(b.student, b.decoder, b.projections)
    verdict(7, "frozen teacher and determinism", frozen and same_log and same_ckpt, time.perf_counter() - t0, 120,
            f"teacher unchanged {frozen}, identical logs {same_log}, identical checkpoints {same_ckpt}")


# ---------------------------------------------------------------- 8 to 10


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    torch.set_num_threads(1)
    cfg = load_config(None)
    return build_bench(cfg, tmp_path_factory.mktemp("bench"))


@pytest.mark.slow
def test_c08_distilled_beats_vanilla(bench):
    t0 = time.perf_counter()
    res = vanilla_gap(bench, range(5))
    m = res["mean"]
    ok = m["delta_accuracy"] > 0 and m["delta_dice"] > 0
    seconds = time.perf_counter() - t0 + bench.seconds
    verdict(8, "distilled beats vanilla", ok, seconds, 20 * 60,
            f"accuracy {m['distilled_accuracy']:.4f} vs {m['vanilla_accuracy']:.4f} ({m['delta_accuracy']:+.4f}), "
            f"dice {m['distilled_dice']:.4f} vs {m['vanilla_dice']:.4f} ({m['delta_dice']:+.4f})")


@pytest.mark.slow
def test_c09_curated_subset_not_worse(bench):
    t0 = time.perf_counter()
    res = coreset_benefit(bench, range(5), fraction=0.25)
    m = res["mean"]
    ok = m["curated_val_loss"] <= m["random_val_loss"]
    seconds = time.perf_counter() - t0 + bench.seconds
    verdict(9, "curated 25% subset vs random 25%", ok, seconds, 15 * 60,
            f"val loss curated {m['curated_val_loss']:.5f} vs random {m['random_val_loss']:.5f} (budget {res['budget']})")


@pytest.mark.slow
def test_c10_ablation_sweep(tmp_path):
    from tinydistill.cli import run

    t0 = time.perf_counter()
    over = ["--data.phantoms=128", "--teacher.epochs=2", "--teacher.trace_epochs=2", "--distill.epochs=2",
            f"--out_root={json.dumps(str(tmp_path))}"]
    code = run(["sweep", "--kind", "ablation", *over])
    cfg = load_config(None, [o[2:] for o in over])
    out = pipeline.sweep_dir(cfg)
    rows = pipeline.read_csv(out / "results.csv") if code == 0 else []
    expected = {c.name for c in ablation_variants(cfg.distill_config(), cfg.sweep.layers)}
    got = {r["variant"] for r in rows}
    complete = all(
        len(pipeline.read_csv(f"{r['run_dir']}/log.csv")) == cfg.distill.epochs and (Path(r["run_dir"]) / "student.pt").is_file()
        for r in rows
    )
    plots = all((out / f).is_file() for f in ("ablation.png", "ablation.svg", "metric_vs_layer.png"))
    ok = code == 0 and got == expected and complete and plots
    verdict(10, "ablation sweep machinery", ok, time.perf_counter() - t0, 30 * 60,
            f"{len(got & expected)}/{len(expected)} variants, complete logs {complete}, plots {plots}")
