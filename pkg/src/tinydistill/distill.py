"""Consistency-weighted head distillation with domain-separated mid-layer reconstruction."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import (
    EncoderConfig,
    PatchDecoder,
    ViTEncoder,
    build_decoder,
    build_encoder,
    pool,
    seeded,
    state_checksum,
    to_tensor,
)
from .masking import FrequencyMaskSpec, SpatialMaskSpec, view_batch
from .schedule import default_warmup, set_lr, warmup_poly
from .seeding import derive_seed

logger = logging.getLogger(__name__)

DOMAINS = ("spatial", "frequency")
LOG_COLUMNS = ("epoch", "loss_total", "loss_distill", "loss_recon_spa", "loss_recon_freq", "mean_s_cons", "lr")


@dataclass(frozen=True)
class DistillConfig:
    lambda_recon: float = 1.0
    mid_layer: int = 8
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    poly_power: float = 0.9
    seed: int = 0
    recon_domains: tuple[str, ...] = DOMAINS
    dynamic_weighting: bool = True
    name: str = "S+F-MIM/dynamic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "recon_domains", tuple(self.recon_domains))
        if self.lambda_recon < 0:
            raise ValueError("lambda_recon must be >= 0")
        unknown = set(self.recon_domains) - set(DOMAINS)
        if unknown:
            raise ValueError(f"unknown reconstruction domains {sorted(unknown)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.mid_layer < 1:
            raise ValueError("mid_layer must be >= 1")


@dataclass
class DistillBatchState:
    s_cons: torch.Tensor
    loss_distill: torch.Tensor
    loss_recon_spatial: torch.Tensor
    loss_recon_frequency: torch.Tensor
    loss_total: torch.Tensor


class HeadProjection(nn.Module):
    """One bias-free linear map per head, student head width -> teacher head width."""

    def __init__(self, heads: int, student_dim: int, teacher_dim: int):
        super().__init__()
        bound = 1.0 / math.sqrt(student_dim)
        self.weight = nn.Parameter(torch.empty(heads, teacher_dim, student_dim).uniform_(-bound, bound))

    def forward(self, heads: torch.Tensor) -> torch.Tensor:
        # (..., H, T, ds) -> (..., H, T, dt)
        return torch.einsum("...htd,hed->...hte", heads, self.weight)


def build_projection(student: EncoderConfig, teacher: EncoderConfig, seed: int = 0) -> HeadProjection:
    if student.heads != teacher.heads:
        raise ValueError(f"student has {student.heads} heads, teacher {teacher.heads}; they must match")
    with seeded(derive_seed(seed, "projection")):
        return HeadProjection(student.heads, student.head_dim, teacher.head_dim)


def cosine_consistency(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(cos(a, b) + 1) / 2 row-wise; 0.5 when either vector is (near) zero."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    degenerate = (na < 1e-12) | (nb < 1e-12)
    cos = (a * b).sum(dim=-1) / torch.where(degenerate, torch.ones_like(na), na * nb)
    s = ((cos + 1.0) / 2.0).clamp(0.0, 1.0)
    return torch.where(degenerate, torch.full_like(s, 0.5), s)


@torch.no_grad()
def consistency_score(teacher: ViTEncoder, view_spa: torch.Tensor, view_freq: torch.Tensor) -> torch.Tensor:
    b = view_spa.shape[0]
    final = teacher(torch.cat([view_spa, view_freq])).final
    pooled = pool(final)
    return cosine_consistency(pooled[:b], pooled[b:])


def distill_loss(
    student_heads: Sequence[torch.Tensor],
    teacher_heads: Sequence[torch.Tensor],
    projections: HeadProjection,
    s_cons: torch.Tensor,
) -> torch.Tensor:
    """Mean over the batch of s_cons * per-view-averaged head MSE.

    ``student_heads[v]`` is (B, H, T, ds) and ``teacher_heads[v]`` is (B, H, T, dt)
    for each view v.
    """
    if len(student_heads) != len(teacher_heads):
        raise ValueError("student and teacher must provide the same views")
    per_view = []
    for s_h, t_h in zip(student_heads, teacher_heads):
        if s_h.shape[1] != t_h.shape[1]:
            raise ValueError(f"head count mismatch: student {s_h.shape[1]}, teacher {t_h.shape[1]}")
        err = (projections(s_h) - t_h) ** 2
        per_view.append(err.mean(dim=(2, 3)).mean(dim=1))  # (B,): 1/H sum_h MSE_h
    aligned = torch.stack(per_view).mean(dim=0)
    return (s_cons * aligned).mean()


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()


def recon_loss(
    student: ViTEncoder,
    decoder: PatchDecoder,
    view_spa: torch.Tensor,
    view_freq: torch.Tensor,
    originals: torch.Tensor,
    mid_layer: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    b = originals.shape[0]
    mid = student(torch.cat([view_spa, view_freq]), taps=[mid_layer]).taps[mid_layer]
    recon = decoder(mid)
    return mse(recon[:b], originals), mse(recon[b:], originals)


def total_loss(
    loss_distill, loss_recon_spatial, loss_recon_frequency, lambda_recon: float = 1.0
):
    """L_distill + lambda * (L_spa + L_freq); works on floats or tensors."""
    for name, value in (
        ("loss_distill", loss_distill),
        ("loss_recon_spatial", loss_recon_spatial),
        ("loss_recon_frequency", loss_recon_frequency),
    ):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name}: {v}")
    return loss_distill + lambda_recon * (loss_recon_spatial + loss_recon_frequency)


def distill_step(
    teacher: ViTEncoder,
    student: ViTEncoder,
    decoder: PatchDecoder,
    projections: HeadProjection,
    view_spa: torch.Tensor,
    view_freq: torch.Tensor,
    originals: torch.Tensor,
    config: DistillConfig,
) -> DistillBatchState:
    """Full objective for one batch; gradients flow to student, decoder and projections only."""
    b = originals.shape[0]
    both = torch.cat([view_spa, view_freq])
    with torch.no_grad():
        t_out = teacher(both, want_heads=True)
        if config.dynamic_weighting:
            pooled = pool(t_out.final)
            s_cons = cosine_consistency(pooled[:b], pooled[b:])
        else:
            s_cons = torch.ones(b, dtype=originals.dtype)
    taps = [config.mid_layer] if config.recon_domains else []
    s_out = student(both, taps=taps, want_heads=True)
    l_distill = distill_loss(
        [s_out.heads[:b], s_out.heads[b:]], [t_out.heads[:b], t_out.heads[b:]], projections, s_cons
    )
    zero = torch.zeros((), dtype=originals.dtype)
    l_spa, l_freq = zero, zero
    if config.recon_domains:
        recon = decoder(s_out.taps[config.mid_layer])
        if "spatial" in config.recon_domains:
            l_spa = mse(recon[:b], originals)
        if "frequency" in config.recon_domains:
            l_freq = mse(recon[b:], originals)
    l_total = total_loss(l_distill, l_spa, l_freq, config.lambda_recon)
    return DistillBatchState(s_cons, l_distill, l_spa, l_freq, l_total)


@dataclass
class DistillResult:
    student: ViTEncoder
    decoder: PatchDecoder
    projections: HeadProjection
    log: list[dict]
    teacher_checksum: str
    val_loss: Optional[float] = None
    val_components: dict = field(default_factory=dict)


def _views(images, ids, seed_parts, sspec, fspec):
    seeds = [derive_seed(*seed_parts, sid) for sid in ids]
    spa, freq = view_batch(images, seeds, sspec, fspec)
    return to_tensor(spa), to_tensor(freq)


def run_distillation(
    teacher: ViTEncoder,
    images: np.ndarray,
    ids: Sequence[str],
    config: DistillConfig,
    student_config: EncoderConfig,
    sspec: Optional[SpatialMaskSpec] = None,
    fspec: Optional[FrequencyMaskSpec] = None,
    val_images: Optional[np.ndarray] = None,
    val_ids: Optional[Sequence[str]] = None,
) -> DistillResult:
    if len(images) == 0:
        raise ValueError("empty coreset: nothing to distill on")
    if student_config.heads != teacher.config.heads:
        raise ValueError("teacher/student head counts differ")
    if config.mid_layer > student_config.depth:
        raise ValueError(f"mid_layer {config.mid_layer} exceeds student depth {student_config.depth}")
    sspec = sspec or SpatialMaskSpec(patch_size=student_config.patch_size)
    fspec = fspec or FrequencyMaskSpec()

    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    checksum = state_checksum(teacher)

    student = build_encoder(student_config, derive_seed(config.seed, "student"))
    decoder = build_decoder(student_config, derive_seed(config.seed, "student"))
    projections = build_projection(student_config, teacher.config, config.seed)
    params = [*student.parameters(), *decoder.parameters(), *projections.parameters()]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    n = len(images)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * steps_per_epoch
    warmup = default_warmup(total, config.warmup_fraction)
    originals = to_tensor(images)
    log = []
    step = 0
    for epoch in range(config.epochs):
        student.train()
        order = np.random.default_rng(derive_seed(config.seed, "distill-order", epoch)).permutation(n)
        sums = dict.fromkeys(("loss_total", "loss_distill", "loss_recon_spa", "loss_recon_freq", "mean_s_cons"), 0.0)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            spa, freq = _views(images[idx], [ids[i] for i in idx], (config.seed, "distill-mask", epoch), sspec, fspec)
            lr_now = warmup_poly(step, total, config.lr, warmup, config.poly_power)
            set_lr(opt, lr_now)
            state = distill_step(teacher, student, decoder, projections, spa, freq, originals[idx], config)
            opt.zero_grad()
            state.loss_total.backward()
            opt.step()
            step += 1
            k = len(idx)
            sums["loss_total"] += k * float(state.loss_total.detach())
            sums["loss_distill"] += k * float(state.loss_distill.detach())
            sums["loss_recon_spa"] += k * float(state.loss_recon_spatial.detach())
            sums["loss_recon_freq"] += k * float(state.loss_recon_frequency.detach())
            sums["mean_s_cons"] += float(state.s_cons.sum())
        row = {"epoch": epoch + 1, **{key: v / n for key, v in sums.items()}, "lr": lr_now}
        log.append(row)
        logger.info("distill epoch %d total %.5f s_cons %.3f", epoch + 1, row["loss_total"], row["mean_s_cons"])

    student.eval()
    if state_checksum(teacher) != checksum:
        raise RuntimeError("teacher weights changed during distillation")
    result = DistillResult(student, decoder, projections, log, checksum)
    if val_images is not None and len(val_images):
        comps = evaluate_distillation(teacher, student, decoder, projections, val_images, val_ids, config, sspec, fspec)
        result.val_loss = comps["loss_total"]
        result.val_components = comps
    return result


@torch.no_grad()
def evaluate_distillation(
    teacher, student, decoder, projections, images, ids, config: DistillConfig, sspec, fspec, eval_seed: int = 0
) -> dict:
    """Mean objective over held-out images with masks fixed by (eval_seed, id), independent of config.seed."""
    student.eval()
    n = len(images)
    sums = dict.fromkeys(("loss_total", "loss_distill", "loss_recon_spa", "loss_recon_freq", "mean_s_cons"), 0.0)
    originals = to_tensor(images)
    for start in range(0, n, config.batch_size):
        sl = slice(start, start + config.batch_size)
        spa, freq = _views(images[sl], list(ids[sl]), (eval_seed, "val-mask"), sspec, fspec)
        st = distill_step(teacher, student, decoder, projections, spa, freq, originals[sl], config)
        k = originals[sl].shape[0]
        sums["loss_total"] += k * float(st.loss_total)
        sums["loss_distill"] += k * float(st.loss_distill)
        sums["loss_recon_spa"] += k * float(st.loss_recon_spatial)
        sums["loss_recon_freq"] += k * float(st.loss_recon_frequency)
        sums["mean_s_cons"] += float(st.s_cons.sum())
    return {k: v / n for k, v in sums.items()}


RECON_VARIANTS = {
    "no-MIM": (),
    "S-MIM": ("spatial",),
    "F-MIM": ("frequency",),
    "S+F-MIM": DOMAINS,
}


def ablation_variants(config: DistillConfig, layers: Sequence[int] = (2, 4, 6, 8, 10, 12)) -> list[DistillConfig]:
    """Reconstruction-domain x weighting grid, plus a mid-layer sweep of the full method."""
    out = []
    for recon_name, domains in RECON_VARIANTS.items():
        for dynamic in (False, True):
            weighting = "dynamic" if dynamic else "fixed"
            out.append(
                dataclasses.replace(config, recon_domains=domains, dynamic_weighting=dynamic, name=f"{recon_name}/{weighting}")
            )
    for layer in layers:
        out.append(
            dataclasses.replace(config, recon_domains=DOMAINS, dynamic_weighting=True, mid_layer=layer, name=f"S+F-MIM/dynamic/L{layer}")
        )
    return out
