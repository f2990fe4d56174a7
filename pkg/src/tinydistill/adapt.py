"""Downstream adaptation: linear probe, FPN-style segmentation head, metrics."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import AugmentationPolicy, augment
from .encoder import ViTEncoder, embed_images, readout, seeded, to_tensor
from .schedule import default_warmup, set_lr, warmup_poly
from .seeding import derive_seed

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ("task", "class", "metric", "value", "n", "seed")


@dataclass(frozen=True)
class ProbeConfig:
    num_classes: int = 3
    freeze_backbone: bool = True
    lr0: float = 1e-4
    epochs: int = 40
    warmup_steps: Optional[int] = None  # None: 5% of total steps
    poly_power: float = 0.9
    batch_size: int = 32
    weight_decay: float = 0.0
    augment: bool = True
    readout: str = "heads"  # pooled final-block head outputs; "tokens" reads the post-norm tokens

    def __post_init__(self) -> None:
        if self.readout not in ("heads", "tokens"):
            raise ValueError(f"readout must be 'heads' or 'tokens', got {self.readout!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class SegHeadConfig:
    tap_layers: tuple[int, ...] = (3, 5, 7, 11)
    neck_dim: int = 32
    num_classes: int = 4  # background included
    finetune_backbone: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "tap_layers", tuple(sorted(int(t) for t in self.tap_layers)))
        if not self.tap_layers:
            raise ValueError("need at least one tap layer")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background + foreground)")

    def validate_for(self, depth: int) -> None:
        bad = [t for t in self.tap_layers if not 1 <= t <= depth]
        if bad:
            raise ValueError(f"tap layers {bad} outside backbone depth {depth}")


def lr_schedule(step: int, total: int, cfg: ProbeConfig) -> float:
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else default_warmup(total)
    return warmup_poly(step, total, cfg.lr0, warmup, cfg.poly_power)


# ----------------------------------------------------------------- metrics


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {labels.shape}")
    return float((preds == labels).mean())


def dice(pred: np.ndarray, true: np.ndarray, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class Dice (empty-vs-empty counts as 1) and the mean over foreground classes."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    scores = np.empty(num_classes)
    for c in range(num_classes):
        p, t = pred == c, true == c
        denom = p.sum() + t.sum()
        scores[c] = 1.0 if denom == 0 else 2.0 * (p & t).sum() / denom
    return scores, float(scores[1:].mean()) if num_classes > 1 else float(scores[0])


@dataclass
class EvalResult:
    task: str
    metric: str
    per_class: dict[int, float]
    aggregate: float
    n_samples: int
    seed: int
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = [
            {"task": self.task, "class": c, "metric": self.metric, "value": v, "n": self.n_samples, "seed": self.seed}
            for c, v in sorted(self.per_class.items())
        ]
        rows.append({"task": self.task, "class": "all", "metric": self.metric, "value": self.aggregate, "n": self.n_samples, "seed": self.seed})
        for name, v in self.extra.items():
            rows.append({"task": self.task, "class": "all", "metric": name, "value": v, "n": self.n_samples, "seed": self.seed})
        return rows


def write_eval_csv(results: Sequence[EvalResult], path: str | os.PathLike, extra_columns: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra_columns = extra_columns or {}
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[*EVAL_COLUMNS, *extra_columns])
        writer.writeheader()
        for res in results:
            for row in res.rows():
                writer.writerow({**row, **{k: fn(res, row) for k, fn in extra_columns.items()}})
    return path


# ------------------------------------------------------------ linear probe


class LinearProbe(nn.Module):
    """Standardise pooled features with train-set statistics, then one linear layer."""

    def __init__(self, dim: int, num_classes: int, readout: str = "heads"):
        super().__init__()
        self.readout = readout
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))
        self.linear = nn.Linear(dim, num_classes)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.linear((feats - self.mean) / self.std)


@dataclass
class ProbeResult:
    head: LinearProbe
    log: list[dict]
    train_accuracy: float


def _augmented(images: np.ndarray, masks: Optional[np.ndarray], policy: AugmentationPolicy, seed: int, epoch: int):
    out_i, out_m = [], []
    for i in range(len(images)):
        img, m = augment(images[i], None if masks is None else masks[i], policy, derive_seed(seed, "aug", epoch, i))
        out_i.append(img)
        out_m.append(m)
    return np.stack(out_i), None if masks is None else np.stack(out_m)


def train_probe_on_features(
    feats: np.ndarray, labels: np.ndarray, cfg: ProbeConfig, seed: int = 0, feature_fn=None
) -> ProbeResult:
    """Fit the probe on fixed features; ``feature_fn(epoch)`` may supply fresh (augmented) features."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("probe training needs at least two classes in the train split")
    x0 = torch.as_tensor(feats, dtype=torch.float32)
    with seeded(derive_seed(seed, "probe")):
        head = LinearProbe(x0.shape[1], cfg.num_classes, cfg.readout)
    head.mean.copy_(x0.mean(0))
    head.std.copy_(x0.std(0, unbiased=False).clamp_min(1e-6))
    y = torch.as_tensor(labels)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    n = len(y)
    total = cfg.epochs * math.ceil(n / cfg.batch_size)
    step = 0
    log = []
    for epoch in range(cfg.epochs):
        x = x0 if feature_fn is None else torch.as_tensor(feature_fn(epoch), dtype=torch.float32)
        order = torch.as_tensor(np.random.default_rng(derive_seed(seed, "probe-order", epoch)).permutation(n))
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = lr_schedule(step, total, cfg)
            set_lr(opt, lr)
            loss = F.cross_entropy(head(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            step += 1
        with torch.no_grad():
            acc = float((head(x0).argmax(1) == y).float().mean())
        log.append({"epoch": epoch + 1, "loss": loss_sum / n, "train_acc": acc, "lr": lr})
    return ProbeResult(head, log, log[-1]["train_acc"])


def train_probe(
    backbone: ViTEncoder, images: np.ndarray, labels: Sequence[int], cfg: ProbeConfig, seed: int = 0
) -> ProbeResult:
    if labels is None or any(l is None for l in labels):
        raise ValueError("probe training needs a label on every train sample")
    if not cfg.freeze_backbone:
        return _finetune_classifier(backbone, images, np.asarray(labels), cfg, seed)
    backbone.eval()
    feats = embed_images(backbone, images, kind=cfg.readout)
    feature_fn = None
    if cfg.augment:
        policy = AugmentationPolicy.classification(seed)
        feature_fn = lambda epoch: embed_images(backbone, _augmented(images, None, policy, seed, epoch)[0], kind=cfg.readout)  # noqa: E731
    return train_probe_on_features(feats, np.asarray(labels), cfg, seed, feature_fn)


class _Classifier(nn.Module):
    def __init__(self, backbone: ViTEncoder, head: LinearProbe, kind: str):
        super().__init__()
        self.backbone, self.head, self.kind = backbone, head, kind

    def forward(self, x):
        return self.head(readout(self.backbone(x, want_heads=self.kind == "heads"), self.kind))


def _finetune_classifier(backbone, images, labels, cfg, seed) -> ProbeResult:
    feats = embed_images(backbone, images, kind=cfg.readout)
    with seeded(derive_seed(seed, "probe")):
        head = LinearProbe(feats.shape[1], cfg.num_classes, cfg.readout)
    head.mean.copy_(torch.as_tensor(feats.mean(0)))
    head.std.copy_(torch.as_tensor(feats.std(0)).clamp_min(1e-6))
    model = _Classifier(backbone, head, cfg.readout)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    y = torch.as_tensor(labels, dtype=torch.int64)
    n = len(y)
    total = cfg.epochs * math.ceil(n / cfg.batch_size)
    step, log = 0, []
    policy = AugmentationPolicy.classification(seed) if cfg.augment else AugmentationPolicy.identity()
    for epoch in range(cfg.epochs):
        model.train()
        imgs = _augmented(images, None, policy, seed, epoch)[0] if cfg.augment else images
        x = to_tensor(imgs)
        order = torch.as_tensor(np.random.default_rng(derive_seed(seed, "probe-order", epoch)).permutation(n))
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = lr_schedule(step, total, cfg)
            set_lr(opt, lr)
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            step += 1
        model.eval()
        with torch.no_grad():
            acc = float((model(to_tensor(images)).argmax(1) == y).float().mean())
        log.append({"epoch": epoch + 1, "loss": loss_sum / n, "train_acc": acc, "lr": lr})
    return ProbeResult(head, log, log[-1]["train_acc"])


# --------------------------------------------------------- segmentation head


class FPNHead(nn.Module):
    """Simple feature pyramid over ViT taps.

    Taps are ordered shallow -> deep and resampled to strides 2, 4, 8, 16 of a
    patch-8 grid (for four taps), fused top-down by bilinear upsampling plus
    elementwise addition, then classified and upsampled to input resolution.
    """

    def __init__(self, dim: int, cfg: SegHeadConfig, image_size: int, grid: int):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.grid = grid
        n = len(cfg.tap_layers)
        self.scales = [2.0 ** (n - 2 - i) for i in range(n)]
        self.lateral = nn.ModuleList(nn.Conv2d(dim, cfg.neck_dim, 1) for _ in range(n))
        self.smooth = nn.Conv2d(cfg.neck_dim, cfg.neck_dim, 3, padding=1)
        self.classifier = nn.Conv2d(cfg.neck_dim, cfg.num_classes, 1)

    def forward(self, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        maps = []
        for tokens, lateral, scale in zip(taps, self.lateral, self.scales):
            b, t, d = tokens.shape
            fmap = tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)
            size = max(1, int(round(self.grid * scale)))
            if size > self.grid:
                fmap = F.interpolate(fmap, size=(size, size), mode="bilinear", align_corners=False)
            elif size < self.grid:
                fmap = F.adaptive_avg_pool2d(fmap, size)
            maps.append(lateral(fmap))
        fused = maps[-1]
        for lat in reversed(maps[:-1]):
            fused = lat + F.interpolate(fused, size=lat.shape[-2:], mode="bilinear", align_corners=False)
        logits = self.classifier(F.relu(self.smooth(fused)))
        return F.interpolate(logits, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)


@dataclass
class SegResult:
    head: FPNHead
    log: list[dict]


def _tap_tokens(backbone: ViTEncoder, images: np.ndarray, layers: Sequence[int], batch_size: int = 64) -> list[torch.Tensor]:
    backbone.eval()
    per_layer: list[list[torch.Tensor]] = [[] for _ in layers]
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out = backbone(to_tensor(images[i : i + batch_size]), taps=layers)
            for j, layer in enumerate(layers):
                per_layer[j].append(out.taps[layer])
    return [torch.cat(chunks) for chunks in per_layer]


def build_seg_head(backbone: ViTEncoder, cfg: SegHeadConfig, seed: int = 0) -> FPNHead:
    c = backbone.config
    cfg.validate_for(c.depth)
    with seeded(derive_seed(seed, "seg-head")):
        return FPNHead(c.dim, cfg, c.image_size, c.grid)


def train_seg(
    backbone: ViTEncoder,
    images: np.ndarray,
    masks: np.ndarray,
    seg_cfg: SegHeadConfig,
    cfg: ProbeConfig,
    seed: int = 0,
) -> SegResult:
    """Train the FPN head (and optionally the backbone) with pixelwise cross-entropy."""
    if masks is None:
        raise ValueError("segmentation training needs masks")
    masks = np.asarray(masks)
    if masks.shape != images.shape:
        raise ValueError(f"mask shape {masks.shape} does not match image shape {images.shape}")
    if masks.max() >= seg_cfg.num_classes:
        raise ValueError(f"mask label {masks.max()} >= num_classes {seg_cfg.num_classes}")
    head = build_seg_head(backbone, seg_cfg, seed)
    layers = list(seg_cfg.tap_layers)
    finetune = seg_cfg.finetune_backbone
    params = list(head.parameters()) + (list(backbone.parameters()) if finetune else [])
    opt = torch.optim.AdamW(params, lr=cfg.lr0, weight_decay=cfg.weight_decay)
    policy = AugmentationPolicy.segmentation(seed)
    n = len(images)
    total = cfg.epochs * math.ceil(n / cfg.batch_size)
    cached = None if (cfg.augment or finetune) else _tap_tokens(backbone, images, layers)
    step, log = 0, []
    for epoch in range(cfg.epochs):
        if cfg.augment:
            imgs, msk = _augmented(images, masks, policy, seed, epoch)
        else:
            imgs, msk = images, masks
        taps = cached if cached is not None else (None if finetune else _tap_tokens(backbone, imgs, layers))
        y_all = torch.as_tensor(msk, dtype=torch.int64)
        order = torch.as_tensor(np.random.default_rng(derive_seed(seed, "seg-order", epoch)).permutation(n))
        loss_sum = 0.0
        head.train()
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if finetune:
                backbone.train()
                out = backbone(to_tensor(imgs[idx.numpy()]), taps=layers)
                feats = [out.taps[l] for l in layers]
            else:
                feats = [t[idx] for t in taps]
            lr = lr_schedule(step, total, cfg)
            set_lr(opt, lr)
            loss = F.cross_entropy(head(feats), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            step += 1
        log.append({"epoch": epoch + 1, "loss": loss_sum / n, "lr": lr})
    head.eval()
    backbone.eval()
    return SegResult(head, log)


@torch.no_grad()
def predict_seg(backbone: ViTEncoder, head: FPNHead, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    head.eval()
    layers = list(head.cfg.tap_layers)
    preds = []
    for i in range(0, len(images), batch_size):
        taps = _tap_tokens(backbone, images[i : i + batch_size], layers)
        preds.append(head(taps).argmax(1).numpy())
    return np.concatenate(preds) if preds else np.zeros((0, *images.shape[1:]), dtype=np.int64)


@torch.no_grad()
def predict_cls(backbone: ViTEncoder, head: LinearProbe, images: np.ndarray) -> np.ndarray:
    feats = torch.as_tensor(embed_images(backbone, images, kind=head.readout))
    return head(feats).argmax(1).numpy()


def evaluate(
    backbone: ViTEncoder,
    head: nn.Module,
    images: np.ndarray,
    targets: np.ndarray,
    task: str,
    num_classes: int,
    seed: int = 0,
) -> EvalResult:
    """Classification: overall accuracy with per-class recall. Segmentation: per-image Dice averaged per class."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    targets = np.asarray(targets)
    if task in ("cls", "classification"):
        preds = predict_cls(backbone, head, images)
        per_class = {c: float((preds[targets == c] == c).mean()) for c in range(num_classes) if (targets == c).any()}
        return EvalResult("classification", "accuracy", per_class, accuracy(preds, targets), len(images), seed)
    if task in ("seg", "segmentation"):
        preds = predict_seg(backbone, head, images)
        scores = np.stack([dice(p, t, num_classes)[0] for p, t in zip(preds, targets)])
        per_class = {c: float(scores[:, c].mean()) for c in range(num_classes)}
        aggregate = float(np.mean([per_class[c] for c in range(1, num_classes)]))
        return EvalResult("segmentation", "dice", per_class, aggregate, len(images), seed)
    raise ValueError(f"unknown task {task!r}")
