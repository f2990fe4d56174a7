"""Toy ViT encoders with per-layer and per-head taps, a linear patch decoder,
dual-masked teacher pretraining with per-sample gradient traces, checkpoints
and the binary feature-shard format."""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
import os
import pickle
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import ImageDecodeError, SampleRecord, by_split, load_image, load_images
from .masking import FrequencyMaskSpec, SpatialMaskSpec, view_batch
from .schedule import default_warmup, set_lr, warmup_poly
from .seeding import derive_seed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tinydistill-checkpoint"
CHECKPOINT_VERSION = 1
SHARD_MAGIC = b"TUSF"
SHARD_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    dim: int = 64
    heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    mid_layer: int = 8
    tap_layers: tuple[int, ...] = (3, 5, 7, 11)
    mlp_ratio: float = 2.0
    use_class_token: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 1 <= self.mid_layer <= self.depth:
            raise ValueError(f"mid_layer {self.mid_layer} outside [1, {self.depth}]")
        bad = [t for t in self.tap_layers if not 1 <= t <= self.depth]
        if bad:
            raise ValueError(f"tap layers {bad} outside [1, {self.depth}]")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.use_class_token:
            raise ValueError("class tokens are not supported; features are mean-pooled")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in dataclasses.fields(cls)}})


def teacher_config(**overrides) -> EncoderConfig:
    return EncoderConfig(**{"dim": 64, **overrides})


def student_config(**overrides) -> EncoderConfig:
    return EncoderConfig(**{"dim": 32, **overrides})


# ------------------------------------------------------------------- model


def patchify(images: torch.Tensor, p: int) -> torch.Tensor:
    """(B, H, W) -> (B, T, p*p), row-major over the patch grid."""
    b, h, w = images.shape
    x = images.reshape(b, h // p, p, w // p, p).permute(0, 1, 3, 2, 4)
    return x.reshape(b, (h // p) * (w // p), p * p)


def unpatchify(patches: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
    b, t, _ = patches.shape
    gh, gw = h // p, w // p
    if t != gh * gw:
        raise ValueError(f"{t} tokens do not tile a {h}x{w} image with patch {p}")
    x = patches.reshape(b, gh, gw, p, p).permute(0, 1, 3, 2, 4)
    return x.reshape(b, h, w)


def sincos_pos_embed(dim: int, grid: int) -> torch.Tensor:
    if dim % 4:
        raise ValueError("positional embedding needs dim divisible by 4")
    omega = 1.0 / 10000 ** (torch.arange(dim // 4, dtype=torch.float64) / (dim / 4))
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float64), torch.arange(grid, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        out = coord[:, None] * omega[None, :]
        parts += [torch.sin(out), torch.cos(out)]
    return torch.cat(parts, dim=1).float()


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (projected output, per-head outputs of shape (B, heads, T, head_dim))."""
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        per_head = attn @ v
        out = self.proj(per_head.transpose(1, 2).reshape(b, t, d))
        return out, per_head


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, per_head = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, per_head


@dataclass
class EncoderOutput:
    taps: dict[int, torch.Tensor]  # layer index (1-based) -> (B, T, dim) block output
    final: torch.Tensor  # (B, T, dim), final layer after the closing LayerNorm
    heads: Optional[torch.Tensor] = None  # (B, heads, T, head_dim) from the final block


class ViTEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Linear(c.patch_size**2, c.dim)
        self.register_buffer("pos_embed", sincos_pos_embed(c.dim, c.grid)[None], persistent=False)
        self.blocks = nn.ModuleList(Block(c.dim, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm = nn.LayerNorm(c.dim)
        self.apply(_init_weights)

    def forward(
        self, images: torch.Tensor, taps: Iterable[int] = (), want_heads: bool = False
    ) -> EncoderOutput:
        c = self.config
        taps = sorted(set(int(t) for t in taps))
        bad = [t for t in taps if not 1 <= t <= c.depth]
        if bad:
            raise ValueError(f"tap layers {bad} outside [1, {c.depth}]")
        if images.dim() == 2:
            images = images[None]
        if images.shape[-2:] != (c.image_size, c.image_size):
            raise ValueError(f"expected {c.image_size}x{c.image_size} input, got {tuple(images.shape[-2:])}")
        x = self.patch_embed(patchify(images, c.patch_size)) + self.pos_embed.to(images.dtype)
        out: dict[int, torch.Tensor] = {}
        per_head = None
        for i, block in enumerate(self.blocks, start=1):
            x, per_head = block(x)
            if i in taps:
                out[i] = x
        return EncoderOutput(out, self.norm(x), per_head if want_heads else None)


class PatchDecoder(nn.Module):
    """Linear token -> patch-pixel projection (the lightweight MIM decoder)."""

    def __init__(self, dim: int, patch_size: int, image_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.image_size = image_size
        self.proj = nn.Linear(dim, patch_size**2)
        self.apply(_init_weights)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return unpatchify(self.proj(tokens), self.patch_size, self.image_size, self.image_size)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


@contextlib.contextmanager
def seeded(seed: int):
    """Seed torch's global RNG inside the block without leaking state out of it."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed % (2**63))
        yield


def build_encoder(config: EncoderConfig, seed: int = 0) -> ViTEncoder:
    with seeded(derive_seed(seed, "encoder")):
        return ViTEncoder(config)


def build_decoder(config: EncoderConfig, seed: int = 0) -> PatchDecoder:
    with seeded(derive_seed(seed, "decoder")):
        return PatchDecoder(config.dim, config.patch_size, config.image_size)


def pool(tokens: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis; (T, D) -> (D,), (B, T, D) -> (B, D)."""
    if tokens.shape[-2] == 0:
        raise ValueError("cannot pool an empty token set")
    return tokens.mean(dim=-2)


def decode(mid: torch.Tensor, decoder: PatchDecoder) -> torch.Tensor:
    """Unclipped reconstruction (B, H, W) from mid-layer tokens."""
    return decoder(mid)


def to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images), dtype=dtype)


def state_checksum(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: EncoderConfig
    modules: dict[str, dict]
    kind: str = "encoder"
    meta: dict = field(default_factory=dict)

    def encoder(self) -> ViTEncoder:
        enc = ViTEncoder(self.config)
        enc.load_state_dict(self.modules["encoder"])
        return enc

    def decoder(self) -> PatchDecoder:
        dec = PatchDecoder(self.config.dim, self.config.patch_size, self.config.image_size)
        dec.load_state_dict(self.modules["decoder"])
        return dec


def save_checkpoint(
    path: str | os.PathLike,
    config: EncoderConfig,
    modules: dict[str, nn.Module],
    kind: str = "encoder",
    meta: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": dataclasses.asdict(config),
        "modules": {name: {k: v.detach().cpu().clone() for k, v in m.state_dict().items()} for name, m in modules.items()},
        "meta": json.loads(json.dumps(meta or {})),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | os.PathLike, expect_config: Optional[EncoderConfig] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile, ValueError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    config = EncoderConfig.from_dict(payload["config"])
    if expect_config is not None and expect_config != config:
        raise CheckpointError(f"{path}: stored config {config} conflicts with requested {expect_config}")
    return Checkpoint(config, payload["modules"], payload.get("kind", "encoder"), payload.get("meta", {}))


# ----------------------------------------------------------- feature shards


@dataclass
class FeatureSet:
    ids: list[str]
    features: np.ndarray  # (N, dim) float32
    failed: list[str] = field(default_factory=list)


def write_feature_shard(path: str | os.PathLike, ids: Sequence[str], features: np.ndarray) -> Path:
    path = Path(path)
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2 or feats.shape[0] != len(ids):
        raise ValueError(f"features shape {feats.shape} does not match {len(ids)} ids")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<III", SHARD_VERSION, feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes(order="C"))
    with shard_ids_path(path).open("w", encoding="utf-8") as fh:
        for row, sid in enumerate(ids):
            fh.write(json.dumps({"row": row, "id": sid}) + "\n")
    return path


def shard_ids_path(path: Path) -> Path:
    return path.with_suffix(".ids.jsonl")


def read_feature_shard(path: str | os.PathLike) -> FeatureSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != SHARD_MAGIC:
        raise ValueError(f"{path}: bad feature-shard magic")
    version, count, dim = struct.unpack("<III", raw[4:16])
    if version != SHARD_VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    body = raw[16:]
    if len(body) != count * dim * 4:
        raise ValueError(f"{path}: expected {count * dim * 4} payload bytes, found {len(body)}")
    feats = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
    rows = [json.loads(line) for line in shard_ids_path(path).read_text().splitlines() if line.strip()]
    ids = [r["id"] for r in sorted(rows, key=lambda r: r["row"])]
    if len(ids) != count:
        raise ValueError(f"{path}: sidecar lists {len(ids)} ids for {count} rows")
    return FeatureSet(ids, feats)


def readout(output: EncoderOutput, kind: str = "tokens") -> torch.Tensor:
    """Pooled image feature: final tokens, or the final block's concatenated per-head outputs."""
    if kind == "tokens":
        return pool(output.final)
    if kind == "heads":
        if output.heads is None:
            raise ValueError("heads readout needs a forward pass with want_heads=True")
        b, h, _, d = output.heads.shape
        return pool(output.heads).reshape(b, h * d)
    raise ValueError(f"unknown readout {kind!r}; expected 'tokens' or 'heads'")


@torch.no_grad()
def embed_images(encoder: ViTEncoder, images: np.ndarray, batch_size: int = 64, kind: str = "tokens") -> np.ndarray:
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = [
        readout(encoder(to_tensor(images[i : i + batch_size], dtype), want_heads=kind == "heads"), kind)
        for i in range(0, len(images), batch_size)
    ]
    return torch.cat(out).numpy() if out else np.zeros((0, encoder.config.dim), np.float32)


def embed_manifest(
    encoder: ViTEncoder,
    records: Sequence[SampleRecord],
    batch_size: int = 64,
    out_path: Optional[str | os.PathLike] = None,
) -> FeatureSet:
    """Pooled final-layer teacher embedding per sample; undecodable images are flagged and skipped."""
    size = (encoder.config.image_size, encoder.config.image_size)
    ids, images, failed = [], [], []
    for rec in records:
        try:
            images.append(load_image(rec.path, size))
            ids.append(rec.id)
        except ImageDecodeError as exc:
            logger.warning("skipping %s: %s", rec.id, exc)
            failed.append(rec.id)
    feats = embed_images(encoder, np.stack(images) if images else np.zeros((0, *size)), batch_size)
    result = FeatureSet(ids, feats.astype(np.float32), failed)
    if out_path is not None:
        write_feature_shard(out_path, ids, result.features)
    return result


# --------------------------------------------------------- gradient traces


@dataclass
class GradientTrace:
    id: str
    norms: list[float]
    mu: float = field(init=False)
    sigma: float = field(init=False)

    def __post_init__(self) -> None:
        self.norms = [float(x) for x in self.norms]
        if any(x < 0 or not math.isfinite(x) for x in self.norms):
            raise ValueError(f"trace {self.id!r} has negative or non-finite norms")
        arr = np.asarray(self.norms, dtype=np.float64)
        self.mu = float(arr.mean()) if arr.size else float("nan")
        self.sigma = float(arr.std()) if arr.size else float("nan")


def write_traces(path: str | os.PathLike, traces: Iterable[GradientTrace]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps({"id": t.id, "norms": t.norms, "mu": t.mu, "sigma": t.sigma}) + "\n")
    return path


def read_traces(path: str | os.PathLike) -> list[GradientTrace]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        trace = GradientTrace(str(obj["id"]), obj["norms"])
        for key in ("mu", "sigma"):
            if key in obj and abs(obj[key] - getattr(trace, key)) > 1e-12:
                raise ValueError(f"{path}:{lineno}: stored {key} disagrees with norms")
        out.append(trace)
    return out


# ------------------------------------------------------ teacher pretraining


@dataclass
class TeacherResult:
    encoder: ViTEncoder
    decoder: PatchDecoder
    traces: list[GradientTrace]
    log: list[dict]


def mim_sample_losses(
    encoder: ViTEncoder, decoder: PatchDecoder, spa: torch.Tensor, freq: torch.Tensor, originals: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample reconstruction loss from both views, plus the final tokens it was decoded from.

    The returned tokens have shape (2, B, T, dim) (spatial, frequency).
    """
    b = originals.shape[0]
    final = encoder(torch.cat([spa, freq])).final
    recon = decoder(final)
    err = (recon - torch.cat([originals, originals])) ** 2
    per = err.reshape(2, b, -1).mean(dim=-1).sum(dim=0)
    return per, final


def fit_teacher(
    images: np.ndarray,
    ids: Sequence[str],
    config: EncoderConfig,
    epochs: int,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
    weight_decay: float = 0.05,
    sspec: Optional[SpatialMaskSpec] = None,
    fspec: Optional[FrequencyMaskSpec] = None,
    trace_epochs: int = 10,
) -> TeacherResult:
    """Dual-masked MIM pretraining of the teacher on an in-memory image stack.

    At the end of each of the first ``min(trace_epochs, epochs)`` epochs, every
    sample's gradient norm ||d loss_i / d final_tokens_i|| is measured with the
    weights frozen and a probe mask pair shared by all samples, so the trace
    depends only on (weights, image).
    """
    if len(images) == 0:
        raise ValueError("teacher pretraining needs a non-empty train split")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    sspec = sspec or SpatialMaskSpec(patch_size=config.patch_size)
    fspec = fspec or FrequencyMaskSpec()
    encoder = build_encoder(config, seed)
    decoder = build_decoder(config, seed)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    n = len(images)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    warmup = default_warmup(total)
    originals = to_tensor(images)
    norms: list[list[float]] = [[] for _ in range(n)]
    log = []
    step = 0
    for epoch in range(epochs):
        encoder.train()
        order = np.random.default_rng(derive_seed(seed, "teacher-order", epoch)).permutation(n)
        total_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            seeds = [derive_seed(seed, "teacher-mask", epoch, ids[i]) for i in idx]
            spa, freq = view_batch(images[idx], seeds, sspec, fspec)
            lr_now = warmup_poly(step, total, lr, warmup)
            set_lr(opt, lr_now)
            per, _ = mim_sample_losses(encoder, decoder, to_tensor(spa), to_tensor(freq), originals[idx])
            loss = per.mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(per.detach().sum())
            step += 1
        row = {"epoch": epoch + 1, "loss": total_loss / n, "lr": lr_now}
        if epoch < trace_epochs:
            for i, g in enumerate(_trace_norms(encoder, decoder, images, derive_seed(seed, "trace", epoch), sspec, fspec, batch_size)):
                norms[i].append(g)
        log.append(row)
        logger.info("teacher epoch %d loss %.5f", epoch + 1, row["loss"])
    encoder.eval()
    traces = [GradientTrace(ids[i], norms[i]) for i in range(n)]
    return TeacherResult(encoder, decoder, traces, log)


def _trace_norms(encoder, decoder, images, probe_seed, sspec, fspec, batch_size) -> list[float]:
    encoder.eval()
    out: list[float] = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        spa, freq = view_batch(chunk, [probe_seed] * len(chunk), sspec, fspec)
        per, final = mim_sample_losses(encoder, decoder, to_tensor(spa), to_tensor(freq), to_tensor(chunk))
        (grad,) = torch.autograd.grad(per.sum(), final)
        b = len(chunk)
        sq = grad.reshape(2, b, -1).pow(2).sum(dim=(0, 2))
        out.extend(float(x) for x in sq.double().sqrt())
    encoder.train()
    return out


def pretrain_teacher(
    records: Sequence[SampleRecord], config: EncoderConfig, epochs: int, seed: int = 0, **kwargs
) -> TeacherResult:
    train = by_split(records, "train")
    if not train:
        raise ValueError("manifest has an empty train split")
    images = load_images(train, (config.image_size, config.image_size))
    return fit_teacher(images, [r.id for r in train], config, epochs, seed, **kwargs)
