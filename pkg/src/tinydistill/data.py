"""Manifests, image I/O, stratified splitting, augmentation and speckle phantoms."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .seeding import derive_seed

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_KEYS = ("id", "path", "split", "label", "mask_path", "organ")

# Echogenicity of inclusion k (1-based) relative to a ~0.4 background.
INCLUSION_LEVELS = (0.88, 0.10, 0.66, 0.24, 0.97, 0.04, 0.78, 0.17)
ORGANS = {
    # name: (background level, texture correlation length in pixels)
    "liver": (0.44, 1.5),
    "thyroid": (0.36, 3.0),
    "breast": (0.40, 0.8),
}


class ManifestError(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: str
    path: str
    split: str = "train"
    label: Optional[int] = None
    mask_path: Optional[str] = None
    organ: Optional[str] = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self, root: Optional[Path] = None) -> dict:
        d = dataclasses.asdict(self)
        if root is not None:
            d["path"] = _relativize(d["path"], root)
            if d["mask_path"] is not None:
                d["mask_path"] = _relativize(d["mask_path"], root)
        return d


Manifest = list  # list[SampleRecord]


def _relativize(path: str, root: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


def _resolve(path: Optional[str], root: Path) -> Optional[str]:
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else (root / p).resolve())


def load_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    """Read a JSON Lines manifest. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not a JSON object")
                unknown = set(obj) - set(MANIFEST_KEYS)
                if unknown:
                    raise ValueError(f"unknown keys {sorted(unknown)}")
                if "id" not in obj or "path" not in obj:
                    raise ValueError("missing 'id' or 'path'")
                label = obj.get("label")
                if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
                    raise ValueError(f"label must be an integer, got {label!r}")
                rec = SampleRecord(
                    id=str(obj["id"]),
                    path=_resolve(str(obj["path"]), root),
                    split=obj.get("split") or "train",
                    label=label,
                    mask_path=_resolve(obj.get("mask_path"), root),
                    organ=obj.get("organ"),
                )
            except (ValueError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_manifest(records: Iterable[SampleRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(root), sort_keys=False) + "\n")
    return path


def by_split(records: Sequence[SampleRecord], split: str) -> list[SampleRecord]:
    return [r for r in records if r.split == split]


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * n for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    records: Sequence[SampleRecord],
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> list[SampleRecord]:
    """Assign train/val/test per class so each class follows ``ratios`` to within one sample."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        if rec.label is None:
            raise ValueError(f"record {rec.id!r} has no label to stratify on")
        by_class.setdefault(rec.label, []).append(i)

    split_of: dict[int, str] = {}
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 3:
            raise ValueError(f"class {label} has {len(idx)} samples; need at least 3 to populate all splits")
        counts = _largest_remainder(len(idx), ratios)
        perm = np.random.default_rng(derive_seed(seed, "split", label)).permutation(len(idx))
        start = 0
        for name, count in zip(SPLITS, counts):
            for j in perm[start : start + count]:
                split_of[idx[j]] = name
            start += count
    return [dataclasses.replace(rec, split=split_of[i]) for i, rec in enumerate(records)]


# ---------------------------------------------------------------- image I/O


def load_image(path: str | os.PathLike, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Decode a grayscale/RGB image to a float64 H×W array in [0, 1], bilinearly resized."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                # PNG 16-bit decodes as "I;16" or "I" depending on the Pillow version.
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "F":
                arr = np.asarray(im, dtype=np.float64)
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    h, w = size
    if arr.shape != (h, w):
        resized = Image.fromarray(arr.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
        arr = np.asarray(resized, dtype=np.float64)
    return np.clip(arr, 0.0, 1.0)


def load_mask(path: str | os.PathLike, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            h, w = size
            if im.size != (w, h):
                im = im.resize((w, h), Image.NEAREST)
            return np.asarray(im, dtype=np.int64)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode mask {path}: {exc}") from exc


def save_image(pixels: np.ndarray, path: str | os.PathLike, bits: int = 8) -> None:
    pixels = np.clip(pixels, 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(pixels * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(pixels * 255).astype(np.uint8), mode="L").save(path)


def load_images(records: Sequence[SampleRecord], size: tuple[int, int]) -> np.ndarray:
    return np.stack([load_image(r.path, size) for r in records]) if records else np.zeros((0, *size))


def load_masks(records: Sequence[SampleRecord], size: tuple[int, int]) -> np.ndarray:
    missing = [r.id for r in records if r.mask_path is None]
    if missing:
        raise ValueError(f"records without mask_path: {missing[:5]}")
    return np.stack([load_mask(r.mask_path, size) for r in records])


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_horizontal: float = 0.5
    rotate_degrees: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    contrast_range: Optional[tuple[float, float]] = None
    gamma_range: Optional[tuple[float, float]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.flip_horizontal <= 1.0:
            raise ValueError("flip_horizontal must be a probability")
        if self.rotate_degrees < 0:
            raise ValueError("rotate_degrees is a symmetric half-range and must be >= 0")
        for name in ("scale_range", "contrast_range", "gamma_range"):
            rng = getattr(self, name)
            if rng is not None and not (0 < rng[0] <= rng[1]):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {rng}")

    @classmethod
    def classification(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(seed=seed)

    @classmethod
    def segmentation(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(contrast_range=(0.8, 1.2), gamma_range=(0.8, 1.2), seed=seed)

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(flip_horizontal=0.0, rotate_degrees=0.0, scale_range=(1.0, 1.0))


def augment(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    policy: AugmentationPolicy,
    seed: int,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Random flip/rotate/scale shared by image and mask; contrast and gamma on the image only."""
    rng = np.random.default_rng(seed)
    # Draw every parameter unconditionally so the stream layout never depends on the policy.
    flip = rng.random() < policy.flip_horizontal
    angle = rng.uniform(-policy.rotate_degrees, policy.rotate_degrees)
    scale = rng.uniform(*policy.scale_range)
    contrast = rng.uniform(*policy.contrast_range) if policy.contrast_range else 1.0
    gamma = rng.uniform(*policy.gamma_range) if policy.gamma_range else 1.0

    out = np.asarray(image, dtype=np.float64)
    out_mask = None if mask is None else np.asarray(mask)
    if flip:
        out = out[:, ::-1]
        out_mask = None if out_mask is None else out_mask[:, ::-1]
    if angle != 0.0 or scale != 1.0:
        matrix, offset = _affine_params(out.shape, angle, scale)
        out = ndimage.affine_transform(out, matrix, offset=offset, order=1, mode="nearest")
        if out_mask is not None:
            out_mask = ndimage.affine_transform(
                out_mask, matrix, offset=offset, order=0, mode="constant", cval=0
            )
    if contrast != 1.0:
        m = out.mean()
        out = (out - m) * contrast + m
    if gamma != 1.0:
        out = np.clip(out, 0.0, 1.0) ** gamma
    out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out), None if out_mask is None else np.ascontiguousarray(out_mask)


def _affine_params(shape: tuple[int, int], angle_deg: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Output->input pixel mapping for a rotation+scale about the image centre."""
    t = math.radians(angle_deg)
    inv_rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    matrix = inv_rot / scale
    center = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    return matrix, center - matrix @ center


# ---------------------------------------------------------------- phantoms


def _phantom(
    label: int, size: tuple[int, int], rng: np.random.Generator, organ: str
) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    bg_level, corr = ORGANS[organ]
    texture = ndimage.gaussian_filter(rng.standard_normal(size), corr)
    texture /= texture.std() + 1e-12
    clean = bg_level + 0.06 * texture
    mask = np.zeros(size, dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    short = min(h, w)
    for k in range(1, label + 2):
        for attempt in range(60):
            a = rng.uniform(0.11, 0.2) * short
            b = rng.uniform(0.11, 0.2) * short
            cy = rng.uniform(a + 1, h - a - 1)
            cx = rng.uniform(a + 1, w - a - 1)
            theta = rng.uniform(0, math.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            region = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            # Keep inclusions apart so each label stays visible; give up on separation late.
            if not (ndimage.binary_dilation(region, iterations=2) & (mask > 0)).any() or attempt == 59:
                break
        mask[region] = k
        clean[region] = INCLUSION_LEVELS[k - 1] + 0.03 * texture[region]
    speckle = rng.gamma(4.0, 0.25, size=size)
    img = ndimage.gaussian_filter(np.clip(clean, 0.0, 1.0) * speckle, 0.6)
    return np.clip(img, 0.0, 1.0), mask


def generate_phantoms(
    n: int,
    classes: int,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    out_dir: str | os.PathLike = "phantoms",
    patch_size: int = 8,
) -> list[SampleRecord]:
    """Write ``n`` speckled ellipse phantoms plus label maps and a manifest.

    Class ``c`` carries ``c + 1`` inclusions; inclusion ``k`` has its own
    echogenicity and is labelled ``k`` in the mask. Labels are balanced across
    classes. All samples are marked ``train``; use :func:`stratified_split`.
    """
    if classes < 1 or classes > len(INCLUSION_LEVELS):
        raise ValueError(f"classes must be in [1, {len(INCLUSION_LEVELS)}]")
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    h, w = size
    if h % patch_size or w % patch_size:
        raise ValueError(f"size {size} not divisible by patch size {patch_size}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write phantoms to {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    organ_names = sorted(ORGANS)
    records = []
    for i in range(n):
        label = i * classes // n
        rng = np.random.default_rng(derive_seed(seed, "phantom", i))
        organ = organ_names[int(rng.integers(len(organ_names)))]
        img, mask = _phantom(label, size, rng, organ)
        sid = f"ph{i:05d}"
        img_path = out / "images" / f"{sid}.png"
        mask_path = out / "masks" / f"{sid}.png"
        save_image(img, img_path)
        Image.fromarray(mask, mode="L").save(mask_path)
        records.append(
            SampleRecord(sid, str(img_path.resolve()), "train", label, str(mask_path.resolve()), organ)
        )
    write_manifest(records, out / "manifest.jsonl")
    return records
