"""Domain-separated masking: mean-fill patch masking and phase-preserving band-stop masking."""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .seeding import derive_seed

PRESERVED = -1


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SpatialMaskSpec:
    patch_size: int = 8
    mask_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"spatial mask_ratio must be in [0, 1], got {self.mask_ratio}")


@dataclass(frozen=True)
class FrequencyMaskSpec:
    num_bands: int = 7
    bands_per_mask: int = 2
    mask_ratio: float = 0.4
    center_preserve: Optional[tuple[int, int]] = None  # None: scale 10x10 from 224x224
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_bands < 1:
            raise ValueError("num_bands must be >= 1")
        if not 0 <= self.bands_per_mask <= self.num_bands:
            raise ValueError(f"bands_per_mask must be in [0, {self.num_bands}]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"frequency mask_ratio must be in [0, 1), got {self.mask_ratio}")

    def preserve_for(self, shape: tuple[int, int]) -> tuple[int, int]:
        if self.center_preserve is not None:
            return tuple(self.center_preserve)
        return default_center_preserve(shape)


def default_center_preserve(shape: tuple[int, int]) -> tuple[int, int]:
    """10x10 bins at 224x224, scaled with the image and floored at 3."""
    return tuple(max(3, round_half_up(10 * s / 224)) for s in shape)


@dataclass
class MaskedView:
    image: np.ndarray
    domain: str  # "spatial" | "frequency"
    mask_map: np.ndarray
    spec: Union[SpatialMaskSpec, FrequencyMaskSpec]
    imag_residual: float = 0.0


# ------------------------------------------------------------------ spatial


def spatial_mask(image: np.ndarray, spec: SpatialMaskSpec) -> MaskedView:
    h, w = image.shape
    p = spec.patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n_patches = gh * gw
    m = round_half_up(spec.mask_ratio * n_patches)
    rng = np.random.default_rng(spec.seed)
    chosen = rng.permutation(n_patches)[:m]
    mask_map = np.zeros(n_patches, dtype=bool)
    mask_map[chosen] = True
    mask_map = mask_map.reshape(gh, gw)

    out = np.array(image, dtype=np.float64, copy=True)
    # Exact summation, clamped so a constant image is a fixed point.
    fill = min(max(math.fsum(np.ravel(image)) / image.size, float(image.min())), float(image.max()))
    pixel_mask = np.repeat(np.repeat(mask_map, p, axis=0), p, axis=1)
    out[pixel_mask] = fill
    return MaskedView(out, "spatial", mask_map, spec)


# ---------------------------------------------------------------- frequency


def _offsets(n: int) -> np.ndarray:
    """Signed frequency offset of each row/column of an fftshift-ed axis."""
    return np.arange(n) - n // 2


def partner_index(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Row/col of the conjugate partner (-u, -v) of every bin in the shifted spectrum."""
    h, w = shape
    du, dv = _offsets(h), _offsets(w)
    pr = (-du) % h  # offset -> unshifted index
    pc = (-dv) % w
    # back to shifted positions
    rows = (pr + h // 2) % h
    cols = (pc + w // 2) % w
    return np.broadcast_to(rows[:, None], shape), np.broadcast_to(cols[None, :], shape)


def preserve_region(shape: tuple[int, int], center_preserve: tuple[int, int]) -> np.ndarray:
    h, w = shape
    ph, pw = center_preserve
    if ph >= h or pw >= w:
        raise ValueError(f"center_preserve {center_preserve} must be smaller than spectrum {shape}")
    region = np.zeros(shape, dtype=bool)
    r0, c0 = h // 2 - ph // 2, w // 2 - pw // 2
    region[r0 : r0 + ph, c0 : c0 + pw] = True
    return region


@functools.lru_cache(maxsize=32)
def _band_partition_cached(shape: tuple[int, int], num_bands: int, center_preserve: tuple[int, int]) -> np.ndarray:
    h, w = shape
    du = _offsets(h)[:, None] / (h / 2.0)
    dv = _offsets(w)[None, :] / (w / 2.0)
    radius = np.sqrt(du**2 + dv**2)
    r_max = radius.max()
    band = np.ceil(radius / r_max * num_bands).astype(np.int64) - 1
    band = np.clip(band, 0, num_bands - 1)
    band[preserve_region(shape, center_preserve)] = PRESERVED
    band.setflags(write=False)
    return band


def band_partition(shape: tuple[int, int], num_bands: int, center_preserve: tuple[int, int]) -> np.ndarray:
    """Annulus index per bin of the centred spectrum; ``PRESERVED`` inside the centre rectangle.

    Band ``k`` holds bins with normalised radius in ``(k/B, (k+1)/B] * r_max``
    (the DC bin joins band 0 when it is not preserved).
    """
    if num_bands < 1:
        raise ValueError("num_bands must be >= 1")
    return _band_partition_cached(tuple(shape), int(num_bands), tuple(center_preserve))


@functools.lru_cache(maxsize=32)
def _mask_units(shape: tuple[int, int], center_preserve: tuple[int, int]):
    """Conjugate-symmetric masking units over the flattened shifted spectrum.

    Returns (pair_a, pair_b, singles, n_eligible). Bins whose partner lies in
    the (even-sized, hence asymmetric) preserve rectangle are never maskable.
    """
    h, w = shape
    preserved = preserve_region(shape, center_preserve)
    pr, pc = partner_index(shape)
    flat = np.arange(h * w)
    partner = (pr * w + pc).ravel()
    maskable = ~preserved.ravel() & ~preserved.ravel()[partner]
    singles = flat[maskable & (partner == flat)]
    pairs = maskable & (flat < partner)
    pair_a = flat[pairs]
    pair_b = partner[pairs]
    return pair_a, pair_b, singles, int((~preserved).sum())


def frequency_target(shape: tuple[int, int], spec: FrequencyMaskSpec) -> int:
    """Exact number of masked bins: round(mask_ratio * non-preserved bins)."""
    _, _, _, n_eligible = _mask_units(tuple(shape), tuple(spec.preserve_for(shape)))
    return round_half_up(spec.mask_ratio * n_eligible)


def frequency_mask_map(shape: tuple[int, int], spec: FrequencyMaskSpec) -> np.ndarray:
    """Boolean bin mask over the centred spectrum (True = magnitude zeroed)."""
    shape = tuple(shape)
    preserve = tuple(spec.preserve_for(shape))
    band = band_partition(shape, spec.num_bands, preserve).ravel()
    pair_a, pair_b, singles, n_eligible = _mask_units(shape, preserve)
    target = round_half_up(spec.mask_ratio * n_eligible)

    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(spec.num_bands, size=spec.bands_per_mask, replace=False)
    pair_sel = np.isin(band[pair_a], chosen)
    single_sel = np.isin(band[singles], chosen)
    count = 2 * int(pair_sel.sum()) + int(single_sel.sum())

    diff = count - target
    if diff % 2:
        # Parity can only be fixed with a self-conjugate bin.
        on = np.flatnonzero(single_sel)
        off = np.flatnonzero(~single_sel)
        if diff > 0 and on.size:
            single_sel[rng.choice(on)] = False
            diff -= 1
        elif off.size:
            single_sel[rng.choice(off)] = True
            diff += 1
        elif on.size:
            single_sel[rng.choice(on)] = False
            diff -= 1
        else:
            raise ValueError("no self-conjugate bin available to reach an odd masked-bin target")
    if diff > 0:
        on = np.flatnonzero(pair_sel)
        short = diff - 2 * on.size  # even; covered by dropping self-conjugate bins
        if short > 0:
            on_s = np.flatnonzero(single_sel)
            if on_s.size < short:
                raise ValueError("not enough masked bins to trim to the target ratio")
            single_sel[rng.choice(on_s, size=short, replace=False)] = False
            diff -= short
        pair_sel[rng.choice(on, size=diff // 2, replace=False)] = False
    elif diff < 0:
        off = np.flatnonzero(~pair_sel)
        short = -diff - 2 * off.size
        if short > 0:
            off_s = np.flatnonzero(~single_sel)
            if off_s.size < short:
                raise ValueError(f"mask_ratio {spec.mask_ratio} unreachable with conjugate-symmetric masking")
            single_sel[rng.choice(off_s, size=short, replace=False)] = True
            diff += short
        pair_sel[rng.choice(off, size=-diff // 2, replace=False)] = True

    mask = np.zeros(shape[0] * shape[1], dtype=bool)
    mask[pair_a[pair_sel]] = True
    mask[pair_b[pair_sel]] = True
    mask[singles[single_sel]] = True
    return mask.reshape(shape)


def apply_band_stop(image: np.ndarray, mask_map: np.ndarray) -> tuple[np.ndarray, float]:
    """Zero the magnitude of masked bins, keep phase elsewhere; return (real image, max |imag|)."""
    spectrum = np.fft.fftshift(np.fft.fft2(np.asarray(image, dtype=np.float64)))
    spectrum[mask_map] = 0.0
    recon = np.fft.ifft2(np.fft.ifftshift(spectrum))
    return recon.real, float(np.abs(recon.imag).max(initial=0.0))


def frequency_mask(image: np.ndarray, spec: FrequencyMaskSpec, clip: bool = True) -> MaskedView:
    mask_map = frequency_mask_map(image.shape, spec)
    out, residual = apply_band_stop(image, mask_map)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return MaskedView(out, "frequency", mask_map, spec, residual)


# -------------------------------------------------------------------- pairs


def make_view_pair(
    image: np.ndarray, sspec: SpatialMaskSpec, fspec: FrequencyMaskSpec
) -> tuple[MaskedView, MaskedView]:
    """Spatial and frequency views of one image, with seeds split by domain tag."""
    s = dataclasses.replace(sspec, seed=derive_seed(sspec.seed, "spatial"))
    f = dataclasses.replace(fspec, seed=derive_seed(fspec.seed, "frequency"))
    return spatial_mask(image, s), frequency_mask(image, f)


def view_batch(
    images: np.ndarray, seeds: list[int], sspec: SpatialMaskSpec, fspec: FrequencyMaskSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Masked views for a stack of images, one seed per image -> (spatial, frequency) arrays."""
    spa, freq = [], []
    for img, seed in zip(images, seeds):
        a, b = make_view_pair(img, dataclasses.replace(sspec, seed=seed), dataclasses.replace(fspec, seed=seed))
        spa.append(a.image)
        freq.append(b.image)
    return np.stack(spa), np.stack(freq)


def mask_png(view: MaskedView, path) -> Path:
    """Export a mask map as an 8-bit PNG (spatial maps upsampled to pixel resolution)."""
    m = view.mask_map
    if view.domain == "spatial":
        p = view.spec.patch_size
        m = np.repeat(np.repeat(m, p, axis=0), p, axis=1)
    Image.fromarray((m.astype(np.uint8) * 255), mode="L").save(path)
    return Path(path)
