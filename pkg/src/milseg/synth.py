"""Synthetic two-texture datasets with known lesion masks.

Stands in for proprietary slide imagery: positive images carry one or
more smooth random blobs filled with a "lesion" texture over a
"background" texture, negatives carry background only.  Every image comes
with its exact ground-truth mask, the true lesion fraction, and the
coarse quantized area estimate a trainer is allowed to see.

Blob shapes come from thresholding smooth value noise at the quantile
matching a sampled target area, which yields organic regions whose true
area is essentially exact.  Generation is fully determined by the spec
seed; image i uses the derived seed  seed XOR i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .losses import Bag


class DatasetError(ValueError):
    """Raised for malformed dataset directories or manifests."""


@dataclass(frozen=True)
class TextureParams:
    """Oriented-noise texture: base color plus banded noise.

    ``frequency`` is in cycles per image width, ``angle`` is the band
    orientation in radians, ``amplitude`` scales the noise around the
    base color.
    """

    base_color: tuple[float, float, float]
    frequency: float = 6.0
    amplitude: float = 0.08
    angle: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    positive_count: int = 8
    negative_count: int = 16
    background: TextureParams = field(default_factory=lambda: TextureParams(
        base_color=(0.86, 0.74, 0.82), frequency=7.0, amplitude=0.07, angle=0.5))
    lesion: TextureParams = field(default_factory=lambda: TextureParams(
        base_color=(0.58, 0.45, 0.66), frequency=11.0, amplitude=0.07, angle=2.1))
    area_range: tuple[float, float] = (0.1, 0.4)
    area_quantization: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.area_range
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"area range must satisfy 0 < lo < hi < 1, got {self.area_range}")
        if self.positive_count < 0 or self.negative_count < 0:
            raise ValueError("image counts must be nonnegative")
        q = self.area_quantization
        if q <= 0:
            raise ValueError("area quantization step must be positive")
        for endpoint in self.area_range:
            if abs(endpoint / q - round(endpoint / q)) > 1e-9:
                raise ValueError(
                    f"quantization step {q} must divide the area range endpoints {self.area_range}"
                )
        if lo * self.image_size ** 2 < 1.0:
            raise ValueError(
                f"area range {self.area_range} is infeasible for blob placement "
                f"at image size {self.image_size}"
            )


@dataclass
class SynthBag(Bag):
    """A bag plus the evaluation-only ground truth."""

    mask: np.ndarray | None = None
    true_area: float | None = None


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Smooth noise: a coarse random grid upsampled bilinearly."""
    grid = rng.standard_normal((cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    frac = pos - i0
    rows = grid[i0, :] * (1 - frac[:, None]) + grid[i0 + 1, :] * frac[:, None]
    return rows[:, i0] * (1 - frac[None, :]) + rows[:, i0 + 1] * frac[None, :]


def _render_texture(rng: np.random.Generator, params: TextureParams,
                    size: int) -> np.ndarray:
    """(H, W, 3) float image of one texture."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u = (np.cos(params.angle) * xx + np.sin(params.angle) * yy) / size
    phase = rng.uniform(0.0, 2.0 * math.pi)
    bands = np.sin(2.0 * math.pi * params.frequency * u + phase)
    grain = rng.standard_normal((size, size))
    noise = 0.7 * bands + 0.45 * grain
    img = np.asarray(params.base_color)[None, None, :] + \
        params.amplitude * noise[:, :, None]
    return img


def _blob_mask(rng: np.random.Generator, size: int, target_area: float) -> np.ndarray:
    noise = _value_noise(rng, size, cells=4)
    threshold = np.quantile(noise, 1.0 - target_area)
    mask = noise >= threshold
    if not mask.any():
        mask.flat[int(noise.argmax())] = True
    return mask


def generate(spec: SynthSpec) -> list[SynthBag]:
    """Produce the dataset: positives first, then negatives."""
    bags: list[SynthBag] = []
    q = spec.area_quantization
    size = spec.image_size
    for i in range(spec.positive_count + spec.negative_count):
        rng = np.random.default_rng(spec.seed ^ i)
        positive = i < spec.positive_count
        background = _render_texture(rng, spec.background, size)
        if positive:
            target = rng.uniform(*spec.area_range)
            mask = _blob_mask(rng, size, target)
            lesion = _render_texture(rng, spec.lesion, size)
            img = np.where(mask[:, :, None], lesion, background)
            true_area = float(mask.mean())
            area = round(true_area / q) * q
        else:
            mask = np.zeros((size, size), dtype=bool)
            img = background
            true_area, area = 0.0, 0.0
        # Quantize to 8-bit up front so PNG round-trips are exact.
        img_u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        image = (img_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)
        bags.append(SynthBag(image=image, label=int(positive), area=float(area),
                             mask=mask, true_area=true_area))
    return bags


# ---------------------------------------------------------------------------
# on-disk layout:  <dir>/images/*.png, <dir>/manifest.tsv  and optionally
# <dir>/masks/*.png (evaluation only; training never reads them)


def write_dataset(bags, directory) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(getattr(b, "mask", None) is not None for b in bags)
    if has_masks:
        (directory / "masks").mkdir(exist_ok=True)
    lines = []
    for i, bag in enumerate(bags):
        rel = f"images/img_{i:04d}.png"
        img_u8 = np.round(bag.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(img_u8, mode="RGB").save(directory / rel)
        mask = getattr(bag, "mask", None)
        if mask is not None:
            mask_u8 = np.where(mask, 255, 0).astype(np.uint8)
            Image.fromarray(mask_u8, mode="L").save(directory / "masks" / f"img_{i:04d}.png")
        area_text = "0" if bag.label == 0 else repr(float(bag.area))
        lines.append(f"{rel}\t{bag.label}\t{area_text}")
    (directory / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(directory) -> list[SynthBag]:
    """Load a dataset directory; masks are attached when present."""
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    bags: list[SynthBag] = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(
                f"{manifest}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        rel, label_text, area_text = parts
        if label_text not in ("0", "1"):
            raise DatasetError(f"{manifest}:{lineno}: label must be 0 or 1, got {label_text!r}")
        label = int(label_text)
        try:
            area = float(area_text)
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: bad area value {area_text!r}") from None
        if not 0.0 <= area <= 1.0:
            raise DatasetError(f"{manifest}:{lineno}: area {area} outside [0, 1]")
        img_path = directory / rel
        if not img_path.is_file():
            raise DatasetError(f"{manifest}:{lineno}: missing image file {img_path}")
        with Image.open(img_path) as handle:
            img_u8 = np.asarray(handle.convert("RGB"))
        image = (img_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)

        mask = None
        true_area = None
        mask_path = directory / "masks" / Path(rel).name
        if mask_path.is_file():
            with Image.open(mask_path) as handle:
                mask = np.asarray(handle.convert("L")) >= 128
            true_area = float(mask.mean())
        bags.append(SynthBag(image=image, label=label, area=area,
                             mask=mask, true_area=true_area))
    return bags
