"""Shared domain types: images, triggers, placements, datasets, seeded RNG.

All images are float32 numpy arrays of shape (C, H, W) with values in
[0, 1]. Quantization to 8-bit happens exactly once, at persistence
boundaries (see artifacts module).
"""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field

import numpy as np


class TrainingFailure(RuntimeError):
    """Training diverged; carries the loss curve recorded so far."""

    def __init__(self, message: str, loss_curve: list[float]):
        super().__init__(message)
        self.loss_curve = loss_curve


class OptimizationFailure(RuntimeError):
    """Poison optimization hit a non-finite loss; carries the trace."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


class UnsupportedCombination(ValueError):
    """Interpretation method and model family do not match."""


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def derive_seed(master_seed: int, *tags) -> int:
    """Stable sub-seed for a tagged stage/stream.

    Same (master_seed, tags) gives the same value on every platform, so
    independent streams (shuffling, placements, trigger pixels, ...) never
    alias each other.
    """
    text = str(int(master_seed)) + "".join(f"/{t}" for t in tags)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the algorithm-stable stream used everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def check_image(img: np.ndarray) -> np.ndarray:
    """Validate the (C, H, W) in-[0,1] image contract; returns the array."""
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise ValueError(f"image must be a 3-d array (C,H,W), got {type(img)}")
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"channel count must be 1 or 3, got {c}")
    if h < 8 or w < 8:
        raise ValueError(f"image sides must be >= 8, got {h}x{w}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """[0,1] float -> uint8, round-half-up. The single quantization step."""
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def from_u8(raw: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0,1]."""
    return (raw.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def snap_to_u8_grid(img: np.ndarray) -> np.ndarray:
    """Apply the persistence quantization once, staying in float.

    snap(snap(x)) == snap(x), and saving a snapped image is lossless.
    """
    return from_u8(quantize_u8(img))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairSpec:
    """A source -> target attack pair."""

    source_class: int
    target_class: int

    def __post_init__(self):
        if self.source_class == self.target_class:
            raise ValueError("source and target class must differ")

    def tag(self) -> str:
        return f"pair_{self.source_class}_{self.target_class}"


@dataclass(frozen=True)
class Placement:
    """Top-left corner of a pasted patch, in pixel coordinates."""

    top: int
    left: int


@dataclass(frozen=True)
class TriggerPatch:
    """The attacker's secret square patch.

    pixels has shape (C, size_px, size_px); regenerating with the same
    seed is bit-identical (see make_trigger).
    """

    pixels: np.ndarray
    size_px: int
    seed: int

    def __post_init__(self):
        c, h, w = self.pixels.shape
        if h != self.size_px or w != self.size_px:
            raise ValueError("trigger pixels must be square with side size_px")


@dataclass
class LabeledDataset:
    """Ordered (image, class-index) pairs with a fixed class count."""

    items: list[tuple[np.ndarray, int]]
    class_count: int
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in ("train", "val"):
            raise ValueError(f"split_tag must be 'train' or 'val', got {self.split_tag!r}")
        for _, label in self.items:
            if not 0 <= label < self.class_count:
                raise ValueError(f"label {label} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.items)

    def images(self) -> list[np.ndarray]:
        return [img for img, _ in self.items]

    def labels(self) -> list[int]:
        return [label for _, label in self.items]

    def class_indices(self, class_index: int) -> list[int]:
        return [i for i, (_, label) in enumerate(self.items) if label == class_index]

    def of_class(self, class_index: int) -> list[np.ndarray]:
        return [img for img, label in self.items if label == class_index]

    def fingerprint(self) -> str:
        """Content hash over quantized pixels and labels."""
        h = hashlib.sha256()
        h.update(f"{len(self.items)}/{self.class_count}/{self.split_tag}".encode())
        for img, label in self.items:
            h.update(quantize_u8(img).tobytes())
            h.update(int(label).to_bytes(4, "little"))
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

STICKER_LAYOUTS = (
    np.array([[0, 1], [1, 0]]),   # checker
    np.array([[0, 0], [1, 1]]),   # horizontal stripes
    np.array([[0, 1], [0, 1]]),   # vertical stripes
)


def _hsv(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val), dtype=np.float32)


def sticker_pixels(hue: float, rng: np.random.Generator, size_px: int = 4) -> np.ndarray:
    """Two-tone coarse-block patch: 2x2 cells alternating between the given
    hue and its complement in a stock layout, nearest-neighbor upsampled
    to size_px x size_px. The shared recipe for dataset stickers and
    attack triggers."""
    a = _hsv(hue, rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0))
    b = _hsv(hue + 0.5, rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0))
    layout = STICKER_LAYOUTS[int(rng.integers(0, len(STICKER_LAYOUTS)))]
    cells = np.where(layout[None] == 0, a[:, None, None], b[:, None, None]).astype(np.float32)
    idx = (np.arange(size_px) * 2) // size_px
    return np.ascontiguousarray(cells[:, idx][:, :, idx])


def make_trigger(rng: np.random.Generator, size_px: int, channels: int = 3) -> TriggerPatch:
    """Random coarse-block trigger.

    Draws a trigger seed from rng, then builds a saturated two-tone
    coarse-block patch at a random hue (the sticker recipe). Coarse
    saturated blocks keep the patch salient to learned features at any
    size, and the recorded seed regenerates the pixels bit-exactly.
    """
    return trigger_from_seed(int(rng.integers(0, 2**31)), size_px, channels)


def trigger_from_seed(seed: int, size_px: int, channels: int = 3) -> TriggerPatch:
    """Deterministic trigger: same seed, same bytes."""
    if size_px < 2:
        raise ValueError(f"trigger size must be >= 2, got {size_px}")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    rng = make_rng(seed)
    pixels = sticker_pixels(rng.random(), rng, size_px)
    if channels == 1:
        pixels = pixels.mean(axis=0, keepdims=True).astype(np.float32)
    return TriggerPatch(pixels=np.ascontiguousarray(pixels), size_px=size_px, seed=seed)


def paste(image: np.ndarray, trigger: TriggerPatch, at: Placement) -> np.ndarray:
    """Copy of image with trigger.pixels written into the k x k window."""
    c, h, w = image.shape
    k = trigger.size_px
    if at.top < 0 or at.left < 0 or at.top + k > h or at.left + k > w:
        raise ValueError(f"placement ({at.top},{at.left}) puts {k}x{k} patch outside {h}x{w} image")
    if trigger.pixels.shape[0] != c:
        raise ValueError("trigger channel count does not match image")
    out = image.copy()
    out[:, at.top:at.top + k, at.left:at.left + k] = trigger.pixels
    return out


def sample_placement(rng: np.random.Generator, image_hw: tuple[int, int], size_px: int) -> Placement:
    """Uniform placement of a size_px patch fully inside an H x W image."""
    h, w = image_hw
    if size_px > h or size_px > w:
        raise ValueError(f"{size_px}px patch does not fit in {h}x{w} image")
    top = int(rng.integers(0, h - size_px + 1))
    left = int(rng.integers(0, w - size_px + 1))
    return Placement(top=top, left=left)
