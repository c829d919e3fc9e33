"""Dataset construction: built-in synthetic shapes and folder ingestion."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .core import (LabeledDataset, _hsv, check_image, derive_seed, make_rng,
                   sticker_pixels)

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring")


def class_description(class_index: int) -> str:
    return f"sticker-hue-{class_index}"


def _shape_mask(shape: str, hw: tuple[int, int], cy: float, cx: float, r: float) -> np.ndarray:
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        bar = r / 2.5
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | ((np.abs(dy) <= bar) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _render_sample(rng: np.random.Generator, class_index: int, class_count: int,
                   hw: tuple[int, int], channels: int) -> np.ndarray:
    h, w = hw
    shape = SHAPE_NAMES[int(rng.integers(0, len(SHAPE_NAMES)))]
    class_hue = class_index / class_count + rng.uniform(-0.025, 0.025)

    bg = rng.uniform(0.35, 0.6)
    img = np.full((3, h, w), bg, dtype=np.float32)
    img += rng.normal(0.0, 0.03, size=img.shape).astype(np.float32)

    # carrier object: shape, position, size and hue are all nuisance; its
    # hue is kept away from the class hue so the stickers stay visible
    r = rng.uniform(0.22, 0.3) * min(h, w)
    cy = rng.uniform(r + 1, h - r - 1)
    cx = rng.uniform(r + 1, w - r - 1)
    carrier = _hsv(class_hue + rng.uniform(0.15, 0.35), rng.uniform(0.4, 0.7),
                   rng.uniform(0.5, 0.85))

    mask = _shape_mask(shape, hw, cy, cx, r)
    for c in range(3):
        img[c][mask] = carrier[c]

    # two sticker copies at random spots on the object; evidence is
    # redundant, so occluding one patch rarely destroys the class signal
    for _ in range(2):
        stamp = sticker_pixels(class_hue, rng)
        k = stamp.shape[1]
        ey = int(np.clip(cy + rng.uniform(-0.75, 0.75) * r - k / 2, 0, h - k))
        ex = int(np.clip(cx + rng.uniform(-0.75, 0.75) * r - k / 2, 0, w - k))
        img[:, ey:ey + k, ex:ex + k] = stamp

    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    if channels == 1:
        img = img.mean(axis=0, keepdims=True).astype(np.float32)
    return img


def make_synthetic_dataset(seed: int, class_count: int, per_class: int,
                           hw: tuple[int, int] = (32, 32), channels: int = 3,
                           split_tag: str = "train") -> LabeledDataset:
    """Colored-shape classification set; fully determined by the seed.

    Class k is identified by the hue of the two-tone 4x4 stickers stamped
    twice on a carrier shape; the carrier's own shape, hue, size and
    position are nuisance. Reading a sticker's hue wherever it sits makes
    the learned features position-invariant micro-pattern encoders over a
    continuous hue family, the same pathway a pasted trigger must travel.
    """
    if not 2 <= class_count <= 10:
        raise ValueError("class_count must be in [2, 10]")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    items = []
    for class_index in range(class_count):
        rng = make_rng(derive_seed(seed, "synthetic", split_tag, class_index))
        for _ in range(per_class):
            img = _render_sample(rng, class_index, class_count, hw, channels)
            items.append((img, class_index))
    return LabeledDataset(items=items, class_count=class_count, split_tag=split_tag)


def load_folder_dataset(root: str | Path, hw: tuple[int, int] = (32, 32), channels: int = 3,
                        split_tag: str = "train") -> LabeledDataset:
    """Load a per-class image folder tree: root/<class-name>/*.png|jpg|...

    Class indices follow the sorted subdirectory names; images are resized
    to hw when needed.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(f"need >= 2 class subdirectories under {root}")
    items = []
    for class_index, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not files:
            raise ValueError(f"class directory {class_dir} has no images")
        for path in files:
            with Image.open(path) as im:
                im = im.convert("L" if channels == 1 else "RGB")
                if im.size != (hw[1], hw[0]):
                    im = im.resize((hw[1], hw[0]), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            if channels == 1:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            items.append((check_image(np.ascontiguousarray(arr)), class_index))
    return LabeledDataset(items=items, class_count=len(class_dirs), split_tag=split_tag)


def subsample_per_class(data: LabeledDataset, per_class: int, seed: int) -> LabeledDataset:
    """Deterministic per-class subsample (capped at class size)."""
    rng = make_rng(derive_seed(seed, "subsample", data.split_tag))
    items = []
    for class_index in range(data.class_count):
        idx = data.class_indices(class_index)
        take = min(per_class, len(idx))
        chosen = rng.choice(len(idx), size=take, replace=False)
        items.extend(data.items[idx[j]] for j in sorted(chosen))
    return LabeledDataset(items=items, class_count=data.class_count, split_tag=data.split_tag)
