"""Heatmap-argmax blocking: the test-time defense (predict, localize,
black out, re-predict) and the training-time blocking regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import derive_seed, make_rng
from .interpret import (CNN_METHODS, ROLLOUT_GRAD, VIT_METHODS, Heatmap,
                        explain_batch, predict_and_explain)
from .models import TrainConfig, TrainResult, finetune_linear, forward


@dataclass(frozen=True)
class BlockMask:
    """A square window to black out, tagged with its originating heatmap."""

    top: int
    left: int
    size_px: int
    source_heatmap_tag: str = ""

    def box(self) -> tuple[int, int, int, int]:
        return self.top, self.left, self.size_px, self.size_px


@dataclass
class DefenseConfig:
    block_size_px: int = 4
    interpretation_method: str = ROLLOUT_GRAD
    train_block_probability: float = 0.5

    def __post_init__(self):
        if self.block_size_px < 1:
            raise ValueError("block_size_px must be >= 1")
        if self.interpretation_method not in VIT_METHODS + CNN_METHODS:
            raise ValueError(f"unknown interpretation method "
                             f"{self.interpretation_method!r}")
        if not 0.0 <= self.train_block_probability <= 1.0:
            raise ValueError("train_block_probability must be in [0, 1]")


@dataclass
class DefendResult:
    first_label: int
    final_label: int
    mask: BlockMask
    heatmap: Heatmap
    blocked_image: np.ndarray


def locate_block(heatmap: Heatmap, block_size_px: int) -> BlockMask:
    """Square window centered on the heatmap argmax, clamped inside the
    image. Ties break at the smallest (row, col), so flat maps block the
    top-left corner."""
    h, w = heatmap.values.shape
    if block_size_px < 1:
        raise ValueError("block size must be >= 1")
    if block_size_px > h or block_size_px > w:
        raise ValueError(f"{block_size_px}px block does not fit a {h}x{w} heatmap")
    row, col = heatmap.argmax_rc()
    top = int(np.clip(row - block_size_px // 2, 0, h - block_size_px))
    left = int(np.clip(col - block_size_px // 2, 0, w - block_size_px))
    return BlockMask(top=top, left=left, size_px=block_size_px,
                     source_heatmap_tag=heatmap.method_tag)


def apply_block(image: np.ndarray, mask: BlockMask) -> np.ndarray:
    """Copy of the image with the masked window set to black (0.0)."""
    _, h, w = image.shape
    k = mask.size_px
    if mask.top < 0 or mask.left < 0 or mask.top + k > h or mask.left + k > w:
        raise ValueError(f"mask ({mask.top},{mask.left},{k}) outside {h}x{w} image")
    out = image.copy()
    out[:, mask.top:mask.top + k, mask.left:mask.left + k] = 0.0
    return out


def defend_predict(model, image: np.ndarray, cfg: DefenseConfig) -> DefendResult:
    """Two-pass blocking defense on one image.

    Pass 1 predicts and explains in a single recorded forward; the block
    lands on the heatmap argmax; pass 2 re-predicts on the blocked image.
    Exactly two classification forward passes plus one gradient pass.
    """
    logits1, heatmap = predict_and_explain(model, image, cfg.interpretation_method)
    first = int(np.argmax(logits1))
    mask = locate_block(heatmap, cfg.block_size_px)
    blocked = apply_block(image, mask)
    logits2, _ = forward(model, blocked)
    return DefendResult(first_label=first, final_label=int(np.argmax(logits2)),
                        mask=mask, heatmap=heatmap, blocked_image=blocked)


def defend_predict_batch(model, images: list[np.ndarray],
                         cfg: DefenseConfig, batch_size: int = 64) -> list[DefendResult]:
    """Throughput variant of defend_predict: same two-pass scheme with
    batched forwards; per-image results match the single-image path."""
    results: list[DefendResult] = []
    for lo in range(0, len(images), batch_size):
        chunk = images[lo:lo + batch_size]
        stack = np.stack(chunk).astype(np.float32)
        logits1, heatmaps = explain_batch(model, stack, cfg.interpretation_method)
        masks = [locate_block(hm, cfg.block_size_px) for hm in heatmaps]
        blocked = [apply_block(img, m) for img, m in zip(chunk, masks)]
        model.eval()
        with torch.no_grad():
            logits2, _ = model(torch.from_numpy(np.stack(blocked).astype(np.float32)))
        logits2 = logits2.numpy()
        for i in range(len(chunk)):
            results.append(DefendResult(
                first_label=int(np.argmax(logits1[i])),
                final_label=int(np.argmax(logits2[i])),
                mask=masks[i], heatmap=heatmaps[i], blocked_image=blocked[i]))
    return results


def attn_block_finetune(model, data, train_cfg: TrainConfig,
                        defense_cfg: DefenseConfig) -> TrainResult:
    """Linear fine-tune with blocking as augmentation: each image is, with
    the configured probability, replaced by its blocked version (heatmap
    for the model's current predicted class) before the loss step.

    The blocking decisions draw from their own seeded stream, so with
    probability 0 the trajectory is identical to finetune_linear.
    """
    if not train_cfg.freeze_backbone:
        raise ValueError("attn_block_finetune requires freeze_backbone=True")
    p = defense_cfg.train_block_probability

    def factory(tuned):
        block_rng = make_rng(derive_seed(train_cfg.seed, "train-block"))

        def transform(imgs: list[np.ndarray]) -> list[np.ndarray]:
            if p <= 0.0:
                return imgs
            flags = [bool(block_rng.random() < p) for _ in imgs]
            chosen = [i for i, f in enumerate(flags) if f]
            if not chosen:
                return imgs
            stack = np.stack([imgs[i] for i in chosen]).astype(np.float32)
            _, heatmaps = explain_batch(tuned, stack, defense_cfg.interpretation_method)
            out = list(imgs)
            for i, hm in zip(chosen, heatmaps):
                mask = locate_block(hm, defense_cfg.block_size_px)
                out[i] = apply_block(imgs[i], mask)
            return out

        return transform

    return finetune_linear(model, data, train_cfg, transform_factory=factory)
