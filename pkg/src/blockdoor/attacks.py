"""Both poisoning threat models: dirty-label trigger pasting (BadNets) and
clean-label feature-collision poison generation (hidden-trigger attack).

The hidden-trigger optimization minimizes || f(z) - f(patched source) ||_2^2
over z, projected every step into the L-inf ball of radius epsilon around
the base target image, intersected with [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (
    LabeledDataset,
    OptimizationFailure,
    PairSpec,
    Placement,
    TriggerPatch,
    make_rng,
    derive_seed,
    paste,
    sample_placement,
    snap_to_u8_grid,
)
from .models import FeatureExtractor

PLATEAU_WINDOW = 100
PLATEAU_REL_IMPROVEMENT = 1e-5
MAX_STEP_HALVINGS = 8


@dataclass
class PoisonConfig:
    """Budget and schedule for one source-target poisoning run."""

    epsilon: float
    step_size: float
    max_iters: int
    poison_count: int
    pair: PairSpec
    trigger: TriggerPatch
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.poison_count < 1:
            raise ValueError(f"poison_count must be >= 1, got {self.poison_count}")


@dataclass
class PoisonRecord:
    source_id: int
    target_id: int
    placement: Placement
    final_loss: float
    iterations: int


@dataclass
class PoisonSet:
    """Generated poisons plus full provenance.

    images[i] stays within epsilon of bases[i] element-wise; every label is
    the target class (the clean-label contract). bases are the target
    images snapped once to the 8-bit grid, exactly as they persist.
    """

    images: list[np.ndarray]
    labels: list[int]
    bases: list[np.ndarray]
    records: list[PoisonRecord]
    config: PoisonConfig

    def __len__(self) -> int:
        return len(self.images)

    def validate_constraint(self) -> float:
        """Max L-inf deviation across the set; raises if over budget."""
        worst = 0.0
        for z, t in zip(self.images, self.bases):
            dev = float(np.max(np.abs(z.astype(np.float64) - t.astype(np.float64))))
            worst = max(worst, dev)
        if worst > self.config.epsilon + 1e-7:
            raise AssertionError(f"poison exceeds epsilon: {worst} > {self.config.epsilon}")
        return worst


@dataclass
class BadnetsResult:
    dataset: LabeledDataset
    poisoned_indices: list[int]
    placements: list[Placement]


def project_linf(z: np.ndarray, center: np.ndarray, epsilon: float) -> np.ndarray:
    """Project into the L-inf ball around center, intersected with [0,1].

    Idempotent, and the identity wherever z was already feasible.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    lo = np.clip(center - epsilon, 0.0, 1.0)
    hi = np.clip(center + epsilon, 0.0, 1.0)
    return np.clip(z, lo, hi).astype(np.float32)


def badnets_poison(data: LabeledDataset, trigger: TriggerPatch, target: int,
                   rate: float, rng: np.random.Generator) -> BadnetsResult:
    """Dirty-label poisoning: paste the trigger on floor(rate * N) uniformly
    chosen non-target images and rewrite their labels to the target class."""
    if not 0 < rate <= 1:
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    n = len(data)
    count = int(math.floor(rate * n))
    if count == 0:
        raise ValueError(f"rate {rate} selects zero of {n} images")
    candidates = [i for i, (_, label) in enumerate(data.items) if label != target]
    if count > len(candidates):
        raise ValueError(f"rate {rate} selects {count} images but only "
                         f"{len(candidates)} non-target images exist")
    chosen = sorted(int(i) for i in rng.choice(len(candidates), size=count, replace=False))
    selected = [candidates[i] for i in chosen]

    items = list(data.items)
    h, w = items[0][0].shape[1:]
    placements = []
    for idx in selected:
        placement = sample_placement(rng, (h, w), trigger.size_px)
        placements.append(placement)
        items[idx] = (paste(items[idx][0], trigger, placement), target)
    poisoned = LabeledDataset(items=items, class_count=data.class_count,
                              split_tag=data.split_tag)
    return BadnetsResult(dataset=poisoned, poisoned_indices=selected, placements=placements)


def _collision_losses(features: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return ((features - targets) ** 2).sum(dim=1)


def _htba_optimize(extractor: FeatureExtractor, patched: np.ndarray, bases: np.ndarray,
                   cfg: PoisonConfig) -> tuple[np.ndarray, list[list[float]], list[int]]:
    """Batched projected descent with per-image monotone step control.

    Each image keeps its own step size, halved whenever a step would
    increase its loss (so every trace is non-increasing), and stops on a
    plateau or at max_iters.
    """
    t = torch.from_numpy(bases.astype(np.float32))
    eps = float(cfg.epsilon)
    lo = (t - eps).clamp(0.0, 1.0)
    hi = (t + eps).clamp(0.0, 1.0)

    with torch.no_grad():
        target_feats = extractor.features_torch(torch.from_numpy(patched.astype(np.float32)))
    target_feats = target_feats.detach()

    b = t.shape[0]
    z = t.clone()
    step = torch.full((b,), float(cfg.step_size))
    active = torch.ones(b, dtype=torch.bool)
    iterations = [0] * b

    with torch.no_grad():
        init = _collision_losses(extractor.features_torch(z), target_feats)
    traces: list[list[float]] = [[float(v)] for v in init]
    if not bool(torch.isfinite(init).all()):
        raise OptimizationFailure("non-finite initial collision loss", traces[0])

    for _ in range(cfg.max_iters):
        if not bool(active.any()):
            break
        leaf = z.detach().requires_grad_(True)
        per = _collision_losses(extractor.features_torch(leaf), target_feats)
        grad = torch.autograd.grad(per[active].sum(), leaf)[0]
        if not bool(torch.isfinite(grad).all()):
            raise OptimizationFailure("non-finite gradient", traces[int(active.nonzero()[0])])
        current = per.detach()

        new_z = z.clone()
        new_loss = current.clone()
        pending = active.clone()
        for _attempt in range(MAX_STEP_HALVINGS):
            rows = pending.nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                break
            cand = (z[rows] - step[rows].view(-1, 1, 1, 1) * grad[rows]).clamp(lo[rows], hi[rows])
            with torch.no_grad():
                trial = _collision_losses(extractor.features_torch(cand), target_feats[rows])
            improved = trial <= current[rows]
            hit = rows[improved]
            new_z[hit] = cand[improved]
            new_loss[hit] = trial[improved]
            pending[hit] = False
            step[rows[~improved]] *= 0.5
        # images still pending made no acceptable move this iteration

        z = new_z
        for i in range(b):
            if not bool(active[i]):
                continue
            value = float(new_loss[i])
            if not math.isfinite(value):
                raise OptimizationFailure("non-finite collision loss", traces[i])
            traces[i].append(value)
            iterations[i] += 1
            history = traces[i]
            if len(history) > PLATEAU_WINDOW:
                before = history[-1 - PLATEAU_WINDOW]
                rel = (before - history[-1]) / max(before, 1e-12)
                if rel < PLATEAU_REL_IMPROVEMENT:
                    active[i] = False
            if value == 0.0:
                active[i] = False

    z = z.clamp(lo, hi)
    return z.numpy().astype(np.float32), traces, iterations


def htba_generate_one(extractor: FeatureExtractor, source_img: np.ndarray,
                      target_img: np.ndarray, trigger: TriggerPatch,
                      placement: Placement, cfg: PoisonConfig) -> tuple[np.ndarray, list[float]]:
    """One feature-collision poison; returns (z, per-iteration loss trace).

    The optimization anchor is the target image snapped once to the 8-bit
    grid (its on-disk form), so the epsilon certificate survives
    persistence exactly when epsilon is a multiple of 1/255.
    """
    base = snap_to_u8_grid(target_img)
    patched = paste(source_img, trigger, placement)
    z, traces, _ = _htba_optimize(extractor, patched[None], base[None], cfg)
    return z[0], traces[0]


def htba_generate_set(extractor: FeatureExtractor, data: LabeledDataset,
                      cfg: PoisonConfig, rng: np.random.Generator,
                      batch_size: int = 32) -> PoisonSet:
    """Generate cfg.poison_count poisons for cfg.pair from the train split.

    Source and target images are sampled without replacement; each pair
    gets a fresh trigger placement.
    """
    pair = cfg.pair
    source_ids = data.class_indices(pair.source_class)
    target_ids = data.class_indices(pair.target_class)
    if len(source_ids) < cfg.poison_count or len(target_ids) < cfg.poison_count:
        raise ValueError(
            f"need >= {cfg.poison_count} images of classes {pair.source_class} and "
            f"{pair.target_class}; have {len(source_ids)} and {len(target_ids)}")

    chosen_src = [source_ids[int(i)] for i in
                  rng.choice(len(source_ids), size=cfg.poison_count, replace=False)]
    chosen_tgt = [target_ids[int(i)] for i in
                  rng.choice(len(target_ids), size=cfg.poison_count, replace=False)]
    h, w = data.items[0][0].shape[1:]
    placements = [sample_placement(rng, (h, w), cfg.trigger.size_px)
                  for _ in range(cfg.poison_count)]

    images: list[np.ndarray] = []
    bases: list[np.ndarray] = []
    records: list[PoisonRecord] = []
    for lo_idx in range(0, cfg.poison_count, batch_size):
        sl = slice(lo_idx, min(lo_idx + batch_size, cfg.poison_count))
        src_batch = [data.items[i][0] for i in chosen_src[sl]]
        tgt_batch = [snap_to_u8_grid(data.items[i][0]) for i in chosen_tgt[sl]]
        patched = np.stack([paste(s, cfg.trigger, p)
                            for s, p in zip(src_batch, placements[sl])])
        z, traces, iters = _htba_optimize(extractor, patched, np.stack(tgt_batch), cfg)
        for j in range(z.shape[0]):
            images.append(z[j])
            bases.append(tgt_batch[j])
            records.append(PoisonRecord(
                source_id=chosen_src[sl][j], target_id=chosen_tgt[sl][j],
                placement=placements[sl][j], final_loss=traces[j][-1],
                iterations=iters[j]))

    poisons = PoisonSet(images=images, labels=[pair.target_class] * cfg.poison_count,
                        bases=bases, records=records, config=cfg)
    poisons.validate_constraint()
    return poisons


def inject(data: LabeledDataset, poisons: PoisonSet, seed: int | None = None) -> LabeledDataset:
    """Union of the original items and the poisons, deterministically shuffled."""
    if seed is None:
        seed = poisons.config.seed
    items = list(data.items) + [(img, label) for img, label in zip(poisons.images, poisons.labels)]
    perm = make_rng(derive_seed(seed, "inject")).permutation(len(items))
    shuffled = [items[int(i)] for i in perm]
    return LabeledDataset(items=shuffled, class_count=data.class_count, split_tag=data.split_tag)
