"""Experiment metrics: validation accuracy, attack success rate, source
accuracy, source-label recovery, localization IoU, the block-size sweep,
and the one-pair end-to-end experiment.

Every fraction is a ratio of recorded integer counts, and every metric
keeps a per-image record list so the number can be recomputed exactly
from its log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import attacks
from .core import LabeledDataset, PairSpec, TriggerPatch, derive_seed, make_rng, paste, sample_placement
from .defense import DefenseConfig, attn_block_finetune, defend_predict_batch
from .models import FeatureExtractor, finetune_linear, predict_labels


@dataclass
class MetricValue:
    """A fraction with its integer counts."""

    numerator: int
    denominator: int

    @property
    def fraction(self) -> float:
        return self.numerator / self.denominator

    def to_json(self) -> dict:
        return {"fraction": self.fraction, "numerator": self.numerator,
                "denominator": self.denominator}


@dataclass
class MetricResult:
    value: MetricValue
    records: list[dict] = field(default_factory=list)

    @property
    def fraction(self) -> float:
        return self.value.fraction


@dataclass
class IouResult:
    mean: float
    per_image: list[float]
    records: list[dict] = field(default_factory=list)


@dataclass
class SweepRow:
    block_size_px: int
    asr: float
    source_acc: float

    def to_json(self) -> dict:
        return {"block_size_px": self.block_size_px, "asr": self.asr,
                "source_acc": self.source_acc}


def _count(records: list[dict], key: str = "hit") -> MetricValue:
    return MetricValue(numerator=sum(1 for r in records if r[key]),
                       denominator=len(records))


def val_accuracy(model, val: LabeledDataset, defense: Optional[DefenseConfig] = None) -> MetricResult:
    """Fraction of validation images classified correctly; with a defense,
    the blocked second-pass label is scored."""
    if len(val) == 0:
        raise ValueError("empty validation set")
    images, labels = val.images(), val.labels()
    if defense is None:
        preds = predict_labels(model, images)
    else:
        preds = [r.final_label for r in defend_predict_batch(model, images, defense)]
    records = [{"index": i, "true": t, "predicted": p, "hit": p == t}
               for i, (t, p) in enumerate(zip(labels, preds))]
    return MetricResult(value=_count(records), records=records)


def _patched_inputs(source_images: list[np.ndarray], trigger: TriggerPatch,
                    rng: np.random.Generator):
    placements = []
    patched = []
    for img in source_images:
        placement = sample_placement(rng, img.shape[1:], trigger.size_px)
        placements.append(placement)
        patched.append(paste(img, trigger, placement))
    return patched, placements


def attack_success_rate(model, source_val_images: list[np.ndarray], trigger: TriggerPatch,
                        target: int, rng: np.random.Generator,
                        defense: Optional[DefenseConfig] = None) -> MetricResult:
    """Fraction of patched source images classified as the target class."""
    if not source_val_images:
        raise ValueError("empty source image set")
    patched, placements = _patched_inputs(source_val_images, trigger, rng)
    if defense is None:
        preds = predict_labels(model, patched)
    else:
        preds = [r.final_label for r in defend_predict_batch(model, patched, defense)]
    records = [{"index": i, "target": target, "predicted": p,
                "placement": [pl.top, pl.left], "hit": p == target}
               for i, (p, pl) in enumerate(zip(preds, placements))]
    return MetricResult(value=_count(records), records=records)


def source_accuracy(model, source_val_images: list[np.ndarray], source_class: int,
                    defense: Optional[DefenseConfig] = None) -> MetricResult:
    """Accuracy restricted to clean source-class validation images."""
    if not source_val_images:
        raise ValueError("empty source image set")
    if defense is None:
        preds = predict_labels(model, source_val_images)
    else:
        preds = [r.final_label for r in defend_predict_batch(model, source_val_images, defense)]
    records = [{"index": i, "true": source_class, "predicted": p, "hit": p == source_class}
               for i, p in enumerate(preds)]
    return MetricResult(value=_count(records), records=records)


def source_recovery(model, source_val_images: list[np.ndarray], source_class: int,
                    trigger: TriggerPatch, target: int, rng: np.random.Generator,
                    defense: DefenseConfig) -> tuple[MetricResult, MetricResult]:
    """Fractions of patched images classified as the source class without
    and with the defense, on identical patched inputs."""
    if not source_val_images:
        raise ValueError("empty source image set")
    patched, placements = _patched_inputs(source_val_images, trigger, rng)
    before_preds = predict_labels(model, patched)
    after_preds = [r.final_label for r in defend_predict_batch(model, patched, defense)]
    before = [{"index": i, "true": source_class, "predicted": p,
               "placement": [pl.top, pl.left], "hit": p == source_class}
              for i, (p, pl) in enumerate(zip(before_preds, placements))]
    after = [{"index": i, "true": source_class, "predicted": p,
              "placement": [pl.top, pl.left], "hit": p == source_class}
             for i, (p, pl) in enumerate(zip(after_preds, placements))]
    return (MetricResult(value=_count(before), records=before),
            MetricResult(value=_count(after), records=after))


def box_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    """Intersection over union of two (top, left, height, width) boxes."""
    at, al, ah, aw = a
    bt, bl, bh, bw = b
    if ah <= 0 or aw <= 0 or bh <= 0 or bw <= 0:
        raise ValueError("boxes must have positive area")
    inter_h = min(at + ah, bt + bh) - max(at, bt)
    inter_w = min(al + aw, bl + bw) - max(al, bl)
    inter = max(inter_h, 0) * max(inter_w, 0)
    union = ah * aw + bh * bw - inter
    return inter / union


def localization_iou(model, interpret_method: str, source_val_images: list[np.ndarray],
                     trigger: TriggerPatch, rng: np.random.Generator,
                     block_size: int) -> IouResult:
    """Mean IoU between the predicted block window (heatmap of the
    predicted class) and the true trigger window on patched images."""
    if not source_val_images:
        raise ValueError("empty source image set")
    patched, placements = _patched_inputs(source_val_images, trigger, rng)
    cfg = DefenseConfig(block_size_px=block_size, interpretation_method=interpret_method)
    results = defend_predict_batch(model, patched, cfg)
    per_image = []
    records = []
    for i, (res, pl) in enumerate(zip(results, placements)):
        iou = box_iou(res.mask.box(), (pl.top, pl.left, trigger.size_px, trigger.size_px))
        per_image.append(iou)
        records.append({"index": i, "iou": iou, "mask": [res.mask.top, res.mask.left,
                        res.mask.size_px], "trigger": [pl.top, pl.left, trigger.size_px],
                        "predicted": res.first_label})
    return IouResult(mean=float(np.mean(per_image)), per_image=per_image, records=records)


def block_size_sweep(model, source_val_images: list[np.ndarray], source_class: int,
                     trigger: TriggerPatch, target: int, sizes: list[int],
                     defense: DefenseConfig, rng: np.random.Generator) -> list[SweepRow]:
    """Defended ASR (patched sources) and defended source accuracy (clean
    sources) as the block size varies; patched inputs are fixed across
    sizes so rows are comparable."""
    if sorted(sizes) != list(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError("sizes must be strictly increasing")
    patched, _ = _patched_inputs(source_val_images, trigger, rng)
    rows = []
    for size in sizes:
        cfg = DefenseConfig(block_size_px=size,
                            interpretation_method=defense.interpretation_method,
                            train_block_probability=defense.train_block_probability)
        asr_res = defend_predict_batch(model, patched, cfg)
        asr = float(np.mean([r.final_label == target for r in asr_res]))
        src_res = defend_predict_batch(model, source_val_images, cfg)
        src_acc = float(np.mean([r.final_label == source_class for r in src_res]))
        rows.append(SweepRow(block_size_px=size, asr=asr, source_acc=src_acc))
    return rows


@dataclass
class MetricsRow:
    """Per-pair experiment metrics; defended fields are None when the
    defense was not evaluated."""

    pair: PairSpec
    val_acc: MetricValue
    source_acc: MetricValue
    asr: MetricValue
    defended_val_acc: Optional[MetricValue] = None
    defended_source_acc: Optional[MetricValue] = None
    defended_asr: Optional[MetricValue] = None
    source_recovery_before: Optional[MetricValue] = None
    source_recovery_after: Optional[MetricValue] = None
    mean_iou: Optional[float] = None
    iou_count: Optional[int] = None

    FRACTION_FIELDS = ("val_acc", "source_acc", "asr", "defended_val_acc",
                       "defended_source_acc", "defended_asr",
                       "source_recovery_before", "source_recovery_after")

    def to_json(self) -> dict:
        out = {"pair": {"source_class": self.pair.source_class,
                        "target_class": self.pair.target_class}}
        for name in self.FRACTION_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value.to_json()
        if self.mean_iou is not None:
            out["mean_iou"] = {"mean": self.mean_iou, "count": self.iou_count}
        return out

    @staticmethod
    def from_json(data: dict) -> "MetricsRow":
        kwargs = {"pair": PairSpec(data["pair"]["source_class"], data["pair"]["target_class"])}
        for name in MetricsRow.FRACTION_FIELDS:
            if name in data:
                kwargs[name] = MetricValue(numerator=data[name]["numerator"],
                                           denominator=data[name]["denominator"])
        if "mean_iou" in data:
            kwargs["mean_iou"] = data["mean_iou"]["mean"]
            kwargs["iou_count"] = data["mean_iou"]["count"]
        return MetricsRow(**kwargs)


@dataclass
class PairExperimentResult:
    row: MetricsRow
    logs: dict
    attacked_model: object
    poisons: Optional[attacks.PoisonSet]
    badnets: Optional[attacks.BadnetsResult]
    finetune_curve: list[float]


def _source_eval_images(val: LabeledDataset, source_class: int,
                        cap: Optional[int]) -> list[np.ndarray]:
    images = val.of_class(source_class)
    return images[:cap] if cap else images


def _val_eval_set(val: LabeledDataset, per_class_cap: Optional[int]) -> LabeledDataset:
    if not per_class_cap:
        return val
    items = []
    seen = {c: 0 for c in range(val.class_count)}
    for img, label in val.items:
        if seen[label] < per_class_cap:
            items.append((img, label))
            seen[label] += 1
    return LabeledDataset(items=items, class_count=val.class_count, split_tag=val.split_tag)


def run_pair_experiment(cfg, pair: PairSpec, clean_model, train_data: LabeledDataset,
                        val_data: LabeledDataset,
                        poisons: Optional[attacks.PoisonSet] = None) -> PairExperimentResult:
    """Poison, inject, fine-tune and evaluate one source-target pair.

    cfg is an ExperimentConfig. The clean model is passed in (training it
    is a separate stage). A pre-generated poison set can be supplied to
    skip regeneration. Placements for every patched-image metric come
    from one per-pair seed, so undefended and defended numbers see
    identical inputs.
    """
    seed = cfg.master_seed
    trigger = cfg.trigger()
    badnets_result = None
    if cfg.attack.kind == "htba":
        if poisons is None:
            pcfg = attacks.PoisonConfig(
                epsilon=cfg.epsilon, step_size=cfg.attack.step_size,
                max_iters=cfg.attack.max_iters, poison_count=cfg.attack.poison_count,
                pair=pair, trigger=trigger, seed=derive_seed(seed, "poison", pair.tag()))
            rng = make_rng(pcfg.seed)
            poisons = attacks.htba_generate_set(FeatureExtractor(clean_model),
                                                train_data, pcfg, rng)
        poisoned_train = attacks.inject(train_data, poisons)
    elif cfg.attack.kind == "badnets":
        rng = make_rng(derive_seed(seed, "badnets", pair.tag()))
        badnets_result = attacks.badnets_poison(train_data, trigger, pair.target_class,
                                                cfg.attack.badnets_rate, rng)
        poisoned_train = badnets_result.dataset
    else:
        raise ValueError(f"unknown attack kind {cfg.attack.kind!r}")

    ft_cfg = cfg.finetune.to_config(seed=derive_seed(seed, "finetune", pair.tag()),
                                    freeze_backbone=True)
    if cfg.train_blocking:
        ft = attn_block_finetune(clean_model, poisoned_train, ft_cfg, cfg.defense.to_config())
    else:
        ft = finetune_linear(clean_model, poisoned_train, ft_cfg)
    attacked = ft.model

    defense = cfg.defense.to_config() if cfg.defense.enabled else None
    row, logs = evaluate_pair(cfg, pair, attacked, val_data, trigger, defense)
    return PairExperimentResult(row=row, logs=logs, attacked_model=attacked,
                                poisons=poisons, badnets=badnets_result,
                                finetune_curve=ft.loss_curve)


def evaluate_pair(cfg, pair: PairSpec, model, val_data: LabeledDataset,
                  trigger: TriggerPatch, defense: Optional[DefenseConfig]):
    """All per-pair metrics for a trained model; returns (MetricsRow, logs).

    The defended patched-image metrics (ASR, recovery-after, IoU) share
    one blocking pass per image.
    """
    seed = cfg.master_seed
    val_eval = _val_eval_set(val_data, cfg.eval.val_subsample)
    source_imgs = _source_eval_images(val_data, pair.source_class, cfg.eval.source_subsample)
    if not source_imgs:
        raise ValueError(f"no validation images of source class {pair.source_class}")
    placement_seed = derive_seed(seed, "eval-placements", pair.tag())

    logs: dict = {}
    val_res = val_accuracy(model, val_eval)
    logs["val_acc"] = val_res.records
    src_res = source_accuracy(model, source_imgs, pair.source_class)
    logs["source_acc"] = src_res.records

    patched, placements = _patched_inputs(source_imgs, trigger, make_rng(placement_seed))
    before_preds = predict_labels(model, patched)
    asr_records = [{"index": i, "target": pair.target_class, "predicted": p,
                    "placement": [pl.top, pl.left], "hit": p == pair.target_class}
                   for i, (p, pl) in enumerate(zip(before_preds, placements))]
    logs["asr"] = asr_records

    row = MetricsRow(pair=pair, val_acc=val_res.value, source_acc=src_res.value,
                     asr=_count(asr_records))
    if defense is None:
        return row, logs

    defended_val = val_accuracy(model, val_eval, defense)
    logs["defended_val_acc"] = defended_val.records
    defended_src = source_accuracy(model, source_imgs, pair.source_class, defense)
    logs["defended_source_acc"] = defended_src.records

    defended = defend_predict_batch(model, patched, defense)
    dasr_records, rec_before, rec_after, iou_records = [], [], [], []
    for i, (res, pl, before_pred) in enumerate(zip(defended, placements, before_preds)):
        iou = box_iou(res.mask.box(), (pl.top, pl.left, trigger.size_px, trigger.size_px))
        dasr_records.append({"index": i, "target": pair.target_class,
                             "predicted": res.final_label,
                             "placement": [pl.top, pl.left],
                             "hit": res.final_label == pair.target_class})
        rec_before.append({"index": i, "true": pair.source_class, "predicted": before_pred,
                           "hit": before_pred == pair.source_class})
        rec_after.append({"index": i, "true": pair.source_class, "predicted": res.final_label,
                          "hit": res.final_label == pair.source_class})
        iou_records.append({"index": i, "iou": iou,
                            "mask": [res.mask.top, res.mask.left, res.mask.size_px],
                            "trigger": [pl.top, pl.left, trigger.size_px],
                            "predicted": res.first_label})
    logs["defended_asr"] = dasr_records
    logs["source_recovery_before"] = rec_before
    logs["source_recovery_after"] = rec_after
    logs["iou"] = iou_records

    row.defended_val_acc = defended_val.value
    row.defended_source_acc = defended_src.value
    row.defended_asr = _count(dasr_records)
    row.source_recovery_before = _count(rec_before)
    row.source_recovery_after = _count(rec_after)
    row.mean_iou = float(np.mean([r["iou"] for r in iou_records]))
    row.iou_count = len(iou_records)
    return row, logs


def aggregate_rows(rows: list[MetricsRow]) -> dict:
    """Mean and sample standard deviation (ddof=1; 0 for a single row)
    over every fraction field present in all rows."""
    if not rows:
        raise ValueError("no rows to aggregate")
    mean: dict = {}
    std: dict = {}
    for name in MetricsRow.FRACTION_FIELDS:
        values = [getattr(r, name) for r in rows]
        if any(v is None for v in values):
            continue
        fracs = np.array([v.fraction for v in values], dtype=np.float64)
        mean[name] = float(fracs.mean())
        std[name] = float(fracs.std(ddof=1)) if len(fracs) > 1 else 0.0
    ious = [r.mean_iou for r in rows]
    if all(v is not None for v in ious):
        arr = np.array(ious, dtype=np.float64)
        mean["mean_iou"] = float(arr.mean())
        std["mean_iou"] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": mean, "std": std}
