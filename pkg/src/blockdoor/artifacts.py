"""Persistence: lossless 8-bit image files, model checkpoints with JSON
sidecars, poison-set directories with manifests, metrics files, run
manifests, qualitative grids and sweep plots.

Images quantize to 8 bits exactly once, on save; the poison manifest's
epsilon is expressed in 1/255 units so the L-inf certificate survives the
round trip bit-exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict
from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import __version__
from .attacks import PoisonConfig, PoisonRecord, PoisonSet
from .core import PairSpec, Placement, check_image, from_u8, quantize_u8, trigger_from_seed
from .evaluation import MetricsRow, SweepRow
from .interpret import Heatmap
from .models import build_model, param_fingerprint


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def save_image_png(image: np.ndarray, path: str | Path) -> None:
    """Quantize to 8-bit (the only quantization) and write a PNG."""
    check_image(image)
    raw = quantize_u8(image)
    if raw.shape[0] == 1:
        pil = Image.fromarray(raw[0], mode="L")
    else:
        pil = Image.fromarray(raw.transpose(1, 2, 0), mode="RGB")
    pil.save(Path(path), format="PNG")


def load_image_png(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as pil:
        arr = np.asarray(pil)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return from_u8(arr)


def save_heatmap(heatmap: Heatmap, path_base: str | Path) -> None:
    """8-bit grayscale PNG plus the raw array as .npy."""
    base = Path(path_base)
    raw = np.floor(heatmap.values.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(raw, mode="L").save(base.with_suffix(".png"), format="PNG")
    np.save(base.with_suffix(".npy"), heatmap.values)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path_base: str | Path, seed: int, train_config: dict,
                    dataset_fingerprint: str) -> dict:
    """Parameter blob (.pt) plus sidecar JSON metadata (.json)."""
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), base.with_suffix(".pt"))
    meta = {
        "architecture": model.describe(),
        "seed": seed,
        "train_config": train_config,
        "dataset_fingerprint": dataset_fingerprint,
        "param_fingerprint": param_fingerprint(model),
        "backbone_fingerprint": param_fingerprint(model, include_head=False),
        "toolkit_version": __version__,
    }
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta


def load_checkpoint(path_base: str | Path):
    """Rebuild the architecture from the sidecar and load parameters."""
    base = Path(path_base)
    with open(base.with_suffix(".json")) as fh:
        meta = json.load(fh)
    arch = dict(meta["architecture"])
    kind = arch.pop("arch")
    arch["image_hw"] = tuple(arch["image_hw"])
    if kind == "cnn":
        arch["conv_channels"] = tuple(arch["conv_channels"])
        arch["conv_strides"] = tuple(arch["conv_strides"])
        arch.pop("use_bias", None)
    class_count = arch.pop("class_count")
    channels = arch.pop("channels")
    image_hw = arch.pop("image_hw")
    model = build_model(kind, class_count=class_count, image_hw=image_hw,
                        channels=channels, seed=meta["seed"], **arch)
    model.load_state_dict(torch.load(base.with_suffix(".pt"), weights_only=True))
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# Poison sets
# ---------------------------------------------------------------------------

def save_poison_set(poisons: PoisonSet, directory: str | Path) -> Path:
    """Write poison PNGs, their base images, and manifest.json."""
    directory = Path(directory)
    (directory / "bases").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, base_img, record) in enumerate(zip(poisons.images, poisons.bases,
                                                    poisons.records)):
        name = f"poison_{i:04d}.png"
        base_name = f"bases/base_{i:04d}.png"
        save_image_png(img, directory / name)
        save_image_png(base_img, directory / base_name)
        entries.append({
            "file": name,
            "base_file": base_name,
            "source_id": record.source_id,
            "target_id": record.target_id,
            "label": poisons.labels[i],
            "placement": [record.placement.top, record.placement.left],
            "final_loss": record.final_loss,
            "iterations": record.iterations,
        })
    manifest = {
        "epsilon": poisons.config.epsilon,
        "epsilon_255": int(round(poisons.config.epsilon * 255)),
        "trigger": {"seed": poisons.config.trigger.seed,
                    "size_px": poisons.config.trigger.size_px},
        "pair": {"source_class": poisons.config.pair.source_class,
                 "target_class": poisons.config.pair.target_class},
        "seed": poisons.config.seed,
        "step_size": poisons.config.step_size,
        "max_iters": poisons.config.max_iters,
        "poisons": entries,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return directory


def load_poison_set(directory: str | Path, channels: int = 3) -> PoisonSet:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    pair = PairSpec(manifest["pair"]["source_class"], manifest["pair"]["target_class"])
    trigger = trigger_from_seed(manifest["trigger"]["seed"],
                                manifest["trigger"]["size_px"], channels)
    cfg = PoisonConfig(epsilon=manifest["epsilon"], step_size=manifest["step_size"],
                       max_iters=manifest["max_iters"],
                       poison_count=len(manifest["poisons"]), pair=pair,
                       trigger=trigger, seed=manifest["seed"])
    images, bases, labels, records = [], [], [], []
    for entry in manifest["poisons"]:
        images.append(load_image_png(directory / entry["file"]))
        bases.append(load_image_png(directory / entry["base_file"]))
        labels.append(entry["label"])
        records.append(PoisonRecord(
            source_id=entry["source_id"], target_id=entry["target_id"],
            placement=Placement(*entry["placement"]),
            final_loss=entry["final_loss"], iterations=entry["iterations"]))
    return PoisonSet(images=images, labels=labels, bases=bases, records=records, config=cfg)


def revalidate_poison_dir(directory: str | Path) -> int:
    """Re-check the quantized L-inf certificate from disk.

    Returns the worst deviation in 1/255 units; raises if any poison
    exceeds the manifest epsilon.
    """
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    budget = manifest.get("epsilon_255", int(round(manifest["epsilon"] * 255)))
    worst = 0
    for entry in manifest["poisons"]:
        z = quantize_u8(load_image_png(directory / entry["file"])).astype(np.int32)
        t = quantize_u8(load_image_png(directory / entry["base_file"])).astype(np.int32)
        dev = int(np.max(np.abs(z - t)))
        worst = max(worst, dev)
        if dev > budget:
            raise AssertionError(
                f"{entry['file']}: quantized deviation {dev}/255 exceeds {budget}/255")
    return worst


# ---------------------------------------------------------------------------
# Metrics and manifests
# ---------------------------------------------------------------------------

def write_metrics(path: str | Path, rows: list[MetricsRow], aggregate: dict,
                  config_hash: str, seed: int) -> None:
    payload = {
        "pairs": [row.to_json() for row in rows],
        "aggregate": aggregate,
        "config_hash": config_hash,
        "seed": seed,
    }
    with open(Path(path), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def read_metrics(path: str | Path) -> dict:
    with open(Path(path)) as fh:
        return json.load(fh)


def metrics_csv_lines(rows: list[MetricsRow]) -> list[str]:
    header = ["source", "target"] + [name for name in MetricsRow.FRACTION_FIELDS] + ["mean_iou"]
    lines = [",".join(header)]
    for row in rows:
        cells = [str(row.pair.source_class), str(row.pair.target_class)]
        for name in MetricsRow.FRACTION_FIELDS:
            value = getattr(row, name)
            cells.append(f"{value.fraction:.6f}" if value is not None else "")
        cells.append(f"{row.mean_iou:.6f}" if row.mean_iou is not None else "")
        lines.append(",".join(cells))
    return lines


def write_sweep_csv(path: str | Path, rows: list[SweepRow]) -> None:
    lines = ["block_size_px,asr,source_acc"]
    lines += [f"{r.block_size_px},{r.asr:.6f},{r.source_acc:.6f}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


class RunManifest:
    """Per-run provenance: config hash, stage timestamps, artifact paths."""

    def __init__(self, run_dir: str | Path, config_hash: str, seed: int, workers: int):
        self.path = Path(run_dir) / "manifest.json"
        if self.path.exists():
            with open(self.path) as fh:
                self.data = json.load(fh)
            if self.data.get("config_hash") != config_hash:
                raise ValueError(f"run dir {run_dir} was created with a different config "
                                 f"(hash {self.data.get('config_hash')[:12]} != {config_hash[:12]})")
        else:
            self.data = {"config_hash": config_hash, "seed": seed, "workers": workers,
                         "toolkit_version": __version__, "stages": {}}

    def record_stage(self, stage: str, artifacts: list[str]) -> None:
        self.data["stages"][stage] = {
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "artifacts": sorted(artifacts),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)

    def all_artifacts(self) -> list[str]:
        out = []
        for stage in self.data["stages"].values():
            out.extend(stage["artifacts"])
        return out


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def _to_rgb_u8(image: np.ndarray) -> np.ndarray:
    raw = quantize_u8(image)
    if raw.shape[0] == 1:
        raw = np.repeat(raw, 3, axis=0)
    return raw.transpose(1, 2, 0)


def save_defense_grid(path: str | Path, rows: list[dict]) -> None:
    """Qualitative grid: one row per image with columns original, patched,
    heatmap, blocked. Each row dict holds those four arrays."""
    tiles = []
    for row in rows:
        heat = np.repeat(np.floor(row["heatmap"].values[None] * 255 + 0.5), 3,
                         axis=0).astype(np.uint8).transpose(1, 2, 0)
        cells = [_to_rgb_u8(row["original"]), _to_rgb_u8(row["patched"]), heat,
                 _to_rgb_u8(row["blocked"])]
        sep = np.full((cells[0].shape[0], 2, 3), 255, dtype=np.uint8)
        strip = []
        for i, cell in enumerate(cells):
            if i:
                strip.append(sep)
            strip.append(cell)
        tiles.append(np.concatenate(strip, axis=1))
    hsep = np.full((2, tiles[0].shape[1], 3), 255, dtype=np.uint8)
    grid = []
    for i, tile in enumerate(tiles):
        if i:
            grid.append(hsep)
        grid.append(tile)
    Image.fromarray(np.concatenate(grid, axis=0)).save(Path(path), format="PNG")


def save_sweep_plot(path: str | Path, rows: list[SweepRow],
                    undefended_asr: float | None = None) -> None:
    sizes = [r.block_size_px for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(sizes, [r.asr for r in rows], "o-", label="defended ASR")
    ax.plot(sizes, [r.source_acc for r in rows], "s-", label="defended source acc")
    if undefended_asr is not None:
        ax.axhline(undefended_asr, color="gray", linestyle="--", label="undefended ASR")
    ax.set_xlabel("block size (px)")
    ax.set_ylabel("fraction")
    ax.set_xticks(sizes)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
