"""Trainable classifiers: a tiny ViT exposing per-layer attention and a
small CNN exposing its last conv map, plus the frozen-backbone linear
fine-tuning protocol used by all poisoning experiments."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TrainingFailure, check_image, derive_seed, make_rng


@dataclass
class TrainConfig:
    """Training schedule; defaults match the linear fine-tune stage.

    optimizer 'sgd' is the transfer-protocol setting. 'adamw' is offered
    for the from-scratch clean-model stage, where plain SGD on a small
    ViT either crawls or diverges.
    """

    epochs: int = 10
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    freeze_backbone: bool = False
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")


@dataclass
class ForwardTrace:
    """Graph-attached intermediates captured by forward(record=True).

    For a ViT: attentions[l] has shape (head_count, T, T). For a CNN:
    last_map is the post-ReLU final conv map and pre_activations holds
    every conv output before its ReLU (for bias-gradient attribution).
    """

    logits: torch.Tensor | None = None
    input: torch.Tensor | None = None
    attentions: list[torch.Tensor] = field(default_factory=list)
    last_map: torch.Tensor | None = None
    pre_activations: list[torch.Tensor] = field(default_factory=list)


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, head_count: int):
        super().__init__()
        if dim % head_count != 0:
            raise ValueError(f"embed_dim {dim} not divisible by head_count {head_count}")
        self.head_count = head_count
        self.scale = (dim // head_count) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.head_count, d // self.head_count)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn


class _Block(nn.Module):
    def __init__(self, dim: int, head_count: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, head_count)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VitClassifier(nn.Module):
    """Pre-norm ViT; forward returns (logits, trace) so attention recording
    needs no hooks and no mutable model state."""

    arch = "vit"

    def __init__(self, image_hw=(32, 32), patch_size=4, embed_dim=128, depth=6,
                 head_count=4, class_count=10, channels=3, mlp_ratio=2.0, seed=0):
        super().__init__()
        h, w = image_hw
        if h % patch_size or w % patch_size:
            raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
        torch.manual_seed(derive_seed(seed, "init", "vit"))
        self.image_hw = tuple(image_hw)
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.head_count = head_count
        self.class_count = class_count
        self.channels = channels
        self.mlp_ratio = mlp_ratio
        self.grid_hw = (h // patch_size, w // patch_size)
        self.token_count = self.grid_hw[0] * self.grid_hw[1] + 1

        self.patch_embed = nn.Conv2d(channels, embed_dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.token_count, embed_dim))
        self.blocks = nn.ModuleList(_Block(embed_dim, head_count, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, class_count)

        self.apply(_init_weights)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.forward_calls = 0

    def describe(self) -> dict:
        return {"arch": "vit", "image_hw": list(self.image_hw), "patch_size": self.patch_size,
                "embed_dim": self.embed_dim, "depth": self.depth, "head_count": self.head_count,
                "class_count": self.class_count, "channels": self.channels,
                "mlp_ratio": self.mlp_ratio}

    def _embed(self, x):
        b = x.shape[0]
        tokens = self.patch_embed(2.0 * x - 1.0).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(b, -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward(self, x, record: bool = False):
        if x.shape[-2:] != torch.Size(self.image_hw) or x.shape[1] != self.channels:
            raise ValueError(f"input shape {tuple(x.shape)} incompatible with model "
                             f"{self.channels}x{self.image_hw}")
        self.forward_calls += 1
        trace = ForwardTrace(input=x) if record else None
        x = self._embed(x)
        for block in self.blocks:
            x, attn = block(x)
            if record:
                trace.attentions.append(attn)
        x = self.norm(x)
        logits = self.head(x[:, 0])
        if record:
            trace.logits = logits
        return logits, trace

    def features_torch(self, x):
        """Class-token embedding after the final norm (input to the head)."""
        x = self._embed(x)
        for block in self.blocks:
            x, _ = block(x)
        return self.norm(x)[:, 0]

    @property
    def feature_dim(self) -> int:
        return self.embed_dim


class CnnClassifier(nn.Module):
    """Plain conv/ReLU trunk + global average pool + linear head. No norm
    layers, so freezing the backbone freezes every statistic too."""

    arch = "cnn"

    def __init__(self, image_hw=(32, 32), conv_channels=(32, 64, 128, 128),
                 conv_strides=(1, 2, 2, 1), kernel_size=3, class_count=10,
                 channels=3, use_bias=True, seed=0):
        super().__init__()
        if len(conv_channels) != len(conv_strides):
            raise ValueError("conv_channels and conv_strides must have equal length")
        torch.manual_seed(derive_seed(seed, "init", "cnn"))
        self.image_hw = tuple(image_hw)
        self.conv_channels = tuple(conv_channels)
        self.conv_strides = tuple(conv_strides)
        self.kernel_size = kernel_size
        self.class_count = class_count
        self.channels = channels
        self.use_bias = use_bias

        convs = []
        c_in = channels
        for c_out, stride in zip(conv_channels, conv_strides):
            convs.append(nn.Conv2d(c_in, c_out, kernel_size, stride=stride,
                                   padding=kernel_size // 2, bias=use_bias))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(c_in, class_count)
        self.forward_calls = 0

    def describe(self) -> dict:
        return {"arch": "cnn", "image_hw": list(self.image_hw),
                "conv_channels": list(self.conv_channels),
                "conv_strides": list(self.conv_strides), "kernel_size": self.kernel_size,
                "class_count": self.class_count, "channels": self.channels,
                "use_bias": self.use_bias}

    def forward(self, x, record: bool = False):
        if x.shape[-2:] != torch.Size(self.image_hw) or x.shape[1] != self.channels:
            raise ValueError(f"input shape {tuple(x.shape)} incompatible with model "
                             f"{self.channels}x{self.image_hw}")
        self.forward_calls += 1
        trace = ForwardTrace(input=x) if record else None
        x = 2.0 * x - 1.0
        for conv in self.convs:
            pre = conv(x)
            if record:
                trace.pre_activations.append(pre)
            x = F.relu(pre)
        if record:
            trace.last_map = x
        pooled = x.mean(dim=(2, 3))
        logits = self.head(pooled)
        if record:
            trace.logits = logits
        return logits, trace

    def features_torch(self, x):
        """Penultimate pooled vector (input to the head)."""
        x = 2.0 * x - 1.0
        for conv in self.convs:
            x = F.relu(conv(x))
        return x.mean(dim=(2, 3))

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(arch: str, class_count: int, image_hw=(32, 32), channels=3, seed=0, **dims):
    if arch == "vit":
        return VitClassifier(image_hw=image_hw, class_count=class_count, channels=channels,
                             seed=seed, **dims)
    if arch == "cnn":
        return CnnClassifier(image_hw=image_hw, class_count=class_count, channels=channels,
                             seed=seed, **dims)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------

def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(C,H,W) numpy image -> (1,C,H,W) float32 tensor."""
    check_image(image)
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).unsqueeze(0)


def forward(model, image: np.ndarray, record: bool = False):
    """Single-image forward pass; returns (logits vector, trace or None).

    With record=True the returned trace keeps the autograd graph alive
    (the input participates with requires_grad), so callers can take
    gradients of any logit w.r.t. attention maps, conv maps or the input.
    """
    x = to_tensor(image)
    if record:
        model.eval()
        x = x.requires_grad_(True)
        logits, trace = model(x, record=True)
        return logits.detach().numpy()[0], trace
    model.eval()
    with torch.no_grad():
        logits, _ = model(x)
    return logits.numpy()[0], None


def predict_label(model, image: np.ndarray) -> int:
    logits, _ = forward(model, image)
    return int(np.argmax(logits))


def predict_labels(model, images: list[np.ndarray], batch_size: int = 64) -> list[int]:
    """Batched argmax predictions (counts as one forward call per batch)."""
    model.eval()
    out: list[int] = []
    with torch.no_grad():
        for lo in range(0, len(images), batch_size):
            chunk = images[lo:lo + batch_size]
            x = torch.from_numpy(np.stack(chunk).astype(np.float32))
            logits, _ = model(x)
            out.extend(int(i) for i in logits.argmax(dim=1))
    return out


@dataclass
class FeatureExtractor:
    """Read-only view of a classifier as an image -> feature-vector map."""

    model: VitClassifier | CnnClassifier

    def features(self, image: np.ndarray) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            return self.model.features_torch(to_tensor(image)).numpy()[0]

    def features_torch(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable batched features; x is (B,C,H,W)."""
        self.model.eval()
        return self.model.features_torch(x)

    @property
    def dim(self) -> int:
        return self.model.feature_dim


@dataclass
class TrainResult:
    model: nn.Module
    loss_curve: list[float]


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[lo:lo + batch_size] for lo in range(0, n, batch_size)]


def _sgd_loop(model, data, cfg: TrainConfig, params, batch_fn=None) -> list[float]:
    params_list = list(params)
    if cfg.optimizer == "adamw":
        opt = torch.optim.AdamW(params_list, lr=cfg.learning_rate, weight_decay=0.0)
    else:
        opt = torch.optim.SGD(params_list, lr=cfg.learning_rate, momentum=cfg.momentum)
    order_rng = make_rng(derive_seed(cfg.seed, "batch-order"))
    labels_all = data.labels()
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in _epoch_batches(len(data), cfg.batch_size, order_rng):
            imgs = [data.items[i][0] for i in batch]
            if batch_fn is not None:
                imgs = batch_fn(imgs)
            x = torch.from_numpy(np.stack(imgs).astype(np.float32))
            y = torch.tensor([labels_all[i] for i in batch], dtype=torch.long)
            logits, _ = model(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_([p for p in params_list if p.requires_grad], 1.0)
            opt.step()
            losses.append(float(loss.item()))
        epoch_loss = float(np.mean(losses))
        curve.append(epoch_loss)
        if not math.isfinite(epoch_loss):
            raise TrainingFailure(f"non-finite loss at epoch {epoch}", curve)
    return curve


def train_full(model, data, cfg: TrainConfig) -> TrainResult:
    """Train every parameter from scratch; the clean-model stage."""
    if cfg.freeze_backbone:
        raise ValueError("train_full requires freeze_backbone=False")
    model.train()
    curve = _sgd_loop(model, data, cfg, model.parameters())
    model.eval()
    return TrainResult(model=model, loss_curve=curve)


def finetune_linear(model, data, cfg: TrainConfig, transform_factory=None,
                    reinit_head: bool = True) -> TrainResult:
    """Transfer protocol: learn the final linear head on (possibly
    poisoned) data, backbone bit-frozen. Returns a new model; the input
    model is untouched.

    reinit_head=True matches the transfer-learning threat model: the
    victim trains a fresh final layer on downloaded data.
    transform_factory, if given, is called with the model under training
    and must return a per-batch image transform (used by training-time
    blocking).
    """
    if not cfg.freeze_backbone:
        raise ValueError("finetune_linear requires freeze_backbone=True")
    tuned = copy.deepcopy(model)
    tuned.eval()
    if reinit_head:
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "head-init"))
        weight = torch.empty_like(tuned.head.weight)
        nn.init.trunc_normal_(weight, std=0.02, generator=gen)
        with torch.no_grad():
            tuned.head.weight.copy_(weight)
            tuned.head.bias.zero_()
    for name, p in tuned.named_parameters():
        p.requires_grad_(name.startswith("head."))
    batch_fn = transform_factory(tuned) if transform_factory is not None else None
    curve = _sgd_loop(tuned, data, cfg, tuned.head.parameters(), batch_fn=batch_fn)
    for p in tuned.parameters():
        p.requires_grad_(True)
    return TrainResult(model=tuned, loss_curve=curve)


def param_fingerprint(model, include_head: bool = True) -> str:
    """sha256 over parameter names and bytes; the checkpoint identity."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if not include_head and name.startswith("head."):
            continue
        h.update(name.encode())
        h.update(tensor.detach().contiguous().numpy().tobytes())
    return h.hexdigest()
