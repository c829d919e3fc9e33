"""Class-specific interpretation heatmaps: gradient-weighted attention
rollout for the ViT, Grad-CAM and a simplified full-gradient method for
the CNN. Every map is HxW, non-negative, normalized to max 1 (an all-zero
map is allowed only when every raw value was <= 0)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import UnsupportedCombination, check_image
from .models import CnnClassifier, ForwardTrace, VitClassifier, forward

ROLLOUT_GRAD = "rollout-grad"
ROLLOUT_PLAIN = "rollout"
GRAD_CAM = "grad-cam"
FULL_GRAD = "full-grad-simplified"

VIT_METHODS = (ROLLOUT_PLAIN, ROLLOUT_GRAD)
CNN_METHODS = (GRAD_CAM, FULL_GRAD)


@dataclass(frozen=True)
class Heatmap:
    """Per-pixel non-negative importance map at image resolution."""

    values: np.ndarray
    class_index: int | None
    method_tag: str

    def argmax_rc(self) -> tuple[int, int]:
        """Row/col of the maximum; ties break at the smallest flat index."""
        flat = int(np.argmax(self.values))
        h, w = self.values.shape
        return flat // w, flat % w


def _finalize(raw: np.ndarray, class_index, method_tag: str) -> Heatmap:
    values = np.maximum(raw.astype(np.float64), 0.0)
    peak = values.max()
    if peak > 0:
        values = values / peak
    return Heatmap(values=values.astype(np.float32), class_index=class_index,
                   method_tag=method_tag)


def rollout_matrices(layer_mats: list[np.ndarray]) -> np.ndarray:
    """Chain per-layer token-mixing matrices into one attribution matrix.

    Each matrix gets the residual treatment (M + I) / 2, is row-normalized,
    and multiplies the running product from the left (deeper layers last).
    """
    t = layer_mats[0].shape[0]
    eye = np.eye(t)
    result = eye
    for mat in layer_mats:
        a = (np.asarray(mat, dtype=np.float64) + eye) / 2.0
        a = a / a.sum(axis=-1, keepdims=True)
        result = a @ result
    return result


def _cls_row_to_grid(rollout: np.ndarray, model: VitClassifier) -> np.ndarray:
    gh, gw = model.grid_hw
    row = rollout[0, 1:]
    grid = row.reshape(gh, gw)
    ph = model.image_hw[0] // gh
    pw = model.image_hw[1] // gw
    return np.kron(grid, np.ones((ph, pw)))


def _require(model, family, method: str):
    if not isinstance(model, family):
        raise UnsupportedCombination(
            f"{method} requires a {family.__name__}, got {type(model).__name__}")


def _attention_gradients(model: VitClassifier, trace: ForwardTrace,
                         class_index: int) -> tuple[torch.Tensor, ...]:
    """d(class logit)/d(attention weights) per layer. Kept as a module
    function so tests can substitute constant gradients."""
    score = trace.logits[0, class_index]
    return torch.autograd.grad(score, trace.attentions, retain_graph=False,
                               allow_unused=False)


def attention_rollout(model: VitClassifier, image: np.ndarray) -> Heatmap:
    """Class-agnostic rollout: head-averaged attention chained across layers,
    class-token row reshaped to the patch grid and upsampled."""
    _require(model, VitClassifier, "attention rollout")
    check_image(image)
    _, trace = forward(model, image, record=True)
    mats = [attn.detach()[0].mean(dim=0).numpy() for attn in trace.attentions]
    grid = _cls_row_to_grid(rollout_matrices(mats), model)
    return _finalize(grid, None, ROLLOUT_PLAIN)


def grad_rollout(model: VitClassifier, image: np.ndarray, class_index: int) -> Heatmap:
    """Class-specific rollout: attention weighted by the class-score
    gradient (negatives clamped) before head-averaging and chaining."""
    _require(model, VitClassifier, "gradient rollout")
    check_image(image)
    if not 0 <= class_index < model.class_count:
        raise ValueError(f"class_index {class_index} outside [0, {model.class_count})")
    _, trace = forward(model, image, record=True)
    return _grad_rollout_from_trace(model, trace, class_index)


def _grad_rollout_from_trace(model: VitClassifier, trace: ForwardTrace,
                             class_index: int) -> Heatmap:
    grads = _attention_gradients(model, trace, class_index)
    mats = []
    for attn, grad in zip(trace.attentions, grads):
        weighted = (attn.detach() * grad.detach()).clamp(min=0.0)
        mats.append(weighted[0].mean(dim=0).numpy())
    grid = _cls_row_to_grid(rollout_matrices(mats), model)
    return _finalize(grid, class_index, ROLLOUT_GRAD)


def grad_cam(model: CnnClassifier, image: np.ndarray, class_index: int) -> Heatmap:
    """Channel-gradient weighted sum of the last conv map, ReLU'd and
    bilinearly upsampled."""
    _require(model, CnnClassifier, "Grad-CAM")
    check_image(image)
    if not 0 <= class_index < model.class_count:
        raise ValueError(f"class_index {class_index} outside [0, {model.class_count})")
    _, trace = forward(model, image, record=True)
    return _grad_cam_from_trace(model, trace, class_index)


def _grad_cam_from_trace(model: CnnClassifier, trace: ForwardTrace,
                         class_index: int) -> Heatmap:
    score = trace.logits[0, class_index]
    grad = torch.autograd.grad(score, trace.last_map, retain_graph=False)[0]
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * trace.last_map.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=model.image_hw, mode="bilinear", align_corners=False)
    return _finalize(cam[0, 0].numpy(), class_index, GRAD_CAM)


def full_gradient_simplified(model: CnnClassifier, image: np.ndarray,
                             class_index: int) -> Heatmap:
    """Input-gradient x input plus per-layer bias-gradient aggregation.

    A deliberately simplified form of full-gradient attribution: the exact
    method's gradient completeness is not needed for block localization.
    """
    _require(model, CnnClassifier, "full-gradient")
    check_image(image)
    if not 0 <= class_index < model.class_count:
        raise ValueError(f"class_index {class_index} outside [0, {model.class_count})")
    _, trace = forward(model, image, record=True)
    return _full_grad_from_trace(model, trace, class_index)


def _full_grad_from_trace(model: CnnClassifier, trace: ForwardTrace,
                          class_index: int) -> Heatmap:
    score = trace.logits[0, class_index]
    tensors = [trace.input] + list(trace.pre_activations)
    grads = torch.autograd.grad(score, tensors, retain_graph=False)
    total = (grads[0][0] * trace.input.detach()[0]).abs().sum(dim=0)
    for conv, pre, grad in zip(model.convs, trace.pre_activations, grads[1:]):
        if conv.bias is None:
            continue
        term = (grad[0] * conv.bias.detach().view(-1, 1, 1)).abs().sum(dim=0)
        term = F.interpolate(term[None, None], size=model.image_hw, mode="bilinear",
                             align_corners=False)[0, 0]
        total = total + term
    return _finalize(total.numpy(), class_index, FULL_GRAD)


def compatible_methods(model) -> tuple[str, ...]:
    return VIT_METHODS if isinstance(model, VitClassifier) else CNN_METHODS


def predict_and_explain(model, image: np.ndarray, method: str):
    """One recorded forward pass serving both the prediction and the
    heatmap for the predicted class. Returns (logits, Heatmap)."""
    if method in VIT_METHODS:
        _require(model, VitClassifier, method)
    elif method in CNN_METHODS:
        _require(model, CnnClassifier, method)
    else:
        raise UnsupportedCombination(f"unknown interpretation method {method!r}")
    logits, trace = forward(model, image, record=True)
    predicted = int(np.argmax(logits))
    if method == ROLLOUT_PLAIN:
        mats = [attn.detach()[0].mean(dim=0).numpy() for attn in trace.attentions]
        heatmap = _finalize(_cls_row_to_grid(rollout_matrices(mats), model),
                            None, ROLLOUT_PLAIN)
    elif method == ROLLOUT_GRAD:
        heatmap = _grad_rollout_from_trace(model, trace, predicted)
    elif method == GRAD_CAM:
        heatmap = _grad_cam_from_trace(model, trace, predicted)
    else:
        heatmap = _full_grad_from_trace(model, trace, predicted)
    return logits, heatmap


def explain_batch(model, images: np.ndarray, method: str,
                  class_indices: list[int] | None = None):
    """Batched predict-and-explain: one recorded forward plus one gradient
    pass for a whole stack of images. Per-image results match the
    single-image path because the summed score decouples across the batch.

    Returns (logits array (B, classes), list of Heatmaps).
    """
    if method in VIT_METHODS:
        _require(model, VitClassifier, method)
    elif method in CNN_METHODS:
        _require(model, CnnClassifier, method)
    else:
        raise UnsupportedCombination(f"unknown interpretation method {method!r}")
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).requires_grad_(True)
    logits_t, trace = model(x, record=True)
    logits = logits_t.detach().numpy()
    b = x.shape[0]
    if class_indices is None:
        class_indices = [int(i) for i in logits.argmax(axis=1)]
    idx = torch.arange(b)
    cls = torch.tensor(class_indices, dtype=torch.long)
    heatmaps: list[Heatmap] = []

    if method == ROLLOUT_PLAIN:
        for i in range(b):
            mats = [attn.detach()[i].mean(dim=0).numpy() for attn in trace.attentions]
            heatmaps.append(_finalize(_cls_row_to_grid(rollout_matrices(mats), model),
                                      None, ROLLOUT_PLAIN))
        return logits, heatmaps

    score = logits_t[idx, cls].sum()
    if method == ROLLOUT_GRAD:
        grads = torch.autograd.grad(score, trace.attentions)
        for i in range(b):
            mats = [(attn.detach()[i] * grad[i]).clamp(min=0.0).mean(dim=0).numpy()
                    for attn, grad in zip(trace.attentions, grads)]
            heatmaps.append(_finalize(_cls_row_to_grid(rollout_matrices(mats), model),
                                      class_indices[i], ROLLOUT_GRAD))
    elif method == GRAD_CAM:
        grad = torch.autograd.grad(score, trace.last_map)[0]
        weights = grad.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * trace.last_map.detach()).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=model.image_hw, mode="bilinear", align_corners=False)
        for i in range(b):
            heatmaps.append(_finalize(cam[i, 0].numpy(), class_indices[i], GRAD_CAM))
    else:
        tensors = [trace.input] + list(trace.pre_activations)
        grads = torch.autograd.grad(score, tensors)
        base = (grads[0] * trace.input.detach()).abs().sum(dim=1)
        total = base.clone()
        for conv, pre, grad in zip(model.convs, trace.pre_activations, grads[1:]):
            if conv.bias is None:
                continue
            term = (grad * conv.bias.detach().view(1, -1, 1, 1)).abs().sum(dim=1, keepdim=True)
            term = F.interpolate(term, size=model.image_hw, mode="bilinear",
                                 align_corners=False)
            total = total + term[:, 0]
        for i in range(b):
            heatmaps.append(_finalize(total[i].numpy(), class_indices[i], FULL_GRAD))
    return logits, heatmaps
