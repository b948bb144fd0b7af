"""Loss formulas and mask primitives shared by training and evaluation.

Every function is pure and accepts either numpy arrays or torch tensors.
With torch inputs the autograd graph is preserved, so the same code backs
the reference tests and the trainers. Numpy inputs return plain floats /
arrays in double precision.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

NUM_CLASSES = 14

# Canonical disease order; label vectors index into this tuple.
DISEASES = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural Thickening",
    "Hernia",
)

DISEASE_INDEX = {name: i for i, name in enumerate(DISEASES)}

BCE_EPS = 1e-7  # probability clamp before the logs; keeps the loss finite
DICE_SMOOTH = 1.0  # added to numerator and denominator; empty-vs-empty -> 1.0


def _use_torch(*arrays) -> bool:
    return any(isinstance(a, torch.Tensor) for a in arrays)


def _pair(a, b, name_a: str, name_b: str):
    """Coerce two inputs to a common backend and check matching shapes."""
    if _use_torch(a, b):
        a = torch.as_tensor(a)
        b = torch.as_tensor(b)
        if not a.is_floating_point():
            a = a.double()
        if not b.is_floating_point():
            b = b.double()
    else:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(
            f"{name_a} shape {tuple(a.shape)} != {name_b} shape {tuple(b.shape)}"
        )
    return a, b


def _check_binary(mask, name: str) -> None:
    xp = torch if isinstance(mask, torch.Tensor) else np
    ok = xp.all((mask == 0) | (mask == 1))
    if not bool(ok):
        raise ValueError(f"{name} must contain only 0/1 entries")


def bce_loss(truth, pred):
    """Mean per-class binary cross-entropy between labels and probabilities.

    Predictions are clamped into [BCE_EPS, 1 - BCE_EPS] before the logs, so
    the result is always finite and >= 0.
    """
    truth, pred = _pair(truth, pred, "truth", "pred")
    if isinstance(pred, torch.Tensor):
        p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
        return -torch.mean(truth * torch.log(p) + (1.0 - truth) * torch.log(1.0 - p))
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(truth * np.log(p) + (1.0 - truth) * np.log1p(-p)))


def dice_coefficient(gt, prob, smooth: float = DICE_SMOOTH):
    """Overlap score 2|A n B| / (|A| + |B|) between two binary masks.

    `smooth` is added to numerator and denominator so that two empty masks
    score 1.0 instead of 0/0. Pass smooth=0.0 for the unsmoothed ratio
    (undefined when both masks are empty). Symmetric in its arguments.
    """
    gt, prob = _pair(gt, prob, "gt", "prob")
    _check_binary(gt, "gt")
    _check_binary(prob, "prob")
    if isinstance(gt, torch.Tensor):
        inter = torch.sum(gt * prob)
        total = torch.sum(gt) + torch.sum(prob)
        return (2.0 * inter + smooth) / (total + smooth)
    inter = float(np.sum(gt * prob))
    total = float(np.sum(gt) + np.sum(prob))
    return (2.0 * inter + smooth) / (total + smooth)


def dice_loss(gt, prob, smooth: float = DICE_SMOOTH):
    """Soft dice loss 1 - 2|A*B| / (|A| + |B|), differentiable in `prob`.

    The intersection is the element-wise product sum, so `prob` (and `gt`)
    may hold probabilities in [0, 1] during training.
    """
    gt, prob = _pair(gt, prob, "gt", "prob")
    if isinstance(gt, torch.Tensor):
        inter = torch.sum(gt * prob)
        total = torch.sum(gt) + torch.sum(prob)
        return 1.0 - (2.0 * inter + smooth) / (total + smooth)
    inter = float(np.sum(gt * prob))
    total = float(np.sum(gt) + np.sum(prob))
    return 1.0 - (2.0 * inter + smooth) / (total + smooth)


def feature_weight(global_map, mask):
    """Gate a (..., c, h, w) feature map by a binary (h, w) mask.

    Off-mask positions become exactly zero across all channels; on-mask
    positions pass through bit-identical (multiplication by 1.0 is exact
    for finite values). A (batch, h, w) mask pairs element-wise with a
    (batch, c, h, w) map.
    """
    if _use_torch(global_map, mask):
        global_map = torch.as_tensor(global_map)
        mask = torch.as_tensor(mask, dtype=global_map.dtype, device=global_map.device)
    else:
        global_map = np.asarray(global_map)
        mask = np.asarray(mask, dtype=global_map.dtype)
    spatial_ok = (
        global_map.ndim >= 2 and tuple(global_map.shape[-2:]) == tuple(mask.shape[-2:])
    )
    if mask.ndim == 2 and spatial_ok:
        return global_map * mask
    if (
        mask.ndim == 3
        and global_map.ndim == 4
        and spatial_ok
        and mask.shape[0] == global_map.shape[0]
    ):
        return global_map * mask[:, None]
    raise ValueError(
        f"mask shape {tuple(mask.shape)} does not pair with feature shape "
        f"{tuple(global_map.shape)}"
    )


def merge_masks(parts):
    """Element-wise logical OR of a non-empty list of binary masks."""
    if len(parts) == 0:
        raise ValueError("merge_masks needs at least one mask")
    use_torch = _use_torch(*parts)
    out = None
    for i, part in enumerate(parts):
        if use_torch:
            part = torch.as_tensor(part)
            if not part.is_floating_point():
                part = part.double()
        else:
            part = np.asarray(part, dtype=np.float64)
        if out is not None and part.shape != out.shape:
            raise ValueError(
                f"mask {i} shape {tuple(part.shape)} != mask 0 shape {tuple(out.shape)}"
            )
        _check_binary(part, f"mask {i}")
        if out is None:
            out = part.clone() if use_torch else part.copy()
        else:
            out = torch.maximum(out, part) if use_torch else np.maximum(out, part)
    return out


def _adaptive_avg_pool(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Numpy adaptive average pooling with the standard window convention:

    output cell (i, j) averages rows [floor(i*H/h), ceil((i+1)*H/h)) and the
    analogous column range, matching torch's adaptive_avg_pool2d.
    """
    src_h, src_w = mask.shape
    out_h, out_w = target
    out = np.empty((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        r0 = (i * src_h) // out_h
        r1 = -(-((i + 1) * src_h) // out_h)  # ceil division
        for j in range(out_w):
            c0 = (j * src_w) // out_w
            c1 = -(-((j + 1) * src_w) // out_w)
            out[i, j] = mask[r0:r1, c0:c1].mean()
    return out


def downsample_mask(mask, target: tuple[int, int], soft: bool = False):
    """Shrink a binary mask to `target` (h, w) by adaptive average pooling.

    Pooled fractions are re-binarized at 0.5 (>= convention) so the mask
    stays a hard gate downstream; pass soft=True to keep the fractional
    pooled values instead. Accepts an optional leading batch dimension.
    """
    out_h, out_w = target
    if isinstance(mask, torch.Tensor):
        _check_binary(mask, "mask")
        if mask.shape[-2] < out_h or mask.shape[-1] < out_w:
            raise ValueError(f"target {target} larger than mask {tuple(mask.shape[-2:])}")
        squeeze = mask.dim() == 2
        batched = mask[None] if squeeze else mask
        if not batched.is_floating_point():
            batched = batched.double()
        pooled = F.adaptive_avg_pool2d(batched[:, None], (out_h, out_w))[:, 0]
        if not soft:
            pooled = (pooled >= 0.5).to(pooled.dtype)
        return pooled[0] if squeeze else pooled
    mask = np.asarray(mask, dtype=np.float64)
    _check_binary(mask, "mask")
    if mask.shape[-2] < out_h or mask.shape[-1] < out_w:
        raise ValueError(f"target {target} larger than mask {tuple(mask.shape[-2:])}")
    squeeze = mask.ndim == 2
    batched = mask[None] if squeeze else mask
    pooled = np.stack([_adaptive_avg_pool(m, (out_h, out_w)) for m in batched])
    if not soft:
        pooled = (pooled >= 0.5).astype(np.float64)
    return pooled[0] if squeeze else pooled


def binarize(prob_map, threshold: float):
    """Threshold a probability map to {0, 1}; entries >= threshold become 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(prob_map, torch.Tensor):
        dtype = prob_map.dtype if prob_map.is_floating_point() else torch.float64
        return (prob_map >= threshold).to(dtype)
    prob_map = np.asarray(prob_map)
    dtype = prob_map.dtype if np.issubdtype(prob_map.dtype, np.floating) else np.float64
    return (prob_map >= threshold).astype(dtype)
