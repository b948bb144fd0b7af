"""Ranking metrics, class activation maps, and box localization scoring.

auroc/roc_curve are rank-based (ties get half credit) so they agree with
the pairwise ordering definition to floating-point precision; the CAM path
turns head weights and a feature map into a heatmap, a thresholded
connected component, and finally a bounding box scored by IoU.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.stats import rankdata

from cxrmask.ops import DISEASES

log = logging.getLogger(__name__)


def auroc(scores, labels) -> float | None:
    """Probability that a random positive outranks a random negative.

    Computed from average ranks, which equals the pairwise count with ties
    worth 0.5. Returns None when either class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class ROCPoint:
    threshold: float
    sensitivity: float
    specificity: float

    @property
    def youden_j(self) -> float:
        return self.sensitivity + self.specificity - 1.0


def roc_curve(scores, labels) -> list[ROCPoint]:
    """One operating point per distinct score (predict positive at
    score >= threshold) plus the all-negative endpoint at threshold +inf.

    Raises ValueError on single-class input, mirroring auroc's undefined
    marker; callers should check auroc first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_curve needs at least one positive and one negative")
    points = [ROCPoint(math.inf, 0.0, 1.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        called = scores >= t
        tp = int((called & (labels == 1)).sum())
        tn = int((~called & (labels == 0)).sum())
        points.append(ROCPoint(float(t), tp / n_pos, tn / n_neg))
    return points


def roc_area(curve: list[ROCPoint]) -> float:
    """Trapezoidal area in (1 - specificity, sensitivity) space."""
    pts = sorted((1.0 - p.specificity, p.sensitivity) for p in curve)
    xs = [0.0] + [x for x, _ in pts] + [1.0]
    ys = [0.0] + [y for _, y in pts] + [1.0]
    area = 0.0
    for i in range(1, len(xs)):
        area += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2.0
    return area


def select_threshold(curve: list[ROCPoint]) -> float:
    """Operating threshold maximizing Youden's J; ties prefer specificity."""
    if not curve:
        raise ValueError("empty ROC curve")
    best = max(curve, key=lambda p: (p.youden_j, p.specificity, p.threshold))
    return best.threshold


def cam(feature, head_weights, class_index: int, normalize: bool = True) -> np.ndarray:
    """Class activation map: head-weighted sum over feature channels.

    feature is (c, h, w); head_weights is (num_classes, c). When normalize
    is on, the map is min-max scaled to [0, 1] (constant maps become zero).
    """
    feature = np.asarray(
        feature.detach().numpy() if isinstance(feature, torch.Tensor) else feature,
        dtype=np.float64,
    )
    weights = np.asarray(
        head_weights.detach().numpy() if isinstance(head_weights, torch.Tensor) else head_weights,
        dtype=np.float64,
    )
    if feature.ndim != 3 or weights.ndim != 2 or weights.shape[1] != feature.shape[0]:
        raise ValueError(
            f"need (c,h,w) feature and (k,c) weights, got {feature.shape} / {weights.shape}"
        )
    if not 0 <= class_index < weights.shape[0]:
        raise ValueError(f"class index {class_index} out of range")
    heat = np.tensordot(weights[class_index], feature, axes=1)
    if not normalize:
        return heat
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


@dataclass
class HeatBox:
    """Predicted box in the evaluation frame, with its peak activation."""

    x: float
    y: float
    w: float
    h: float
    peak: float
    disease: str | None = None

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def heatmap_to_box(
    heatmap: np.ndarray,
    threshold_fraction: float = 0.5,
    frame: int = 224,
    disease: str | None = None,
) -> HeatBox:
    """Bounding box of the largest activation region.

    The heatmap is bilinearly upsampled to frame x frame, thresholded at
    threshold_fraction * max, and the largest 4-connected component's tight
    box is returned. A degenerate threshold result falls back to the argmax
    pixel.
    """
    heat = torch.from_numpy(np.asarray(heatmap, dtype=np.float64))[None, None]
    up = F.interpolate(heat, size=(frame, frame), mode="bilinear", align_corners=False)
    up = up[0, 0].numpy()
    peak = float(up.max())
    above = up >= threshold_fraction * peak
    labeled, count = ndimage.label(above)  # default structure: 4-connectivity
    if count == 0:
        r, c = np.unravel_index(np.argmax(up), up.shape)
        return HeatBox(float(c), float(r), 1.0, 1.0, peak, disease)
    sizes = ndimage.sum_labels(np.ones_like(up), labeled, index=range(1, count + 1))
    biggest = int(np.argmax(sizes)) + 1
    rows, cols = np.where(labeled == biggest)
    x0, x1 = cols.min(), cols.max()
    y0, y1 = rows.min(), rows.max()
    return HeatBox(float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1), peak, disease)


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a.xywh if hasattr(a, "xywh") else a
    bx, by, bw, bh = b.xywh if hasattr(b, "xywh") else b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# report containers
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-disease AUROC, the mean over defined entries, and thresholds."""

    per_disease: dict[str, float | None]
    thresholds: dict[str, float]
    undefined: list[str] = field(default_factory=list)

    @property
    def mean_auroc(self) -> float | None:
        defined = [v for v in self.per_disease.values() if v is not None]
        return sum(defined) / len(defined) if defined else None

    def to_tsv(self) -> str:
        lines = ["disease\tauroc\tthreshold"]
        for name in DISEASES:
            score = self.per_disease.get(name)
            threshold = self.thresholds.get(name, math.nan)
            score_txt = f"{score:.6f}" if score is not None else "NA"
            threshold_txt = "NA" if math.isnan(threshold) else f"{threshold:.6f}"
            lines.append(f"{name}\t{score_txt}\t{threshold_txt}")
        mean = self.mean_auroc
        lines.append(f"Mean\t{mean:.6f}\t" if mean is not None else "Mean\tNA\t")
        if self.undefined:
            lines.append(f"# undefined AUROC excluded from mean: {len(self.undefined)} "
                         f"({', '.join(self.undefined)})")
        return "\n".join(lines) + "\n"


def compute_metric_report(probs: np.ndarray, labels: np.ndarray) -> MetricReport:
    """Score an (n, 14) probability matrix against (n, 14) binary labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2 or probs.shape[1] != len(DISEASES):
        raise ValueError(f"expected matching (n, {len(DISEASES)}) arrays")
    per_disease: dict[str, float | None] = {}
    thresholds: dict[str, float] = {}
    undefined = []
    for i, name in enumerate(DISEASES):
        score = auroc(probs[:, i], labels[:, i])
        per_disease[name] = score
        if score is None:
            undefined.append(name)
            thresholds[name] = math.nan
        else:
            thresholds[name] = select_threshold(roc_curve(probs[:, i], labels[:, i]))
    return MetricReport(per_disease, thresholds, undefined)


def roc_table(curve: list[ROCPoint]) -> str:
    lines = ["threshold\tsensitivity\tspecificity"]
    for p in curve:
        lines.append(f"{p.threshold:.6f}\t{p.sensitivity:.6f}\t{p.specificity:.6f}")
    return "\n".join(lines) + "\n"


@dataclass
class LocalizationItem:
    image_id: str
    disease: str
    iou: float
    predicted: HeatBox
    truth: tuple[float, float, float, float]


@dataclass
class LocalizationReport:
    items: list[LocalizationItem]
    skipped: int = 0

    def per_disease_mean(self) -> dict[str, float]:
        sums: dict[str, list[float]] = {}
        for item in self.items:
            sums.setdefault(item.disease, []).append(item.iou)
        return {d: sum(v) / len(v) for d, v in sums.items()}

    @property
    def mean_iou(self) -> float | None:
        if not self.items:
            return None
        return sum(i.iou for i in self.items) / len(self.items)

    def to_tsv(self, row_label: str = "model") -> str:
        from cxrmask.data import BOX_DISEASES

        means = self.per_disease_mean()
        header = "method\t" + "\t".join(BOX_DISEASES) + "\tmean"
        cells = [row_label]
        for name in BOX_DISEASES:
            cells.append(f"{means[name]:.4f}" if name in means else "NA")
        cells.append(f"{self.mean_iou:.4f}" if self.mean_iou is not None else "NA")
        return header + "\n" + "\t".join(cells) + "\n"


def render_box_mask(box, shape: tuple[int, int]) -> np.ndarray:
    """Rasterize an (x, y, w, h) box into a binary map of the given shape."""
    x, y, w, h = box.xywh if hasattr(box, "xywh") else box
    mask = np.zeros(shape)
    y0, y1 = int(round(y)), int(round(y + h))
    x0, x1 = int(round(x)), int(round(x + w))
    mask[max(y0, 0) : max(y1, 0), max(x0, 0) : max(x1, 0)] = 1.0
    return mask


def evaluate_localization(
    checkpoint,
    annotations,
    image_loader,
    mask_provider=None,
    cam_source: str = "local",
    threshold_fraction: float = 0.5,
) -> LocalizationReport:
    """Score CAM-predicted boxes against ground-truth annotations.

    For each annotation: load the image, run the classifier forward pass,
    build the CAM for the annotated disease from the local (mask-weighted)
    or global feature map, extract a box, and score IoU against the truth.
    image_loader(image_id) returns a preprocessed tensor or None (skipped);
    mask_provider(image, image_id) returns (mask, fallback_flag) or None.
    """
    from cxrmask.classifier import MaskWeightedClassifier  # noqa: F401  (type only)
    from cxrmask.ops import DISEASE_INDEX

    if cam_source not in ("local", "global"):
        raise ValueError(f"cam_source must be 'local' or 'global', got {cam_source!r}")
    model = checkpoint.model if hasattr(checkpoint, "model") else checkpoint
    frame = None
    items: list[LocalizationItem] = []
    skipped = 0
    head_weights = model.head.weight.detach().numpy()
    for ann in annotations:
        image = image_loader(ann.image_id)
        if image is None:
            skipped += 1
            continue
        frame = image.shape[-1]
        mask = None
        if mask_provider is not None:
            mask, _ = mask_provider(image, ann.image_id)
        with torch.no_grad():
            _, f_g, f_l = model(image, mask)
        feature = f_l if cam_source == "local" else f_g
        heat = cam(feature, head_weights, DISEASE_INDEX[ann.disease])
        predicted = heatmap_to_box(heat, threshold_fraction, frame=frame, disease=ann.disease)
        items.append(
            LocalizationItem(ann.image_id, ann.disease, iou(predicted, ann), predicted, ann.xywh)
        )
    if skipped:
        log.warning("localization skipped %d annotations with missing images", skipped)
    return LocalizationReport(items, skipped)
