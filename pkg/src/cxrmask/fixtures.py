"""Synthetic desk-scale datasets.

Three generators back the test and demo pipelines without any external
data: an ellipse segmentation set (three anatomy-like structures per
image), a blob multi-label classification set with known anatomy masks and
ground-truth boxes, and benchmark-shaped label/split/box files whose counts
match the official statistics exactly.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from cxrmask import ops
from cxrmask.data import (
    BENCHMARK_DISEASE_COUNTS,
    BENCHMARK_FINDING_IMAGES,
    BENCHMARK_TOTALS,
    NO_FINDING,
    PreprocessConfig,
    preprocess,
)
from cxrmask.ops import DISEASES
from cxrmask.segmentation import STRUCTURES, SegSample

# Classes exercised by the blob fixture (first three of the label order).
FIXTURE_CLASSES = ("Atelectasis", "Cardiomegaly", "Effusion")


def desk_preprocess_config(size: int = 64) -> PreprocessConfig:
    """Identity-geometry pipeline for fixture-sized images."""
    return PreprocessConfig(resize_to=size, crop_to=size)


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0).astype(np.float64)


def make_ellipse_arrays(n: int = 32, size: int = 64, seed: int = 0):
    """Raw (image, masks) pairs: image in [0,1] (H,W), masks (3,H,W) binary."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        jit = lambda lo, hi: rng.uniform(lo, hi) * size
        left = _ellipse(size, jit(0.40, 0.50), jit(0.28, 0.36), jit(0.16, 0.24), jit(0.10, 0.14))
        right = _ellipse(size, jit(0.40, 0.50), jit(0.64, 0.72), jit(0.16, 0.24), jit(0.10, 0.14))
        heart = _ellipse(size, jit(0.60, 0.68), jit(0.48, 0.56), jit(0.10, 0.15), jit(0.12, 0.17))
        # distinct intensities per structure; purely positional cues would
        # force the net to break translation symmetry from padding alone
        image = 0.08 + 0.22 * left + 0.38 * right + 0.54 * heart
        image = np.clip(image + rng.normal(0.0, 0.02, size=(size, size)), 0.0, 1.0)
        out.append((image, np.stack([left, right, heart])))
    return out


def make_ellipse_seg_samples(
    n: int = 32, size: int = 64, seed: int = 0,
    cfg: PreprocessConfig | None = None,
) -> list[SegSample]:
    """In-memory segmentation fixture, already preprocessed."""
    cfg = cfg or desk_preprocess_config(size)
    samples = []
    for i, (image, masks) in enumerate(make_ellipse_arrays(n, size, seed)):
        samples.append(
            SegSample(
                image_id=f"ellipse_{i:03d}.png",
                image=preprocess(image, cfg),
                masks=torch.from_numpy(masks).float(),
            )
        )
    return samples


def write_ellipse_seg_dataset(out_dir: str | Path, n: int = 32, size: int = 64, seed: int = 0) -> Path:
    """Write the ellipse fixture as PNGs in the on-disk segmentation layout."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for structure in STRUCTURES:
        (out_dir / "masks" / structure).mkdir(parents=True, exist_ok=True)
    for i, (image, masks) in enumerate(make_ellipse_arrays(n, size, seed)):
        name = f"ellipse_{i:03d}.png"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(out_dir / "images" / name)
        for s, structure in enumerate(STRUCTURES):
            Image.fromarray((masks[s] * 255).astype(np.uint8)).save(
                out_dir / "masks" / structure / name
            )
    return out_dir


# ---------------------------------------------------------------------------
# blob classification fixture
# ---------------------------------------------------------------------------

@dataclass
class BlobSample:
    image_id: str
    patient_id: str
    image: np.ndarray  # (H, W) raw intensities in [0, 1]
    labels: np.ndarray  # (14,) in {0, 1}
    mask: np.ndarray  # (H, W) anatomy-style mask in {0, 1}
    boxes: list[tuple[str, float, float, float, float]] = field(default_factory=list)


def _anatomy_mask(size: int) -> np.ndarray:
    """Fixed central region; zeroes well over 30% of pooled feature cells."""
    mask = np.zeros((size, size))
    lo, hi = round(size * 0.15), round(size * 0.85)
    mask[lo:hi, lo:hi] = 1.0
    return mask


def make_blob_cls_samples(
    n: int = 32, size: int = 64, seed: int = 0, id_prefix: str = "1",
) -> list[BlobSample]:
    """Multi-label blob images with known masks and boxes.

    Three patterns, one per fixture class: a filled square (left field), a
    filled disc (right field), and a horizontal bar (lower field); all lie
    inside the anatomy mask. Label subsets cycle through all 8 combinations
    so every class is balanced and "no finding" images occur.
    """
    rng = np.random.default_rng(seed)
    mask = _anatomy_mask(size)
    subsets = [(i >> 2 & 1, i >> 1 & 1, i & 1) for i in range(8)]
    samples = []
    for i in range(n):
        present = subsets[i % len(subsets)]
        image = rng.uniform(0.05, 0.15, size=(size, size))
        labels = np.zeros(len(DISEASES))
        boxes: list[tuple[str, float, float, float, float]] = []

        if present[0]:  # square
            side = round(size * 0.19)
            top = int(rng.integers(round(size * 0.2), round(size * 0.5)))
            left = int(rng.integers(round(size * 0.17), round(size * 0.30)))
            image[top : top + side, left : left + side] += 0.7
            boxes.append((FIXTURE_CLASSES[0], left, top, side, side))
        if present[1]:  # disc
            r = round(size * 0.11)
            cy = int(rng.integers(round(size * 0.3), round(size * 0.55)))
            cx = int(rng.integers(round(size * 0.58), round(size * 0.72)))
            image += 0.6 * _ellipse(size, cy, cx, r, r)
            boxes.append((FIXTURE_CLASSES[1], cx - r, cy - r, 2 * r + 1, 2 * r + 1))
        if present[2]:  # bar
            rows = round(size * 0.08)
            top = int(rng.integers(round(size * 0.68), round(size * 0.76)))
            left, width = round(size * 0.2), round(size * 0.55)
            image[top : top + rows, left : left + width] += 0.5
            boxes.append((FIXTURE_CLASSES[2], left, top, width, rows))

        for disease, *_ in boxes:
            labels[DISEASES.index(disease)] = 1.0
        patient = f"{id_prefix}{i:07d}"
        samples.append(
            BlobSample(
                image_id=f"{patient}_000.png",
                patient_id=patient,
                image=np.clip(image, 0.0, 1.0),
                labels=labels,
                mask=mask.copy(),
                boxes=boxes,
            )
        )
    return samples


def write_blob_cls_dataset(
    out_dir: str | Path,
    n_train: int = 32,
    n_test: int = 8,
    size: int = 64,
    seed: int = 0,
) -> dict[str, Path]:
    """Write the blob fixture: images, masks, label table, split lists, boxes."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "anatomy_masks").mkdir(parents=True, exist_ok=True)

    train = make_blob_cls_samples(n_train, size, seed, id_prefix="1")
    test = make_blob_cls_samples(n_test, size, seed + 1, id_prefix="2")

    label_rows = []
    box_rows = []
    for sample in train + test:
        Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(
            out_dir / "images" / sample.image_id
        )
        Image.fromarray((sample.mask * 255).astype(np.uint8)).save(
            out_dir / "anatomy_masks" / sample.image_id
        )
        names = [DISEASES[i] for i in range(len(DISEASES)) if sample.labels[i]]
        label_rows.append((sample.image_id, "|".join(names) if names else NO_FINDING))
        for disease, x, y, w, h in sample.boxes:
            box_rows.append((sample.image_id, disease, x, y, w, h))

    paths = {
        "labels": out_dir / "labels.tsv",
        "train_list": out_dir / "train_list.txt",
        "test_list": out_dir / "test_list.txt",
        "boxes": out_dir / "boxes.tsv",
        "image_dir": out_dir / "images",
        "mask_dir": out_dir / "anatomy_masks",
    }
    with open(paths["labels"], "w") as fh:
        for image_id, labels in label_rows:
            fh.write(f"{image_id}\t{labels}\n")
    with open(paths["train_list"], "w") as fh:
        fh.writelines(s.image_id + "\n" for s in train)
    with open(paths["test_list"], "w") as fh:
        fh.writelines(s.image_id + "\n" for s in test)
    with open(paths["boxes"], "w") as fh:
        for row in box_rows:
            fh.write("\t".join(str(c) for c in row) + "\n")
    return paths


# ---------------------------------------------------------------------------
# benchmark-shaped label/split/box files (counts only, no images)
# ---------------------------------------------------------------------------

def _assign_finding_labels(n_finding: int, column: int) -> list[list[str]]:
    """Deal per-disease label slots across finding images.

    Disease d contributes count_d consecutive slots; slot k lands on image
    k mod n_finding. No disease count exceeds n_finding, so no image sees
    the same disease twice, and every image receives at least one label.
    """
    labels: list[list[str]] = [[] for _ in range(n_finding)]
    k = 0
    for name in DISEASES:
        for _ in range(BENCHMARK_DISEASE_COUNTS[name][column]):
            labels[k % n_finding].append(name)
            k += 1
    return labels


def write_benchmark_shaped_files(out_dir: str | Path, seed: int = 0) -> dict[str, Path]:
    """Emit synthetic official-format files reproducing the benchmark counts.

    The label CSV, split lists, and box CSV carry exactly the published
    per-split totals and per-disease counts, with disjoint patient ids
    between train and test. Image files are not generated.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)

    rows: dict[str, list[tuple[str, str, str]]] = {}
    for split, column, prefix in (("train", 0, "1"), ("test", 1, "2")):
        n_total = BENCHMARK_TOTALS[split]
        n_finding = BENCHMARK_FINDING_IMAGES[split]
        finding_labels = _assign_finding_labels(n_finding, column)
        split_rows = []
        for i in range(n_total):
            patient = f"{prefix}{i:07d}"
            image_id = f"{patient}_000.png"
            if i < n_finding:
                text = "|".join(finding_labels[i])
            else:
                text = NO_FINDING
            split_rows.append((image_id, text, patient))
        rows[split] = split_rows

    paths = {
        "labels": out_dir / "labels.csv",
        "train_list": out_dir / "train_list.txt",
        "test_list": out_dir / "test_list.txt",
        "boxes": out_dir / "boxes.csv",
    }
    with open(paths["labels"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Image Index", "Finding Labels", "Patient ID"])
        for split in ("train", "test"):
            writer.writerows(rows[split])
    for split, key in (("train", "train_list"), ("test", "test_list")):
        with open(paths[key], "w") as fh:
            fh.writelines(r[0] + "\n" for r in rows[split])

    # box annotations drawn from test images that actually carry the disease
    by_disease: dict[str, list[str]] = {d: [] for d in DISEASES}
    for image_id, text, _ in rows["test"]:
        if text != NO_FINDING:
            for name in text.split("|"):
                by_disease[name].append(image_id)
    with open(paths["boxes"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Image Index", "Finding Label", "Bbox [x", "y", "w", "h]"])
        for name in DISEASES:
            n_boxes = BENCHMARK_DISEASE_COUNTS[name][2]
            for image_id in rng.sample(by_disease[name], n_boxes):
                x = rng.uniform(50, 500)
                y = rng.uniform(50, 500)
                w = rng.uniform(60, 400)
                h = rng.uniform(60, 400)
                writer.writerow([image_id, name, f"{x:.3f}", f"{y:.3f}", f"{w:.3f}", f"{h:.3f}"])
    return paths


def blob_samples_to_cls_inputs(samples: list[BlobSample], cfg: PreprocessConfig):
    """Preprocess blob samples into (image tensor, label tensor, mask) triples."""
    out = []
    for s in samples:
        out.append(
            (
                s.image_id,
                preprocess(s.image, cfg),
                torch.from_numpy(s.labels).float(),
                s.mask.copy(),
            )
        )
    return out


def feature_zero_fraction(mask: np.ndarray, feature_hw: tuple[int, int]) -> float:
    """Fraction of pooled feature positions the mask zeroes out."""
    pooled = ops.downsample_mask(mask, feature_hw)
    return float((pooled == 0).mean())
