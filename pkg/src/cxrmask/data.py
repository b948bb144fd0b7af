"""Dataset ingestion: label manifests, stratified splitting, image
preprocessing, and bounding-box annotations.

The loaders accept either the official benchmark files (header-carrying CSV
label table, plain-text id lists, box CSV) or simple delimited equivalents,
so desk-scale synthetic datasets flow through the identical code path.
"""

from __future__ import annotations

import csv
import math
import random
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from cxrmask.ops import DISEASE_INDEX, DISEASES, NUM_CLASSES

# The eight diseases that carry radiologist boxes; the remaining six have none.
BOX_DISEASES = DISEASES[:8]

# Official file quirk: the box CSV spells this disease differently.
_DISEASE_ALIASES = {"Infiltrate": "Infiltration"}

# Benchmark split statistics used by strict-mode validation.
BENCHMARK_TOTALS = {"train": 86524, "test": 25596, "box": 984}
BENCHMARK_DISEASE_COUNTS = {
    #                 train   test   box
    "Atelectasis": (8280, 3279, 180),
    "Cardiomegaly": (1707, 1069, 146),
    "Effusion": (8659, 4658, 153),
    "Infiltration": (13782, 6112, 123),
    "Mass": (4034, 1748, 85),
    "Nodule": (4708, 1623, 79),
    "Pneumonia": (876, 555, 120),
    "Pneumothorax": (2637, 2665, 98),
    "Consolidation": (2852, 1815, 0),
    "Edema": (1378, 925, 0),
    "Emphysema": (1423, 1093, 0),
    "Fibrosis": (1251, 435, 0),
    "Pleural Thickening": (2242, 1143, 0),
    "Hernia": (141, 86, 0),
}
BENCHMARK_FINDING_IMAGES = {"train": 36024, "test": 15735}
BENCHMARK_MULTILABEL_TOTALS = {"train": 53970, "test": 27206}

NO_FINDING = "No Finding"


class DataError(Exception):
    """Raised for unreadable, malformed, or inconsistent dataset inputs."""


def parse_label_field(text: str) -> np.ndarray:
    """Parse a pipe-delimited disease list into a 14-entry 0/1 vector."""
    vec = np.zeros(NUM_CLASSES, dtype=np.float64)
    text = text.strip()
    if not text or text == NO_FINDING:
        return vec
    for token in text.split("|"):
        token = token.strip()
        token = _DISEASE_ALIASES.get(token, token)
        if token == NO_FINDING:
            continue
        if token not in DISEASE_INDEX:
            raise DataError(f"unknown disease token {token!r}")
        vec[DISEASE_INDEX[token]] = 1.0
    return vec


def patient_id_from_image_id(image_id: str) -> str:
    """Default patient derivation: the image-id prefix before the first '_'."""
    stem = image_id.split(".")[0]
    return stem.split("_")[0]


@dataclass
class ManifestEntry:
    image_id: str
    patient_id: str
    labels: np.ndarray  # (14,) in {0,1}
    split: str  # train | val | test


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    image_dir: Path | None = None

    def entries_for(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def patients_for(self, split: str) -> set[str]:
        return {e.patient_id for e in self.entries if e.split == split}

    def disease_counts(self, split: str) -> dict[str, int]:
        counts = dict.fromkeys(DISEASES, 0)
        for e in self.entries:
            if e.split != split:
                continue
            for i, name in enumerate(DISEASES):
                if e.labels[i]:
                    counts[name] += 1
        return counts


def _read_label_table(label_file: Path) -> dict[str, tuple[str, str | None]]:
    """Map image id -> (raw label text, patient id or None).

    Accepts the official header-carrying CSV or a simple delimited file with
    columns image-id, labels[, patient-id].
    """
    table: dict[str, tuple[str, str | None]] = {}
    with open(label_file, newline="") as fh:
        sample = fh.readline()
        fh.seek(0)
        delim = "\t" if "\t" in sample else ","
        reader = csv.reader(fh, delimiter=delim)
        rows = iter(reader)
        header = None
        if "Image Index" in sample:
            header = next(rows)
            idx_img = header.index("Image Index")
            idx_lab = header.index("Finding Labels")
            idx_pat = header.index("Patient ID") if "Patient ID" in header else None
        else:
            idx_img, idx_lab, idx_pat = 0, 1, None
        for row in rows:
            if not row or not row[idx_img].strip():
                continue
            image_id = row[idx_img].strip()
            labels = row[idx_lab].strip()
            patient = None
            if idx_pat is not None and len(row) > idx_pat:
                patient = row[idx_pat].strip() or None
            elif header is None and len(row) > 2 and row[2].strip():
                patient = row[2].strip()
            table[image_id] = (labels, patient)
    return table


def _read_id_list(path: Path) -> list[str]:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def _strict_diff(manifest: DatasetManifest, box_count: int | None) -> list[str]:
    diffs = []
    got = {
        "train": len(manifest.entries_for("train")) + len(manifest.entries_for("val")),
        "test": len(manifest.entries_for("test")),
    }
    for split in ("train", "test"):
        if got[split] != BENCHMARK_TOTALS[split]:
            diffs.append(
                f"{split} total: expected {BENCHMARK_TOTALS[split]}, got {got[split]}"
            )
    if box_count is not None and box_count != BENCHMARK_TOTALS["box"]:
        diffs.append(f"box total: expected {BENCHMARK_TOTALS['box']}, got {box_count}")
    for split, col in (("train", 0), ("test", 1)):
        counts = manifest.disease_counts(split)
        if split == "train":
            val_counts = manifest.disease_counts("val")
            counts = {k: counts[k] + val_counts[k] for k in counts}
        for name, expected in BENCHMARK_DISEASE_COUNTS.items():
            if counts[name] != expected[col]:
                diffs.append(
                    f"{split} {name}: expected {expected[col]}, got {counts[name]}"
                )
    return diffs


def load_manifest(
    label_file: str | Path,
    train_list: str | Path,
    test_list: str | Path,
    image_dir: str | Path | None = None,
    strict: bool = False,
    box_count: int | None = None,
) -> DatasetManifest:
    """Assemble the manifest from a label table and train/test id lists.

    Raises DataError with a per-row report for unknown disease tokens, for
    ids missing from the label table, for patient overlap between splits,
    and (in strict mode) with a diff against the benchmark statistics.
    """
    for path in (label_file, train_list, test_list):
        if not Path(path).exists():
            raise DataError(f"missing input file: {path}")
    table = _read_label_table(Path(label_file))

    entries: list[ManifestEntry] = []
    row_errors: list[str] = []
    for split, list_path in (("train", train_list), ("test", test_list)):
        for image_id in _read_id_list(Path(list_path)):
            if image_id not in table:
                row_errors.append(f"{image_id}: not present in label file")
                continue
            raw, patient = table[image_id]
            try:
                labels = parse_label_field(raw)
            except DataError as err:
                row_errors.append(f"{image_id}: {err}")
                continue
            patient = patient or patient_id_from_image_id(image_id)
            entries.append(ManifestEntry(image_id, patient, labels, split))
    if row_errors:
        shown = "\n".join(row_errors[:20])
        raise DataError(
            f"{len(row_errors)} bad manifest rows, first {min(20, len(row_errors))}:\n{shown}"
        )

    manifest = DatasetManifest(entries, Path(image_dir) if image_dir else None)
    overlap = manifest.patients_for("train") & manifest.patients_for("test")
    if overlap:
        sample = ", ".join(sorted(overlap)[:5])
        raise DataError(f"{len(overlap)} patients straddle train/test (e.g. {sample})")

    if strict:
        diffs = _strict_diff(manifest, box_count)
        if diffs:
            raise DataError("strict count validation failed:\n" + "\n".join(diffs))
    return manifest


def make_val_split(
    manifest: DatasetManifest, fraction: float = 0.10, seed: int = 0
) -> DatasetManifest:
    """Carve a stratified validation set out of the train split.

    Per disease, at least ceil(fraction * count) train images move to val.
    Whole patients move together so val stays patient-disjoint from the
    remaining train set. Deterministic under the seed.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0,1), got {fraction}")
    train = manifest.entries_for("train")
    if not train:
        raise DataError("manifest has no train entries to split")
    rng = random.Random(seed)

    by_patient: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in train:
        by_patient[e.patient_id].append(e)

    counts = manifest.disease_counts("train")
    targets = {d: math.ceil(fraction * n) for d, n in counts.items() if n > 0}
    val_counts = dict.fromkeys(targets, 0)
    val_patients: set[str] = set()

    # rarest diseases first so their small quotas are not eaten by patients
    # dragged in for the common ones
    for disease in sorted(targets, key=lambda d: (counts[d], d)):
        idx = DISEASE_INDEX[disease]
        if val_counts[disease] >= targets[disease]:
            continue
        candidates = sorted(
            {e.patient_id for e in train if e.labels[idx] and e.patient_id not in val_patients}
        )
        rng.shuffle(candidates)
        for patient in candidates:
            if val_counts[disease] >= targets[disease]:
                break
            val_patients.add(patient)
            for e in by_patient[patient]:
                for d, i in DISEASE_INDEX.items():
                    if e.labels[i] and d in val_counts:
                        val_counts[d] += 1

    new_entries = []
    for e in manifest.entries:
        split = e.split
        if split == "train" and e.patient_id in val_patients:
            split = "val"
        new_entries.append(ManifestEntry(e.image_id, e.patient_id, e.labels.copy(), split))
    return DatasetManifest(new_entries, manifest.image_dir)


# ---------------------------------------------------------------------------
# image preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    """Geometry and normalization of the shared image pipeline.

    Defaults: resize to 256, center crop to 224, normalize with the
    pretrained backbone's canonical channel statistics.
    """

    resize_to: int = 256
    crop_to: int = 224
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.crop_to > self.resize_to:
            raise ValueError("crop_to cannot exceed resize_to")

    @property
    def crop_offset(self) -> int:
        return (self.resize_to - self.crop_to) // 2


def _load_image_unit_range(src) -> np.ndarray:
    """Read an image as float64 in [0,1], shape (H,W) or (H,W,3).

    8-bit data is scaled by 255; wider integer or float data by its actual
    maximum value.
    """
    if isinstance(src, (str, Path)):
        try:
            with Image.open(src) as img:
                img.load()
                return _pil_to_unit(img)
        except DataError:
            raise
        except Exception as err:
            raise DataError(f"unreadable image {src}: {err}") from err
    if isinstance(src, Image.Image):
        return _pil_to_unit(src)
    raw = np.asarray(src)
    if raw.ndim not in (2, 3):
        raise DataError(f"expected 2-d or 3-d image array, got shape {raw.shape}")
    arr = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        arr = arr / 255.0
    elif np.issubdtype(raw.dtype, np.integer):
        peak = arr.max()
        arr = arr / peak if peak > 0 else arr
    elif arr.max() > 1.0:
        arr = arr / arr.max()
    return arr


def _pil_to_unit(img: Image.Image) -> np.ndarray:
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        arr = np.asarray(img, dtype=np.float64)
        peak = arr.max()
        return arr / peak if peak > 0 else arr
    if img.mode != "RGB":
        img = img.convert("RGB") if img.mode not in ("L",) else img
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def preprocess(src, cfg: PreprocessConfig = PreprocessConfig()) -> torch.Tensor:
    """Standard pipeline: resize (bilinear) -> center crop -> 3-channel ->
    per-channel normalize. Returns a float32 tensor of shape (3, crop, crop).
    """
    arr = _load_image_unit_range(src)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    else:
        arr = arr.transpose(2, 0, 1)[:3]
        if arr.shape[0] == 1:
            arr = np.repeat(arr, 3, axis=0)
    tensor = torch.from_numpy(np.ascontiguousarray(arr)).float()[None]
    tensor = F.interpolate(
        tensor, size=(cfg.resize_to, cfg.resize_to), mode="bilinear",
        align_corners=False,
    )[0]
    off = cfg.crop_offset
    tensor = tensor[:, off : off + cfg.crop_to, off : off + cfg.crop_to]
    mean = torch.tensor(cfg.mean).view(3, 1, 1)
    std = torch.tensor(cfg.std).view(3, 1, 1)
    return (tensor - mean) / std


def denormalize(tensor: torch.Tensor, cfg: PreprocessConfig) -> np.ndarray:
    """Invert the normalization for visualization; returns (H,W,3) in [0,1]."""
    mean = torch.tensor(cfg.mean).view(3, 1, 1)
    std = torch.tensor(cfg.std).view(3, 1, 1)
    out = (tensor * std + mean).clamp(0.0, 1.0)
    return out.permute(1, 2, 0).numpy()


def transform_mask_image(src, cfg: PreprocessConfig, foreground_threshold: float = 128.0) -> np.ndarray:
    """Run an annotation image through the shared geometric pipeline.

    The mask is resized and cropped exactly like the image, then thresholded
    (8-bit annotations use foreground >= 128). Returns a (crop, crop) 0/1 map.
    """
    if isinstance(src, (str, Path)):
        try:
            with Image.open(src) as img:
                arr = np.asarray(img, dtype=np.float64)
        except Exception as err:
            raise DataError(f"unreadable mask {src}: {err}") from err
    else:
        arr = np.asarray(src, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0]
    binary = (arr >= foreground_threshold).astype(np.float64)
    tensor = torch.from_numpy(binary).float()[None, None]
    tensor = F.interpolate(
        tensor, size=(cfg.resize_to, cfg.resize_to), mode="bilinear",
        align_corners=False,
    )[0, 0]
    off = cfg.crop_offset
    tensor = tensor[off : off + cfg.crop_to, off : off + cfg.crop_to]
    return (tensor.numpy() >= 0.5).astype(np.float64)


# ---------------------------------------------------------------------------
# bounding boxes
# ---------------------------------------------------------------------------

@dataclass
class BoxAnnotation:
    """A radiologist box mapped into the cropped frame.

    x, y, w, h are float pixel coordinates in the (crop_to x crop_to) frame;
    `clipped` marks boxes that fell partly outside after the transform.
    """

    image_id: str
    disease: str
    x: float
    y: float
    w: float
    h: float
    clipped: bool = False

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def transform_box(
    x: float, y: float, w: float, h: float,
    original_size: tuple[int, int], cfg: PreprocessConfig,
) -> tuple[float, float, float, float, bool]:
    """Map original-frame box coords through resize + center crop.

    Returns (x, y, w, h, clipped) in the crop frame. Degenerate results
    (zero area after clipping) raise DataError.
    """
    orig_h, orig_w = original_size
    sx = cfg.resize_to / orig_w
    sy = cfg.resize_to / orig_h
    off = cfg.crop_offset
    x0, x1 = x * sx - off, (x + w) * sx - off
    y0, y1 = y * sy - off, (y + h) * sy - off
    cx0, cx1 = min(max(x0, 0.0), cfg.crop_to), min(max(x1, 0.0), cfg.crop_to)
    cy0, cy1 = min(max(y0, 0.0), cfg.crop_to), min(max(y1, 0.0), cfg.crop_to)
    clipped = (cx0, cx1, cy0, cy1) != (x0, x1, y0, y1)
    if cx1 - cx0 <= 0 or cy1 - cy0 <= 0:
        raise DataError(f"box ({x},{y},{w},{h}) lies outside the cropped frame")
    return cx0, cy0, cx1 - cx0, cy1 - cy0, clipped


def load_boxes(
    box_file: str | Path,
    cfg: PreprocessConfig = PreprocessConfig(),
    original_size: tuple[int, int] = (1024, 1024),
) -> list[BoxAnnotation]:
    """Load box annotations and rescale them into the cropped frame.

    Accepts the official box CSV (header-carrying, original-resolution
    coordinates) or a simple 6-column delimited file: image id, disease,
    x, y, w, h.
    """
    path = Path(box_file)
    if not path.exists():
        raise DataError(f"missing box file: {path}")
    annotations: list[BoxAnnotation] = []
    row_errors: list[str] = []
    with open(path, newline="") as fh:
        sample = fh.readline()
        fh.seek(0)
        delim = "\t" if "\t" in sample else ","
        reader = csv.reader(fh, delimiter=delim)
        rows = iter(reader)
        if "Image Index" in sample:
            next(rows)
        for lineno, row in enumerate(rows, start=1):
            cells = [c.strip() for c in row if c.strip() != ""]
            if not cells:
                continue
            if len(cells) < 6:
                row_errors.append(f"line {lineno}: expected 6 fields, got {len(cells)}")
                continue
            image_id, disease = cells[0], _DISEASE_ALIASES.get(cells[1], cells[1])
            if disease not in BOX_DISEASES:
                row_errors.append(f"line {lineno}: disease {disease!r} has no boxes")
                continue
            try:
                x, y, w, h = (float(c) for c in cells[2:6])
                if w <= 0 or h <= 0:
                    raise ValueError("non-positive box size")
                tx, ty, tw, th, clipped = transform_box(x, y, w, h, original_size, cfg)
            except (ValueError, DataError) as err:
                row_errors.append(f"line {lineno}: {err}")
                continue
            annotations.append(BoxAnnotation(image_id, disease, tx, ty, tw, th, clipped))
    if row_errors:
        shown = "\n".join(row_errors[:20])
        raise DataError(f"{len(row_errors)} bad box rows:\n{shown}")
    return annotations
