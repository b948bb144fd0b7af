"""Pixel-wise segmenter for the left lung, right lung, and heart.

A small U-Net with independent sigmoid outputs per structure is trained
with the soft dice loss summed over structures; the checkpoint keeps the
weights from the epoch with the lowest validation loss. The merged binary
mask it produces is what gates the classifier's feature map.
"""

from __future__ import annotations

import copy
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from cxrmask import ops
from cxrmask.data import DataError, PreprocessConfig, preprocess, transform_mask_image

log = logging.getLogger(__name__)

STRUCTURES = ("left_lung", "right_lung", "heart")


@dataclass
class SegConfig:
    levels: int = 4
    base_width: int = 32
    in_channels: int = 3
    lr: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 60
    batch_size: int = 8
    val_fraction: float = 0.25
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_width < 1:
            raise ValueError("levels and base_width must be positive")


@dataclass
class SegSample:
    image_id: str
    image: torch.Tensor  # (3, H, W), preprocessed
    masks: torch.Tensor  # (len(STRUCTURES), H, W), entries in {0, 1}


def _norm(ch: int) -> nn.Module:
    # group norm keeps train/eval behavior identical at desk-scale batch sizes
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        _norm(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        _norm(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder/decoder with skip connections and one sigmoid map per structure."""

    def __init__(self, in_channels: int = 3, out_channels: int = len(STRUCTURES),
                 levels: int = 4, base_width: int = 32):
        super().__init__()
        self.levels = levels
        widths = [base_width * (2 ** i) for i in range(levels)]
        self.encoders = nn.ModuleList()
        ch = in_channels
        for w in widths:
            self.encoders.append(_double_conv(ch, w))
            ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[-1], widths[-1] * 2)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        ch = widths[-1] * 2
        for w in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose2d(ch, w, 2, stride=2))
            self.decoders.append(_double_conv(2 * w, w))
            ch = w
        self.head = nn.Conv2d(ch, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        divisor = 2 ** self.levels
        if x.shape[-1] % divisor or x.shape[-2] % divisor:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} must be divisible by {divisor}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x))


@dataclass
class SegCheckpoint:
    model: UNet
    config: SegConfig
    seed: int
    best_val_dice: dict[str, float]
    history: list[dict] = field(default_factory=list)
    created: str = ""


def save_seg_checkpoint(ckpt: SegCheckpoint, path: str | Path) -> None:
    torch.save(
        {
            "kind": "segmentation",
            "state_dict": ckpt.model.state_dict(),
            "config": asdict(ckpt.config),
            "seed": ckpt.seed,
            "best_val_dice": ckpt.best_val_dice,
            "history": ckpt.history,
            "created": ckpt.created or time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
        path,
    )


def load_seg_checkpoint(path: str | Path) -> SegCheckpoint:
    if not Path(path).exists():
        raise DataError(f"missing segmentation checkpoint: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "segmentation":
        raise DataError(f"{path} is not a segmentation checkpoint")
    config = SegConfig(**blob["config"])
    model = UNet(config.in_channels, len(STRUCTURES), config.levels, config.base_width)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return SegCheckpoint(
        model=model,
        config=config,
        seed=blob["seed"],
        best_val_dice=blob["best_val_dice"],
        history=blob["history"],
        created=blob.get("created", ""),
    )


def _validate_dataset(dataset: list[SegSample]) -> None:
    if len(dataset) == 0:
        raise DataError("segmentation dataset is empty")
    shape = None
    for sample in dataset:
        if sample.image.dim() != 3 or sample.masks.dim() != 3:
            raise DataError(f"{sample.image_id}: expected (C,H,W) image and masks")
        if sample.image.shape[-2:] != sample.masks.shape[-2:]:
            raise DataError(
                f"{sample.image_id}: image {tuple(sample.image.shape)} and masks "
                f"{tuple(sample.masks.shape)} disagree on spatial dims"
            )
        if sample.masks.shape[0] != len(STRUCTURES):
            raise DataError(f"{sample.image_id}: expected {len(STRUCTURES)} masks")
        if shape is None:
            shape = sample.image.shape
        elif sample.image.shape != shape:
            raise DataError("all segmentation samples must share one resolution")


def _batch_dice_loss(probs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    total = probs.new_zeros(())
    for s in range(len(STRUCTURES)):
        total = total + ops.dice_loss(masks[:, s], probs[:, s])
    return total


def train_segmenter(dataset: list[SegSample], config: SegConfig) -> SegCheckpoint:
    """Fit the U-Net on (image, 3-mask) samples.

    The dataset is split train/validation by `config.val_fraction` (a single
    sample validates against itself); the returned checkpoint carries the
    weights of the epoch with minimum validation loss plus the full
    per-epoch history.
    """
    _validate_dataset(dataset)
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)

    indices = list(range(len(dataset)))
    rng.shuffle(indices)
    n_val = int(round(config.val_fraction * len(dataset)))
    if len(dataset) >= 2:
        n_val = min(max(n_val, 1), len(dataset) - 1)
        val_idx, train_idx = indices[:n_val], indices[n_val:]
    else:
        val_idx, train_idx = indices, indices

    model = UNet(config.in_channels, len(STRUCTURES), config.levels, config.base_width)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )

    val_images = torch.stack([dataset[i].image for i in val_idx])
    val_masks = torch.stack([dataset[i].masks for i in val_idx])

    best_loss = float("inf")
    best_state = None
    best_dice: dict[str, float] = {}
    history: list[dict] = []

    for epoch in range(config.epochs):
        model.train()
        order = train_idx[:]
        random.Random(config.seed * 100003 + epoch).shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            images = torch.stack([dataset[i].image for i in batch])
            masks = torch.stack([dataset[i].masks for i in batch])
            optimizer.zero_grad()
            probs = model(images)
            loss = _batch_dice_loss(probs, masks)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1

        model.eval()
        with torch.no_grad():
            val_probs = model(val_images)
            val_loss = float(_batch_dice_loss(val_probs, val_masks))
            dice = {}
            for s, name in enumerate(STRUCTURES):
                binary = ops.binarize(val_probs[:, s], config.threshold)
                dice[name] = float(ops.dice_coefficient(val_masks[:, s], binary))
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_loss": val_loss,
        }
        row.update({f"dice_{k}": v for k, v in dice.items()})
        history.append(row)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(model.state_dict())
            best_dice = dice
        log.debug("seg epoch %d train %.4f val %.4f", epoch, row["train_loss"], val_loss)

    model.load_state_dict(best_state)
    model.eval()
    return SegCheckpoint(
        model=model,
        config=config,
        seed=config.seed,
        best_val_dice=best_dice,
        history=history,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


def segment(ckpt: SegCheckpoint | UNet, image: torch.Tensor) -> torch.Tensor:
    """Probability maps for the three structures, shape (3, H, W) in [0,1]."""
    model = ckpt.model if isinstance(ckpt, SegCheckpoint) else ckpt
    if image.dim() != 3:
        raise ValueError(f"expected (3,H,W) image, got {tuple(image.shape)}")
    model.eval()
    with torch.no_grad():
        return model(image[None])[0]


def generate_mask(
    ckpt: SegCheckpoint | UNet, image: torch.Tensor, threshold: float = 0.5
) -> tuple[np.ndarray, bool]:
    """Merged binary lung+heart mask at image resolution.

    Each structure's probability map is binarized and the three are OR-ed.
    An all-zero result is replaced by an all-ones mask (and flagged) so the
    downstream feature gate can never wipe out the whole feature map.
    """
    probs = segment(ckpt, image).numpy()
    parts = [ops.binarize(probs[s], threshold) for s in range(len(STRUCTURES))]
    merged = ops.merge_masks(parts)
    if merged.sum() == 0:
        log.warning("segmentation produced an empty mask; falling back to all-ones")
        return np.ones_like(merged), True
    return merged, False


def load_seg_directory(
    root: str | Path, cfg: PreprocessConfig = PreprocessConfig()
) -> list[SegSample]:
    """Read an on-disk segmentation dataset.

    Layout: <root>/images/*.png plus <root>/masks/<structure>/<same name>
    for each of left_lung, right_lung, heart. Annotation pixels >= 128 are
    foreground. Images and masks run through the shared geometric pipeline.
    """
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DataError(f"missing image directory: {image_dir}")
    samples = []
    for image_path in sorted(image_dir.iterdir()):
        if image_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
            continue
        masks = []
        for structure in STRUCTURES:
            mask_path = root / "masks" / structure / image_path.name
            if not mask_path.exists():
                raise DataError(f"missing {structure} mask for {image_path.name}")
            masks.append(transform_mask_image(mask_path, cfg))
        samples.append(
            SegSample(
                image_id=image_path.name,
                image=preprocess(image_path, cfg),
                masks=torch.from_numpy(np.stack(masks)).float(),
            )
        )
    if not samples:
        raise DataError(f"no images found under {image_dir}")
    return samples
