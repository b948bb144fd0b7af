"""End-to-end multi-label classifier: attention gate, backbone, mask-weighted
feature map, channel-wise average pooling, and a linear sigmoid head.

The anatomy mask enters at image resolution, is pooled down to the feature
grid, and multiplies the backbone's final feature map; only what survives
the gate reaches the head.
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

from cxrmask import evaluation, ops
from cxrmask.attention import AttentionConfig, MultiScaleAttention
from cxrmask.backbones import build_backbone
from cxrmask.data import DataError, PreprocessConfig, preprocess
from cxrmask.ops import NUM_CLASSES

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    backbone: str = "densenet121"
    pretrained: bool = True
    image_size: int = 224
    batch_size: int = 512
    lr: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 50
    seed: int = 0
    mask_soft: bool = False
    use_attention: bool = True
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if isinstance(self.attention, dict):
            att = dict(self.attention)
            if "scale_kernels" in att:
                att["scale_kernels"] = tuple(att["scale_kernels"])
            self.attention = AttentionConfig(**att)


class MaskWeightedClassifier(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.attention = MultiScaleAttention(config.attention) if config.use_attention else None
        self.backbone = build_backbone(config.backbone, config.pretrained)
        self.head = nn.Linear(self.backbone.out_channels, NUM_CLASSES)

    def extract_global_map(self, image: torch.Tensor) -> torch.Tensor:
        """Attention-gated image through the backbone; (B, c, h, w)."""
        if image.shape[-1] != self.config.image_size or image.shape[-2] != self.config.image_size:
            raise ValueError(
                f"expected {self.config.image_size}x{self.config.image_size} input, "
                f"got {tuple(image.shape[-2:])}"
            )
        if self.attention is not None:
            image, _ = self.attention(image)
        return self.backbone(image)

    def classify_features(self, f_l: torch.Tensor) -> torch.Tensor:
        """Channel-wise average pooling then the sigmoid linear head."""
        pooled = f_l.mean(dim=(-2, -1))
        return torch.sigmoid(self.head(pooled))

    def forward(self, image: torch.Tensor, mask=None):
        """(probs, global feature map, mask-weighted feature map).

        `mask` is a binary map at image resolution, (H, W) or (B, H, W), or
        None to skip weighting (the no-mask ablation path).
        """
        squeeze = image.dim() == 3
        x = image[None] if squeeze else image
        f_g = self.extract_global_map(x)
        if mask is None:
            f_l = f_g
        else:
            mask_t = torch.as_tensor(
                np.asarray(mask), dtype=x.dtype, device=x.device
            )
            if mask_t.dim() == 2:
                mask_t = mask_t[None].expand(x.shape[0], -1, -1)
            if mask_t.shape[-2:] != x.shape[-2:]:
                raise ValueError(
                    f"mask resolution {tuple(mask_t.shape[-2:])} does not match "
                    f"image resolution {tuple(x.shape[-2:])}"
                )
            m_feat = ops.downsample_mask(
                mask_t, tuple(f_g.shape[-2:]), soft=self.config.mask_soft
            )
            f_l = ops.feature_weight(f_g, m_feat)
        probs = self.classify_features(f_l)
        if squeeze:
            return probs[0], f_g[0], f_l[0]
        return probs, f_g, f_l


@dataclass
class ClsSample:
    image_id: str
    image: torch.Tensor  # (3, H, W), preprocessed
    label: torch.Tensor  # (14,) in {0, 1}
    mask: np.ndarray | None = None  # (H, W) binary at image resolution


@dataclass
class ClassifierCheckpoint:
    model: MaskWeightedClassifier
    config: ClassifierConfig
    seed: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auroc: float | None = None
    extra: dict = field(default_factory=dict)
    created: str = ""


def save_classifier_checkpoint(ckpt: ClassifierCheckpoint, path: str | Path) -> None:
    config = asdict(ckpt.config)
    torch.save(
        {
            "kind": "classifier",
            "state_dict": ckpt.model.state_dict(),
            "config": config,
            "seed": ckpt.seed,
            "history": ckpt.history,
            "best_epoch": ckpt.best_epoch,
            "best_val_auroc": ckpt.best_val_auroc,
            "extra": ckpt.extra,
            "created": ckpt.created or time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
        path,
    )


def load_classifier_checkpoint(path: str | Path) -> ClassifierCheckpoint:
    if not Path(path).exists():
        raise DataError(f"missing classifier checkpoint: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "classifier":
        raise DataError(f"{path} is not a classifier checkpoint")
    config_dict = dict(blob["config"])
    config_dict["pretrained"] = False  # weights come from the checkpoint itself
    config = ClassifierConfig(**config_dict)
    model = MaskWeightedClassifier(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return ClassifierCheckpoint(
        model=model,
        config=config,
        seed=blob["seed"],
        history=blob["history"],
        best_epoch=blob["best_epoch"],
        best_val_auroc=blob["best_val_auroc"],
        extra=blob.get("extra", {}),
        created=blob.get("created", ""),
    )


def _stack_batch(samples: list[ClsSample], indices: list[int]):
    images = torch.stack([samples[i].image for i in indices])
    labels = torch.stack([samples[i].label for i in indices])
    masks = [samples[i].mask for i in indices]
    if all(m is None for m in masks):
        return images, labels, None
    if any(m is None for m in masks):
        raise DataError("mix of masked and mask-less samples in one dataset")
    return images, labels, torch.from_numpy(np.stack(masks)).float()


def _validation_metrics(model, val: list[ClsSample], batch_size: int):
    model.eval()
    probs = []
    labels = []
    with torch.no_grad():
        for start in range(0, len(val), batch_size):
            idx = list(range(start, min(start + batch_size, len(val))))
            images, batch_labels, masks = _stack_batch(val, idx)
            batch_probs, _, _ = model(images, masks)
            probs.append(batch_probs)
            labels.append(batch_labels)
    probs = torch.cat(probs).numpy()
    labels = torch.cat(labels).numpy()
    loss = ops.bce_loss(labels, probs)
    per_class = [evaluation.auroc(probs[:, i], labels[:, i]) for i in range(NUM_CLASSES)]
    defined = [a for a in per_class if a is not None]
    mean_auroc = sum(defined) / len(defined) if defined else None
    return loss, mean_auroc, NUM_CLASSES - len(defined)


def train_classifier(
    config: ClassifierConfig,
    train: list[ClsSample],
    val: list[ClsSample],
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> ClassifierCheckpoint:
    """Minimize the mean BCE over batches; keep the epoch with the best
    validation mean AUROC (classes missing from the val set are excluded
    and counted in the history).

    With `out_dir` set, per-epoch state goes to <out_dir>/last.pt, and
    `resume` continues an interrupted run from it.
    """
    if not train:
        raise DataError("classifier training set is empty")
    torch.manual_seed(config.seed)
    model = MaskWeightedClassifier(config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )

    start_epoch = 0
    history: list[dict] = []
    best_metric = (-float("inf"), -float("inf"))
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = -1
    best_auroc: float | None = None

    last_path = Path(out_dir) / "last.pt" if out_dir is not None else None
    if resume and last_path is not None and last_path.exists():
        blob = torch.load(last_path, map_location="cpu", weights_only=False)
        model.load_state_dict(blob["state_dict"])
        optimizer.load_state_dict(blob["optimizer"])
        start_epoch = blob["epoch"] + 1
        history = blob["history"]
        best_metric = blob["best_metric"]
        best_state = blob["best_state"]
        best_epoch = blob["best_epoch"]
        best_auroc = blob["best_auroc"]
        log.info("resuming classifier training at epoch %d", start_epoch)

    for epoch in range(start_epoch, config.epochs):
        model.train()
        order = list(range(len(train)))
        random.Random(config.seed * 100003 + epoch).shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            images, labels, masks = _stack_batch(train, idx)
            optimizer.zero_grad()
            probs, _, _ = model(images, masks)
            loss = ops.bce_loss(labels, probs)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1

        val_loss, val_auroc, undefined = (
            _validation_metrics(model, val, config.batch_size)
            if val
            else (float("nan"), None, NUM_CLASSES)
        )
        # select on mean AUROC, breaking ties (and undefined AUROC) by loss
        tiebreak = -val_loss if val else -epoch_loss / max(n_batches, 1)
        metric = (val_auroc if val_auroc is not None else -float("inf"), tiebreak)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_loss": val_loss,
            "val_auroc": float("nan") if val_auroc is None else val_auroc,
            "auroc_undefined": undefined,
        }
        history.append(row)
        if metric > best_metric:
            best_metric = metric
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            best_auroc = val_auroc
        log.debug(
            "cls epoch %d train %.4f val %.4f auroc %s",
            epoch, row["train_loss"], val_loss, val_auroc,
        )
        if last_path is not None:
            torch.save(
                {
                    "state_dict": model.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "epoch": epoch,
                    "history": history,
                    "best_metric": best_metric,
                    "best_state": best_state,
                    "best_epoch": best_epoch,
                    "best_auroc": best_auroc,
                },
                last_path,
            )

    model.load_state_dict(best_state)
    model.eval()
    return ClassifierCheckpoint(
        model=model,
        config=config,
        seed=config.seed,
        history=history,
        best_epoch=best_epoch,
        best_val_auroc=best_auroc,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class PredictionRecord:
    image_id: str
    probs: np.ndarray  # (14,)
    mask_fallback: bool = False
    boxes: list[evaluation.HeatBox] = field(default_factory=list)


@dataclass
class PredictionError:
    image_id: str
    error: str


def predict(
    checkpoint: ClassifierCheckpoint,
    sources: list,
    mask_provider=None,
    preprocess_config: PreprocessConfig | None = None,
) -> list[PredictionRecord | PredictionError]:
    """Batch inference over image paths.

    Unreadable items produce a PredictionError in place instead of aborting
    the batch. mask_provider(image, image_id) -> (mask, fallback) or None.
    """
    cfg = preprocess_config or PreprocessConfig()
    model = checkpoint.model
    model.eval()
    results: list[PredictionRecord | PredictionError] = []
    for src in sources:
        image_id = Path(src).name if isinstance(src, (str, Path)) else str(src)
        try:
            image = preprocess(src, cfg)
            mask, fallback = (None, False)
            if mask_provider is not None:
                provided = mask_provider(image, image_id)
                if provided is not None:
                    mask, fallback = provided
            with torch.no_grad():
                probs, _, _ = model(image, mask)
            results.append(PredictionRecord(image_id, probs.numpy(), fallback))
        except DataError as err:
            results.append(PredictionError(image_id, str(err)))
    return results
