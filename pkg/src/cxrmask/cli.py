"""Operator commands: fixtures, segment-train, segment-run, train, eval,
localize, infer.

Every command is driven by a YAML run config (CLI flags override), writes
its outputs atomically, and leaves a resolved copy of the config beside
them. Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import random
import sys
from pathlib import Path

import numpy as np
import torch

from cxrmask import __version__, evaluation, fixtures
from cxrmask.classifier import (
    ClsSample,
    PredictionError,
    load_classifier_checkpoint,
    predict,
    save_classifier_checkpoint,
    train_classifier,
)
from cxrmask.config import ConfigError, RunConfig, dump_config, load_config
from cxrmask.data import (
    DataError,
    denormalize,
    load_boxes,
    load_manifest,
    make_val_split,
    preprocess,
    transform_mask_image,
)
from cxrmask.ops import DISEASES
from cxrmask.segmentation import (
    generate_mask,
    load_seg_checkpoint,
    load_seg_directory,
    save_seg_checkpoint,
    train_segmenter,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_torch_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "NA" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def history_tsv(history: list[dict]) -> str:
    if not history:
        return "\n"
    columns = list(history[0].keys())
    lines = ["\t".join(columns)]
    for row in history:
        lines.append("\t".join(_fmt(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def write_provenance(cfg: RunConfig, out_dir: Path) -> None:
    atomic_write_text(out_dir / "config_resolved.yaml", dump_config(cfg))


def _overrides(args) -> dict:
    return {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "deterministic": True if getattr(args, "deterministic", False) else None,
    }


def _load_run_config(args) -> RunConfig:
    if not getattr(args, "config", None):
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config, _overrides(args))
    seed_everything(cfg.seed, cfg.deterministic)
    return cfg


# ---------------------------------------------------------------------------
# mask providers
# ---------------------------------------------------------------------------

def _segmenter_provider(seg_ckpt, threshold: float, cache_dir: Path | None):
    from PIL import Image

    def provider(image: torch.Tensor, image_id: str):
        if cache_dir is not None:
            cached = cache_dir / image_id
            marker = cache_dir / (image_id + ".fallback")
            if cached.exists():
                mask = (np.asarray(Image.open(cached), dtype=np.float64) >= 128).astype(
                    np.float64
                )
                return mask, marker.exists()
        mask, fallback = generate_mask(seg_ckpt, image, threshold)
        if cache_dir is not None:
            cache_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray((mask * 255).astype(np.uint8)).save(cache_dir / image_id)
            if fallback:
                (cache_dir / (image_id + ".fallback")).touch()
        return mask, fallback

    return provider


def _files_provider(mask_dir: Path, preprocess_cfg):
    def provider(image: torch.Tensor, image_id: str):
        path = mask_dir / image_id
        if not path.exists():
            raise DataError(f"missing anatomy mask: {path}")
        return transform_mask_image(path, preprocess_cfg), False

    return provider


def _ones_provider():
    def provider(image: torch.Tensor, image_id: str):
        return np.ones(tuple(image.shape[-2:])), False

    return provider


def build_mask_provider(cfg: RunConfig, args, for_training: bool = True):
    """Returns callable(image, image_id) -> (mask, fallback), or None when
    feature weighting is disabled (--no-mask)."""
    if getattr(args, "no_mask", False):
        return None
    if cfg.mask_source == "ones":
        return _ones_provider()
    if cfg.mask_source == "files":
        if not cfg.data.mask_dir:
            raise ConfigError("mask_source=files needs data.mask_dir")
        return _files_provider(Path(cfg.data.mask_dir), cfg.preprocess)
    seg_path = getattr(args, "seg_checkpoint", None) or str(Path(cfg.out_dir) / "seg.pt")
    seg_ckpt = load_seg_checkpoint(seg_path)
    cache_dir = Path(cfg.out_dir) / "mask_cache" if for_training else None
    return _segmenter_provider(seg_ckpt, cfg.mask_threshold, cache_dir)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _cls_samples(cfg: RunConfig, manifest, split: str, mask_provider) -> list[ClsSample]:
    if not cfg.data.image_dir:
        raise ConfigError("data.image_dir is required")
    image_dir = Path(cfg.data.image_dir)
    samples = []
    for entry in manifest.entries_for(split):
        image = preprocess(image_dir / entry.image_id, cfg.preprocess)
        mask = None
        if mask_provider is not None:
            mask, _ = mask_provider(image, entry.image_id)
        samples.append(
            ClsSample(
                entry.image_id,
                image,
                torch.from_numpy(entry.labels).float(),
                mask,
            )
        )
    return samples


def _load_split_manifest(cfg: RunConfig):
    manifest = load_manifest(
        cfg.data.labels,
        cfg.data.train_list,
        cfg.data.test_list,
        image_dir=cfg.data.image_dir,
        strict=cfg.strict_counts,
    )
    # val_fraction 0 is the memorization mode: validate on the train set
    if cfg.val_fraction > 0:
        manifest = make_val_split(manifest, cfg.val_fraction, cfg.seed)
    return manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fixtures(args) -> int:
    out = Path(args.out or "fixtures")
    seed = args.seed if args.seed is not None else 0
    size = args.size
    fixtures.write_ellipse_seg_dataset(out / "segmentation", n=args.seg_n, size=size, seed=seed)
    paths = fixtures.write_blob_cls_dataset(
        out / "classification", n_train=args.n_train, n_test=args.n_test, size=size, seed=seed
    )
    config = {
        "data": {
            "labels": "classification/labels.tsv",
            "train_list": "classification/train_list.txt",
            "test_list": "classification/test_list.txt",
            "boxes": "classification/boxes.tsv",
            "image_dir": "classification/images",
            "mask_dir": "classification/anatomy_masks",
            "seg_data_dir": "segmentation",
            "original_size": size,
        },
        "preprocess": {"resize_to": size, "crop_to": size},
        "classifier": {
            "backbone": "tiny",
            "pretrained": False,
            "image_size": size,
            "batch_size": 8,
            "epochs": 40,
            "lr": 0.001,
        },
        "segmentation": {
            "levels": 2,
            "base_width": 16,
            "epochs": 40,
            "batch_size": 8,
            "lr": 0.003,
        },
        "out_dir": "runs",
        "seed": seed,
        "val_fraction": 0.2,
        "mask_source": "files",
    }
    import yaml

    atomic_write_text(out / "config.yaml", yaml.safe_dump(config, sort_keys=True))
    print(f"fixture datasets and config written under {out}")
    for key, value in paths.items():
        log.info("fixture %s: %s", key, value)
    return EXIT_OK


def cmd_segment_train(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.data.seg_data_dir:
        raise ConfigError("data.seg_data_dir is required for segment-train")
    samples = load_seg_directory(cfg.data.seg_data_dir, cfg.preprocess)
    ckpt = train_segmenter(samples, cfg.segmentation)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "seg.pt"
    tmp = ckpt_path.with_name(ckpt_path.name + ".tmp")
    save_seg_checkpoint(ckpt, tmp)
    os.replace(tmp, ckpt_path)
    atomic_write_text(out_dir / "seg_history.tsv", history_tsv(ckpt.history))
    write_provenance(cfg, out_dir)
    dice = ", ".join(f"{k}={v:.4f}" for k, v in ckpt.best_val_dice.items())
    print(f"segmentation checkpoint: {ckpt_path} (best val dice: {dice})")
    return EXIT_OK


def cmd_segment_run(args) -> int:
    cfg = _load_run_config(args)
    seg_path = args.checkpoint or str(Path(cfg.out_dir) / "seg.pt")
    seg_ckpt = load_seg_checkpoint(seg_path)
    if args.images:
        paths = [Path(p) for p in args.images]
    elif cfg.data.image_dir:
        paths = sorted(Path(cfg.data.image_dir).iterdir())
    else:
        raise ConfigError("segment-run needs image arguments or data.image_dir")
    out_dir = Path(cfg.out_dir) / "masks"
    out_dir.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    rows = []
    for path in paths:
        image = preprocess(path, cfg.preprocess)
        mask, fallback = generate_mask(seg_ckpt, image, cfg.mask_threshold)
        Image.fromarray((mask * 255).astype(np.uint8)).save(out_dir / path.name)
        rows.append({"image_id": path.name, "fallback": int(fallback)})
    atomic_write_text(Path(cfg.out_dir) / "masks_index.tsv", history_tsv(rows))
    write_provenance(cfg, Path(cfg.out_dir))
    print(f"wrote {len(rows)} masks under {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    manifest = _load_split_manifest(cfg)
    provider = build_mask_provider(cfg, args)
    train_set = _cls_samples(cfg, manifest, "train", provider)
    val_set = train_set if cfg.val_fraction <= 0 else _cls_samples(cfg, manifest, "val", provider)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = train_classifier(
        cfg.classifier, train_set, val_set, out_dir=out_dir, resume=args.resume
    )
    ckpt.extra = {
        "preprocess": {
            "resize_to": cfg.preprocess.resize_to,
            "crop_to": cfg.preprocess.crop_to,
            "mean": list(cfg.preprocess.mean),
            "std": list(cfg.preprocess.std),
        },
        "mask_source": cfg.mask_source,
        "no_mask": bool(args.no_mask),
        "run_seed": cfg.seed,
    }
    ckpt_path = out_dir / "cls.pt"
    tmp = ckpt_path.with_name(ckpt_path.name + ".tmp")
    save_classifier_checkpoint(ckpt, tmp)
    os.replace(tmp, ckpt_path)
    atomic_write_text(out_dir / "history.tsv", history_tsv(ckpt.history))
    write_provenance(cfg, out_dir)
    auroc_txt = "NA" if ckpt.best_val_auroc is None else f"{ckpt.best_val_auroc:.4f}"
    print(f"classifier checkpoint: {ckpt_path} (best epoch {ckpt.best_epoch}, "
          f"val AUROC {auroc_txt})")
    return EXIT_OK


def _restore_preprocess(ckpt, cfg: RunConfig):
    saved = ckpt.extra.get("preprocess")
    if not saved:
        return cfg.preprocess
    from cxrmask.data import PreprocessConfig

    return PreprocessConfig(
        resize_to=saved["resize_to"],
        crop_to=saved["crop_to"],
        mean=tuple(saved["mean"]),
        std=tuple(saved["std"]),
    )


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    ckpt_path = args.checkpoint or str(Path(cfg.out_dir) / "cls.pt")
    ckpt = load_classifier_checkpoint(ckpt_path)
    manifest = _load_split_manifest(cfg)
    no_mask = bool(args.no_mask) or bool(ckpt.extra.get("no_mask"))
    provider = None
    if not no_mask:
        provider = build_mask_provider(cfg, args, for_training=False)
    samples = _cls_samples(cfg, manifest, args.split, provider)
    if not samples:
        raise DataError(f"no samples in split {args.split!r}")
    model = ckpt.model
    model.eval()
    probs = []
    labels = []
    with torch.no_grad():
        for sample in samples:
            p, _, _ = model(sample.image, sample.mask)
            probs.append(p.numpy())
            labels.append(sample.label.numpy())
    probs = np.stack(probs)
    labels = np.stack(labels)
    report = evaluation.compute_metric_report(probs, labels)

    out_dir = Path(cfg.out_dir)
    atomic_write_text(out_dir / "metric_report.tsv", report.to_tsv())
    roc_dir = out_dir / "roc"
    curves = {}
    for i, name in enumerate(DISEASES):
        if report.per_disease[name] is None:
            continue
        curve = evaluation.roc_curve(probs[:, i], labels[:, i])
        curves[name] = curve
        atomic_write_text(roc_dir / f"{name.replace(' ', '_')}.tsv",
                          evaluation.roc_table(curve))
    _plot_roc(curves, out_dir / "roc.png")
    write_provenance(cfg, out_dir)
    mean = report.mean_auroc
    print(f"metric report: {out_dir / 'metric_report.tsv'} "
          f"(mean AUROC {'NA' if mean is None else f'{mean:.4f}'})")
    return EXIT_OK


def _plot_roc(curves: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    for name, curve in sorted(curves.items()):
        xs = [1.0 - p.specificity for p in curve]
        ys = [p.sensitivity for p in curve]
        order = np.argsort(xs)
        ax.plot(np.array(xs)[order], np.array(ys)[order], label=name, linewidth=1.0)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.7)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    os.replace(tmp, path)


def _localization_table(rows: list[tuple[str, evaluation.LocalizationReport]]) -> str:
    from cxrmask.data import BOX_DISEASES

    header = "method\t" + "\t".join(BOX_DISEASES) + "\tmean"
    lines = [header]
    for label, report in rows:
        means = report.per_disease_mean()
        cells = [label]
        for name in BOX_DISEASES:
            cells.append(f"{means[name]:.4f}" if name in means else "NA")
        mean = report.mean_iou
        cells.append(f"{mean:.4f}" if mean is not None else "NA")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def _draw_overlay(image_path: Path, cfg, truth, predicted, out_path: Path) -> None:
    from PIL import Image, ImageDraw

    base = denormalize(preprocess(image_path, cfg), cfg)
    img = Image.fromarray((base * 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    tx, ty, tw, th = truth
    px, py, pw, ph = predicted.xywh
    draw.rectangle([tx, ty, tx + tw - 1, ty + th - 1], outline=(255, 0, 0))
    draw.rectangle([px, py, px + pw - 1, py + ph - 1], outline=(0, 0, 255))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path)


def cmd_localize(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.data.boxes:
        raise ConfigError("data.boxes is required for localize")
    ckpt_path = args.checkpoint or str(Path(cfg.out_dir) / "cls.pt")
    ckpt = load_classifier_checkpoint(ckpt_path)
    annotations = load_boxes(
        cfg.data.boxes, cfg.preprocess,
        (cfg.data.original_size, cfg.data.original_size),
    )
    image_dir = Path(cfg.data.image_dir) if cfg.data.image_dir else None
    if image_dir is None:
        raise ConfigError("data.image_dir is required for localize")

    def loader(image_id: str):
        path = image_dir / image_id
        if not path.exists():
            return None
        return preprocess(path, cfg.preprocess)

    no_mask = bool(args.no_mask) or bool(ckpt.extra.get("no_mask"))
    provider = None if no_mask else build_mask_provider(cfg, args, for_training=False)
    rows = [
        (
            "model",
            evaluation.evaluate_localization(
                ckpt.model, annotations, loader, provider,
                cfg.cam_source, cfg.cam_threshold,
            ),
        )
    ]
    if args.ablation_checkpoint:
        ablation = load_classifier_checkpoint(args.ablation_checkpoint)
        rows.append(
            (
                "ablation",
                evaluation.evaluate_localization(
                    ablation.model, annotations, loader, provider,
                    cfg.cam_source, cfg.cam_threshold,
                ),
            )
        )
    out_dir = Path(cfg.out_dir)
    atomic_write_text(out_dir / "iou_table.tsv", _localization_table(rows))
    for item in rows[0][1].items:
        name = f"{Path(item.image_id).stem}_{item.disease.replace(' ', '_')}.png"
        _draw_overlay(
            image_dir / item.image_id, cfg.preprocess,
            item.truth, item.predicted, out_dir / "overlays" / name,
        )
    write_provenance(cfg, out_dir)
    mean = rows[0][1].mean_iou
    print(f"iou table: {out_dir / 'iou_table.tsv'} "
          f"(mean IoU {'NA' if mean is None else f'{mean:.4f}'})")
    return EXIT_OK


def _parse_thresholds(path: Path) -> dict[str, float]:
    thresholds = {}
    for line in path.read_text().splitlines()[1:]:
        if line.startswith("#") or not line.strip():
            continue
        cells = line.split("\t")
        if cells[0] in DISEASES and len(cells) >= 3 and cells[2] not in ("", "NA"):
            thresholds[cells[0]] = float(cells[2])
    return thresholds


def cmd_infer(args) -> int:
    if not args.images:
        raise ConfigError("infer needs at least one image path")
    ckpt = load_classifier_checkpoint(args.checkpoint)
    cfg = RunConfig() if not args.config else load_config(args.config, _overrides(args))
    seed_everything(args.seed if args.seed is not None else cfg.seed, args.deterministic)
    pre = _restore_preprocess(ckpt, cfg)
    provider = None
    if args.no_mask or ckpt.extra.get("no_mask"):
        provider = None
    elif args.seg_checkpoint:
        seg = load_seg_checkpoint(args.seg_checkpoint)
        provider = _segmenter_provider(seg, cfg.mask_threshold, None)
    thresholds = {name: 0.5 for name in DISEASES}
    if args.thresholds:
        thresholds.update(_parse_thresholds(Path(args.thresholds)))

    results = predict(ckpt, [Path(p) for p in args.images], provider, pre)
    header = (
        ["image_id"]
        + [d.replace(" ", "_") for d in DISEASES]
        + ["mask_fallback"]
        + [f"call_{d.replace(' ', '_')}" for d in DISEASES]
    )
    lines = ["\t".join(header)]
    successes = 0
    for item in results:
        if isinstance(item, PredictionError):
            lines.append(f"{item.image_id}\tERROR\t{item.error}")
            continue
        successes += 1
        calls = [
            "1" if item.probs[i] >= thresholds[name] else "0"
            for i, name in enumerate(DISEASES)
        ]
        cells = (
            [item.image_id]
            + [f"{p:.6f}" for p in item.probs]
            + [str(int(item.mask_fallback))]
            + calls
        )
        lines.append("\t".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if successes == 0:
        log.error("all %d inputs failed", len(results))
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cxrmask", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, byte-reproducible outputs")
    common.add_argument("--no-mask", action="store_true", dest="no_mask",
                        help="disable anatomy-mask feature weighting")
    common.add_argument("--out", help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", parents=[common],
                       help="generate synthetic desk-scale datasets")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=32)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--seg-n", type=int, default=32)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("segment-train", parents=[common],
                       help="train the lung/heart segmenter")
    p.set_defaults(func=cmd_segment_train)

    p = sub.add_parser("segment-run", parents=[common],
                       help="write merged anatomy masks for images")
    p.add_argument("--checkpoint", help="segmentation checkpoint (default <out>/seg.pt)")
    p.add_argument("images", nargs="*", help="image paths (default: data.image_dir)")
    p.set_defaults(func=cmd_segment_run)

    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.pt")
    p.add_argument("--seg-checkpoint", help="segmentation checkpoint for masks")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="AUROC/ROC report on a manifest split")
    p.add_argument("--checkpoint", help="classifier checkpoint (default <out>/cls.pt)")
    p.add_argument("--seg-checkpoint", help="segmentation checkpoint for masks")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", parents=[common],
                       help="CAM boxes and IoU against annotations")
    p.add_argument("--checkpoint", help="classifier checkpoint (default <out>/cls.pt)")
    p.add_argument("--seg-checkpoint", help="segmentation checkpoint for masks")
    p.add_argument("--ablation-checkpoint", help="second checkpoint for comparison row")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("infer", parents=[common], help="batch prediction records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seg-checkpoint")
    p.add_argument("--thresholds", help="metric_report.tsv with operating thresholds")
    p.add_argument("images", nargs="*")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001 - the CLI boundary maps to exit 3
        log.exception("runtime failure: %s", err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
