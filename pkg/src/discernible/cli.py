"""``dic`` command-line entry point.

Seven verbs share one config schema (the training fields plus the proxy-task
fields below). A YAML file supplies a base config; ``--set key=value``
overrides it; the effective config is written next to the outputs as
``config.yaml``. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from . import bitstream
from .codec import CodecModel, compress_image, decompress_image, pad_image, tile
from .errors import ConfigError, DICError, FormatError, ShapeError
from .harness import (
    ablation_table,
    build_proxy_task,
    evaluate_downstream,
    lambda_sweep,
    render_table,
    results_csv,
    summarize,
)
from .metrics import QualityReport, write_reports
from .perceptual import Classifier, FeatureExtractor
from .trainer import (
    GAMMA_RESCALE,
    LAMBDA_RESCALE,
    REF_BATCH,
    REF_EPOCHS,
    REF_GAMMA,
    REF_KERNELS,
    REF_LAMBDA,
    SWEEP_LAMBDAS,
    TrainConfig,
    train,
)

log = logging.getLogger("discernible")

EXIT_OK, EXIT_DATA = 0, 3


@dataclasses.dataclass
class TaskConfig:
    """Size of the built-in procedural proxy task used by eval/ablate/sweep."""

    n_codec_images: int = 240
    n_test_images: int = 300
    n_classifier_images: int = 3000
    image_size: int = 96
    classifier_epochs: int = 15
    task_seed: int = 0
    seeds: list = dataclasses.field(default_factory=lambda: [0, 1, 2])
    lambdas: list = dataclasses.field(default_factory=lambda: list(SWEEP_LAMBDAS))


# (key, description, reference default or None)
KEY_DOCS = [
    ("lam", f"perceptual weight in this repo's units (reference value {REF_LAMBDA:g} x {LAMBDA_RESCALE:g})", REF_LAMBDA),
    ("gamma", f"MMD weight in this repo's units (reference value {REF_GAMMA:g} x {GAMMA_RESCALE:g})", REF_GAMMA),
    ("batch_size", "patches per mini-batch", REF_BATCH),
    ("epochs", "passes over the patch set", REF_EPOCHS),
    ("learning_rate", "Adam step size (cosine-decayed)", None),
    ("seed", "initialisation / batch-order / binarizer-noise seed", None),
    ("kernel_mixture", f"'median-ladder' ({REF_KERNELS} Gaussian kernels) or a list of bandwidths", REF_KERNELS),
    ("steps", "residual coding steps (0.5 bpp each)", None),
    ("widths", "encoder/decoder hidden widths", None),
    ("latent_channels", "bits per 4x4 grid position per step", None),
    ("n_codec_images", "proxy images tiled into codec training patches", None),
    ("n_test_images", "proxy images used for downstream evaluation", None),
    ("n_classifier_images", "proxy images used to pretrain the frozen classifiers", None),
    ("image_size", "proxy image side", None),
    ("classifier_epochs", "classifier pretraining epochs", None),
    ("task_seed", "proxy-data seed", None),
    ("seeds", "training seeds for ablate / sweep", None),
    ("lambdas", "sweep values, in reference units", None),
]


def _help_epilog() -> str:
    defaults = {**TrainConfig().to_dict(), **dataclasses.asdict(TaskConfig())}
    lines = ["config keys (set in --config YAML or with --set key=value):"]
    for key, doc, ref in KEY_DOCS:
        extra = f"; reference: {ref:g}" if ref is not None else ""
        value = defaults[key]
        shown = f"{value:g}" if isinstance(value, float) else repr(value)
        lines.append(f"  {key:<20} default {shown}{extra}. {doc}")
    lines.append("")
    lines.append("exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure")
    return "\n".join(lines)


# ---------------------------------------------------------------- config


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {text!r}: {e}") from e


def load_config(path: str | None, overrides: Sequence[str]) -> tuple[TrainConfig, TaskConfig]:
    """File values first, then ``key=value`` overrides; unknown keys are config errors."""
    raw: dict[str, Any] = {}
    if path:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        raw.update(loaded)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        raw[key.strip()] = _parse_value(value)

    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    task_keys = {f.name for f in dataclasses.fields(TaskConfig)}
    unknown = set(raw) - train_keys - task_keys
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    try:
        cfg = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
        task = TaskConfig(**{k: v for k, v in raw.items() if k in task_keys})
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e
    if not task.seeds:
        raise ConfigError("seeds must list at least one seed")
    return cfg, task


def write_effective_config(out: Path, cfg: TrainConfig, task: TaskConfig | None = None) -> None:
    d = cfg.to_dict()
    if task is not None:
        d.update(dataclasses.asdict(task))
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=True)


# ------------------------------------------------------------ image I/O


def read_image(path: Path) -> np.ndarray:
    """RGB image as float32 HWC in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise FormatError(f"{path}: cannot read image ({e})") from e


def write_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"}


def _inputs(path: str, suffixes: set[str]) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in suffixes)
        if not files:
            raise FormatError(f"{p}: no input files with suffix {sorted(suffixes)}")
        return files
    if not p.exists():
        raise FormatError(f"{p}: no such file or directory")
    return [p]


def _map(fn, items, workers: int) -> list:
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _load_codec(path: str) -> CodecModel:
    if not os.path.exists(path):
        raise FormatError(f"{path}: codec checkpoint not found")
    return CodecModel.load(path)


def _load_fx(path: str) -> FeatureExtractor:
    if not os.path.exists(path):
        raise FormatError(f"{path}: feature extractor checkpoint not found")
    try:
        return FeatureExtractor.load(path)
    except FormatError:
        return FeatureExtractor.from_classifier(Classifier.load(path))


def _load_labeled_dir(path: str) -> tuple[np.ndarray, np.ndarray]:
    """A directory of images plus ``labels.csv`` with ``file,label`` rows."""
    root = Path(path)
    table = root / "labels.csv"
    if not table.exists():
        raise FormatError(f"{table}: labels file not found")
    import csv

    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"file", "label"}:
        raise FormatError(f"{table}: expected columns file,label")
    images = [read_image(root / r["file"]) for r in rows]
    if len({im.shape for im in images}) != 1:
        raise ShapeError(f"{root}: labeled images must share one size")
    try:
        labels = np.array([int(r["label"]) for r in rows])
    except ValueError as e:
        raise FormatError(f"{table}: non-integer label ({e})") from e
    return np.stack(images), labels


def _task(task_cfg: TaskConfig, out: Path):
    return build_proxy_task(
        n_codec_images=task_cfg.n_codec_images,
        n_test_images=task_cfg.n_test_images,
        n_classifier_images=task_cfg.n_classifier_images,
        image_size=task_cfg.image_size,
        classifier_epochs=task_cfg.classifier_epochs,
        seed=task_cfg.task_seed,
        cache_dir=out / "classifiers",
    )


# -------------------------------------------------------------- verbs


def cmd_train(args, cfg: TrainConfig, task_cfg: TaskConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.images:
        files = _inputs(args.images, IMAGE_SUFFIXES)
        patches = np.concatenate([tile(pad_image(read_image(f))) for f in files])
        fx = _load_fx(args.fx) if args.fx else None
    else:
        task = _task(task_cfg, out)
        patches, fx = task.train_patches, task.fx
        if args.fx:
            fx = _load_fx(args.fx)
    write_effective_config(out, cfg, None if args.images else task_cfg)
    result = train(patches, cfg, fx)
    result.model.save(out / "codec.npz")
    result.write_log(out / "train_log.csv", include_timing=False)
    result.write_timing(out / "timing.csv")
    print(f"trained on {len(patches)} patches; codec written to {out / 'codec.npz'}")


def cmd_compress(args, cfg: TrainConfig, task_cfg: TaskConfig) -> None:
    codec = _load_codec(args.codec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _inputs(args.input, IMAGE_SUFFIXES)
    steps = args.steps or cfg.steps

    def work(f: Path) -> int:
        image = read_image(f)
        blob = bitstream.pack(compress_image(codec, image, steps), image.shape[:2])
        (out / (f.stem + ".dic")).write_bytes(blob)
        return len(blob)

    sizes = _map(work, files, args.workers)
    print(f"compressed {len(files)} image(s), {sum(sizes)} bytes total")


def cmd_decompress(args, cfg: TrainConfig, task_cfg: TaskConfig) -> None:
    codec = _load_codec(args.codec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _inputs(args.input, {".dic"})

    def work(f: Path) -> None:
        try:
            codes, (h, w), _ = bitstream.unpack(f.read_bytes())
        except FormatError as e:
            raise FormatError(f"{f}: {e}") from e
        write_image(out / (f.stem + ".png"), decompress_image(codec, codes, h, w))

    _map(work, files, args.workers)
    print(f"decompressed {len(files)} file(s) into {out}")


def cmd_eval(args, cfg: TrainConfig, task_cfg: TaskConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    codec = _load_codec(args.codec)
    others = {}
    if args.data:
        images, labels = _load_labeled_dir(args.data)
        if not args.classifier:
            raise ConfigError("--classifier is required with --data")
    else:
        task = _task(task_cfg, out)
        images, labels = task.test_images, task.test_labels
        others = task.other
    clf = Classifier.load(args.classifier) if args.classifier else task.classifier
    res = evaluate_downstream(clf, codec, images, labels, arm_name=Path(args.codec).stem, seed=cfg.seed,
                              steps=args.steps or cfg.steps, other_classifiers=others, workers=args.workers)
    write_effective_config(out, cfg, task_cfg)
    (out / "eval.csv").write_text(results_csv([res]))
    table = render_table([res])
    (out / "eval.txt").write_text(table)
    print(table, end="")


def cmd_ablate(args, cfg: TrainConfig, task_cfg: TaskConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(out, cfg, task_cfg)
    task = _task(task_cfg, out)
    rows = ablation_table(task, cfg, seeds=task_cfg.seeds, workers=args.workers)
    (out / "ablation_runs.csv").write_text(results_csv(rows))
    mean = summarize(rows)
    (out / "ablation.csv").write_text(results_csv(mean))
    table = render_table(mean, title=f"ablation, mean over seeds {task_cfg.seeds}")
    (out / "ablation.txt").write_text(table)
    print(table, end="")


def cmd_sweep(args, cfg: TrainConfig, task_cfg: TaskConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(out, cfg, task_cfg)
    task = _task(task_cfg, out)
    rows = lambda_sweep(task, cfg, task_cfg.lambdas, seeds=task_cfg.seeds, workers=args.workers)
    (out / "sweep_runs.csv").write_text(results_csv(rows))
    mean = summarize(rows)
    (out / "sweep.csv").write_text(results_csv(mean))
    table = render_table(mean, title=f"lambda sweep (reference units x {LAMBDA_RESCALE:g})")
    (out / "sweep.txt").write_text(table)
    print(table, end="")


def cmd_metrics(args, cfg: TrainConfig, task_cfg: TaskConfig) -> None:
    originals = _inputs(args.original, IMAGE_SUFFIXES)
    decoded_root = Path(args.decoded)
    reports = []
    for f in originals:
        d = decoded_root / (f.stem + ".png") if decoded_root.is_dir() else decoded_root
        if not d.exists():
            raise FormatError(f"{d}: decoded image for {f} not found")
        x, y = read_image(f), read_image(d)
        if x.shape != y.shape:
            raise ShapeError(f"{f} is {x.shape[:2]} but {d} is {y.shape[:2]}")
        rate = float("nan")
        if args.bitstreams:
            blob_path = Path(args.bitstreams) / (f.stem + ".dic")
            if blob_path.exists():
                h = bitstream.read_header(blob_path.read_bytes())
                rate = h.payload_bits / (h.true_h * h.true_w)
        reports.append(QualityReport.measure(str(f), x, y, rate))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_reports(fh, reports)
    else:
        write_reports(sys.stdout, reports)


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with config keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable; wins over --config)")
    common.add_argument("--workers", type=int, default=1, help="threads for per-image work (order preserved)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dic", description="Discernible image compression: train, code and evaluate.",
                                epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="verb", required=True)
    kw = dict(parents=[common], epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)

    s = sub.add_parser("train", help="train a codec; writes codec.npz, train_log.csv, config.yaml", **kw)
    s.add_argument("--images", help="directory of training images (default: built-in proxy task)")
    s.add_argument("--fx", help="feature extractor or classifier checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("compress", help="images -> .dic files", **kw)
    s.add_argument("input", help="image file or directory")
    s.add_argument("--codec", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_compress)

    s = sub.add_parser("decompress", help=".dic files -> PNG images", **kw)
    s.add_argument("input", help=".dic file or directory")
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_decompress)

    s = sub.add_parser("eval", help="downstream top-1 on reconstructions vs originals", **kw)
    s.add_argument("--codec", required=True)
    s.add_argument("--classifier", help="classifier checkpoint (default: the proxy task's)")
    s.add_argument("--data", help="directory with images and labels.csv (default: proxy test set)")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="baseline / no-MMD / MMD arms on the proxy task", **kw)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("sweep", help="perceptual-weight sweep on the proxy task", **kw)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("metrics", help="PSNR / SSIM / MS-SSIM for original vs decoded pairs", **kw)
    s.add_argument("original", help="original image file or directory")
    s.add_argument("decoded", help="decoded image file or directory (matched by file stem, .png)")
    s.add_argument("--bitstreams", help="directory of .dic files for the bpp column")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(fn=cmd_metrics)
    return p


def exit_code(err: BaseException) -> int:
    if isinstance(err, DICError):
        return err.exit_code
    return EXIT_DATA if isinstance(err, OSError) else 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg, task_cfg = load_config(args.config, args.set)
        args.fn(args, cfg, task_cfg)
    except (DICError, OSError) as e:
        print(f"dic {args.verb}: error: {e}", file=sys.stderr)
        return exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
