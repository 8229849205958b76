"""Downstream-consistency evaluation and the ablation / lambda-sweep runners.

Every reconstruction evaluated here goes through the real bitstream:
compress -> pack -> unpack -> decode. The classifier used for scoring is
frozen; its accuracy on the untouched originals is reported alongside.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import bitstream
from .codec import CodecModel, compress_image, decompress_image
from .data import DATA_VERSION, make_dataset, to_patches
from .errors import ConfigError
from .metrics import max_scales, ms_ssim, psnr
from .perceptual import Classifier, FeatureExtractor, train_classifier
from .trainer import LAMBDA_RESCALE, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

ARMS = ("baseline", "dic_no_mmd", "dic_mmd")

# name -> callable(codec, images, labels) -> dict of extra columns
EVALUATORS: dict[str, Callable] = {}


def register_evaluator(name: str, fn: Callable) -> None:
    """Attach an extra downstream evaluator (e.g. a detector); none ship by default."""
    EVALUATORS[name] = fn


@dataclass
class EvalResult:
    arm_name: str
    top1: float
    top1_original: float
    ms_ssim_mean: float
    psnr_mean: float
    bpp_mean: float
    n_images: int
    seed: int
    extra: dict[str, float] = field(default_factory=dict)


def roundtrip(codec: CodecModel, image: np.ndarray, steps: int = 1) -> tuple[np.ndarray, float, bytes]:
    """Compress one image to ``.dic`` bytes and decode it back; returns (image, bpp, bytes)."""
    h, w = image.shape[:2]
    blob = bitstream.pack(compress_image(codec, image, steps), (h, w))
    codes, (th, tw), _ = bitstream.unpack(blob)
    bits = sum(c.n_bits for c in codes)
    return decompress_image(codec, codes, th, tw), bits / (th * tw), blob


def reconstruct(codec: CodecModel, images: np.ndarray, steps: int = 1, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Bitstream round trip for every image; results keep input order."""
    fn = lambda im: roundtrip(codec, im, steps)[:2]  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(fn, images))
    else:
        out = [fn(im) for im in images]
    return np.stack([o[0] for o in out]), np.array([o[1] for o in out])


def evaluate_downstream(
    classifier: Classifier,
    codec: CodecModel,
    images: np.ndarray,
    labels: np.ndarray,
    arm_name: str = "dic_mmd",
    seed: int = 0,
    steps: int = 1,
    other_classifiers: dict[str, Classifier] | None = None,
    workers: int = 1,
) -> EvalResult:
    """Top-1 of a frozen classifier on bitstream reconstructions vs. originals.

    ``other_classifiers`` adds ``top1[name]`` and ``top1_original[name]``
    entries to ``extra`` for cross-architecture checks.
    """
    labels = np.asarray(labels)
    if len(images) == 0 or len(images) != len(labels):
        raise ConfigError("need a non-empty image set with one label per image")
    if labels.min() < 0 or labels.max() >= classifier.n_classes:
        raise ConfigError(
            f"labels span [{labels.min()}, {labels.max()}] but the classifier has {classifier.n_classes} classes"
        )
    recon, rates = reconstruct(codec, images, steps, workers)
    scales = max_scales(*images.shape[1:3])
    ms = [ms_ssim(x, y, scales) for x, y in zip(images, recon)]
    ps = [psnr(x, y) for x, y in zip(images, recon)]
    res = EvalResult(
        arm_name=arm_name,
        top1=float(np.mean(classifier.predict(recon) == labels)),
        top1_original=float(np.mean(classifier.predict(images) == labels)),
        ms_ssim_mean=float(np.mean(ms)),
        psnr_mean=float(np.mean(ps)),
        bpp_mean=float(np.mean(rates)),
        n_images=len(images),
        seed=seed,
    )
    for name, clf in (other_classifiers or {}).items():
        res.extra[f"top1[{name}]"] = float(np.mean(clf.predict(recon) == labels))
        res.extra[f"top1_original[{name}]"] = float(np.mean(clf.predict(images) == labels))
    for name, fn in EVALUATORS.items():
        res.extra.update({f"{name}:{k}": v for k, v in fn(codec, images, labels).items()})
    return res


@dataclass
class ProxyTask:
    """Everything the desk-scale experiments need, built once and shared."""

    train_patches: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    classifier: Classifier
    fx: FeatureExtractor
    second_classifier: Classifier

    @property
    def other(self) -> dict[str, Classifier]:
        return {self.second_classifier.arch: self.second_classifier}


def build_proxy_task(
    n_codec_images: int = 240,
    n_test_images: int = 300,
    n_classifier_images: int = 3000,
    image_size: int = 96,
    classifier_epochs: int = 15,
    seed: int = 0,
    cache_dir: str | os.PathLike | None = None,
) -> ProxyTask:
    """Generate the proxy data and pretrain both frozen classifiers.

    The three image sets come from disjoint generator seeds. With
    ``cache_dir`` the trained classifiers are saved there and reused.
    """
    clf_x, clf_y = make_dataset(n_classifier_images, image_size, seed=seed * 10 + 1)
    codec_x, _ = make_dataset(n_codec_images, image_size, seed=seed * 10 + 2)
    test_x, test_y = make_dataset(n_test_images, image_size, seed=seed * 10 + 3)

    def get(arch: str) -> Classifier:
        path = None
        if cache_dir is not None:
            tag = f"{arch}-v{DATA_VERSION}-n{n_classifier_images}-s{image_size}-e{classifier_epochs}-seed{seed}.npz"
            path = os.path.join(cache_dir, tag)
            if os.path.exists(path):
                return Classifier.load(path).freeze()
        clf = train_classifier(clf_x, clf_y, arch, epochs=classifier_epochs, seed=seed, log=log.info)
        if path is not None:
            os.makedirs(cache_dir, exist_ok=True)
            clf.save(path)
        return clf

    main = get("plain5")
    second = get("strided4")
    return ProxyTask(to_patches(codec_x), test_x, test_y, main, FeatureExtractor.from_classifier(main), second)


def arm_configs(cfg: TrainConfig) -> dict[str, TrainConfig]:
    """The three ablation arms; they differ from ``cfg`` only in (lam, gamma)."""
    return {
        "baseline": cfg.replace(lam=0.0, gamma=0.0),
        "dic_no_mmd": cfg.replace(gamma=0.0),
        "dic_mmd": cfg,
    }


def _run_arm(task: ProxyTask, cfg: TrainConfig, name: str, workers: int) -> tuple[EvalResult, TrainResult]:
    result = train(task.train_patches, cfg, task.fx)
    ev = evaluate_downstream(task.classifier, result.model, task.test_images, task.test_labels,
                             arm_name=name, seed=cfg.seed, steps=cfg.steps,
                             other_classifiers=task.other, workers=workers)
    return ev, result


def ablation_table(
    task: ProxyTask,
    cfg: TrainConfig,
    seeds: Sequence[int] = (0,),
    workers: int = 1,
    on_result: Callable[[EvalResult, TrainResult], None] | None = None,
) -> list[EvalResult]:
    """Train and evaluate baseline / w/o MMD / w/ MMD for every seed.

    Within a seed all arms start from the same initial codec weights and
    see the same batch order and binarizer noise.
    """
    rows = []
    for seed in seeds:
        for name, arm_cfg in arm_configs(cfg.replace(seed=seed)).items():
            ev, tr = _run_arm(task, arm_cfg, name, workers)
            log.info("seed %d %s: top1 %.4f ms-ssim %.4f", seed, name, ev.top1, ev.ms_ssim_mean)
            rows.append(ev)
            if on_result:
                on_result(ev, tr)
    return rows


def lambda_sweep(
    task: ProxyTask,
    base_cfg: TrainConfig,
    lambdas: Iterable[float],
    seeds: Sequence[int] = (0,),
    workers: int = 1,
    rescale: float = LAMBDA_RESCALE,
    cache: dict | None = None,
    on_result: Callable[[EvalResult, TrainResult], None] | None = None,
) -> list[EvalResult]:
    """One row per (lambda, seed); ``lambdas`` are in reference units and get multiplied by ``rescale``.

    ``cache`` maps ``(config dict as tuple)`` to an already computed
    EvalResult so overlapping runs (e.g. with an ablation arm) are reused.
    """
    rows = []
    for lam in lambdas:
        for seed in seeds:
            cfg = base_cfg.replace(lam=lam * rescale, seed=seed)
            key = config_key(cfg)
            if cache is not None and key in cache:
                ev = cache[key]
            else:
                ev, tr = _run_arm(task, cfg, f"lambda={lam:g}", workers)
                if cache is not None:
                    cache[key] = ev
                if on_result:
                    on_result(ev, tr)
            rows.append(dataclasses.replace(ev, arm_name=f"lambda={lam:g}", extra=dict(ev.extra, lam=lam)))
    return rows


def config_key(cfg: TrainConfig) -> tuple:
    return tuple(sorted((k, repr(v)) for k, v in cfg.to_dict().items()))


def summarize(rows: Sequence[EvalResult]) -> list[EvalResult]:
    """Seed-averaged row per arm name, in first-appearance order."""
    names = list(dict.fromkeys(r.arm_name for r in rows))
    out = []
    for name in names:
        group = [r for r in rows if r.arm_name == name]
        extra_keys = [k for k in group[0].extra if isinstance(group[0].extra[k], float)]
        out.append(EvalResult(
            arm_name=name,
            top1=float(np.mean([r.top1 for r in group])),
            top1_original=float(np.mean([r.top1_original for r in group])),
            ms_ssim_mean=float(np.mean([r.ms_ssim_mean for r in group])),
            psnr_mean=float(np.mean([r.psnr_mean for r in group])),
            bpp_mean=float(np.mean([r.bpp_mean for r in group])),
            n_images=group[0].n_images,
            seed=-1,
            extra={k: float(np.mean([r.extra[k] for r in group])) for k in extra_keys},
        ))
    return out


def _flat(r: EvalResult) -> dict:
    d = dataclasses.asdict(r)
    extra = d.pop("extra")
    d.update(extra)
    return d


def results_csv(rows: Sequence[EvalResult]) -> str:
    flat = [_flat(r) for r in rows]
    keys = list(dict.fromkeys(k for d in flat for k in d))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for d in flat:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items()})
    return buf.getvalue()


def render_table(rows: Sequence[EvalResult], title: str = "") -> str:
    """Plain-text table: an 'Original' reference row, then one row per result."""
    if not rows:
        return ""
    second = sorted({k[5:-1] for r in rows for k in r.extra if k.startswith("top1[")})
    head = ["Method", "Top-1"] + [f"Top-1 {n}" for n in second] + ["MS-SSIM", "PSNR", "bpp"]
    ref = rows[0]
    lines = [["Original", f"{100 * ref.top1_original:.1f}%"]
             + [f"{100 * ref.extra[f'top1_original[{n}]']:.1f}%" for n in second]
             + ["1.000", "inf", "24"]]
    for r in rows:
        lines.append([r.arm_name, f"{100 * r.top1:.1f}%"]
                     + [f"{100 * r.extra[f'top1[{n}]']:.1f}%" for n in second]
                     + [f"{r.ms_ssim_mean:.3f}", f"{r.psnr_mean:.3f}", f"{r.bpp_mean:.2f}"])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    sep = "-+-".join("-" * w for w in widths)
    out = ([title] if title else []) + [fmt.format(*head), sep] + [fmt.format(*l) for l in lines]
    return "\n".join(out) + "\n"


def plot_rate_curves(points: Sequence[tuple[str, float, float, float]], path: str | os.PathLike) -> None:
    """Save rate vs. top-1 and rate vs. MS-SSIM plots from (label, bpp, top1, ms_ssim) points."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for label in dict.fromkeys(p[0] for p in points):
        pts = sorted((p for p in points if p[0] == label), key=lambda p: p[1])
        axes[0].plot([p[1] for p in pts], [p[2] for p in pts], "o-", label=label)
        axes[1].plot([p[1] for p in pts], [p[3] for p in pts], "o-", label=label)
    axes[0].set(xlabel="bpp", ylabel="top-1")
    axes[1].set(xlabel="bpp", ylabel="MS-SSIM")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
