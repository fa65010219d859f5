"""Metrics and statistics: per-class mIoU reporting, paired significance
tests with Bonferroni correction, inference timing, and the cross-resolution
experiment harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .geometry import EyeMask, SCLERA, IRIS

CLASS_NAMES = {SCLERA: "sclera", IRIS: "iris"}


class ConfigurationError(ValueError):
    """The requested experiment cannot be assembled from the given inputs."""


@dataclass
class EvalReport:
    """Per-class mIoU summary in percent. `None` marks a class with no
    defined per-image IoU anywhere in the split (not applicable)."""

    s_miou: float | None
    i_miou: float | None
    mean_miou: float | None
    per_image_ious: list[tuple[float | None, float | None]]
    n_images: int
    timing_seconds_per_image: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "s_miou": self.s_miou,
            "i_miou": self.i_miou,
            "mean_miou": self.mean_miou,
            "per_image_ious": [list(p) for p in self.per_image_ious],
            "n_images": self.n_images,
            "timing_seconds_per_image": self.timing_seconds_per_image,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            s_miou=d["s_miou"],
            i_miou=d["i_miou"],
            mean_miou=d["mean_miou"],
            per_image_ious=[tuple(p) for p in d["per_image_ious"]],
            n_images=d["n_images"],
            timing_seconds_per_image=d.get("timing_seconds_per_image"),
            meta=d.get("meta", {}),
        )

    def per_image_mean_ious(self) -> list[float]:
        """Mean of the defined per-image class IoUs; input to paired tests."""
        out = []
        for s, i in self.per_image_ious:
            defined = [v for v in (s, i) if v is not None]
            out.append(float(np.mean(defined)) if defined else float("nan"))
        return out


def _labels_of(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, EyeMask) else np.asarray(mask)


def class_iou(pred, gt, class_id: int) -> float | None:
    """Intersection over union of one class; None when the union is empty
    (the image then does not contribute to that class's average)."""
    p = _labels_of(pred)
    g = _labels_of(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch {p.shape} vs {g.shape}")
    pc = p == class_id
    gc = g == class_id
    union = np.logical_or(pc, gc).sum()
    if union == 0:
        return None
    return float(np.logical_and(pc, gc).sum() / union)


def _class_mean(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(100.0 * np.mean(defined)) if defined else None


def report_from_pairs(pairs: list[tuple[float | None, float | None]], **meta) -> EvalReport:
    s_miou = _class_mean([p[0] for p in pairs])
    i_miou = _class_mean([p[1] for p in pairs])
    mean = 0.5 * (s_miou + i_miou) if s_miou is not None and i_miou is not None else None
    return EvalReport(
        s_miou=s_miou,
        i_miou=i_miou,
        mean_miou=mean,
        per_image_ious=pairs,
        n_images=len(pairs),
        meta=dict(meta),
    )


@torch.no_grad()
def predict_labels(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Per-pixel argmax predictions for a (N, C, H, W) image array."""
    model.eval()
    preds = []
    for start in range(0, images.shape[0], batch_size):
        batch = torch.from_numpy(images[start:start + batch_size].copy())
        preds.append(model(batch).argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(preds)


def evaluate_arrays(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64, **meta) -> EvalReport:
    preds = predict_labels(model, images, batch_size)
    pairs = [
        (class_iou(preds[i], labels[i], SCLERA), class_iou(preds[i], labels[i], IRIS))
        for i in range(labels.shape[0])
    ]
    return report_from_pairs(pairs, **meta)


def evaluate_split(
    model,
    manifest,
    split: str,
    target_size: tuple[int, int] | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """Evaluate a model over one manifest split (S-mIoU / I-mIoU / Mean mIoU)."""
    from .data import load_split_arrays

    arrays = load_split_arrays(manifest, split, target_size)
    return evaluate_arrays(model, arrays.images, arrays.labels, batch_size, split=split)


@dataclass
class TTestResult:
    t_stat: float
    p_raw: float
    p_corrected: float
    significant_at_95: bool
    degenerate: bool = False


def paired_ttest_bonferroni(
    per_image_scores_a, per_image_scores_b, num_comparisons: int = 1
) -> TTestResult:
    """Two-sided paired t-test on per-image score differences with Bonferroni
    correction; zero-variance differences yield a degenerate (not
    significant) result."""
    a = np.asarray(per_image_scores_a, dtype=np.float64)
    b = np.asarray(per_image_scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired score lists must be 1-D and equal length")
    if a.size < 2:
        raise ValueError("paired t-test needs at least 2 samples")
    if num_comparisons < 1:
        raise ValueError("num_comparisons must be >= 1")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        return TTestResult(0.0, 1.0, 1.0, False, degenerate=True)
    t = float(d.mean() / (sd / np.sqrt(d.size)))
    p_raw = float(2.0 * stats.t.sf(abs(t), df=d.size - 1))
    p_corr = min(1.0, p_raw * num_comparisons)
    return TTestResult(t, p_raw, p_corr, p_corr < 0.05)


@torch.no_grad()
def bench_inference(model, images: np.ndarray, warmup: int = 3, reps: int = 10) -> float:
    """Median wall-clock seconds for a single-image forward pass."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    model.eval()
    single = torch.from_numpy(images[:1].copy())
    for _ in range(warmup):
        model(single)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model(single)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cross_resolution_experiment(
    manifest,
    train_config,
    seg_config,
    vae_config,
    batch_size_eval: int = 64,
) -> tuple[EvalReport, EvalReport]:
    """Train on high-resolution-tagged samples only, evaluate on the
    low-resolution-tagged test subset; returns (IoU-only baseline, full
    shape-constrained) reports."""
    from . import training
    from .data import SplitArrays, load_split_arrays

    def filtered(split: str, tag: str) -> SplitArrays:
        arrays = load_split_arrays(manifest, split, target_size=seg_config.input_size)
        keep = [
            i for i, rec in enumerate(manifest.records_for(split)) if rec.resolution_tag == tag
        ]
        if not keep:
            raise ConfigurationError(f"no {tag}-resolution records in split {split!r}")
        return SplitArrays(arrays.images[keep], arrays.labels[keep])

    train = filtered("train", "high")
    val = filtered("val", "high")
    test = filtered("test", "low")

    prior = training.train_shape_prior(train.labels, train_config, vae_config)
    reports = []
    for variant in ("iou_only", "full"):
        result = training.train_segmentation(
            train,
            prior.encoder,
            prior.discriminator,
            train_config,
            seg_config,
            val_data=val,
            variant=variant,
        )
        report = evaluate_arrays(
            result.model, test.images, test.labels, batch_size_eval, variant=variant
        )
        reports.append(report)
    return reports[0], reports[1]
