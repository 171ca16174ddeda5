"""Evaluation metrics: confusion-matrix segmentation scores (mIoU, class
average accuracy, global accuracy) and the standard monocular depth error and
threshold-accuracy set (Abs Rel, Sq Rel, RMSE, RMSE log, delta < 1.25^j).

Accumulators are pure additions, so per-image results can be merged in any
order (or in parallel) before computing the final scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import IGNORE_LABEL, DatasetManifest, Domain, Split
from .errors import ContractError, DatasetError, MetricsError

METRIC_KEYS = (
    "miou",
    "class_avg_acc",
    "global_acc",
    "abs_rel",
    "sq_rel",
    "rmse",
    "rmse_log",
    "delta1",
    "delta2",
    "delta3",
)


class ConfusionMatrix:
    """KxK counts, rows = ground truth, columns = prediction; pixels whose
    ground truth equals the ignore value are excluded."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_LABEL):
        if num_classes < 2:
            raise ContractError(f"need >= 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        mask = gt != self.ignore_index
        p = pred[mask].astype(np.int64)
        g = gt[mask].astype(np.int64)
        if p.size:
            if p.min() < 0 or p.max() >= self.num_classes:
                raise ContractError(f"prediction values must be < {self.num_classes}")
            if g.min() < 0 or g.max() >= self.num_classes:
                raise ContractError(f"non-ignored labels must be < {self.num_classes}")
            self.counts += np.bincount(
                g * self.num_classes + p, minlength=self.num_classes**2
            ).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices of different size")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class SegScores:
    miou: float
    class_avg_acc: float
    global_acc: float
    per_class_iou: list[float]  # NaN for classes with an empty union


def segmentation_metrics(cm: ConfusionMatrix) -> SegScores:
    """mIoU / class-average accuracy / global accuracy from a confusion
    matrix. Classes absent from both prediction and ground truth (empty
    union) are excluded from the mIoU mean rather than scored zero."""
    counts = cm.counts
    if counts.sum() == 0:
        raise MetricsError("confusion matrix is empty")
    diag = np.diag(counts).astype(np.float64)
    gt_per_class = counts.sum(axis=1).astype(np.float64)
    pred_per_class = counts.sum(axis=0).astype(np.float64)
    union = gt_per_class + pred_per_class - diag
    iou = np.full(cm.num_classes, np.nan)
    has_union = union > 0
    iou[has_union] = diag[has_union] / union[has_union]
    has_gt = gt_per_class > 0
    class_acc = diag[has_gt] / gt_per_class[has_gt]
    return SegScores(
        miou=float(np.mean(iou[has_union])),
        class_avg_acc=float(np.mean(class_acc)),
        global_acc=float(diag.sum() / counts.sum()),
        per_class_iou=[float(v) for v in iou],
    )


@dataclass
class DepthScores:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float


class DepthAccumulator:
    """Pixel-pooled sums for the depth metric set; mergeable by addition."""

    def __init__(self):
        self.n = 0
        self.sum_abs_rel = 0.0
        self.sum_sq_rel = 0.0
        self.sum_sq = 0.0
        self.sum_sq_log = 0.0
        self.hits = np.zeros(3, dtype=np.int64)

    def update(self, pred_m: np.ndarray, gt_m: np.ndarray, valid_mask: np.ndarray | None = None):
        pred_m = np.asarray(pred_m, dtype=np.float64)
        gt_m = np.asarray(gt_m, dtype=np.float64)
        if pred_m.shape != gt_m.shape:
            raise ContractError(f"pred shape {pred_m.shape} != gt shape {gt_m.shape}")
        mask = gt_m > 0 if valid_mask is None else np.asarray(valid_mask, dtype=bool)
        p = pred_m[mask]
        g = gt_m[mask]
        if p.size == 0:
            return self
        if p.min() <= 0 or g.min() <= 0:
            raise ContractError("depth metrics need strictly positive depths on the mask")
        diff = p - g
        self.n += p.size
        self.sum_abs_rel += float(np.sum(np.abs(diff) / g))
        self.sum_sq_rel += float(np.sum(diff**2 / g))
        self.sum_sq += float(np.sum(diff**2))
        self.sum_sq_log += float(np.sum((np.log(p) - np.log(g)) ** 2))
        ratio = np.maximum(p / g, g / p)
        for j in range(3):
            self.hits[j] += int(np.sum(ratio < 1.25 ** (j + 1)))
        return self

    def merge(self, other: "DepthAccumulator") -> "DepthAccumulator":
        self.n += other.n
        self.sum_abs_rel += other.sum_abs_rel
        self.sum_sq_rel += other.sum_sq_rel
        self.sum_sq += other.sum_sq
        self.sum_sq_log += other.sum_sq_log
        self.hits += other.hits
        return self

    def scores(self) -> DepthScores:
        if self.n == 0:
            raise MetricsError("no valid depth pixels accumulated")
        return DepthScores(
            abs_rel=self.sum_abs_rel / self.n,
            sq_rel=self.sum_sq_rel / self.n,
            rmse=float(np.sqrt(self.sum_sq / self.n)),
            rmse_log=float(np.sqrt(self.sum_sq_log / self.n)),
            delta1=float(self.hits[0] / self.n),
            delta2=float(self.hits[1] / self.n),
            delta3=float(self.hits[2] / self.n),
        )


def depth_metrics(pred_m: np.ndarray, gt_m: np.ndarray, valid_mask: np.ndarray | None = None) -> DepthScores:
    """Depth error/accuracy metrics over masked pixels (mask defaults to gt > 0)."""
    acc = DepthAccumulator().update(pred_m, gt_m, valid_mask)
    return acc.scores()


@dataclass
class EvalReport:
    miou: float
    class_avg_acc: float
    global_acc: float
    per_class_iou: list[float]
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    num_samples: int

    @classmethod
    def from_scores(cls, seg: SegScores, depth: DepthScores, num_samples: int) -> "EvalReport":
        return cls(
            miou=seg.miou,
            class_avg_acc=seg.class_avg_acc,
            global_acc=seg.global_acc,
            per_class_iou=seg.per_class_iou,
            abs_rel=depth.abs_rel,
            sq_rel=depth.sq_rel,
            rmse=depth.rmse,
            rmse_log=depth.rmse_log,
            delta1=depth.delta1,
            delta2=depth.delta2,
            delta3=depth.delta3,
            num_samples=num_samples,
        )

    def metric_map(self) -> dict[str, float]:
        return {key: float(getattr(self, key)) for key in METRIC_KEYS}

    def to_json_dict(self) -> dict:
        per_class = [None if np.isnan(v) else float(v) for v in self.per_class_iou]
        return {
            "metrics": self.metric_map(),
            "per_class_iou": per_class,
            "num_samples": self.num_samples,
        }


def write_report(report: EvalReport, out_dir: Path) -> tuple[Path, Path]:
    """Write ``report.json`` (flat metric map plus per-class IoU array) and a
    human-readable ``report.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_json_dict(), indent=1, sort_keys=True))

    lines = [
        f"Samples evaluated: {report.num_samples}",
        "",
        "Segmentation",
        f"  Mean IoU            {report.miou:.4f}",
        f"  Class Avg Accuracy  {report.class_avg_acc:.4f}",
        f"  Global Accuracy     {report.global_acc:.4f}",
        "  Per-class IoU       "
        + "  ".join(
            f"{k}:{'  n/a' if np.isnan(v) else format(v, '.3f')}"
            for k, v in enumerate(report.per_class_iou)
        ),
        "",
        "Depth Error (lower, better)      Abs. Rel.  Sq. Rel.   RMSE       RMSE log",
        f"                                 {report.abs_rel:<10.4f}{report.sq_rel:<11.4f}{report.rmse:<11.4f}{report.rmse_log:.4f}",
        "Depth Accuracy (higher, better)  s < 1.25   s < 1.25^2 s < 1.25^3",
        f"                                 {report.delta1:<11.4f}{report.delta2:<11.4f}{report.delta3:.4f}",
        "",
    ]
    txt_path = out_dir / "report.txt"
    txt_path.write_text("\n".join(lines))
    return json_path, txt_path


def evaluate(
    checkpoint: Path,
    manifest: DatasetManifest,
    apply_da: bool,
    out_dir: Path | None = None,
    split: Split = Split.TEST,
    domain: Domain | None = Domain.FOGGY,
) -> EvalReport:
    """Run inference over the manifest's selected samples and aggregate both
    metric families. Writes report files when ``out_dir`` is given."""
    from . import train as train_mod  # local import: train pulls in this module

    entries = manifest.select(split=split, domain=domain)
    if not entries:
        raise DatasetError(f"no samples for split={split} domain={domain}")
    engine = train_mod.InferenceEngine.from_checkpoint(checkpoint)
    cm = ConfusionMatrix(engine.num_classes)
    depth_acc = DepthAccumulator()
    from .data import load_sample

    for entry in entries:
        sample = load_sample(manifest, entry.id)
        result = engine.run(sample.rgb, apply_da=apply_da)
        cm.update(result.labels, sample.labels)
        depth_acc.update(result.depth_m, sample.depth, sample.valid_depth_mask())
    report = EvalReport.from_scores(
        segmentation_metrics(cm), depth_acc.scores(), num_samples=len(entries)
    )
    if out_dir is not None:
        write_report(report, out_dir)
    return report
