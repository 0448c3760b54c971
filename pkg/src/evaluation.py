"""Thresholded confusion counts and the segmentation metrics built on them."""
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, NonNegativeInt

from errors import DatasetError, ShapeMismatchError
from quantization import QuantizedModel, quantized_forward
from settings import resolve_threads
from tensorops import model_forward


Aggregation = Literal["micro", "macro"]


class ConfusionCounts(BaseModel):
    tp: NonNegativeInt = 0
    fp: NonNegativeInt = 0
    fn: NonNegativeInt = 0
    tn: NonNegativeInt = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tp + other.tp, fp=self.fp + other.fp,
                               fn=self.fn + other.fn, tn=self.tn + other.tn)


class MetricsRecord(BaseModel):
    """Precision, recall, F1 and mIoU of one split.

    ``class_iou`` is ordered (crack, background). Under macro aggregation each
    field is the mean of the per-image values, so F1 is no longer the
    harmonic mean of the stored precision and recall.
    """

    precision: float
    recall: float
    f1: float
    miou: float
    class_iou: list[float]
    counts: ConfusionCounts
    aggregation: Aggregation = "micro"
    images: int = 0


def check_binary_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must contain only 0 and 1")
    return mask.astype(bool)


def _check_pair(probs: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs, mask = np.asarray(probs), np.asarray(mask)
    if probs.shape != mask.shape:
        raise ShapeMismatchError(f"prediction {probs.shape} and mask {mask.shape} differ")
    return probs, check_binary_mask(mask)


def confusion(probs: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Pixel tally with pred = probs >= threshold, pooled over every image."""
    probs, truth = _check_pair(probs, mask)
    pred = probs >= threshold
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(truth.size) - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision_recall_f1(c: ConfusionCounts) -> tuple[float, float, float]:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _class_iou(hit: int, missed: int, spurious: int) -> float:
    den = hit + missed + spurious
    if den == 0:
        # the class is absent from both truth and prediction
        return 1.0
    return hit / den


def miou(c: ConfusionCounts) -> tuple[float, list[float]]:
    """Mean IoU over the two classes (crack, background)."""
    per_class = [_class_iou(c.tp, c.fn, c.fp), _class_iou(c.tn, c.fp, c.fn)]
    return sum(per_class) / len(per_class), per_class


def metrics_from_counts(c: ConfusionCounts, images: int = 0) -> MetricsRecord:
    precision, recall, f1 = precision_recall_f1(c)
    mean_iou, per_class = miou(c)
    return MetricsRecord(precision=precision, recall=recall, f1=f1, miou=mean_iou,
                         class_iou=per_class, counts=c, aggregation="micro", images=images)


def per_image_confusion(probs: np.ndarray, masks: np.ndarray, threshold: float = 0.5,
                        names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """One row of counts per image (columns image, tp, fp, fn, tn)."""
    probs, _ = _check_pair(probs, masks)
    names = list(names) if names is not None else [str(i) for i in range(len(probs))]
    rows = []
    for name, p, m in zip(names, probs, masks):
        c = confusion(p, m, threshold)
        rows.append({"image": name, "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn})
    return pd.DataFrame(rows, columns=["image", "tp", "fp", "fn", "tn"])


def metrics_from_table(table: pd.DataFrame, aggregation: Aggregation = "micro") -> MetricsRecord:
    """Re-aggregate a per-image confusion table (as written to CSV)."""
    if table.empty:
        raise DatasetError("no images to aggregate")
    counts = [ConfusionCounts(tp=int(r.tp), fp=int(r.fp), fn=int(r.fn), tn=int(r.tn))
              for r in table.itertuples(index=False)]
    pooled = sum(counts[1:], counts[0])
    if aggregation == "micro":
        return metrics_from_counts(pooled, images=len(counts))
    if aggregation != "macro":
        raise ValueError(f"unknown aggregation {aggregation!r}")
    records = [metrics_from_counts(c) for c in counts]
    return MetricsRecord(
        precision=float(np.mean([r.precision for r in records])),
        recall=float(np.mean([r.recall for r in records])),
        f1=float(np.mean([r.f1 for r in records])),
        miou=float(np.mean([r.miou for r in records])),
        class_iou=[float(np.mean([r.class_iou[k] for r in records])) for k in range(2)],
        counts=pooled,
        aggregation="macro",
        images=len(counts),
    )


def predict(model, images: np.ndarray, batch_size: int = 8, threads: Optional[int] = None) -> np.ndarray:
    """Probability maps for a stack of images, float or int8 model.

    Batches run on up to ``threads`` workers; results come back in input order.
    """
    if len(images) == 0:
        raise DatasetError("no images to predict")
    if isinstance(model, QuantizedModel):
        def run(batch):
            return quantized_forward(model, batch)
    else:
        def run(batch):
            return model_forward(model.graph, model.params, batch)

    batches = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    workers = min(threads or resolve_threads(), len(batches))
    if workers <= 1:
        outputs = [run(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run, batches))
    return np.concatenate(outputs, axis=0)


def evaluate_model(model, samples: Sequence, threshold: float = 0.5, aggregation: Aggregation = "micro",
                   batch_size: int = 8, threads: Optional[int] = None) -> MetricsRecord:
    """Metrics of a float or quantized model over a split of SamplePairs."""
    if len(samples) == 0:
        raise DatasetError("cannot evaluate an empty split")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    probs = predict(model, images, batch_size=batch_size, threads=threads)
    table = per_image_confusion(probs, masks, threshold, names=[s.name for s in samples])
    return metrics_from_table(table, aggregation)


def threshold_sweep(probs: np.ndarray, masks: np.ndarray, thresholds: Iterable[float]) -> pd.DataFrame:
    rows = []
    for t in thresholds:
        c = confusion(probs, masks, t)
        precision, recall, f1 = precision_recall_f1(c)
        rows.append({"threshold": float(t), "precision": precision, "recall": recall,
                     "f1": f1, "miou": miou(c)[0]})
    return pd.DataFrame(rows, columns=["threshold", "precision", "recall", "f1", "miou"])
