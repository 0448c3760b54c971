"""Focal Tversky loss, Adam and the seeded training loop."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, PositiveInt
from tqdm import tqdm

from archgen import LayerGraph
from dataio import DatasetSplits, dihedral_view, dihedral_views, stack
from errors import DatasetError, NumericDivergenceError, ShapeMismatchError
from evaluation import check_binary_mask, confusion, metrics_from_counts, predict
from tensorops import (
    FloatModel,
    LayerParams,
    apply_batch_statistics,
    forward_with_cache,
    init_params,
    model_backward,
)

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_f1", "val_miou"]


class TverskyParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: PositiveFloat = 0.3
    beta: PositiveFloat = 0.7
    gamma: PositiveFloat = 4 / 3
    epsilon: PositiveFloat = 1e-6


class TrainConfig(BaseModel):
    learning_rate: NonNegativeFloat = 1e-4
    batch_size: PositiveInt = 8
    epochs: PositiveInt = 15
    augment: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: PositiveFloat = 1e-7
    threshold: float = 0.5
    threads: Optional[PositiveInt] = None
    progress: bool = True


def soft_counts(probs: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample soft TP, FP, FN summed over each sample's pixels."""
    probs = np.asarray(probs)
    if probs.shape != np.shape(mask):
        raise ShapeMismatchError(f"prediction {probs.shape} and mask {np.shape(mask)} differ")
    n = probs.shape[0]
    p = probs.reshape(n, -1)
    g = check_binary_mask(mask).reshape(n, -1).astype(p.dtype)
    return (p * g).sum(axis=1), (p * (1 - g)).sum(axis=1), ((1 - p) * g).sum(axis=1)


def tversky_index(tp, fp, fn, tversky: TverskyParams):
    eps = tversky.epsilon
    return (tp + eps) / (tp + tversky.alpha * fp + tversky.beta * fn + eps)


def focal_tversky_from_counts(tp, fp, fn, tversky: TverskyParams):
    return np.maximum(1 - tversky_index(tp, fp, fn, tversky), 0) ** tversky.gamma


def focal_tversky_loss(probs: np.ndarray, mask: np.ndarray,
                       tversky: TverskyParams = TverskyParams()) -> tuple[float, np.ndarray]:
    """Batch-mean focal Tversky loss and its gradient with respect to ``probs``."""
    tp, fp, fn = soft_counts(probs, mask)
    n = tp.shape[0]
    a, b, eps, gamma = tversky.alpha, tversky.beta, tversky.epsilon, tversky.gamma
    num = tp + eps
    den = tp + a * fp + b * fn + eps
    gap = np.maximum(1 - num / den, 0)
    loss = float((gap ** gamma).mean())

    safe_gap = np.where(gap > 0, gap, 1)
    dloss_dti = np.where(gap > 0, -gamma * safe_gap ** (gamma - 1), 0) / n
    dti_dtp = (a * fp + b * fn) / den ** 2
    dti_dfp = -num * a / den ** 2
    dti_dfn = -num * b / den ** 2

    p = np.asarray(probs).reshape(n, -1)
    g = np.asarray(mask).reshape(n, -1).astype(p.dtype)
    # dTP/dp = g, dFP/dp = 1 - g, dFN/dp = -g
    per_pixel = dti_dtp[:, None] * g + dti_dfp[:, None] * (1 - g) - dti_dfn[:, None] * g
    grad = (dloss_dti[:, None] * per_pixel).astype(p.dtype)
    return loss, grad.reshape(np.shape(probs))


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def like(cls, arrays: list[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
                   config: TrainConfig) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeMismatchError("gradients do not match the parameters")
    if not state.m:
        state = AdamState.like(params)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(t, new_m, new_v)


def trainable_arrays(params: list[LayerParams]) -> list[np.ndarray]:
    return [a for p in params for a in p.trainable()]


def with_trainable(params: list[LayerParams], arrays: list[np.ndarray]) -> list[LayerParams]:
    """Copy of ``params`` with weights and biases taken from ``arrays`` in order."""
    it = iter(arrays)
    rebuilt = []
    for p in params:
        rebuilt.append(LayerParams(
            None if p.weights is None else next(it),
            None if p.bias is None else next(it),
            p.moving_mean,
            p.moving_var,
        ))
    return rebuilt


def _view_batch(images: np.ndarray, masks: np.ndarray, items: np.ndarray,
                views: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    # item k is image k // len(views) under views[k % len(views)]
    picks = [(k // len(views), views[k % len(views)]) for k in items]
    return (np.stack([dihedral_view(images[i], v) for i, v in picks]),
            np.stack([dihedral_view(masks[i], v) for i, v in picks]))


@dataclass
class TrainResult:
    params: list[LayerParams]
    best_params: list[LayerParams]
    best_epoch: int
    history: pd.DataFrame

    def best_model(self, graph: LayerGraph) -> FloatModel:
        return FloatModel(graph, self.best_params)


def train(graph: LayerGraph, splits: DatasetSplits, config: TrainConfig = TrainConfig(),
          tversky: TverskyParams = TverskyParams(), initial: Optional[list[LayerParams]] = None) -> TrainResult:
    """Mini-batch Adam on the focal Tversky loss, validating after every epoch.

    With ``config.augment`` an epoch visits every training image under each
    symmetry view that keeps its frame, so one epoch is eight passes over
    square images.

    Deterministic for a given ``config.seed``: it fixes the initialization
    (unless ``initial`` is given) and the per-epoch shuffles.
    """
    if not splits.train:
        raise DatasetError("cannot train on an empty training split")
    val = splits.val
    if not val:
        logger.warning("validation split is empty; validating on the training split")
        val = splits.train
    images, masks = stack(splits.train)
    val_images, val_masks = stack(val)
    cfg = graph.config
    if images.shape[1:] != (cfg.input_h, cfg.input_w, cfg.input_c):
        raise ShapeMismatchError(f"samples are {images.shape[1:]}, the graph expects "
                                 f"{(cfg.input_h, cfg.input_w, cfg.input_c)}")

    rng = np.random.default_rng(config.seed)
    params = [p.copy() for p in initial] if initial is not None else init_params(graph, seed=config.seed)
    state = AdamState.like(trainable_arrays(params))
    best_params, best_epoch, best_f1 = params, 0, -1.0
    rows = []
    views = dihedral_views(cfg.input_h, cfg.input_w) if config.augment else (0,)
    n = len(images) * len(views)
    epochs = tqdm(range(1, config.epochs + 1), desc=cfg.config_id, disable=not config.progress)
    for epoch in epochs:
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            batch_images, batch_masks = _view_batch(images, masks, batch, views)
            probs, caches = forward_with_cache(graph, params, batch_images, training=True)
            loss, dprobs = focal_tversky_loss(probs, batch_masks, tversky)
            if not np.isfinite(loss):
                raise NumericDivergenceError(
                    f"{cfg.config_id}: loss became {loss} at epoch {epoch}, batch {start // config.batch_size}")
            grads, _ = model_backward(graph, params, caches, dprobs)
            params = apply_batch_statistics(graph, params, caches)
            arrays, state = optimizer_step(trainable_arrays(params), trainable_arrays(grads), state, config)
            params = with_trainable(params, arrays)
            total += loss * len(batch)

        model = FloatModel(graph, params)
        val_probs = predict(model, val_images, batch_size=config.batch_size, threads=config.threads)
        val_loss, _ = focal_tversky_loss(val_probs, val_masks, tversky)
        record = metrics_from_counts(confusion(val_probs, val_masks, config.threshold))
        rows.append({
            "epoch": epoch,
            "train_loss": total / n,
            "val_loss": val_loss,
            "val_f1": record.f1,
            "val_miou": record.miou,
        })
        epochs.set_postfix(loss=f"{total / n:.4f}", f1=f"{record.f1:.3f}")
        if record.f1 > best_f1:
            best_params, best_epoch, best_f1 = params, epoch, record.f1
        logger.debug("%s epoch %d: %s", cfg.config_id, epoch, rows[-1])

    return TrainResult(params, best_params, best_epoch, pd.DataFrame(rows, columns=HISTORY_COLUMNS))


def plot_history(history: pd.DataFrame, path: Union[str, Path], title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(history["epoch"], history["train_loss"], label="train")
    ax_loss.plot(history["epoch"], history["val_loss"], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("focal Tversky loss")
    ax_loss.legend()
    ax_metric.plot(history["epoch"], history["val_f1"], label="F1")
    ax_metric.plot(history["epoch"], history["val_miou"], label="mIoU")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylim(0, 1)
    ax_metric.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
