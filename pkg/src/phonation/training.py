"""Mini-batch training, cross-validation and classification metrics."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape
from .dataset import FoldSplit, SegmentSet
from .model import NetworkConfig, PhonationNet, build_network

log = logging.getLogger(__name__)

N_CLASSES = 4


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.001
    anneal_factor: float = 0.5
    anneal_period: int = 20
    weight_decay: float = 0.0001
    epochs: int = 100
    seed: int = 0
    dtype: str = "float32"
    f_average: str = "macro"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        if not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_factor must lie in (0, 1]")
        if self.anneal_period < 1 or self.epochs < 0:
            raise ValueError("anneal_period must be positive and epochs non-negative")
        if self.f_average not in ("macro", "weighted"):
            raise ValueError("f_average must be 'macro' or 'weighted'")


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Step decay: multiply by ``anneal_factor`` every ``anneal_period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.base_lr * config.anneal_factor ** (epoch // config.anneal_period)


# --------------------------------------------------------------------------
# metrics


def confusion_matrix(true, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    f_measure: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray


def metrics_from_confusion(cm, average: str = "macro") -> ClassificationMetrics:
    """Accuracy and averaged F-measure from a (true x predicted) count matrix.

    A class that is never predicted has precision 0; one that never occurs
    has recall 0; F is 0 whenever precision + recall is 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    if average == "macro":
        f = float(f1.mean())
    elif average == "weighted":
        f = float((f1 * actual).sum() / total)
    else:
        raise ValueError(f"unknown averaging {average!r}")
    return ClassificationMetrics(float(tp.sum() / total), f, precision, recall, f1)


def evaluate(net: PhonationNet, segs: SegmentSet) -> np.ndarray:
    """Confusion matrix of ``net``'s argmax predictions on ``segs``."""
    if len(segs) == 0:
        raise ValueError("cannot evaluate on an empty segment set")
    return confusion_matrix(segs.labels, net.predict(segs.values), net.config.n_classes)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_accuracy: float | None


@dataclass
class FoldResult:
    net: PhonationNet
    history: list[EpochRecord]
    best_epoch: int | None
    optimizer: AdamState | None = None


def train_fold(net: PhonationNet, train: SegmentSet, val: SegmentSet | None,
               config: TrainConfig, progress=None) -> FoldResult:
    """Train ``net`` in place and return the best-on-validation copy.

    Without a validation set the final parameters are kept.  Validation
    ties resolve to the later epoch.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    expected = tuple(net.config.input_shape[1:])
    if tuple(train.values.shape[1:]) != expected:
        raise ValueError(f"segments {train.values.shape[1:]} do not match network input {expected}")

    dtype = np.dtype(config.dtype)
    if net.dtype != dtype:
        net = net.astype(dtype)
    x_all = train.values[:, None].astype(dtype)
    y_all = train.labels
    params = net.parameters
    state = AdamState.for_params(params, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    history: list[EpochRecord] = []
    best = (net.copy(), None, -1.0)
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        order = rng.permutation(len(train))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            net.zero_grad()
            with Tape() as tape:
                loss = ad.softmax_cross_entropy(net(x_all[idx]), y_all[idx])
            tape.backward(loss, params)
            ad.adam_step(params, state, lr)
            loss_sum += float(loss.data) * idx.size
        mean_loss = loss_sum / len(order)
        if not math.isfinite(mean_loss):
            raise FloatingPointError(f"loss diverged at epoch {epoch}")

        val_acc = None
        if val is not None and len(val):
            val_acc = metrics_from_confusion(evaluate(net, val)).accuracy
            if val_acc >= best[2]:
                best = (net.copy(), epoch, val_acc)
        history.append(EpochRecord(epoch, lr, mean_loss, val_acc))
        if progress is not None:
            progress(history[-1])

    if val is None or not len(val) or not history:
        return FoldResult(net, history, len(history) - 1 if history else None, state)
    return FoldResult(best[0], history, best[1], state)


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldReport:
    fold: int
    accuracy: float
    f_measure: float
    val_accuracy: float | None
    best_epoch: int | None
    confusion: np.ndarray
    n_train: int
    n_val: int

    def to_dict(self) -> dict:
        return {
            "fold": self.fold, "accuracy": self.accuracy, "f_measure": self.f_measure,
            "val_accuracy": self.val_accuracy, "best_epoch": self.best_epoch,
            "confusion": self.confusion.tolist(), "n_train": self.n_train, "n_val": self.n_val,
        }


@dataclass
class MetricsReport:
    folds: list[FoldReport]
    f_average: str = "macro"

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    @property
    def f_measures(self) -> np.ndarray:
        return np.array([f.f_measure for f in self.folds])

    # population standard deviation over folds
    @property
    def accuracy_mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def accuracy_std(self) -> float:
        return float(self.accuracies.std())

    @property
    def f_mean(self) -> float:
        return float(self.f_measures.mean())

    @property
    def f_std(self) -> float:
        return float(self.f_measures.std())

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": {
                "accuracy_mean": self.accuracy_mean, "accuracy_std": self.accuracy_std,
                "f_mean": self.f_mean, "f_std": self.f_std, "f_average": self.f_average,
                "n_folds": len(self.folds),
            },
        }

    def format(self) -> str:
        lines = []
        for f in self.folds:
            lines.append(f"fold {f.fold}: accuracy {f.accuracy:.4f}  F {f.f_measure:.4f}"
                         f"  (best epoch {f.best_epoch}, val accuracy "
                         f"{'n/a' if f.val_accuracy is None else format(f.val_accuracy, '.4f')})")
        lines.append(f"mean accuracy {100 * self.accuracy_mean:.2f}% ({self.accuracy_std:.4f})")
        lines.append(f"mean {self.f_average} F {self.f_mean:.3f} ({self.f_std:.4f})")
        return "\n".join(lines)


def fold_datasets(train: SegmentSet, folds: FoldSplit, fold: int) -> tuple[SegmentSet, SegmentSet]:
    """Training segments of every other fold and the held-out fold's segments."""
    held = set(folds.members(fold))
    unknown = set(train.clip_ids) - set(folds.assignments)
    if unknown:
        raise ValueError(f"{len(unknown)} training clips have no fold assignment")
    in_val = np.array([c in held for c in train.clip_ids], dtype=bool)
    return train.subset(~in_val), train.subset(in_val)


def run_fold(fold: int, train: SegmentSet, test: SegmentSet, folds: FoldSplit,
             net_config: NetworkConfig, config: TrainConfig) -> tuple[FoldReport, FoldResult]:
    fold_train, fold_val = fold_datasets(train, folds, fold)
    net = build_network(dataclasses.replace(net_config, seed=net_config.seed + fold),
                        dtype=np.dtype(config.dtype))
    fold_cfg = dataclasses.replace(config, seed=config.seed + 1000 * fold)
    result = train_fold(net, fold_train, fold_val, fold_cfg)
    metrics = metrics_from_confusion(cm := evaluate(result.net, test), config.f_average)
    val_acc = None
    if result.best_epoch is not None and result.history:
        val_acc = result.history[result.best_epoch].val_accuracy
    report = FoldReport(fold, metrics.accuracy, metrics.f_measure, val_acc, result.best_epoch,
                        cm, len(fold_train), len(fold_val))
    log.info("fold %d: accuracy %.4f F %.4f", fold, metrics.accuracy, metrics.f_measure)
    return report, result


def cross_validate(train: SegmentSet, test: SegmentSet, folds: FoldSplit,
                   net_config: NetworkConfig, config: TrainConfig,
                   on_fold=None, executor=None) -> MetricsReport:
    """Train one fresh model per fold and score each on the shared test set.

    ``on_fold(report, result)`` is called as folds finish, in fold order.
    An ``executor`` with a ``map`` method runs folds concurrently.
    """
    jobs = [(k, train, test, folds, net_config, config) for k in range(folds.n_folds)]
    mapper = executor.map if executor is not None else map
    reports = []
    for report, result in mapper(_run_fold_job, jobs):
        reports.append(report)
        if on_fold is not None:
            on_fold(report, result)
    return MetricsReport(reports, config.f_average)


def _run_fold_job(job):
    return run_fold(*job)

