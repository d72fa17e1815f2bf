"""SGD training loop with validation-driven early stopping.

Plain SGD (optional momentum, default off), constant learning rate, seeded
shuffling, and best-checkpoint selection by validation weighted F1.  Short
final batches are kept.  A NaN/Inf loss aborts the run with a diagnostic.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import model as model_mod
from . import ops
from .errors import DataError, NumericError
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 6
    patience: int = 50
    max_epochs: int = 200
    seed: int = 0
    momentum: float = 0.0
    selection_metric: str = "weighted_f1"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience, and max_epochs must be >= 1")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # one dict per epoch
    best_epoch: int = -1
    best_metric: float = float("-inf")
    stopped_early: bool = False

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for entry in self.epochs:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def sgd_step(params, lr, momentum=0.0, velocity=None):
    """In-place w <- w - lr * g; returns the velocity map when momentum > 0."""
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}"
            )
        if momentum > 0.0:
            v = velocity.get(id(p))
            v = momentum * v + p.grad if v is not None else p.grad.copy()
            velocity[id(p)] = v
            p.data = p.data - lr * v
        else:
            p.data = p.data - lr * p.grad
    return velocity


def _as_batch(volumes, indices, dtype):
    stack = np.stack([volumes[i].voxels for i in indices])[:, None]
    x = Tensor((stack / 255.0).astype(dtype))
    y = np.array([volumes[i].label_index for i in indices], dtype=np.int64)
    return x, y


def evaluate(model, volumes, batch_size=6):
    """Metrics report (incl. per-class AUC) and the per-sample score matrix."""
    if not volumes:
        raise DataError("cannot evaluate an empty split")
    dtype = model.fc.weight.dtype
    scores = []
    for start in range(0, len(volumes), batch_size):
        idx = range(start, min(start + batch_size, len(volumes)))
        x, _ = _as_batch(volumes, idx, dtype)
        logits = model.forward(x)
        scores.append(ops.softmax(logits.data))
    scores = np.concatenate(scores)
    labels = np.array([v.label_index for v in volumes], dtype=np.int64)
    predictions = scores.argmax(axis=1)
    cm = M.confusion(labels, predictions, model.cfg.num_classes)
    report = M.weighted_metrics(cm)
    report.per_class_auc, report.weighted_auc = M.multiclass_auc(
        scores, labels, model.cfg.num_classes
    )
    return report, scores, cm


def _selection_value(report, name):
    return getattr(report, name)


def train(model, train_volumes, val_volumes, cfg: TrainConfig):
    """Epoch loop with early stopping; returns (TrainLog, best state dict).

    The best state maps parameter names to copied arrays from the epoch with
    the highest validation selection metric.
    """
    if not train_volumes or not val_volumes:
        raise DataError("train and validation splits must both be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    named = list(model.named_parameters())
    dtype = model.fc.weight.dtype
    velocity = {} if cfg.momentum > 0 else None
    log = TrainLog()
    best_state = None

    for epoch in range(cfg.max_epochs):
        started = time.perf_counter()
        order = rng.permutation(len(train_volumes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = _as_batch(train_volumes, idx, dtype)
            logits = model.forward(x)
            loss = ops.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            model.zero_grad()
            loss.backward()
            velocity = sgd_step(params, cfg.learning_rate, cfg.momentum, velocity)
            losses.append(float(loss.data))

        report, _, _ = evaluate(model, val_volumes, cfg.batch_size)
        value = _selection_value(report, cfg.selection_metric)
        log.epochs.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_accuracy": report.accuracy,
                "val_weighted_f1": report.weighted_f1,
                "val_selection": value,
                "seconds": time.perf_counter() - started,
            }
        )
        if value > log.best_metric:
            log.best_metric = value
            log.best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in named}
        elif epoch - log.best_epoch >= cfg.patience:
            log.stopped_early = True
            break

    return log, best_state


def restore(model, state):
    """Load a best-state dict (name -> array) back into the model."""
    for name, param in model.named_parameters():
        param.data = state[name].copy()
    return model
