"""SGD-with-momentum training of PointNet-lite and accuracy evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import pointnet
from .data import stack
from .errors import DomainError, TrainingError, UsageError
from .tensor import DTYPE, GradTape, nll_loss

log = logging.getLogger(__name__)

EVAL_BATCH = 32


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise UsageError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        return [
            (i + 1, loss, tacc, vacc)
            for i, (loss, tacc, vacc) in enumerate(zip(self.train_loss, self.train_acc, self.val_acc))
        ]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for epoch, loss, tacc, vacc in self.rows():
                w.writerow([epoch, repr(loss), repr(tacc), repr(vacc)])


def batch_logprobs(params, clouds, batch_size=EVAL_BATCH):
    """Forward pass over ``clouds`` in fixed-size chunks, (N, k) float32."""
    out = []
    for start in range(0, len(clouds), batch_size):
        out.append(pointnet.forward(params, stack(clouds[start:start + batch_size])).data)
    return np.concatenate(out)


def predict_clouds(params, clouds, batch_size=EVAL_BATCH):
    return pointnet.argmax_rows(batch_logprobs(params, clouds, batch_size))


def evaluate(params, clouds, num_classes=None):
    """Return (overall accuracy, per-class accuracy list).

    Classes with no samples get ``nan`` in the per-class list.
    """
    if not clouds:
        raise DomainError("cannot evaluate on an empty dataset")
    k = num_classes or params.config.num_classes
    preds = predict_clouds(params, clouds)
    correct = np.zeros(k, dtype=np.int64)
    total = np.zeros(k, dtype=np.int64)
    for cloud, pred in zip(clouds, preds):
        total[cloud.label] += 1
        correct[cloud.label] += pred == cloud.label
    per_class = [float(c) / t if t else float("nan") for c, t in zip(correct, total)]
    return int(correct.sum()) / len(clouds), per_class


def train(params, train_set, val_set, config):
    """Train a private copy of ``params``; return the best-on-validation snapshot."""
    k = params.config.num_classes
    labels = {c.label for c in list(train_set) + list(val_set)}
    if labels and (min(labels) < 0 or max(labels) >= k):
        raise UsageError(f"dataset labels {sorted(labels)} do not fit a {k}-class model")
    if not train_set:
        raise DomainError("empty training set")

    work = params.copy(requires_grad=True)
    velocity = {name: np.zeros_like(t.data) for name, t in work.tensors.items()}
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best = params.copy()
    best_acc = -1.0
    lr = DTYPE(config.learning_rate)
    mom = DTYPE(config.momentum)
    x_all = stack(train_set)
    y_all = np.array([c.label for c in train_set])

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        correct = 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            with GradTape() as tape:
                logp = pointnet.forward(work, x_all[idx])
                loss = nll_loss(logp, y_all[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became non-finite at epoch {epoch}, batch {bi}")
            tape.zero_grad()
            tape.backward(loss)
            grads = {name: t.grad for name, t in work.tensors.items()}
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            if not np.isfinite(norm):
                raise TrainingError(f"gradient became non-finite at epoch {epoch}, batch {bi}")
            scale = DTYPE(min(1.0, config.clip_norm / norm) if norm > 0 else 1.0)
            if lr != 0:
                for name, t in work.tensors.items():
                    v = velocity[name]
                    v *= mom
                    v += grads[name] * scale
                    t.data -= lr * v
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logp.data, axis=1) == y_all[idx]))

        frozen = work.copy()
        val_acc = evaluate(frozen, val_set)[0] if val_set else correct / len(train_set)
        history.train_loss.append(loss_sum / len(train_set))
        history.train_acc.append(correct / len(train_set))
        history.val_acc.append(val_acc)
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch,
                 history.train_loss[-1], history.train_acc[-1], val_acc)
        if val_acc > best_acc:
            best_acc, best, history.best_epoch = val_acc, frozen, epoch
    return best, history
