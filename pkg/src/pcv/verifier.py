"""Epsilon sweep: clean vs. perturbed accuracy, adversarial set, tipping set."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pointnet
from .data import PointCloud, load_cloud, save_cloud, stack
from .errors import UsageError
from .perturbation import PerturbationSpec, hybrid_p, noise_stream
from .tensor import GradTape, Tensor, nll_loss
from .training import EVAL_BATCH

REPORT_HEADER = ["epsilon", "clean_accuracy", "perturbed_accuracy", "adversarial_count",
                 "in_tipping_set"]
INDEX_HEADER = ["sample_id", "epsilon", "true_label", "i_pred", "f_pred"]


@dataclass
class AttackOutcome:
    sample_id: str
    epsilon: float
    i_pred: int
    f_pred: int
    label: int
    cloud: np.ndarray | None = None

    @property
    def success(self):
        return self.i_pred != self.f_pred


@dataclass
class SweepRow:
    epsilon: float
    i_acc: float
    f_acc: float
    adversarial_count: int
    in_tipping_set: bool


@dataclass
class SweepReport:
    rows: list
    adversarial: list = field(default_factory=list)
    absolute_threshold: bool = False

    @property
    def tipping_set(self):
        return [r.epsilon for r in self.rows if r.in_tipping_set]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([repr(float(r.epsilon)), repr(r.i_acc), repr(r.f_acc),
                            r.adversarial_count, int(r.in_tipping_set)])


def below_threshold(i_acc, f_acc, absolute=False):
    """The tipping rule: f_acc <= 50% of i_acc, or <= 0.5 when ``absolute``."""
    return f_acc <= 0.5 if absolute else f_acc <= i_acc * 0.5


def tipping_point(report):
    eps = report.tipping_set
    return min(eps) if eps else None


def input_gradients(params, clouds, batch_size=EVAL_BATCH):
    """Clean log-probabilities and d(nll)/d(input) for every cloud.

    The loss is the batch mean, so each sample's gradient is scaled by
    1/batch; only its sign is used downstream.
    """
    logps, grads = [], []
    for start in range(0, len(clouds), batch_size):
        chunk = clouds[start:start + batch_size]
        with GradTape() as tape:
            x = tape.watch(Tensor(stack(chunk)))
            logp = pointnet.forward(params, x)
            loss = nll_loss(logp, [c.label for c in chunk])
        tape.zero_grad()
        tape.backward(loss)
        logps.append(logp.data)
        grads.append(x.grad)
    return np.concatenate(logps), np.concatenate(grads)


def verify(params, clouds, epsilons, *, noise=True, noise_seed=0, absolute_threshold=False,
           clip=(0.0, 1.0), batch_size=EVAL_BATCH):
    """Attack every sample at every epsilon and tabulate accuracies.

    A sample joins the adversarial set when its perturbed prediction differs
    from its clean prediction. An epsilon joins the tipping set when the
    perturbed accuracy falls to half the clean accuracy or below.
    """
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise UsageError("epsilon grid is empty")
    if not clouds:
        raise UsageError("validation set is empty")
    if any(e < 0 for e in epsilons) or epsilons != sorted(epsilons):
        raise UsageError(f"epsilons must be non-negative and ascending, got {epsilons}")
    k = params.config.num_classes
    labels = np.array([c.label for c in clouds])
    if labels.min() < 0 or labels.max() >= k:
        raise UsageError(f"dataset labels do not fit a {k}-class model")

    # clean outputs and gradients do not depend on epsilon
    logp, grad = input_gradients(params, clouds, batch_size)
    i_pred = np.array(pointnet.argmax_rows(logp))
    n = len(clouds)
    i_correct = int(np.sum(i_pred == labels))
    i_acc = i_correct / n
    x = stack(clouds)

    rows, adversarial = [], []
    for eps in epsilons:
        spec = PerturbationSpec(eps, noise_seed, clip[0], clip[1], noise)
        perturbed = np.stack([
            hybrid_p(x[i], spec, grad[i], rng=noise_stream(noise_seed, i)) for i in range(n)
        ])
        f_pred = np.array([
            p for start in range(0, n, batch_size)
            for p in pointnet.predict(params, perturbed[start:start + batch_size])
        ])
        f_acc = int(np.sum(f_pred == labels)) / n
        flipped = np.flatnonzero(f_pred != i_pred)
        for i in flipped:
            adversarial.append(AttackOutcome(
                clouds[i].id, eps, int(i_pred[i]), int(f_pred[i]), int(labels[i]), perturbed[i],
            ))
        rows.append(SweepRow(eps, i_acc, f_acc, len(flipped),
                             below_threshold(i_acc, f_acc, absolute_threshold)))
    return SweepReport(rows, adversarial, absolute_threshold)


def adversarial_filename(sample_id, eps):
    return f"{sample_id}_eps{float(eps)!r}.txt"


def export_adversarial_set(outcomes, out_dir):
    """Write each perturbed cloud plus ``index.csv``; returns the index path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        index = out_dir / "index.csv"
        with open(index, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(INDEX_HEADER)
            for o in outcomes:
                if o.cloud is None:
                    raise UsageError(f"outcome for {o.sample_id} carries no perturbed cloud")
                name = adversarial_filename(o.sample_id, o.epsilon)
                save_cloud(PointCloud(o.cloud, o.label, o.sample_id), out_dir / name)
                w.writerow([o.sample_id, repr(float(o.epsilon)), o.label, o.i_pred, o.f_pred])
    except OSError as exc:
        raise OSError(f"cannot export adversarial set to {out_dir}: {exc}") from exc
    return index


def load_adversarial_set(out_dir):
    out_dir = Path(out_dir)
    outcomes = []
    with open(out_dir / "index.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            name = adversarial_filename(row["sample_id"], float(row["epsilon"]))
            cloud = load_cloud(out_dir / name, row["sample_id"])
            outcomes.append(AttackOutcome(
                row["sample_id"], float(row["epsilon"]), int(row["i_pred"]), int(row["f_pred"]),
                int(row["true_label"]), cloud.points,
            ))
    return outcomes
