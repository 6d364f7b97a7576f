"""Interval bound propagation through PointNet-lite and per-sample certification.

Bounds are pushed through the network in float64 with center/radius
arithmetic for affine layers and monotone maps for ReLU and max-pool. The
final bounds are widened by a small slack that covers the float32 rounding of
the concrete forward pass they are compared against.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from . import pointnet
from .data import PointCloud
from .errors import SoundnessError, UsageError
from .perturbation import PerturbationSpec, hybrid_p
from .tensor import DTYPE, Tensor
from .verifier import input_gradients

# relative + absolute allowance for float32 rounding in the concrete forward pass
ROUNDING_SLACK = 2e-6

CERT_HEADER = ["sample_id", "epsilon", "verdict", "label_logit_lower", "best_other_upper"]


@dataclass
class IntervalTensor:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower)
        self.upper = np.asarray(self.upper)
        if self.lower.shape != self.upper.shape:
            raise SoundnessError(f"bound shapes differ: {self.lower.shape} vs {self.upper.shape}")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise SoundnessError("non-finite interval bound")
        if np.any(self.lower > self.upper):
            raise SoundnessError("interval inversion: lower > upper")

    @property
    def shape(self):
        return self.lower.shape

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, values):
        values = np.asarray(values)
        return (values >= self.lower) & (values <= self.upper)


def input_ball(x, eps, lo=0.0, hi=1.0):
    """The L-infinity ball of radius ``eps`` around ``x``, clipped to [lo, hi].

    Computed in float32 exactly as the attack computes ``x +/- eps``, so every
    attacked input lies inside it.
    """
    x = np.asarray(x.points if hasattr(x, "points") else x, dtype=DTYPE)
    e = DTYPE(eps)
    return IntervalTensor(
        np.clip(x - e, DTYPE(lo), DTYPE(hi)),
        np.clip(x + e, DTYPE(lo), DTYPE(hi)),
    )


def _affine(lower, upper, weight, bias):
    w = weight.astype(np.float64)
    center = (lower + upper) / 2
    radius = (upper - lower) / 2
    c = center @ w + bias.astype(np.float64)
    r = radius @ np.abs(w)
    return c - r, c + r


def _log_softmax_bounds(lo, hi):
    """Per-class bounds of log_softmax over the score box [lo, hi].

    log_softmax_j increases with score j and decreases with every other
    score, so the extremes sit at opposite corners for each class.
    """
    k = lo.shape[-1]
    out_lo = np.empty_like(lo)
    out_hi = np.empty_like(hi)
    for j in range(k):
        others = [i for i in range(k) if i != j]
        worst = np.concatenate([lo[..., j:j + 1], hi[..., others]], axis=-1)
        best = np.concatenate([hi[..., j:j + 1], lo[..., others]], axis=-1)
        out_lo[..., j] = lo[..., j] - _logsumexp(worst)
        out_hi[..., j] = hi[..., j] - _logsumexp(best)
    return out_lo, np.minimum(out_hi, 0.0)


def _logsumexp(a):
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]


def _widen(lower, upper):
    slack = ROUNDING_SLACK * (1.0 + np.maximum(np.abs(lower), np.abs(upper)))
    return lower - slack, upper + slack


def _to_f32_outward(lower, upper):
    lo32 = lower.astype(DTYPE)
    hi32 = upper.astype(DTYPE)
    lo32 = np.where(lo32 > lower, np.nextafter(lo32, DTYPE(-np.inf)), lo32)
    hi32 = np.where(hi32 < upper, np.nextafter(hi32, DTYPE(np.inf)), hi32)
    return lo32, hi32


def propagate(params, iv, return_layers=False):
    """Bounds on the model's log-probabilities over the input box ``iv``.

    ``iv`` has shape (n, 3) or (b, n, 3). With ``return_layers`` the list of
    (name, IntervalTensor) for every stage is returned as well, matching
    :func:`pointnet.layer_outputs`.
    """
    cfg = params.config
    if cfg.with_input_tnet:
        raise UsageError("interval propagation does not support the input T-Net")
    if iv.shape[-1] != 3 or len(iv.shape) not in (2, 3):
        raise UsageError(f"input box must be (n, 3) or (b, n, 3), got {iv.shape}")
    lower = np.asarray(iv.lower, dtype=np.float64)
    upper = np.asarray(iv.upper, dtype=np.float64)
    layers = []

    def record(name, lo, hi):
        if np.any(lo > hi):
            raise SoundnessError(f"interval inversion after {name}")
        if return_layers:
            layers.append((name, IntervalTensor(*_to_f32_outward(*_widen(lo, hi)))))

    for i in range(len(cfg.point_mlp_widths)):
        lower, upper = _affine(lower, upper, params[f"mlp.{i}.weight"].data, params[f"mlp.{i}.bias"].data)
        lower, upper = np.maximum(lower, 0.0), np.maximum(upper, 0.0)
        record(f"mlp.{i}", lower, upper)
    lower, upper = lower.max(axis=-2), upper.max(axis=-2)
    record("maxpool", lower, upper)
    for i in range(len(cfg.head_widths)):
        lower, upper = _affine(lower, upper, params[f"head.{i}.weight"].data, params[f"head.{i}.bias"].data)
        lower, upper = np.maximum(lower, 0.0), np.maximum(upper, 0.0)
        record(f"head.{i}", lower, upper)
    lower, upper = _affine(lower, upper, params["out.weight"].data, params["out.bias"].data)
    record("scores", lower, upper)
    lower, upper = _log_softmax_bounds(lower, upper)
    record("log_softmax", lower, upper)
    out = IntervalTensor(*_to_f32_outward(*_widen(lower, upper)))
    return (out, layers) if return_layers else out


class Verdict(enum.Enum):
    ROBUST = "robust"
    FALSIFIED = "falsified"
    UNKNOWN = "unknown"


@dataclass
class Certificate:
    verdict: Verdict
    label: int
    epsilon: float
    bounds: IntervalTensor
    witness: np.ndarray | None = None
    witness_pred: int | None = None

    @property
    def label_lower(self):
        return float(self.bounds.lower[self.label])

    @property
    def best_other_upper(self):
        others = np.delete(self.bounds.upper, self.label)
        return float(others.max())


def certify(params, x, label, eps, grad=None):
    """Robust when the label's lower bound beats every other class's upper
    bound; otherwise try a noise-free signed-gradient attack inside the ball.
    """
    points = np.asarray(x.points if hasattr(x, "points") else x, dtype=DTYPE)
    bounds = propagate(params, input_ball(points, eps))
    cert = Certificate(Verdict.UNKNOWN, int(label), float(eps), bounds)
    if cert.label_lower > cert.best_other_upper:
        cert.verdict = Verdict.ROBUST
        return cert
    if grad is None:
        grad = input_gradients(params, [PointCloud(points, int(label))])[1][0]
    adv = hybrid_p(points, PerturbationSpec(eps, noise=False), grad)
    pred = pointnet.predict(params, adv[None])[0]
    if pred != label:
        cert.verdict = Verdict.FALSIFIED
        cert.witness = adv
        cert.witness_pred = pred
    return cert


def certify_all(params, clouds, epsilons):
    """Certify every cloud at every epsilon; returns (sample_id, Certificate) rows."""
    _, grads = input_gradients(params, clouds)
    rows = []
    for eps in epsilons:
        for cloud, grad in zip(clouds, grads):
            rows.append((cloud.id, certify(params, cloud, cloud.label, eps, grad=grad)))
    return rows


def write_certification_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CERT_HEADER)
        for sample_id, cert in rows:
            w.writerow([sample_id, repr(cert.epsilon), cert.verdict.value,
                        repr(cert.label_lower), repr(cert.best_other_upper)])


def concrete_logprobs(params, points):
    return pointnet.forward(params, Tensor(np.asarray(points, dtype=DTYPE))).data
