"""Hybrid sign-gradient perturbation: signed step, scaled Gaussian noise, clip."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, NumericError
from .tensor import DTYPE


@dataclass(frozen=True)
class PerturbationSpec:
    epsilon: float
    noise_seed: int = 0
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    noise: bool = True

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise DomainError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.clip_lo < self.clip_hi:
            raise DomainError(f"clip range [{self.clip_lo}, {self.clip_hi}] is empty")


def sign(grad):
    """Elementwise sign in {-1, 0, +1}, with sign(0) == 0."""
    arr = np.asarray(grad, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError("sign() of a non-finite gradient entry")
    return np.sign(arr).astype(DTYPE)


def noise_stream(noise_seed, sample_index=0):
    return np.random.default_rng(np.random.SeedSequence([int(noise_seed), int(sample_index)]))


def hybrid_p(x, spec, grad, rng=None):
    """Perturb ``x`` by ``epsilon * sign(grad)``, add ``epsilon * N(0, 1)``
    noise, then clamp to ``[clip_lo, clip_hi]``.

    ``rng`` supplies the normal draws; by default it is seeded from
    ``spec.noise_seed``. With ``spec.noise`` off the result is plain FGSM.
    """
    x = np.asarray(x, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if x.shape != grad.shape:
        raise DimensionError(f"input shape {x.shape} does not match gradient shape {grad.shape}")
    eps = DTYPE(spec.epsilon)
    out = x + eps * sign(grad)
    if spec.noise:
        if rng is None:
            rng = np.random.default_rng(spec.noise_seed)
        g = rng.standard_normal(x.shape).astype(DTYPE)
        out = out + eps * g
    return np.clip(out, DTYPE(spec.clip_lo), DTYPE(spec.clip_hi)).astype(DTYPE)
