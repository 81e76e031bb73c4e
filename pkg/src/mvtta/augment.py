"""Weak and strong perturbations of feature vectors.

Weak: additive Gaussian jitter. Strong: random coordinate masking followed by
a larger jitter. Every draw comes from a generator keyed on
``(seed, sample, view, epoch, kind)`` so any single augmentation can be
regenerated in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEAK, STRONG, STRONG_ALT = 0, 1, 2


@dataclass(frozen=True)
class AugmentSpec:
    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    mask_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.weak_sigma < 0 or self.strong_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if self.strong_sigma < self.weak_sigma:
            raise ValueError("strong_sigma must be at least weak_sigma")


def draw_rng(seed: int, sample: int, view: int, epoch: int, kind: int) -> np.random.Generator:
    return np.random.default_rng([seed, sample, view, epoch, kind])


def weak_augment(x, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.weak_sigma == 0.0:
        return x.copy()
    return x + rng.normal(0.0, spec.weak_sigma, size=x.shape)


def strong_augment(x, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= spec.mask_prob
    out = np.where(keep, x, 0.0)
    if spec.strong_sigma > 0.0:
        out = out + rng.normal(0.0, spec.strong_sigma, size=x.shape)
    return out


def augment_batch(xs: np.ndarray, keys, spec: AugmentSpec, epoch: int, kind: int) -> np.ndarray:
    """Augment rows of ``xs``; ``keys`` holds one ``(sample, view)`` per row."""
    fn = weak_augment if kind == WEAK else strong_augment
    out = np.empty_like(np.asarray(xs, dtype=np.float64))
    for i, (sample, view) in enumerate(keys):
        out[i] = fn(xs[i], spec, draw_rng(spec.seed, sample, view, epoch, kind))
    return out
