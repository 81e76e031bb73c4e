"""Test-time self-distillation: losses and the adaptation loop.

Per mini-batch the momentum model labels weak views through kNN voting over
the memory queue, the adapted model is trained on strong views against the
label-smoothed votes plus a batch diversity term, then the momentum model
takes an EMA step and the weak-view entries join the queue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import augment
from .augment import AugmentSpec
from .datagen import ViewSample
from .memory_queue import MemoryQueue, knn_refine_batch, l2_normalize
from .model import (PROB_FLOOR, Model, MomentumModel, NumericalError, Params, backward,
                    diversity_value, ema_update, sgd_step)
from .pdc import PseudoLabeledSet

WARMUP = 3  # augmentation kind used for the queue warm-up pass


def smooth_label(cls: int, n_classes: int, epsilon: float) -> np.ndarray:
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if not 0 <= cls < n_classes:
        raise ValueError(f"class {cls} out of range for {n_classes} classes")
    y = np.full(n_classes, epsilon / n_classes)
    y[cls] += 1.0 - epsilon
    return y


def smooth_labels(classes, n_classes: int, epsilon: float) -> np.ndarray:
    return np.stack([smooth_label(int(c), n_classes, epsilon) for c in classes])


def ce_loss(pred_probs, targets) -> float:
    p = np.atleast_2d(np.asarray(pred_probs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if p.shape != y.shape or p.shape[0] == 0:
        raise ValueError("predictions and targets must share a non-empty (N, C) shape")
    return float(-(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean())


def diversity_loss(pred_probs) -> float:
    p = np.atleast_2d(np.asarray(pred_probs, dtype=np.float64))
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    return diversity_value(p.mean(axis=0))


def total_loss(ce: float, div: float) -> float:
    return ce + div


@dataclass
class AdaptConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    beta: float = 0.9
    ema_m: float = 0.999
    epsilon: float = 0.1
    k: int = 3
    queue_capacity: int = 4096
    queue_aug: str = "weak"
    diversity: bool = True
    aug: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_m < 1.0:
            raise ValueError("ema_m must lie in [0, 1)")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.queue_aug not in ("weak", "strong"):
            raise ValueError("queue_aug must be 'weak' or 'strong'")
        if self.batch_size < 1 or self.k < 1 or self.epochs < 0:
            raise ValueError("batch_size and k must be positive, epochs non-negative")


@dataclass
class LossRecord:
    epoch: int
    step: int
    ce: float
    div: float
    total: float


def _view_keys(samples) -> list[tuple[int, int]]:
    return [(i, s.view_id) for i, s in samples]


def momentum_entries(momentum: MomentumModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit embeddings and probabilities of the momentum model."""
    z, p = momentum.forward(x)
    return l2_normalize(z), p


def warm_up_queue(momentum: MomentumModel, queue: MemoryQueue, samples: Sequence[ViewSample],
                  aug: AugmentSpec, batch_size: int = 256) -> None:
    """One weakly augmented pass of the momentum model over ``samples``."""
    for start in range(0, len(samples), batch_size):
        chunk = list(enumerate(samples[start:start + batch_size], start))
        x = np.stack([s.features for _, s in chunk])
        xw = augment.augment_batch(x, _view_keys(chunk), aug, 0, WARMUP)
        queue.push_many(*momentum_entries(momentum, xw))


def adapt_epoch(model: Model, momentum: MomentumModel, queue: MemoryQueue,
                calibrated: PseudoLabeledSet, config: AdaptConfig, epoch: int,
                velocity: Params, hook: Callable[[dict], None] | None = None) -> list[LossRecord]:
    """One shuffled pass over ``calibrated``; mutates model, momentum, queue, velocity."""
    n = len(calibrated)
    C = model.arch.n_classes
    order = np.random.default_rng([config.seed, epoch]).permutation(n)
    trace = []
    for step, start in enumerate(range(0, n, config.batch_size)):
        items = [calibrated.items[i] for i in order[start:start + config.batch_size]]
        x = np.stack([it.sample.features for it in items])
        keys = [(it.index, it.sample.view_id) for it in items]

        xw = augment.augment_batch(x, keys, config.aug, epoch, augment.WEAK)
        w, pw = momentum_entries(momentum, xw)
        if config.queue_aug == "strong":
            xs2 = augment.augment_batch(x, keys, config.aug, epoch, augment.STRONG_ALT)
            q_emb, q_probs = momentum_entries(momentum, xs2)
        else:
            q_emb, q_probs = w, pw
        refined, labels = knn_refine_batch(queue, w, pw, config.k)
        targets = smooth_labels(labels, C, config.epsilon)

        xs = augment.augment_batch(x, keys, config.aug, epoch, augment.STRONG)
        terms, grad = backward(model, xs, targets, diversity=config.diversity)
        if not math.isfinite(terms.total):
            raise NumericalError(f"non-finite loss at epoch {epoch} step {step}: {terms}")
        sgd_step(model, grad, config.lr, velocity, config.beta)
        ema_update(momentum, model, config.ema_m)
        queue.push_many(q_emb, q_probs)

        trace.append(LossRecord(epoch, step, terms.ce, terms.div, terms.total))
        if hook is not None:
            hook({"epoch": epoch, "step": step, "keys": keys, "weak_embeddings": w,
                  "weak_probs": pw, "refined": refined, "labels": labels,
                  "targets": targets, "loss": terms})
    return trace


@dataclass
class TSDResult:
    model: Model
    momentum: MomentumModel
    queue: MemoryQueue
    trace: list[LossRecord]


def run_tsd(source: Model, calibrated: PseudoLabeledSet, target_views: Sequence[ViewSample],
            config: AdaptConfig, hook=None) -> TSDResult:
    """Warm the queue on all target views, then adapt for ``config.epochs``."""
    model = source.copy()
    momentum = MomentumModel.from_model(source, config.ema_m)
    queue = MemoryQueue(config.queue_capacity, source.arch.embed_dim, source.arch.n_classes)
    warm_up_queue(momentum, queue, target_views, config.aug)
    velocity = model.params.zeros_like()
    trace = []
    for epoch in range(config.epochs):
        trace.extend(adapt_epoch(model, momentum, queue, calibrated, config, epoch, velocity, hook))
    return TSDResult(model, momentum, queue, trace)
