"""Pseudo-label distribution calibration.

Target images are labelled with the argmax of the source model and randomly
undersampled so every pseudo-class keeps exactly ``N_m`` members, where
``N_m`` is the smallest pseudo-class count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import ViewSample
from .model import Model


class CalibrationError(ValueError):
    """A class received no pseudo-labels, so a balanced subset is undefined."""


@dataclass(frozen=True)
class LabeledItem:
    sample: ViewSample
    pseudo_label: int
    index: int  # position in the list handed to pseudo_label; stable RNG key


@dataclass
class PseudoLabeledSet:
    items: list[LabeledItem]
    n_classes: int
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        labels = np.array([it.pseudo_label for it in self.items], dtype=int)
        self.counts = np.bincount(labels, minlength=self.n_classes)[: self.n_classes]

    def __len__(self):
        return len(self.items)

    def features(self) -> np.ndarray:
        return np.stack([it.sample.features for it in self.items])


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; numpy already resolves ties to the first index."""
    return np.argmax(probs, axis=-1)


def pseudo_label(model: Model, samples: Sequence[ViewSample]) -> PseudoLabeledSet:
    C = model.arch.n_classes
    if not samples:
        return PseudoLabeledSet([], C)
    x = np.stack([s.features for s in samples])
    labels = argmax_lowest(model.predict_proba(x))
    items = [LabeledItem(s, int(c), i) for i, (s, c) in enumerate(zip(samples, labels))]
    return PseudoLabeledSet(items, C)


def balanced_undersample(pls: PseudoLabeledSet, rng: np.random.Generator) -> PseudoLabeledSet:
    """Keep ``N_m`` uniformly chosen members of every class, ``C * N_m`` in total.

    Selected items keep their original relative order.
    """
    empty = [c for c in range(pls.n_classes) if pls.counts[c] == 0]
    if empty:
        raise CalibrationError(f"no samples pseudo-labelled as class(es) {empty}; cannot balance")
    n_min = int(pls.counts.min())
    labels = np.array([it.pseudo_label for it in pls.items])
    keep = []
    for c in range(pls.n_classes):
        members = np.flatnonzero(labels == c)
        keep.append(rng.choice(members, size=n_min, replace=False))
    keep = np.sort(np.concatenate(keep))
    return PseudoLabeledSet([pls.items[i] for i in keep], pls.n_classes)
