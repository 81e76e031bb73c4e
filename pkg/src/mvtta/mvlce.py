"""Multi-view local clustering and ensembling.

Each view is refined by kNN soft voting against the memory queue and the
refined views of a patient are averaged. ``predict_offline`` runs after
adaptation; ``predict_online`` processes a patient stream with frozen
parameters, growing the queue only from patients already seen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .datagen import PatientRecord
from .memory_queue import MemoryQueue, knn_refine_batch, l2_normalize
from .model import Model


@dataclass
class PatientPrediction:
    patient_id: str
    probs: np.ndarray
    pred: int
    view_ids: list[int]
    view_probs: np.ndarray  # (M, C), rows ordered by view id

    @property
    def view_preds(self) -> np.ndarray:
        return np.argmax(self.view_probs, axis=1)


def multiview_ensemble(view_probs) -> np.ndarray:
    """Unweighted mean of per-view probability vectors."""
    vp = np.asarray(view_probs, dtype=np.float64)
    if vp.ndim != 2 or vp.shape[0] == 0:
        raise ValueError("need at least one view probability vector")
    return vp.sum(axis=0) / vp.shape[0]


def _sorted_views(patient: PatientRecord):
    if not patient.views:
        raise ValueError(f"patient {patient.patient_id} has no views")
    views = sorted(patient.views, key=lambda v: v.view_id)
    return views, np.stack([v.features for v in views])


def _prediction(patient_id, view_ids, view_probs) -> PatientPrediction:
    probs = multiview_ensemble(view_probs)
    return PatientPrediction(patient_id, probs, int(np.argmax(probs)), view_ids, view_probs)


def predict_direct(model: Model, patients: Sequence[PatientRecord]) -> list[PatientPrediction]:
    """Per-view model probabilities without kNN refinement."""
    out = []
    for p in patients:
        views, x = _sorted_views(p)
        out.append(_prediction(p.patient_id, [v.view_id for v in views], model.predict_proba(x)))
    return out


def build_queue(model: Model, patients: Sequence[PatientRecord], capacity: int) -> MemoryQueue:
    """Queue of un-augmented embeddings/probabilities of every view, in dataset order."""
    queue = MemoryQueue(capacity, model.arch.embed_dim, model.arch.n_classes)
    for p in patients:
        _, x = _sorted_views(p)
        z, probs = model.forward(x)
        queue.push_many(l2_normalize(z), probs)
    return queue


def predict_offline(model: Model, queue: MemoryQueue, patients: Sequence[PatientRecord],
                    k: int) -> list[PatientPrediction]:
    """kNN-refine every view against ``queue`` (read only), then ensemble per patient.

    ``model`` is the momentum model once adaptation is over; inputs are not
    augmented.
    """
    out = []
    for p in patients:
        views, x = _sorted_views(p)
        z, probs = model.forward(x)
        refined, _ = knn_refine_batch(queue, l2_normalize(z), probs, k)
        out.append(_prediction(p.patient_id, [v.view_id for v in views], refined))
    return out


def predict_online(model: Model, queue: MemoryQueue, stream: Iterable[PatientRecord],
                   k: int) -> Iterator[PatientPrediction]:
    """Causal variant: a patient is refined against earlier patients only.

    After each prediction the patient's raw (embedding, probability) pairs
    are pushed, so ``queue`` is mutated but ``model`` never is.
    """
    for p in stream:
        views, x = _sorted_views(p)
        z, probs = model.forward(x)
        z = l2_normalize(z)
        refined, _ = knn_refine_batch(queue, z, probs, k)
        yield _prediction(p.patient_id, [v.view_id for v in views], refined)
        queue.push_many(z, probs)
