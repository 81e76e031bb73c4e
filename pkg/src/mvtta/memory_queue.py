"""FIFO memory of (unit embedding, probability) pairs with exact kNN soft voting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-9


@dataclass(frozen=True)
class QueueEntry:
    embedding: np.ndarray
    probs: np.ndarray
    counter: int


def l2_normalize(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero embedding")
    return z / norms


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


class MemoryQueue:
    """Ring buffer of capacity ``capacity``; the oldest entry is evicted first.

    Every pushed entry gets a strictly increasing insertion counter starting
    at 1. Embeddings must already be unit-norm.
    """

    def __init__(self, capacity: int, embed_dim: int, n_classes: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._emb = np.zeros((capacity, embed_dim))
        self._probs = np.zeros((capacity, n_classes))
        self._counter = np.zeros(capacity, dtype=np.int64)
        self._next = 0  # slot for the next push
        self._size = 0
        self.pushed = 0

    def __len__(self):
        return self._size

    def push(self, embedding, probs) -> None:
        embedding = np.asarray(embedding, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        if embedding.shape != self._emb.shape[1:] or probs.shape != self._probs.shape[1:]:
            raise ValueError("entry shape does not match the queue")
        if abs(np.linalg.norm(embedding) - 1.0) > NORM_TOL:
            raise ValueError("queue embeddings must be L2-normalized")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > NORM_TOL:
            raise ValueError("queue probabilities must form a distribution")
        self.pushed += 1
        self._emb[self._next] = embedding
        self._probs[self._next] = probs
        self._counter[self._next] = self.pushed
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def push_many(self, embeddings, probs) -> None:
        for e, p in zip(embeddings, probs):
            self.push(e, p)

    def entries(self) -> list[QueueEntry]:
        """Stored entries, oldest first."""
        order = np.argsort(self._counter[: self._size], kind="stable")
        return [QueueEntry(self._emb[i].copy(), self._probs[i].copy(), int(self._counter[i]))
                for i in order]

    def nearest(self, embedding: np.ndarray, k: int) -> np.ndarray:
        """Slots of the ``k`` closest entries by (distance, insertion counter)."""
        n = self._size
        dist = 1.0 - (self._emb[:n] * embedding).sum(axis=1)
        if k < n:
            kth = np.partition(dist, k - 1)[k - 1]
            cand = np.flatnonzero(dist <= kth)
        else:
            cand = np.arange(n)
        order = np.lexsort((self._counter[cand], dist[cand]))
        return cand[order[:k]]

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "pushed": self.pushed,
            "entries": [
                {"counter": e.counter, "embedding": e.embedding.tolist(), "probs": e.probs.tolist()}
                for e in self.entries()
            ],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")


def knn_refine(queue: MemoryQueue, embedding, fallback_probs, k: int) -> tuple[np.ndarray, int]:
    """Average the probabilities of the ``k`` nearest queue entries.

    Falls back to ``fallback_probs`` while the queue holds fewer than ``k``
    entries. Returns ``(refined_probs, argmax)`` with ties going to the lowest
    class index.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if len(queue) < k:
        refined = np.asarray(fallback_probs, dtype=np.float64).copy()
    else:
        idx = queue.nearest(np.asarray(embedding, dtype=np.float64), k)
        refined = queue._probs[idx].sum(axis=0) / k
    return refined, int(np.argmax(refined))


def knn_refine_batch(queue: MemoryQueue, embeddings, fallback_probs, k: int):
    refined = np.empty_like(np.asarray(fallback_probs, dtype=np.float64))
    labels = np.empty(len(refined), dtype=int)
    for i, (z, p) in enumerate(zip(embeddings, fallback_probs)):
        refined[i], labels[i] = knn_refine(queue, z, p, k)
    return refined, labels
