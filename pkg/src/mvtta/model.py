"""MLP classifier ``g = h o f`` with hand-derived gradients.

The encoder ``f`` is a stack of affine layers with a rectifier after every
hidden layer; its last layer is linear and produces the embedding. The head
``h`` is a single affine map from the embedding to class logits. Everything
runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the architecture."""


class NumericalError(FloatingPointError):
    """A non-finite value reached a parameter update or a loss."""


@dataclass
class Params:
    """Layer weights and biases; the last entry is the classification head.

    ``weights[i]`` has shape ``(out, in)`` so a layer computes ``x @ W.T + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "Params":
        return Params([np.zeros_like(w) for w in self.weights],
                      [np.zeros_like(b) for b in self.biases])

    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays()]

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 32
    n_classes: int = 3

    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) for every layer, encoder first, head last."""
        sizes = [self.input_dim, *self.hidden_dims, self.embed_dim, self.n_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["input_dim"]), tuple(int(h) for h in d.get("hidden_dims", ())),
                   int(d["embed_dim"]), int(d["n_classes"]))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Model:
    arch: Architecture
    params: Params

    @classmethod
    def init(cls, arch: Architecture, seed: int = 0) -> "Model":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in arch.layer_dims():
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(arch, Params(weights, biases))

    def copy(self) -> "Model":
        return Model(self.arch, self.params.copy())

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.arch.input_dim or x.ndim not in (1, 2):
            raise ShapeError(f"expected input of width {self.arch.input_dim}, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("input contains non-finite values")
        return x

    def _encode(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations of every encoder layer; the last one is the embedding."""
        acts = [x]
        n_enc = len(self.params.weights) - 1
        for i in range(n_enc):
            a = acts[-1] @ self.params.weights[i].T + self.params.biases[i]
            if i < n_enc - 1:
                a = np.maximum(a, 0.0)
            acts.append(a)
        return acts

    def embed(self, x) -> np.ndarray:
        """Encoder output ``f(x)`` for one vector ``(D,)`` or a batch ``(N, D)``."""
        return self._encode(self._check_input(x))[-1]

    def head(self, z: np.ndarray) -> np.ndarray:
        return z @ self.params.weights[-1].T + self.params.biases[-1]

    def logits(self, x) -> np.ndarray:
        return self.head(self.embed(x))

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(embedding, probabilities) in one pass."""
        z = self.embed(x)
        return z, softmax(self.head(z))


def embed(model: Model, x) -> np.ndarray:
    return model.embed(x)


def predict_proba(model: Model, x) -> np.ndarray:
    return model.predict_proba(x)


@dataclass
class LossTerms:
    ce: float
    div: float

    @property
    def total(self) -> float:
        return self.ce + self.div


def backward(model: Model, inputs, targets, diversity: bool = True) -> tuple[LossTerms, Params]:
    """Loss and exact gradient of ``CE(targets, p) + sum_c pbar_c log pbar_c``.

    ``inputs`` is ``(N, D)``; ``targets`` is ``(N, C)`` with rows summing to
    one, or ``None`` to drop the cross-entropy term. ``diversity`` toggles the
    batch-mean negative-entropy term. Logs are clamped at ``PROB_FLOOR`` and the
    gradient respects the clamp.
    """
    x = model._check_input(inputs)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts = model._encode(x)
    z = acts[-1]
    p = softmax(model.head(z))

    grad_p = np.zeros_like(p)
    ce = 0.0
    if targets is not None:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != p.shape:
            raise ShapeError(f"targets shape {y.shape} != predictions shape {p.shape}")
        ce = float(-(y * np.log(np.maximum(p, PROB_FLOOR))).sum() / n)
        live = p > PROB_FLOOR
        grad_p -= np.where(live, y / np.where(live, p, 1.0), 0.0) / n
    div = 0.0
    if diversity:
        pbar = p.mean(axis=0)
        div = float(diversity_value(pbar))
        dpbar = np.where(pbar > PROB_FLOOR, np.log(np.maximum(pbar, PROB_FLOOR)) + 1.0,
                         np.log(PROB_FLOOR))
        grad_p += dpbar[None, :] / n

    # softmax Jacobian: dL/dlogit = p * (g - <g, p>)
    delta = p * (grad_p - (grad_p * p).sum(axis=1, keepdims=True))

    weights = model.params.weights
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    gw[-1] = delta.T @ z
    gb[-1] = delta.sum(axis=0)
    delta = delta @ weights[-1]
    n_enc = len(weights) - 1
    for i in range(n_enc - 1, -1, -1):
        if i < n_enc - 1:
            delta = delta * (acts[i + 1] > 0.0)
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ weights[i]
    return LossTerms(ce, div), Params(gw, gb)


def diversity_value(pbar: np.ndarray) -> float:
    """``sum_c pbar_c log pbar_c`` with ``0 log 0 = 0``."""
    pbar = np.asarray(pbar, dtype=np.float64)
    return float(np.where(pbar > 0.0, pbar * np.log(np.maximum(pbar, PROB_FLOOR)), 0.0).sum())


def sgd_step(model: Model, grad: Params, lr: float, velocity: Params, beta: float = 0.9):
    """Heavy-ball step in place: ``v <- beta*v + g``; ``theta <- theta - lr*v``."""
    if not lr >= 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if grad.shapes() != model.params.shapes():
        raise ShapeError("gradient shapes do not match the model")
    if not grad.all_finite():
        raise NumericalError("non-finite gradient; update rejected")
    for theta, v, g in zip(model.params.arrays(), velocity.arrays(), grad.arrays()):
        v *= beta
        v += g
        theta -= lr * v
    return model, velocity


@dataclass
class MomentumModel:
    """EMA twin of a :class:`Model`; never touched by gradients."""

    model: Model
    m: float = 0.999

    @classmethod
    def from_model(cls, source: Model, m: float = 0.999) -> "MomentumModel":
        if not 0.0 <= m < 1.0:
            raise ValueError(f"momentum coefficient must lie in [0, 1), got {m}")
        return cls(source.copy(), m)

    @property
    def params(self) -> Params:
        return self.model.params

    def forward(self, x):
        return self.model.forward(x)

    def predict_proba(self, x):
        return self.model.predict_proba(x)


def ema_update(momentum: MomentumModel, current: Model, m: float | None = None) -> MomentumModel:
    """``theta' <- m*theta' + (1-m)*theta`` elementwise, in place."""
    m = momentum.m if m is None else m
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1), got {m}")
    if momentum.params.shapes() != current.params.shapes():
        raise ShapeError("momentum model and current model differ in shape")
    for tp, t in zip(momentum.params.arrays(), current.params.arrays()):
        # m*a + (1-m)*a can round away from a; pin converged elements
        tp[...] = np.where(tp == t, tp, m * tp + (1.0 - m) * t)
    return momentum


# --- checkpoints -----------------------------------------------------------

def model_to_dict(model: Model) -> dict:
    return {
        "architecture": model.arch.to_dict(),
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(model.params.weights, model.params.biases)
        ],
    }


def model_from_dict(d: dict) -> Model:
    arch = Architecture.from_dict(d["architecture"])
    expected = arch.layer_dims()
    layers = d["layers"]
    if len(layers) != len(expected):
        raise ShapeError(f"checkpoint has {len(layers)} layers, architecture needs {len(expected)}")
    weights, biases = [], []
    for layer, (fan_in, fan_out) in zip(layers, expected):
        w = np.asarray(layer["weight"], dtype=np.float64)
        b = np.asarray(layer["bias"], dtype=np.float64)
        if w.size != fan_in * fan_out or b.size != fan_out:
            raise ShapeError("checkpoint layer sizes disagree with the architecture")
        weights.append(w.reshape(fan_out, fan_in))
        biases.append(b)
    return Model(arch, Params(weights, biases))


def save_checkpoint(model: Model, path) -> None:
    # json writes floats with repr, the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_checkpoint(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
