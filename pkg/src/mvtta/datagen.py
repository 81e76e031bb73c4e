"""Synthetic multi-domain, multi-view benchmark and its JSON-Lines format.

Latent model: a class-``c`` sample draws ``u ~ N(mu_c, I)`` with the class
means on a regular simplex. Each domain maps latents through its own affine
``A_d u + b_d``; a target patient is observed through ``M`` further
view-specific affines plus isotropic noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np


class DataError(ValueError):
    """Malformed dataset file or record."""


class SchemaError(DataError):
    """Record violates the dataset schema (dimensions, view coverage)."""


@dataclass(eq=False)
class ViewSample:
    patient_id: str
    view_id: int
    domain_id: str
    features: np.ndarray
    label: int | None = None

    def __eq__(self, other):
        if not isinstance(other, ViewSample):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.view_id == other.view_id
                and self.domain_id == other.domain_id and self.label == other.label
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass(eq=False)
class PatientRecord:
    patient_id: str
    domain_id: str
    views: list[ViewSample]
    label: int | None = None

    def __post_init__(self):
        ids = sorted(v.view_id for v in self.views)
        if ids != list(range(1, len(self.views) + 1)):
            raise SchemaError(f"patient {self.patient_id}: view ids {ids} do not cover 1..{len(self.views)}")
        for v in self.views:
            if v.patient_id != self.patient_id or v.label != self.label:
                raise SchemaError(f"patient {self.patient_id}: view {v.view_id} disagrees on id or label")

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.domain_id == other.domain_id
                and self.label == other.label and len(self.views) == len(other.views)
                and all(a == b for a, b in zip(self.views, other.views)))


@dataclass
class SynthConfig:
    dim: int = 16
    n_classes: int = 3
    n_views: int = 4
    n_sources: int = 3
    samples_per_domain: int = 2000
    n_patients: int = 500
    class_mix: Sequence[float] = (0.5, 0.3, 0.2)
    source_class_mix: Sequence[float] | None = None
    class_sep: float = 4.5
    domain_shift_scale: float = 1.0
    view_transform_scale: float = 0.2
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("dim", "n_classes", "n_views", "n_sources", "samples_per_domain", "n_patients"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dim < self.n_classes - 1:
            raise ValueError("dim must be at least n_classes - 1 to host the class simplex")
        for name in ("class_mix", "source_class_mix"):
            mix = getattr(self, name)
            if mix is None:
                continue
            mix = np.asarray(mix, dtype=float)
            if mix.shape != (self.n_classes,) or (mix < 0).any() or abs(mix.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a probability vector of length {self.n_classes}")
        for name in ("class_sep", "domain_shift_scale", "view_transform_scale", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class SyntheticBenchmark:
    sources: list[list[ViewSample]]
    target: list[PatientRecord]
    config: SynthConfig = field(repr=False, default=None)


def class_means(n_classes: int, dim: int, sep: float) -> np.ndarray:
    """Regular-simplex vertices with pairwise distance ``sep``."""
    simplex = np.eye(n_classes) - 1.0 / n_classes
    scale = sep / np.sqrt(2.0)
    means = np.zeros((n_classes, dim))
    if dim >= n_classes:
        means[:, :n_classes] = simplex * scale
    else:
        # rotate into the (C-1)-dim hull of the simplex, preserving distances
        q, _ = np.linalg.qr(simplex.T)
        means[:] = (simplex @ q[:, : n_classes - 1])[:, :dim] * scale
    return means


def _random_affine(rng: np.random.Generator, dim: int, scale: float):
    a = np.eye(dim) + scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    b = scale * rng.standard_normal(dim)
    return a, b


def generate(config: SynthConfig) -> SyntheticBenchmark:
    config.validate()
    rng = np.random.default_rng(config.seed)
    D, C, M = config.dim, config.n_classes, config.n_views
    means = class_means(C, D, config.class_sep)
    src_mix = np.asarray(config.source_class_mix if config.source_class_mix is not None
                         else config.class_mix, dtype=float)
    tgt_mix = np.asarray(config.class_mix, dtype=float)

    domain_maps = [_random_affine(rng, D, config.domain_shift_scale) for _ in range(config.n_sources + 1)]
    view_maps = [_random_affine(rng, D, config.view_transform_scale) for _ in range(M)]

    sources = []
    for d in range(config.n_sources):
        a, b = domain_maps[d]
        n = config.samples_per_domain
        labels = rng.choice(C, size=n, p=src_mix)
        u = means[labels] + rng.standard_normal((n, D))
        x = u @ a.T + b
        dom = f"source{d}"
        sources.append([
            ViewSample(f"{dom}-{i:05d}", 1, dom, x[i], int(labels[i])) for i in range(n)
        ])

    a, b = domain_maps[-1]
    n = config.n_patients
    labels = rng.choice(C, size=n, p=tgt_mix)
    u = means[labels] + rng.standard_normal((n, D))
    base = u @ a.T + b
    per_view = []
    for av, bv in view_maps:
        per_view.append(base @ av.T + bv + config.noise_sigma * rng.standard_normal((n, D)))
    target = []
    for i in range(n):
        pid = f"patient-{i:05d}"
        lab = int(labels[i])
        views = [ViewSample(pid, v + 1, "target", per_view[v][i], lab) for v in range(M)]
        target.append(PatientRecord(pid, "target", views, lab))
    return SyntheticBenchmark(sources, target, config)


# --- JSON-Lines I/O --------------------------------------------------------

Record = Union[ViewSample, PatientRecord]


def _floats(a: np.ndarray) -> list[float]:
    return [float(v) for v in a]


def record_to_dict(rec: Record) -> dict:
    if isinstance(rec, PatientRecord):
        return {
            "patient_id": rec.patient_id,
            "domain_id": rec.domain_id,
            "label": rec.label,
            "views": [{"view_id": v.view_id, "features": _floats(v.features)} for v in rec.views],
        }
    return {
        "patient_id": rec.patient_id,
        "view_id": rec.view_id,
        "domain_id": rec.domain_id,
        "label": rec.label,
        "features": _floats(rec.features),
    }


def _label(obj):
    lab = obj.get("label")
    return None if lab is None else int(lab)


def record_from_dict(obj: dict) -> Record:
    if "views" in obj:
        pid, dom, lab = obj["patient_id"], obj["domain_id"], _label(obj)
        views = [ViewSample(pid, int(v["view_id"]), dom,
                            np.asarray(v["features"], dtype=np.float64), lab)
                 for v in obj["views"]]
        return PatientRecord(pid, dom, views, lab)
    return ViewSample(obj["patient_id"], int(obj["view_id"]), obj["domain_id"],
                      np.asarray(obj["features"], dtype=np.float64), _label(obj))


def save_jsonl(records: Iterable[Record], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")


def load_jsonl(path) -> list[Record]:
    records: list[Record] = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = record_from_dict(json.loads(line))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
            for v in iter_views([rec]):
                if v.features.ndim != 1:
                    raise SchemaError(f"{path}:{lineno}: features must be a flat list")
                if dim is None:
                    dim = v.features.shape[0]
                elif v.features.shape[0] != dim:
                    raise SchemaError(f"{path}:{lineno}: feature length {v.features.shape[0]} != {dim}")
            records.append(rec)
    return records


def iter_views(records: Iterable[Record]):
    for rec in records:
        if isinstance(rec, PatientRecord):
            yield from rec.views
        else:
            yield rec


def save_benchmark(bench: SyntheticBenchmark, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"sources": [], "target": str(out / "target.jsonl")}
    for samples in bench.sources:
        p = out / f"{samples[0].domain_id}.jsonl"
        save_jsonl(samples, p)
        paths["sources"].append(str(p))
    save_jsonl(bench.target, paths["target"])
    return paths
