"""Experiment orchestration: source training, offline/online adaptation, ablation.

One seed drives every random stream in a run (data generation, weight
initialization, calibration subset, augmentations, shuffling), so a
``(config, seed)`` pair determines every output file byte for byte.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .augment import AugmentSpec
from .datagen import (DataError, PatientRecord, SynthConfig, ViewSample, generate,
                      iter_views, load_jsonl)
from .memory_queue import MemoryQueue
from .metrics import MetricError, MetricsReport, format_table, report
from .model import Architecture, Model, backward, load_checkpoint, save_checkpoint, sgd_step
from .mvlce import PatientPrediction, build_queue, predict_direct, predict_offline, predict_online
from .pdc import balanced_undersample, pseudo_label
from .tsd import AdaptConfig, LossRecord, run_tsd

log = logging.getLogger(__name__)

ABLATION_ROWS = {
    "source_only": (False, False),
    "tsd": (True, False),
    "mvlce": (False, True),
    "tsd_mvlce": (True, True),
}


class ConfigError(ValueError):
    pass


# --- configuration -----------------------------------------------------------

@dataclass
class ModelConfig:
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 32
    n_classes: int | None = None  # inferred from the data when unset


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    beta: float = 0.9
    val_fraction: float = 0.1


@dataclass
class AblationFlags:
    pdc: bool = True
    tsd: bool = True
    mvlce: bool = True


@dataclass
class DataPaths:
    sources: list[str] = field(default_factory=list)
    target: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataPaths = field(default_factory=DataPaths)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    aug: AugmentSpec = field(default_factory=AugmentSpec)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def seeded(self) -> "RunConfig":
        """Copy with the run seed pushed into every sub-config."""
        cfg = copy.deepcopy(self)
        cfg.synth = replace(cfg.synth, seed=cfg.seed)
        cfg.aug = replace(cfg.aug, seed=cfg.seed)
        cfg.adapt = replace(cfg.adapt, seed=cfg.seed, aug=cfg.aug)
        return cfg

    def to_dict(self) -> dict:
        d = _plain(asdict(self))
        d["adapt"].pop("aug", None)
        d["adapt"].pop("seed", None)
        d["synth"].pop("seed", None)
        d["aug"].pop("seed", None)
        return d


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _expand_dotted(d: dict) -> dict:
    out: dict = {}
    for key, value in d.items():
        if isinstance(value, dict):
            value = _expand_dotted(value)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    return out


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        if cls is AdaptConfig and name in ("aug", "seed"):
            raise ConfigError(f"{where}.{name} is set through the top-level '{name}' key")
        default = getattr(cls(), name)
        if is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    d = _expand_dotted(d)
    sections = {
        "synth": SynthConfig, "data": DataPaths, "model": ModelConfig, "train": TrainConfig,
        "adapt": AdaptConfig, "aug": AugmentSpec, "ablation": AblationFlags,
    }
    unknown = set(d) - set(sections) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "seed" in d:
        kwargs["seed"] = int(d["seed"])
    for name, cls in sections.items():
        if name in d:
            if not isinstance(d[name], dict):
                raise ConfigError(f"section {name!r} must be an object")
            kwargs[name] = _build(cls, d[name], name)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        return config_from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


# --- data ----------------------------------------------------------------------

@dataclass
class Datasets:
    sources: list[ViewSample]
    target: list[PatientRecord]


def load_datasets(cfg: RunConfig) -> Datasets:
    if cfg.data.target or cfg.data.sources:
        sources = []
        for p in cfg.data.sources:
            recs = load_jsonl(p)
            if any(isinstance(r, PatientRecord) for r in recs):
                raise DataError(f"{p}: source files must hold single-view samples")
            sources.extend(recs)
        target = []
        if cfg.data.target:
            target = load_jsonl(cfg.data.target)
            if any(not isinstance(r, PatientRecord) for r in target):
                raise DataError(f"{cfg.data.target}: target file must hold patient records")
        return Datasets(sources, target)
    bench = generate(cfg.synth)
    return Datasets([s for dom in bench.sources for s in dom], bench.target)


# --- stages ----------------------------------------------------------------------

def architecture(cfg: RunConfig, input_dim: int, n_classes: int) -> Architecture:
    return Architecture(input_dim, tuple(cfg.model.hidden_dims), cfg.model.embed_dim, n_classes)


@dataclass
class SourceResult:
    model: Model
    trace: list[LossRecord]
    val: MetricsReport | None


def train_source(samples: Sequence[ViewSample], arch: Architecture, train: TrainConfig,
                 seed: int) -> SourceResult:
    """Mini-batch cross-entropy on the pooled labelled source samples."""
    if not samples:
        raise DataError("no labelled source samples to train on")
    x = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=int)
    rng = np.random.default_rng([seed, 11])
    perm = rng.permutation(len(x))
    n_val = int(round(train.val_fraction * len(x)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    onehot = np.eye(arch.n_classes)[y]

    model = Model.init(arch, seed)
    velocity = model.params.zeros_like()
    trace = []
    for epoch in range(train.epochs):
        order = tr_idx[rng.permutation(len(tr_idx))]
        for step, start in enumerate(range(0, len(order), train.batch_size)):
            idx = order[start:start + train.batch_size]
            terms, grad = backward(model, x[idx], onehot[idx], diversity=False)
            sgd_step(model, grad, train.lr, velocity, train.beta)
            trace.append(LossRecord(epoch, step, terms.ce, 0.0, terms.ce))
    val = None
    if n_val > 0:
        try:
            val = report(model.predict_proba(x[val_idx]), y[val_idx], arch.n_classes, "per-image")
        except MetricError as exc:
            log.warning("validation metrics unavailable: %s", exc)
    return SourceResult(model, trace, val)


@dataclass
class RunResult:
    predictions: list[PatientPrediction]
    fused: bool
    n_classes: int
    labels: dict[str, int | None]
    model: Model | None = None
    trace: list[LossRecord] = field(default_factory=list)
    calibrated: list[tuple[str, int, int]] = field(default_factory=list)
    queues: dict[str, MemoryQueue] = field(default_factory=dict)

    def image_rows(self):
        for p in self.predictions:
            for vid, probs in zip(p.view_ids, p.view_probs):
                yield p.patient_id, vid, probs

    def decision_rows(self):
        """Patient rows when views are fused, otherwise one row per view."""
        for p in self.predictions:
            if self.fused:
                yield p.patient_id, p.probs
            else:
                for probs in p.view_probs:
                    yield p.patient_id, probs

    def metrics(self) -> dict:
        return compute_metrics(list(self.decision_rows()), list(self.image_rows()),
                               self.labels, self.n_classes)


def compute_metrics(decision_rows, image_rows, labels, n_classes: int) -> dict:
    def score(rows, granularity):
        probs = np.array([r[-1] for r in rows], dtype=np.float64).reshape(len(rows), n_classes)
        labs = [labels[r[0]] for r in rows]
        if any(lab is None for lab in labs):
            raise MetricError("target labels are required for scoring")
        return report(probs, labs, n_classes, granularity).to_dict()

    out = {"per_patient": score(decision_rows, "per-patient")}
    if image_rows is not None:
        out["per_image"] = score(image_rows, "per-image")
    return out


def adapt_offline(source: Model, target: Sequence[PatientRecord], cfg: RunConfig,
                  hook=None) -> RunResult:
    """Calibration, self-distillation and multi-view inference per the ablation flags."""
    cfg = cfg.seeded()
    flags = cfg.ablation
    views = list(iter_views(target))
    labels = {p.patient_id: p.label for p in target}
    C = source.arch.n_classes
    result = RunResult([], flags.mvlce, C, labels)

    adapted, teacher = source, source
    if flags.tsd and views:
        pls = pseudo_label(source, views)
        if flags.pdc:
            pls = balanced_undersample(pls, np.random.default_rng([cfg.seed, 23]))
        result.calibrated = [(it.sample.patient_id, it.sample.view_id, it.pseudo_label)
                             for it in pls.items]
        tsd = run_tsd(source, pls, views, cfg.adapt, hook=hook)
        adapted, teacher = tsd.model, tsd.momentum.model
        result.trace = tsd.trace
        result.queues["tsd"] = tsd.queue
        result.model = adapted

    if flags.mvlce:
        queue = build_queue(teacher, target, max(cfg.adapt.queue_capacity, 1))
        result.queues["inference"] = queue
        result.predictions = predict_offline(teacher, queue, target, cfg.adapt.k)
    else:
        result.predictions = predict_direct(adapted, target)
    return result


def adapt_online(source: Model, target: Sequence[PatientRecord], cfg: RunConfig) -> RunResult:
    cfg = cfg.seeded()
    queue = MemoryQueue(cfg.adapt.queue_capacity, source.arch.embed_dim, source.arch.n_classes)
    preds = list(predict_online(source, queue, target, cfg.adapt.k))
    result = RunResult(preds, True, source.arch.n_classes, {p.patient_id: p.label for p in target})
    result.queues["online"] = queue
    return result


# --- artifacts ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_trace(trace: Sequence[LossRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "ce", "div", "total"])
        for r in trace:
            w.writerow([r.epoch, r.step, _fmt(r.ce), _fmt(r.div), _fmt(r.total)])


def write_predictions(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    C = result.n_classes
    # decision rows carry pred right after the id, image rows after the view id
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "pred", *(f"prob_{c}" for c in range(C)), "label"])
        for pid, probs in result.decision_rows():
            lab = result.labels.get(pid)
            w.writerow([pid, int(np.argmax(probs)), *(_fmt(p) for p in probs),
                        "" if lab is None else lab])
    with open(out / "image_predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "view_id", "pred", *(f"prob_{c}" for c in range(C)), "label"])
        for pid, vid, probs in result.image_rows():
            lab = result.labels.get(pid)
            w.writerow([pid, vid, int(np.argmax(probs)), *(_fmt(p) for p in probs),
                        "" if lab is None else lab])


def write_metrics(metrics: dict, out_dir, title: str = "run") -> None:
    out = Path(out_dir)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    rows = {}
    for key in ("per_image", "per_patient"):
        if key in metrics:
            rows[key.replace("_", "-")] = MetricsReport(**metrics[key])
    text = f"{title}\n" + format_table(rows) if rows else f"{title}\n{metrics.get('error', '')}\n"
    (out / "metrics.txt").write_text(text)


def write_config(cfg: RunConfig, out_dir) -> None:
    Path(out_dir, "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# --- evaluation from files -----------------------------------------------------

class ReconciliationError(DataError):
    pass


def _read_prob_csv(path, n_id_cols: int):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return [], 0
        n_classes = sum(1 for h in header if h.startswith("prob_"))
        rows = []
        for line in reader:
            keys = line[:n_id_cols]
            probs = [float(v) for v in line[n_id_cols + 1: n_id_cols + 1 + n_classes]]
            rows.append((*keys, probs))
    return rows, n_classes


def evaluate_files(predictions_path, target: Sequence[PatientRecord],
                   image_predictions_path=None) -> dict:
    labels = {p.patient_id: p.label for p in target}
    rows, C = _read_prob_csv(predictions_path, 1)
    unknown = sorted({r[0] for r in rows} - set(labels))
    if unknown:
        raise ReconciliationError(f"prediction ids not in the dataset: {unknown}")
    if not rows:
        raise MetricError("no predictions overlap the dataset")
    image_rows = None
    if image_predictions_path is not None and Path(image_predictions_path).exists():
        image_rows, _ = _read_prob_csv(image_predictions_path, 2)
        unknown = sorted({r[0] for r in image_rows} - set(labels))
        if unknown:
            raise ReconciliationError(f"image prediction ids not in the dataset: {unknown}")
    return compute_metrics(rows, image_rows, labels, C)


def run_ablation(source: Model, target: Sequence[PatientRecord], cfg: RunConfig) -> dict[str, RunResult]:
    """The four rows {none, TSD, MVLCE, TSD+MVLCE}; PDC follows ``cfg.ablation.pdc``."""
    rows = {}
    for name, (tsd_on, mvlce_on) in ABLATION_ROWS.items():
        row_cfg = copy.deepcopy(cfg)
        row_cfg.ablation = replace(cfg.ablation, tsd=tsd_on, mvlce=mvlce_on)
        rows[name] = adapt_offline(source, target, row_cfg)
    return rows


def infer_n_classes(cfg: RunConfig, data: Datasets) -> int:
    if cfg.model.n_classes is not None:
        return cfg.model.n_classes
    if not (cfg.data.sources or cfg.data.target):
        return cfg.synth.n_classes
    labels = [s.label for s in data.sources if s.label is not None]
    labels += [p.label for p in data.target if p.label is not None]
    if not labels:
        raise DataError("cannot infer the class count from unlabelled data")
    return max(labels) + 1
