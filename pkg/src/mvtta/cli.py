"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or metric error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .datagen import DataError, generate, save_benchmark
from .metrics import MetricError
from .model import NumericalError, ShapeError, load_checkpoint, save_checkpoint
from .pdc import CalibrationError

log = logging.getLogger("mvtta")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvtta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="write the synthetic benchmark as JSON Lines"))
    _common(sub.add_parser("train-source", help="ERM training on the pooled source domains"))

    for name, help_ in (("adapt", "offline adaptation and multi-view inference"),
                        ("adapt-online", "streaming multi-view inference, frozen parameters"),
                        ("ablate", "run the four-row TSD/MVLCE ablation")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--checkpoint", type=Path, help="source checkpoint; trained in-run if omitted")
        p.add_argument("--dump-queue", action="store_true", help="write memory queue contents as JSON")
        if name != "adapt-online":
            p.add_argument("--no-pdc", action="store_true")
        if name == "adapt":
            p.add_argument("--no-tsd", action="store_true")
            p.add_argument("--no-mvlce", action="store_true")

    p = sub.add_parser("evaluate", help="re-score a predictions file against a dataset")
    _common(p, out_required=False)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--image-predictions", type=Path,
                   help="defaults to image_predictions.csv next to --predictions")
    p.add_argument("--target", type=Path, help="target dataset (JSON Lines); else from --config")
    return parser


def _config(args) -> pl.RunConfig:
    cfg = pl.load_config(args.config) if args.config else pl.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "no_pdc", False):
        cfg.ablation.pdc = False
    if getattr(args, "no_tsd", False):
        cfg.ablation.tsd = False
    if getattr(args, "no_mvlce", False):
        cfg.ablation.mvlce = False
    return cfg.seeded()


def _source_model(args, cfg, data, out: Path):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    if not data.sources:
        raise DataError("no source data and no --checkpoint")
    arch = pl.architecture(cfg, data.sources[0].features.shape[0], pl.infer_n_classes(cfg, data))
    res = pl.train_source(data.sources, arch, cfg.train, cfg.seed)
    save_checkpoint(res.model, out / "source_checkpoint.json")
    return res.model


def _finish(result: pl.RunResult, out: Path, title: str, dump_queue: bool) -> int:
    pl.write_predictions(result, out)
    if dump_queue:
        for name, q in result.queues.items():
            q.dump(out / ("queue.json" if name in ("inference", "online") else f"queue_{name}.json"))
    try:
        metrics = result.metrics()
    except MetricError as exc:
        pl.write_metrics({"error": str(exc)}, out, title)
        log.error("metrics unavailable: %s", exc)
        return EXIT_DATA
    pl.write_metrics(metrics, out, title)
    print((out / "metrics.txt").read_text(), end="")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    paths = save_benchmark(generate(cfg.synth), args.out)
    pl.write_config(cfg, args.out)
    print(json.dumps(paths, indent=2))
    return 0


def cmd_train_source(args) -> int:
    cfg = _config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    pl.write_config(cfg, out)
    data = pl.load_datasets(cfg)
    if not data.sources:
        raise DataError("no labelled source samples")
    arch = pl.architecture(cfg, data.sources[0].features.shape[0], pl.infer_n_classes(cfg, data))
    res = pl.train_source(data.sources, arch, cfg.train, cfg.seed)
    save_checkpoint(res.model, out / "checkpoint.json")
    pl.write_trace(res.trace, out / "loss_trace.csv")
    metrics = {"source_validation": res.val.to_dict()} if res.val else {}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    table = pl.format_table({"val": res.val}) if res.val else "no validation split\n"
    (out / "metrics.txt").write_text("source validation\n" + table)
    print((out / "metrics.txt").read_text(), end="")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    pl.write_config(cfg, out)
    data = pl.load_datasets(cfg)
    source = _source_model(args, cfg, data, out)
    result = pl.adapt_offline(source, data.target, cfg)
    save_checkpoint(result.model or source, out / "checkpoint.json")
    pl.write_trace(result.trace, out / "loss_trace.csv")
    if result.calibrated:
        audit = [{"patient_id": p, "view_id": v, "pseudo_label": c} for p, v, c in result.calibrated]
        (out / "pdc_subset.json").write_text(json.dumps(audit) + "\n")
    flags = cfg.ablation
    title = f"offline  pdc={flags.pdc} tsd={flags.tsd} mvlce={flags.mvlce}"
    return _finish(result, out, title, args.dump_queue)


def cmd_adapt_online(args) -> int:
    cfg = _config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    pl.write_config(cfg, out)
    data = pl.load_datasets(cfg)
    source = _source_model(args, cfg, data, out)
    result = pl.adapt_online(source, data.target, cfg)
    return _finish(result, out, "online", args.dump_queue)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    pl.write_config(cfg, out)
    data = pl.load_datasets(cfg)
    source = _source_model(args, cfg, data, out)
    rows = pl.run_ablation(source, data.target, cfg)
    summary, table = {}, {}
    for name, result in rows.items():
        row_dir = out / name
        row_dir.mkdir(exist_ok=True)
        pl.write_trace(result.trace, row_dir / "loss_trace.csv")
        code = _finish(result, row_dir, name, args.dump_queue)
        if code:
            return code
        summary[name] = result.metrics()
        table[name] = pl.MetricsReport(**summary[name]["per_patient"])
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    text = "ablation (per-patient)\n" + pl.format_table(table)
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_evaluate(args) -> int:
    if args.target:
        target = pl.load_jsonl(args.target)
    else:
        target = pl.load_datasets(_config(args)).target
    image_path = args.image_predictions or args.predictions.with_name("image_predictions.csv")
    metrics = pl.evaluate_files(args.predictions, target, image_path)
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        pl.write_metrics(metrics, args.out, "evaluate")
    print(text, end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "adapt-online": cmd_adapt_online,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except pl.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, MetricError, CalibrationError, ShapeError, json.JSONDecodeError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
