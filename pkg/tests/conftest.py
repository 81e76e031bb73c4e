import time

import numpy as np
import pytest

import mvtta.pipeline as pl

BENCH_SEEDS = range(5)

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_acceptance.items()):
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}")


def bench_config(seed: int) -> pl.RunConfig:
    return pl.RunConfig(seed=seed).seeded()


@pytest.fixture(scope="session")
def benchmark_runs():
    """Default benchmark, 5 seeds: source model, ablation rows and online run.

    Each run records its wall time under ``"seconds"``.
    """
    runs = []
    for seed in BENCH_SEEDS:
        t0 = time.perf_counter()
        cfg = bench_config(seed)
        data = pl.load_datasets(cfg)
        arch = pl.architecture(cfg, data.sources[0].features.shape[0], cfg.synth.n_classes)
        src = pl.train_source(data.sources, arch, cfg.train, seed)
        rows = pl.run_ablation(src.model, data.target, cfg)
        online = pl.adapt_online(src.model, data.target, cfg)
        runs.append({"seed": seed, "cfg": cfg, "data": data, "source": src,
                     "rows": rows, "online": online,
                     "seconds": time.perf_counter() - t0})
    return runs


def median_metric(runs, getter):
    return float(np.median([getter(r) for r in runs]))
