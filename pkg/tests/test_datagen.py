import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvtta.datagen import (DataError, PatientRecord, SchemaError, SynthConfig, ViewSample,
                           class_means, generate, load_jsonl, save_jsonl)
from mvtta.model import Architecture
from mvtta.pipeline import TrainConfig, train_source
from mvtta.metrics import accuracy

SMALL = dict(samples_per_domain=200, n_patients=50)


def test_class_means_pairwise_distance():
    for C, D in [(3, 16), (4, 3), (2, 1)]:
        mu = class_means(C, D, 4.5)
        for a, b in combinations(range(C), 2):
            assert abs(np.linalg.norm(mu[a] - mu[b]) - 4.5) < 1e-12


def test_shift_free_views_coincide():
    cfg = SynthConfig(domain_shift_scale=0, view_transform_scale=0, noise_sigma=0, **SMALL)
    bench = generate(cfg)
    for p in bench.target:
        for v in p.views[1:]:
            np.testing.assert_array_equal(v.features, p.views[0].features)


def test_shift_free_data_is_linearly_separable():
    cfg = SynthConfig(domain_shift_scale=0, view_transform_scale=0, noise_sigma=0,
                      class_sep=12.0, samples_per_domain=500, n_patients=200)
    bench = generate(cfg)
    src = [s for d in bench.sources for s in d]
    arch = Architecture(cfg.dim, (), 8, cfg.n_classes)
    model = train_source(src, arch, TrainConfig(epochs=5, val_fraction=0.0), 0).model
    x = np.stack([p.views[0].features for p in bench.target])
    preds = model.predict_proba(x).argmax(1)
    assert accuracy(preds, [p.label for p in bench.target]) > 0.99


def test_generation_is_deterministic():
    a, b = generate(SynthConfig(seed=3, **SMALL)), generate(SynthConfig(seed=3, **SMALL))
    assert a.target == b.target
    assert all(x == y for da, db in zip(a.sources, b.sources) for x, y in zip(da, db))
    c = generate(SynthConfig(seed=4, **SMALL))
    assert a.target != c.target


def test_class_mix_within_binomial_bounds():
    cfg = SynthConfig(class_mix=(0.6, 0.3, 0.1), n_patients=1000, samples_per_domain=10, seed=1)
    counts = np.bincount([p.label for p in generate(cfg).target], minlength=3)
    for count, p in zip(counts, (0.6, 0.3, 0.1)):
        assert abs(count - 1000 * p) <= 3 * np.sqrt(1000 * p * (1 - p))


def test_view_coverage_invariant():
    bench = generate(SynthConfig(**SMALL))
    for p in bench.target:
        assert sorted(v.view_id for v in p.views) == [1, 2, 3, 4]
        assert {v.label for v in p.views} == {p.label}


def test_patient_record_rejects_bad_views():
    v = ViewSample("p", 1, "t", np.zeros(2), 0)
    with pytest.raises(SchemaError):
        PatientRecord("p", "t", [v, ViewSample("p", 3, "t", np.zeros(2), 0)], 0)


@pytest.mark.parametrize("bad", [dict(class_mix=(0.5, 0.5, 0.5)), dict(n_views=0),
                                 dict(noise_sigma=-1.0)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        generate(SynthConfig(**bad))


def test_empty_dataset_round_trip(tmp_path):
    save_jsonl([], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == ""
    assert load_jsonl(tmp_path / "e.jsonl") == []


def test_single_record_schema(tmp_path):
    rec = generate(SynthConfig(**SMALL)).target[0]
    save_jsonl([rec], tmp_path / "one.jsonl")
    lines = (tmp_path / "one.jsonl").read_text().splitlines()
    assert len(lines) == 1
    obj = json.loads(lines[0])
    assert set(obj) == {"patient_id", "domain_id", "label", "views"}
    assert set(obj["views"][0]) == {"view_id", "features"}


def test_source_sample_schema(tmp_path):
    s = generate(SynthConfig(**SMALL)).sources[0][0]
    save_jsonl([s], tmp_path / "s.jsonl")
    obj = json.loads((tmp_path / "s.jsonl").read_text())
    assert set(obj) == {"patient_id", "view_id", "domain_id", "label", "features"}
    assert load_jsonl(tmp_path / "s.jsonl") == [s]


def _random_record(rng, i, dim):
    lab = None if rng.random() < 0.2 else int(rng.integers(3))
    pid = f"p{i}"
    m = int(rng.integers(1, 5))
    views = [ViewSample(pid, v + 1, "dom", rng.normal(size=dim) * 10.0 ** rng.integers(-8, 8), lab)
             for v in range(m)]
    return PatientRecord(pid, "dom", views, lab)


def test_thousand_record_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [_random_record(rng, i, 5) for i in range(1000)]
    save_jsonl(recs, tmp_path / "r.jsonl")
    back = load_jsonl(tmp_path / "r.jsonl")
    assert back == recs
    for a, b in zip(recs, back):
        for va, vb in zip(a.views, b.views):
            assert va.features.tobytes() == vb.features.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=6))
def test_float_exact_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "v.jsonl"
    s = ViewSample("a", 1, "d", np.array(values), None)
    save_jsonl([s], path)
    assert load_jsonl(path)[0].features.tobytes() == s.features.tobytes()


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"patient_id": "a", "view_id": 1, "domain_id": "d", "label": 0,
                       "features": [1.0, 2.0]})
    path.write_text(good + "\n{not json\n")
    with pytest.raises(DataError, match=":2:"):
        load_jsonl(path)


def test_dimension_inconsistency_is_schema_error(tmp_path):
    path = tmp_path / "bad.jsonl"
    rows = [{"patient_id": "a", "view_id": 1, "domain_id": "d", "label": 0, "features": [1.0, 2.0]},
            {"patient_id": "b", "view_id": 1, "domain_id": "d", "label": 0, "features": [1.0]}]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(SchemaError, match=":2:"):
        load_jsonl(path)


def _bayes_proxy_accuracy(shift, seed):
    """Source-trained linear-softmax model evaluated on target view 1."""
    cfg = SynthConfig(domain_shift_scale=shift, samples_per_domain=600, n_patients=400, seed=seed)
    bench = generate(cfg)
    src = [s for d in bench.sources for s in d]
    arch = Architecture(cfg.dim, (), cfg.dim, cfg.n_classes)
    model = train_source(src, arch, TrainConfig(epochs=5, val_fraction=0.0), seed).model
    x = np.stack([p.views[0].features for p in bench.target])
    return accuracy(model.predict_proba(x).argmax(1), [p.label for p in bench.target])


@pytest.mark.slow
def test_difficulty_monotone_in_domain_shift():
    medians = [np.median([_bayes_proxy_accuracy(s, seed) for seed in range(5)])
               for s in (0.0, 1.0, 2.0)]
    assert medians[0] >= medians[1] >= medians[2]
