import numpy as np
import pytest

from mvtta.datagen import PatientRecord, SynthConfig, ViewSample, generate
from mvtta.memory_queue import MemoryQueue, knn_refine_batch, l2_normalize
from mvtta.metrics import accuracy
from mvtta.model import Architecture, Model
from mvtta.mvlce import (build_queue, multiview_ensemble, predict_direct, predict_offline,
                         predict_online)
from mvtta.pipeline import TrainConfig, train_source


@pytest.fixture(scope="module")
def trained():
    cfg = SynthConfig(samples_per_domain=400, n_patients=60, seed=2)
    bench = generate(cfg)
    src = [s for d in bench.sources for s in d]
    model = train_source(src, Architecture(16, (32,), 16, 3), TrainConfig(epochs=3), 2).model
    return model, bench.target


def test_ensemble_examples():
    np.testing.assert_allclose(multiview_ensemble([[0.8, 0.2], [0.6, 0.4]]), [0.7, 0.3],
                               rtol=0, atol=1e-15)
    np.testing.assert_array_equal(multiview_ensemble([[0.1, 0.9]]), [0.1, 0.9])
    v = np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(multiview_ensemble([v] * 4), v)
    with pytest.raises(ValueError):
        multiview_ensemble(np.zeros((0, 3)))


def test_single_view_patients_equal_refined_views(trained):
    model, target = trained
    single = [PatientRecord(p.patient_id, p.domain_id, p.views[:1], p.label) for p in target]
    queue = build_queue(model, target, 4096)
    preds = predict_offline(model, queue, single, 3)
    x = np.stack([p.views[0].features for p in single])
    z, probs = model.forward(x)
    refined, labels = knn_refine_batch(queue, l2_normalize(z), probs, 3)
    np.testing.assert_array_equal(np.stack([p.probs for p in preds]), refined)
    assert [p.pred for p in preds] == labels.tolist()


def test_view_order_does_not_matter(trained):
    model, target = trained
    queue = build_queue(model, target, 4096)
    rng = np.random.default_rng(0)
    shuffled = [PatientRecord(p.patient_id, p.domain_id,
                              [p.views[i] for i in rng.permutation(len(p.views))], p.label)
                for p in target]
    for a, b in zip(predict_offline(model, queue, target, 3), predict_offline(model, queue, shuffled, 3)):
        assert a.probs.tobytes() == b.probs.tobytes() and a.view_ids == b.view_ids


def test_outputs_are_normalized(trained):
    model, target = trained
    queue = build_queue(model, target, 4096)
    for p in predict_offline(model, queue, target, 5):
        assert abs(p.probs.sum() - 1.0) <= 1e-9
        assert np.all(np.abs(p.view_probs.sum(1) - 1.0) <= 1e-9)


def test_offline_does_not_mutate_model_or_queue(trained):
    model, target = trained
    before = model.params.flat()
    queue = build_queue(model, target, 4096)
    pushed = queue.pushed
    predict_offline(model, queue, target, 3)
    assert model.params.flat().tobytes() == before.tobytes()
    assert queue.pushed == pushed


def test_zero_view_patient_rejected(trained):
    model, _ = trained
    empty = PatientRecord.__new__(PatientRecord)
    object.__setattr__(empty, "patient_id", "ghost")
    object.__setattr__(empty, "views", [])
    with pytest.raises(ValueError):
        predict_direct(model, [empty])


def test_online_cold_start_is_raw_ensemble(trained):
    model, target = trained
    first = next(predict_online(model, MemoryQueue(4096, 16, 3), target, 3))
    x = np.stack([v.features for v in sorted(target[0].views, key=lambda v: v.view_id)])
    np.testing.assert_array_equal(first.probs, multiview_ensemble(model.predict_proba(x)))


def test_online_replay_is_identical(trained):
    model, target = trained
    a = list(predict_online(model, MemoryQueue(4096, 16, 3), target, 3))
    b = list(predict_online(model, MemoryQueue(4096, 16, 3), target, 3))
    assert all(x.probs.tobytes() == y.probs.tobytes() for x, y in zip(a, b))


def test_online_prefix_causality(trained):
    model, target = trained
    full = list(predict_online(model, MemoryQueue(4096, 16, 3), target, 3))
    for cut in (1, 7, 30):
        part = list(predict_online(model, MemoryQueue(4096, 16, 3), target[:cut], 3))
        assert all(x.probs.tobytes() == y.probs.tobytes() for x, y in zip(part, full[:cut]))


def test_online_never_mutates_parameters(trained):
    model, target = trained
    before = model.params.flat()
    list(predict_online(model, MemoryQueue(4096, 16, 3), target, 3))
    assert model.params.flat().tobytes() == before.tobytes()


def test_online_permuted_stream_covers_same_patients(trained):
    model, target = trained
    rev = list(predict_online(model, MemoryQueue(4096, 16, 3), target[::-1], 3))
    assert {p.patient_id for p in rev} == {p.patient_id for p in target}


@pytest.mark.slow
def test_patient_accuracy_at_least_view_accuracy():
    gains = []
    for seed in range(5):
        cfg = SynthConfig(domain_shift_scale=0, samples_per_domain=400, n_patients=200, seed=seed)
        bench = generate(cfg)
        src = [s for d in bench.sources for s in d]
        model = train_source(src, Architecture(16, (64,), 32, 3), TrainConfig(epochs=5), seed).model
        preds = predict_offline(model, build_queue(model, bench.target, 4096), bench.target, 3)
        labels = [p.label for p in bench.target]
        patient = accuracy([p.pred for p in preds], labels)
        view = accuracy(np.concatenate([p.view_preds for p in preds]),
                        np.repeat(labels, [len(p.view_ids) for p in preds]))
        gains.append(patient - view)
    assert np.median(gains) >= 0.0
