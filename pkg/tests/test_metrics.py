"""Metric oracles: frozen macro scores, evaluation, zero-shot transfer."""
import json

import numpy as np
import pytest

from funcreg.data import Dataset, default_benchmark, generate_benchmark
from funcreg.errors import ConfigError, DataError, StateError
from funcreg.metrics import (MetricsReport, build_report, evaluate, macro_f1,
                             macro_recall, metrics_from_logits, ood_average,
                             zero_shot_transfer_eval)
from funcreg.model import build_model

# hand-worked 4-example binary case
F1_FROZEN = 0.733333  # labels [0,0,1,1], preds [0,1,1,1]


def test_macro_f1_frozen_case():
    labels = np.array([0, 0, 1, 1])
    preds = np.array([0, 1, 1, 1])
    assert abs(macro_f1(labels, preds, 2) - F1_FROZEN) < 1e-6
    # class 0: recall 1/2; class 1: recall 2/2
    assert abs(macro_recall(labels, preds, 2) - 0.75) < 1e-12


def test_macro_scores_average_present_classes_only():
    labels = np.array([0, 0, 2, 2])  # class 1 never appears
    preds = np.array([0, 0, 2, 0])
    # recalls: class0 = 1, class2 = 1/2
    assert abs(macro_recall(labels, preds, 3) - 0.75) < 1e-12


def test_macro_scores_zero_division_gives_zero():
    labels = np.array([0, 0])
    preds = np.array([1, 1])
    assert macro_recall(labels, preds, 2) == 0.0
    assert macro_f1(labels, preds, 2) == 0.0


def test_macro_scores_permutation_invariant():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=40)
    preds = rng.integers(0, 4, size=40)
    perm = rng.permutation(40)
    assert macro_f1(labels, preds, 4) == macro_f1(labels[perm], preds[perm], 4)
    assert macro_recall(labels, preds, 4) \
        == macro_recall(labels[perm], preds[perm], 4)


def test_macro_scores_reject_empty():
    with pytest.raises(DataError):
        macro_f1(np.array([]), np.array([]), 2)


def test_metrics_from_logits_basics():
    logits = np.array([[2.0, 0.0], [0.0, 2.0], [2.0, 0.0]])
    labels = np.array([0, 1, 1])
    sm = metrics_from_logits(logits, labels)
    assert abs(sm.accuracy - 2.0 / 3.0) < 1e-12
    assert sm.n == 3
    # mean CE: correct rows cheap, wrong row expensive
    p_correct = np.exp(2.0) / (np.exp(2.0) + 1.0)
    expected = -(2 * np.log(p_correct) + np.log(1 - p_correct)) / 3
    assert abs(sm.loss - expected) < 1e-12


def test_metrics_argmax_tie_breaks_low():
    logits = np.array([[1.0, 1.0]])
    sm = metrics_from_logits(logits, np.array([0]))
    assert sm.accuracy == 1.0


def test_metrics_errors():
    with pytest.raises(DataError):
        metrics_from_logits(np.zeros((2, 3)), np.zeros(3, dtype=int))
    with pytest.raises(StateError):
        metrics_from_logits(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(IndexError):
        metrics_from_logits(np.zeros((1, 3)), np.array([5]))


def test_evaluate_runs_without_grads():
    m = build_model(64, (8,), 4, 8, seed=0)
    import dataclasses
    spec = dataclasses.replace(default_benchmark(), n_per_split=16)
    data = generate_benchmark(spec)
    sm = evaluate(m, data.id_test)
    assert 0.0 <= sm.accuracy <= 1.0 and sm.n == 16
    for _, p in m.named_parameters():
        assert p.grad is None


def test_build_report_and_ood_average():
    import dataclasses
    spec = dataclasses.replace(default_benchmark(), n_per_split=16)
    data = generate_benchmark(spec)
    m = build_model(64, (8,), 4, 8, seed=1)
    report = build_report(m, data)
    assert set(report.per_split) == set(data.eval_splits())
    oods = [s.accuracy for n, s in report.per_split.items()
            if n.startswith("ood_")]
    assert abs(ood_average(report) - np.mean(oods)) < 1e-12
    doc = json.loads(report.to_json())
    assert set(doc) == {"splits", "ood_avg"}


def test_report_csv_schema(tmp_path):
    import dataclasses
    spec = dataclasses.replace(default_benchmark(), n_per_split=16)
    data = generate_benchmark(spec)
    report = build_report(build_model(64, (8,), 4, 8, seed=1), data)
    p = tmp_path / "metrics.csv"
    report.write_csv(p)
    header = p.read_text().splitlines()[0]
    assert header == "split,acc,loss,recall_macro,f1_macro,n"


def test_zero_shot_transfer_zeroed_encoder_is_tie_broken():
    # all-zero features make every logit zero; argmax picks index 0 always
    m = build_model(6, (5,), 4, 4, seed=0)
    for w, b in m.encoder.layers:
        w.data[...] = 0.0
    protos = np.random.default_rng(1).standard_normal((4, 4))
    labels = np.array([2, 3, 2, 3])
    ds = Dataset(features=np.random.default_rng(2).standard_normal((4, 6)),
                 labels=labels)
    acc = zero_shot_transfer_eval(protos, m, ds, heldout_classes=[2, 3],
                                  finetune_classes=[0, 1])
    # held-out position 0 is class 2; half the labels are class 2
    assert abs(acc - 0.5) < 1e-12


def test_zero_shot_transfer_rescaled_prototypes_invariant():
    m = build_model(6, (5,), 4, 4, seed=3)
    protos = np.random.default_rng(4).standard_normal((4, 4))
    ds = Dataset(features=np.random.default_rng(5).standard_normal((12, 6)),
                 labels=np.random.default_rng(6).integers(2, 4, size=12))
    a = zero_shot_transfer_eval(protos, m, ds, [2, 3], [0, 1])
    b = zero_shot_transfer_eval(protos * 7.5, m, ds, [2, 3], [0, 1])
    assert a == b


def test_zero_shot_transfer_validation():
    m = build_model(6, (5,), 4, 4, seed=0)
    protos = np.zeros((4, 4))
    ds = Dataset(features=np.zeros((2, 6)), labels=np.array([2, 3]))
    with pytest.raises(ConfigError):
        zero_shot_transfer_eval(protos, m, ds, [1, 2], [0, 1])  # overlap
    with pytest.raises(ConfigError):
        zero_shot_transfer_eval(protos, m, ds, [], [0, 1])
    with pytest.raises(ConfigError):
        zero_shot_transfer_eval(protos, m, ds, [9], [0])
    with pytest.raises(DataError):
        zero_shot_transfer_eval(protos, m, ds, [3], [0])  # split has class 2
    empty = Dataset(features=np.zeros((0, 6)), labels=np.zeros(0, dtype=int))
    with pytest.raises(StateError):
        zero_shot_transfer_eval(protos, m, empty, [2, 3], [0, 1])
