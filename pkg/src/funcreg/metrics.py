"""Split evaluation: accuracy, mean cross-entropy, macro recall/F1.

Macro metrics average per-class scores over the classes present in the
LABELS; classes the model could predict but that never occur as a label are
excluded from the average. A class with no predicted instances takes
precision 0, hence F1 0 (the usual zero-division convention). Prediction is
argmax over logits with ties going to the lowest class index.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import BenchmarkData, Dataset
from .errors import ConfigError, DataError, StateError
from .model import ModelState


@dataclass(frozen=True)
class SplitMetrics:
    accuracy: float
    loss: float
    recall_macro: float
    f1_macro: float
    n: int


def macro_recall(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> float:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    present = np.unique(labels)
    if present.size == 0:
        raise DataError("macro_recall of an empty label set")
    scores = []
    for c in present:
        mask = labels == c
        scores.append(float(np.mean(preds[mask] == c)))
    return float(np.mean(scores))


def macro_f1(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> float:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    present = np.unique(labels)
    if present.size == 0:
        raise DataError("macro_f1 of an empty label set")
    scores = []
    for c in present:
        tp = float(np.sum((preds == c) & (labels == c)))
        fp = float(np.sum((preds == c) & (labels != c)))
        fn = float(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision + recall == 0.0:
            scores.append(0.0)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def _mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def metrics_from_logits(logits: np.ndarray, labels: np.ndarray) -> SplitMetrics:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise DataError(f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise StateError("cannot evaluate an empty split")
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    preds = np.argmax(logits, axis=1)  # ties resolve to the lowest index
    return SplitMetrics(
        accuracy=float(np.mean(preds == labels)),
        loss=_mean_cross_entropy(logits, labels),
        recall_macro=macro_recall(labels, preds, k),
        f1_macro=macro_f1(labels, preds, k),
        n=int(labels.size),
    )


def evaluate(m: ModelState, ds: Dataset) -> SplitMetrics:
    """Tape-free forward pass over the whole split."""
    if ds.n == 0:
        raise StateError("cannot evaluate an empty split")
    logits = m.forward_logits(ds.features).data
    return metrics_from_logits(logits, ds.labels)


# ---------------------------------------------------------------------------
# consolidated reports

@dataclass
class MetricsReport:
    """Per-split metrics plus the OOD accuracy average."""

    per_split: dict  # split name -> SplitMetrics
    ood_avg: float

    def to_json(self) -> str:
        doc = {
            "splits": {
                name: {"acc": s.accuracy, "loss": s.loss,
                       "recall_macro": s.recall_macro, "f1_macro": s.f1_macro,
                       "n": s.n}
                for name, s in self.per_split.items()
            },
            "ood_avg": self.ood_avg,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["split", "acc", "loss", "recall_macro", "f1_macro", "n"])
            for name, s in self.per_split.items():
                writer.writerow([name, repr(s.accuracy), repr(s.loss),
                                 repr(s.recall_macro), repr(s.f1_macro), s.n])


def build_report(m: ModelState, bench: BenchmarkData) -> MetricsReport:
    per_split = {name: evaluate(m, ds) for name, ds in bench.eval_splits().items()}
    ood = [s.accuracy for name, s in per_split.items() if name.startswith("ood_")]
    if not ood:
        raise StateError("benchmark has no OOD splits")
    return MetricsReport(per_split=per_split, ood_avg=float(np.mean(ood)))


def ood_average(report: MetricsReport) -> float:
    return report.ood_avg


# ---------------------------------------------------------------------------
# cross-class zero-shot transfer

def zero_shot_transfer_eval(pretrained_prototypes, m: ModelState, split: Dataset,
                            heldout_classes: Sequence[int],
                            finetune_classes: Sequence[int]) -> float:
    """Accuracy on held-out classes using frozen pretrained prototype rows.

    The classifier restricts the pretrained prototype table to
    ``heldout_classes`` and pairs it with the (possibly fine-tuned) encoder of
    ``m``. Split labels are original class ids and must all be held-out;
    any overlap between the held-out and fine-tune class sets is a config
    error, since transfer would then be contaminated.
    """
    heldout = list(heldout_classes)
    overlap = set(heldout) & set(finetune_classes)
    if overlap:
        raise ConfigError(f"held-out classes overlap fine-tune classes: {sorted(overlap)}")
    if not heldout:
        raise ConfigError("no held-out classes given")
    protos = np.asarray(
        pretrained_prototypes.data if hasattr(pretrained_prototypes, "data")
        else pretrained_prototypes, dtype=np.float64)
    if any(c < 0 or c >= protos.shape[0] for c in heldout):
        raise ConfigError(f"held-out class id out of range [0, {protos.shape[0]})")
    bad = set(np.unique(split.labels)) - set(heldout)
    if bad:
        raise DataError(f"split contains non-held-out labels: {sorted(bad)}")
    if split.n == 0:
        raise StateError("cannot evaluate an empty split")
    rows = protos[heldout]  # [n_held, embed_dim], frozen
    features = m.forward_features(split.features).data
    logits = features @ rows.T
    lut = {c: i for i, c in enumerate(heldout)}
    remapped = np.asarray([lut[int(c)] for c in split.labels])
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == remapped))
