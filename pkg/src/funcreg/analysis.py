"""Robustness analyses: perturbation spaces, ablations, weight interpolation.

The perturbation study probes a trained model along random unit directions in
four spaces. Parameter/feature/logit directions are unit vectors added to the
flattened weights, the embedding, or the logits. A function-space direction is
a fresh random network g with the encoder's architecture and class-count many
outputs, scaled by the empirical constant c = sqrt((1/N) sum |g(x_i)|^2) over
the first eval split, so that magnitude m shifts logits by m in root-mean-
square over that split. The model under study is never mutated; parameter
perturbations act on a copy.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import BenchmarkData, Dataset
from .errors import ConfigError, NumericError, StateError
from .metrics import build_report, evaluate, metrics_from_logits
from .model import (ModelState, build_model, interpolate_weights,
                    load_params_vector, params_vector)
from .regularizers import RegularizerConfig
from .training import TrainConfig, finetune, pretrain

SPACES = ("parameter", "feature", "logit", "function")
PARAMETER_MODES = ("absolute", "relative_norm_pct")
_DIRECTION_STREAM = 717

ABLATION_VARIANTS = (("ft", "none"), ("ft_far", "far"), ("ft_fcr", "fcr"),
                     ("ft_far_fcr", "far_fcr"))


@dataclass(frozen=True)
class PerturbationSpec:
    spaces: tuple = SPACES
    n_directions: int = 10
    magnitudes: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 1.0)
    parameter_magnitudes: tuple = (0.0004,)
    parameter_mode: str = "absolute"
    seed: int = 0
    eval_splits: Optional[tuple] = None  # None -> id_test plus every OOD split

    def __post_init__(self):
        spaces = (self.spaces,) if isinstance(self.spaces, str) else tuple(self.spaces)
        object.__setattr__(self, "spaces", spaces)
        object.__setattr__(self, "magnitudes", tuple(self.magnitudes))
        object.__setattr__(self, "parameter_magnitudes",
                           tuple(self.parameter_magnitudes))
        if self.eval_splits is not None:
            object.__setattr__(self, "eval_splits", tuple(self.eval_splits))
        unknown = [s for s in self.spaces if s not in SPACES]
        if unknown:
            raise ConfigError(f"unknown perturbation space(s) {unknown}; "
                              f"expected among {SPACES}")
        if len(set(self.spaces)) != len(self.spaces):
            raise ConfigError("duplicate perturbation spaces")
        if self.n_directions < 1:
            raise ConfigError(f"n_directions must be >= 1, got {self.n_directions}")
        for m in (*self.magnitudes, *self.parameter_magnitudes):
            if m <= 0:
                raise ConfigError(f"magnitudes must be > 0, got {m}")
        if self.parameter_mode not in PARAMETER_MODES:
            raise ConfigError(f"unknown parameter_mode {self.parameter_mode!r}")

    def magnitudes_for(self, space: str) -> tuple:
        return self.parameter_magnitudes if space == "parameter" else self.magnitudes


@dataclass
class Direction:
    """One sampled unit direction; payload depends on the space."""

    space: str
    vector: Optional[np.ndarray] = None      # parameter/feature/logit spaces
    aux: Optional[ModelState] = None          # function space: random network
    norm_const: float = 1.0                   # function space: empirical c

    def function_values(self, x: np.ndarray) -> np.ndarray:
        """g(x)/c for a function-space direction; [n, n_classes]."""
        if self.space != "function":
            raise StateError(f"function_values on a {self.space}-space direction")
        return self.aux.forward_logits(x).data / self.norm_const


def _aux_network(m: ModelState, seed: int) -> ModelState:
    """Random network from the encoder's family, mapping inputs to logits."""
    hidden = [w.shape[1] for w, _ in m.encoder.layers[:-1]]
    return build_model(m.encoder.input_dim, hidden, m.head.n_classes,
                       m.head.n_classes, seed=seed, trainable_head=False)


def sample_unit_direction(space: str, m: ModelState, seed: int,
                          norm_inputs: Optional[np.ndarray] = None) -> Direction:
    """Seeded random unit direction in the given space.

    Function-space directions need ``norm_inputs`` (the normalization split's
    features) to fix the empirical constant c.
    """
    if space not in SPACES:
        raise ConfigError(f"unknown perturbation space {space!r}")
    rng = np.random.default_rng([seed, _DIRECTION_STREAM])
    if space == "parameter":
        v = rng.standard_normal(params_vector(m).size)
    elif space == "feature":
        v = rng.standard_normal(m.encoder.embed_dim)
    elif space == "logit":
        v = rng.standard_normal(m.head.n_classes)
    else:
        if norm_inputs is None:
            raise ConfigError("function-space direction needs norm_inputs")
        aux = _aux_network(m, seed)
        g = aux.forward_logits(np.asarray(norm_inputs, dtype=np.float64)).data
        c = math.sqrt(float(np.mean(np.sum(g * g, axis=1))))
        if c == 0.0 or not math.isfinite(c):
            raise NumericError(f"degenerate function-direction norm c={c}")
        return Direction(space=space, aux=aux, norm_const=c)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise NumericError("degenerate zero direction")
    return Direction(space=space, vector=v / norm)


def perturbed_eval(m: ModelState, direction: Direction, magnitude: float,
                   ds: Dataset) -> dict:
    """Loss and accuracy of the perturbed model on a split; m is left untouched."""
    if magnitude < 0:
        raise ConfigError(f"magnitude must be >= 0, got {magnitude}")
    if direction.space == "parameter":
        shifted = m.copy(requires_grad=False)
        load_params_vector(shifted, params_vector(m) + magnitude * direction.vector)
        sm = evaluate(shifted, ds)
        return {"loss": sm.loss, "accuracy": sm.accuracy}
    if direction.space == "feature":
        features = m.forward_features(ds.features).data + magnitude * direction.vector
        logits = features @ m.head.prototypes.data.T
    elif direction.space == "logit":
        logits = m.forward_logits(ds.features).data + magnitude * direction.vector
    else:
        logits = (m.forward_logits(ds.features).data
                  + magnitude * direction.function_values(ds.features))
    sm = metrics_from_logits(logits, ds.labels)
    return {"loss": sm.loss, "accuracy": sm.accuracy}


@dataclass(frozen=True)
class PerturbationRecord:
    space: str
    direction: int
    magnitude: float
    split: str
    loss: float
    acc: float


@dataclass
class PerturbationReport:
    spec: PerturbationSpec
    records: list                 # one PerturbationRecord per sweep point
    baseline: dict                # split -> {"loss","accuracy"} unperturbed
    aggregates: list              # dicts keyed (space, magnitude, split)

    def write_records_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["space", "direction", "magnitude", "split", "loss", "acc"])
            for r in self.records:
                w.writerow([r.space, r.direction, repr(r.magnitude), r.split,
                            repr(r.loss), repr(r.acc)])

    def write_aggregates_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["space", "magnitude", "split", "loss_mean", "loss_std",
                        "acc_mean", "acc_std"])
            for a in self.aggregates:
                w.writerow([a["space"], repr(a["magnitude"]), a["split"],
                            repr(a["loss_mean"]), repr(a["loss_std"]),
                            repr(a["acc_mean"]), repr(a["acc_std"])])

    def write_baseline_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "loss", "acc"])
            for split, vals in self.baseline.items():
                w.writerow([split, repr(vals["loss"]), repr(vals["accuracy"])])


def run_perturbation_study(m: ModelState, spec: PerturbationSpec,
                           bench: BenchmarkData) -> PerturbationReport:
    """Full sweep: spaces x directions x magnitudes x splits.

    Directions are keyed by (spec.seed, space, direction index) and the
    records come out in that deterministic order. Function directions are
    normalized on the first eval split.
    """
    available = bench.eval_splits()
    split_names = spec.eval_splits if spec.eval_splits is not None \
        else tuple(available)
    missing = [s for s in split_names if s not in available]
    if missing:
        raise ConfigError(f"unknown eval split(s) {missing}; "
                          f"have {sorted(available)}")
    splits = {name: available[name] for name in split_names}
    norm_inputs = splits[split_names[0]].features

    baseline = {}
    for name, ds in splits.items():
        sm = evaluate(m, ds)
        baseline[name] = {"loss": sm.loss, "accuracy": sm.accuracy}

    theta_norm = float(np.linalg.norm(params_vector(m)))
    records = []
    for space in spec.spaces:
        space_key = SPACES.index(space)
        for d in range(spec.n_directions):
            direction = sample_unit_direction(
                space, m, seed=spec.seed * 10007 + space_key * 101 + d,
                norm_inputs=norm_inputs)
            for mag in spec.magnitudes_for(space):
                applied = mag
                if space == "parameter" and spec.parameter_mode == "relative_norm_pct":
                    applied = mag * theta_norm
                for name, ds in splits.items():
                    out = perturbed_eval(m, direction, applied, ds)
                    records.append(PerturbationRecord(
                        space=space, direction=d, magnitude=mag, split=name,
                        loss=out["loss"], acc=out["accuracy"]))

    aggregates = []
    for space in spec.spaces:
        for mag in spec.magnitudes_for(space):
            for name in splits:
                sel = [r for r in records
                       if r.space == space and r.magnitude == mag and r.split == name]
                losses = np.asarray([r.loss for r in sel])
                accs = np.asarray([r.acc for r in sel])
                aggregates.append({
                    "space": space, "magnitude": mag, "split": name,
                    "loss_mean": float(losses.mean()),
                    "loss_std": float(losses.std()),
                    "acc_mean": float(accs.mean()),
                    "acc_std": float(accs.std()),
                })
    return PerturbationReport(spec=spec, records=records, baseline=baseline,
                              aggregates=aggregates)


def accuracy_drop_table(report: PerturbationReport) -> dict:
    """(space, split) -> mean accuracy drop vs baseline over directions x magnitudes."""
    table = {}
    for space in report.spec.spaces:
        for split, base in report.baseline.items():
            drops = [base["accuracy"] - r.acc for r in report.records
                     if r.space == space and r.split == split]
            if drops:
                table[(space, split)] = float(np.mean(drops))
    return table


# ---------------------------------------------------------------------------
# ablation matrix

@dataclass(frozen=True)
class AblationRow:
    variant: str
    id_acc_mean: float
    id_acc_std: float
    ood_acc_mean: float
    ood_acc_std: float
    id_gain_mean: float    # vs the pretrained model, same seeds
    ood_gain_mean: float


@dataclass
class AblationTable:
    rows: list
    seeds: tuple
    pretrained_id_mean: float
    pretrained_ood_mean: float

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "id_acc_mean", "id_acc_std", "ood_acc_mean",
                        "ood_acc_std", "id_gain_mean", "ood_gain_mean"])
            for r in self.rows:
                w.writerow([r.variant, repr(r.id_acc_mean), repr(r.id_acc_std),
                            repr(r.ood_acc_mean), repr(r.ood_acc_std),
                            repr(r.id_gain_mean), repr(r.ood_gain_mean)])


@dataclass(frozen=True)
class ModelConfig:
    hidden_widths: tuple = (64, 64)
    embed_dim: int = 16
    trainable_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden_widths):
            raise ConfigError("model dims must be >= 1")


def _ablation_one_seed(bench: BenchmarkData, model_cfg: ModelConfig,
                       pretrain_cfg: TrainConfig, finetune_cfg: TrainConfig,
                       seed: int) -> dict:
    base = build_model(bench.id_train.dim, model_cfg.hidden_widths,
                       model_cfg.embed_dim, int(bench.id_train.labels.max()) + 1,
                       seed=seed, trainable_head=True)
    pretrain(base, bench, replace(pretrain_cfg, seed=seed))
    pre = build_report(base, bench)
    out = {"pretrained": (pre.per_split["id_test"].accuracy, pre.ood_avg)}
    for variant, method in ABLATION_VARIANTS:
        mv = base.copy(requires_grad=True)
        mv.head.trainable = model_cfg.trainable_head
        cfg = replace(finetune_cfg, seed=seed,
                      regularizer=replace(finetune_cfg.regularizer, method=method))
        finetune(mv, bench, cfg)
        rep = build_report(mv, bench)
        out[variant] = (rep.per_split["id_test"].accuracy, rep.ood_avg)
    return out


def run_ablation(bench: BenchmarkData, model_cfg: ModelConfig,
                 pretrain_cfg: TrainConfig, finetune_cfg: TrainConfig,
                 seeds: Sequence[int], max_workers: Optional[int] = None) -> AblationTable:
    """{plain FT, +far, +fcr, +both} x seeds; one pretrained model per seed.

    Seeds may run in parallel threads (each works on its own model and RNG
    streams); results are joined and aggregated in seed order either way.
    """
    seeds = tuple(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    if max_workers is None:
        max_workers = threads_from_env()
    if max_workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_seed = list(pool.map(
                lambda s: _ablation_one_seed(bench, model_cfg, pretrain_cfg,
                                             finetune_cfg, s), seeds))
    else:
        per_seed = [_ablation_one_seed(bench, model_cfg, pretrain_cfg,
                                       finetune_cfg, s) for s in seeds]

    pre_id = np.asarray([r["pretrained"][0] for r in per_seed])
    pre_ood = np.asarray([r["pretrained"][1] for r in per_seed])
    rows = []
    for variant, _ in ABLATION_VARIANTS:
        ids = np.asarray([r[variant][0] for r in per_seed])
        oods = np.asarray([r[variant][1] for r in per_seed])
        rows.append(AblationRow(
            variant=variant,
            id_acc_mean=float(ids.mean()), id_acc_std=float(ids.std()),
            ood_acc_mean=float(oods.mean()), ood_acc_std=float(oods.std()),
            id_gain_mean=float((ids - pre_id).mean()),
            ood_gain_mean=float((oods - pre_ood).mean()),
        ))
    return AblationTable(rows=rows, seeds=seeds,
                         pretrained_id_mean=float(pre_id.mean()),
                         pretrained_ood_mean=float(pre_ood.mean()))


def threads_from_env() -> int:
    """Worker cap from FUNCREG_THREADS; defaults to the machine's cores."""
    raw = os.environ.get("FUNCREG_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"FUNCREG_THREADS must be an integer, got {raw!r}")
        if n < 1:
            raise ConfigError(f"FUNCREG_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# weight interpolation

@dataclass(frozen=True)
class InterpolationRecord:
    alpha: float
    split: str
    acc: float
    loss: float


def parse_alpha_range(text: str) -> list:
    """'start:end:step' inclusive of both endpoints (within float tolerance)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"alpha range must be start:end:step, got {text!r}")
    try:
        start, end, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"alpha range must be numeric, got {text!r}") from None
    if step <= 0 or end < start:
        raise ConfigError(f"need step > 0 and end >= start, got {text!r}")
    alphas = []
    i = 0
    while True:
        a = start + i * step
        if a > end + 1e-9:
            break
        # snap accumulated float error so the endpoints come out exact
        alphas.append(end if abs(a - end) <= 1e-9 else a)
        i += 1
    return alphas


def run_interpolation_sweep(pretrained: ModelState, finetuned: ModelState,
                            alphas: Sequence[float], splits: dict) -> list:
    """Evaluate (1-a)*pretrained + a*finetuned for each alpha on each split."""
    if not alphas:
        raise ConfigError("need at least one alpha")
    records = []
    for alpha in alphas:
        mi = interpolate_weights(pretrained, finetuned, float(alpha))
        for name, ds in splits.items():
            sm = evaluate(mi, ds)
            records.append(InterpolationRecord(alpha=float(alpha), split=name,
                                               acc=sm.accuracy, loss=sm.loss))
    return records


def write_interpolation_csv(records: Sequence[InterpolationRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "split", "acc", "loss"])
        for r in records:
            w.writerow([repr(r.alpha), r.split, repr(r.acc), repr(r.loss)])
