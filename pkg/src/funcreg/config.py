"""Run-config JSON parsing, canonical hashing, and run manifests.

A run config is one JSON document with sections {data, model, train,
regularizer, augment}. Parsing is strict: an unknown key anywhere is a
ConfigError naming that key, so typos cannot silently fall back to defaults.
The 'data' section is optional when a command receives --data instead.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .analysis import ModelConfig, PerturbationSpec
from .augment import AugmentPolicy
from .data import ShiftBenchmark, benchmark_from_dict, benchmark_to_dict
from .errors import ConfigError, ParseError
from .regularizers import RegularizerConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: Optional[ShiftBenchmark] = None


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return obj


def _strict(obj: dict, allowed: set, context: str) -> dict:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} key(s): {sorted(unknown)}")
    return obj


def _build(cls, obj: dict, context: str):
    try:
        return cls(**obj)
    except TypeError as e:
        raise ConfigError(f"bad {context} section: {e}") from None


def parse_model_config(obj: dict) -> ModelConfig:
    _strict(obj, {"hidden_widths", "embed_dim", "trainable_head"}, "model")
    return _build(ModelConfig, obj, "model")


def parse_regularizer_config(obj: dict) -> RegularizerConfig:
    _strict(obj, {"method", "lambda1", "lambda2", "lambda_base", "lipsum_probes",
                  "car_contexts", "ema_decay", "output_space"}, "regularizer")
    return _build(RegularizerConfig, obj, "regularizer")


def parse_augment_policy(obj: dict) -> AugmentPolicy:
    _strict(obj, {"n_ops", "magnitude", "ops", "seed"}, "augment")
    if "ops" in obj:
        obj = dict(obj, ops=tuple(obj["ops"]))
    return _build(AugmentPolicy, obj, "augment")


def parse_train_config(obj: dict, regularizer: RegularizerConfig,
                       augment: AugmentPolicy, cli_strict: bool = True) -> TrainConfig:
    _strict(obj, {"phase", "epochs", "batch_size", "peak_lr", "warmup_steps",
                  "schedule", "weight_decay", "beta1", "beta2", "eps", "seed",
                  "eval_every"}, "train")
    cfg = _build(TrainConfig, dict(obj, regularizer=regularizer, augment=augment),
                 "train")
    if cli_strict and cfg.epochs < 1:
        raise ConfigError("train.epochs must be >= 1")
    return cfg


def parse_run_config(obj: dict) -> RunConfig:
    _strict(obj, {"data", "model", "train", "regularizer", "augment"}, "top-level")
    reg = parse_regularizer_config(obj.get("regularizer", {}))
    aug = parse_augment_policy(obj.get("augment", {}))
    train = parse_train_config(obj.get("train", {}), reg, aug)
    model = parse_model_config(obj.get("model", {}))
    data = benchmark_from_dict(obj["data"]) if "data" in obj else None
    return RunConfig(model=model, train=train, data=data)


def parse_perturbation_spec(obj: dict) -> PerturbationSpec:
    _strict(obj, {"space", "spaces", "n_directions", "magnitudes",
                  "parameter_magnitudes", "parameter_mode", "seed",
                  "eval_splits"}, "perturbation")
    if "space" in obj and "spaces" in obj:
        raise ConfigError("give either 'space' or 'spaces', not both")
    if "space" in obj:
        obj = dict(obj)
        obj["spaces"] = (obj.pop("space"),)
    return _build(PerturbationSpec, obj, "perturbation")


# ---------------------------------------------------------------------------
# canonical serialization (for hashing and manifests)

def run_config_to_dict(rc: RunConfig) -> dict:
    t, r, a, m = rc.train, rc.train.regularizer, rc.train.augment, rc.model
    doc = {
        "model": {"hidden_widths": list(m.hidden_widths), "embed_dim": m.embed_dim,
                  "trainable_head": m.trainable_head},
        "train": {"phase": t.phase, "epochs": t.epochs, "batch_size": t.batch_size,
                  "peak_lr": t.peak_lr, "warmup_steps": t.warmup_steps,
                  "schedule": t.schedule, "weight_decay": t.weight_decay,
                  "beta1": t.beta1, "beta2": t.beta2, "eps": t.eps,
                  "seed": t.seed, "eval_every": t.eval_every},
        "regularizer": {"method": r.method, "lambda1": r.lambda1,
                        "lambda2": r.lambda2, "lambda_base": r.lambda_base,
                        "lipsum_probes": r.lipsum_probes,
                        "car_contexts": r.car_contexts, "ema_decay": r.ema_decay,
                        "output_space": r.output_space},
        "augment": {"n_ops": a.n_ops, "magnitude": a.magnitude,
                    "ops": list(a.ops), "seed": a.seed},
    }
    if rc.data is not None:
        doc["data"] = benchmark_to_dict(rc.data)
    return doc


def canonical_hash(doc: dict) -> str:
    """Stable digest of a JSON-serializable document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(outdir, command: str, config_doc: dict, inputs: list,
                   outputs: list, seed: Optional[int],
                   wall_clock_s: float) -> Path:
    """RunManifest: the only output artifact that carries timing."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = canonical_hash(config_doc)
    doc = {
        "run_id": f"{command}-{digest[:12]}",
        "command": command,
        "config_hash": digest,
        "config": config_doc,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_clock_s": wall_clock_s,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


class Stopwatch:
    def __enter__(self):
        self._t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.monotonic() - self._t0
