"""Encoder + prototype-head classifier with snapshot/EMA support.

The model mirrors a zero-shot classifier at desk scale: an MLP encoder maps
inputs to an embedding, and logits are inner products with one prototype row
per class. The pretrained prototype table doubles as the zero-shot classifier;
fine-tuning may train it or keep it frozen.

Checkpoints are a JSON manifest (tensor names, shapes, byte extents) next to a
``.bin`` payload of little-endian float64 values; round-trips are bit-exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParseError, ShapeError, StateError
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    """MLP weights: ReLU between layers, no activation after the last."""

    layers: list  # list of (weight Tensor [fan_in, fan_out], bias Tensor [fan_out])

    @classmethod
    def initialize(cls, input_dim: int, hidden_widths: Sequence[int],
                   embed_dim: int, rng: np.random.Generator,
                   requires_grad: bool = True) -> "EncoderParams":
        dims = [input_dim, *hidden_widths, embed_dim]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            # He initialization; biases start at zero
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            layers.append((Tensor(w, requires_grad=requires_grad),
                           Tensor(np.zeros(fan_out), requires_grad=requires_grad)))
        return cls(layers=layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, w), b)
            if i != last:
                h = T.relu(h)
        return h

    def copy(self, requires_grad: bool = False) -> "EncoderParams":
        return EncoderParams(layers=[
            (Tensor(w.data.copy(), requires_grad=requires_grad),
             Tensor(b.data.copy(), requires_grad=requires_grad))
            for w, b in self.layers
        ])


@dataclass
class PrototypeHead:
    """One embedding-space row per class; logits are feature-prototype inner products."""

    prototypes: Tensor  # [n_classes, embed_dim]
    trainable: bool = True

    @classmethod
    def initialize(cls, n_classes: int, embed_dim: int, rng: np.random.Generator,
                   trainable: bool = True) -> "PrototypeHead":
        rows = rng.standard_normal((n_classes, embed_dim)) / np.sqrt(embed_dim)
        return cls(prototypes=Tensor(rows, requires_grad=trainable), trainable=trainable)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def copy(self, requires_grad: bool = False) -> "PrototypeHead":
        return PrototypeHead(
            prototypes=Tensor(self.prototypes.data.copy(), requires_grad=requires_grad),
            trainable=self.trainable)


@dataclass
class ModelState:
    """Live parameters plus optional frozen snapshot and EMA shadow."""

    encoder: EncoderParams
    head: PrototypeHead
    snapshot: Optional["ModelState"] = None
    ema: Optional["ModelState"] = None

    # ---------------------------------------------------------- forwards
    def forward_features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != self.encoder.input_dim:
            raise ShapeError(
                f"expected input [batch, {self.encoder.input_dim}], got {x.shape}")
        return self.encoder.forward(x)

    def forward_logits(self, x) -> Tensor:
        features = self.forward_features(x)
        return T.matmul(features, T.transpose(self.head.prototypes))

    # ---------------------------------------------------------- state ops
    def take_snapshot(self) -> None:
        """Freeze a deep copy of the live params; replaces any prior snapshot."""
        self.snapshot = ModelState(encoder=self.encoder.copy(requires_grad=False),
                                   head=self.head.copy(requires_grad=False))

    def require_snapshot(self) -> "ModelState":
        if self.snapshot is None:
            raise StateError("no snapshot taken; call take_snapshot() first")
        return self.snapshot

    def ema_init(self) -> None:
        """Start the EMA shadow as a copy of the live params."""
        self.ema = ModelState(encoder=self.encoder.copy(requires_grad=False),
                              head=self.head.copy(requires_grad=False))

    def ema_update(self, decay: float) -> None:
        """shadow <- decay * shadow + (1 - decay) * live, elementwise."""
        if self.ema is None:
            raise StateError("EMA shadow not initialized; call ema_init() first")
        if not 0.0 <= decay <= 1.0:
            raise ConfigError(f"EMA decay must lie in [0, 1], got {decay}")
        for (_, live), (_, shadow) in zip(self.named_parameters(),
                                          self.ema.named_parameters()):
            shadow.data *= decay
            shadow.data += (1.0 - decay) * live.data

    # ---------------------------------------------------------- parameters
    def named_parameters(self) -> list:
        """All live (name, Tensor) pairs, a fixed deterministic order."""
        pairs = []
        for i, (w, b) in enumerate(self.encoder.layers):
            pairs.append((f"encoder.{i}.weight", w))
            pairs.append((f"encoder.{i}.bias", b))
        pairs.append(("head.prototypes", self.head.prototypes))
        return pairs

    def trainable_parameters(self) -> list:
        pairs = []
        for name, p in self.named_parameters():
            if name == "head.prototypes" and not self.head.trainable:
                continue
            pairs.append((name, p))
        return pairs

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def copy(self, requires_grad: bool = True) -> "ModelState":
        """Copy of the live params only; snapshot/EMA are not carried over."""
        head = self.head.copy(requires_grad=requires_grad and self.head.trainable)
        head.trainable = self.head.trainable
        return ModelState(encoder=self.encoder.copy(requires_grad=requires_grad),
                          head=head)


def build_model(input_dim: int, hidden_widths: Sequence[int], embed_dim: int,
                n_classes: int, seed: int, trainable_head: bool = True) -> ModelState:
    rng = np.random.default_rng([seed, 2718])
    encoder = EncoderParams.initialize(input_dim, hidden_widths, embed_dim, rng)
    head = PrototypeHead.initialize(n_classes, embed_dim, rng, trainable=trainable_head)
    return ModelState(encoder=encoder, head=head)


def subset_head(m: ModelState, classes: Sequence[int], trainable: bool = True) -> ModelState:
    """New model sharing m's encoder weights but only the given prototype rows.

    Used for fine-tuning on a class subset; row order follows ``classes`` so
    subset labels must already be positions in that list.
    """
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ConfigError(f"duplicate class ids in subset: {classes}")
    if any(c < 0 or c >= m.head.n_classes for c in classes):
        raise ConfigError(f"class id out of range [0, {m.head.n_classes}): {classes}")
    rows = m.head.prototypes.data[classes].copy()
    return ModelState(
        encoder=m.encoder.copy(requires_grad=True),
        head=PrototypeHead(prototypes=Tensor(rows, requires_grad=trainable),
                           trainable=trainable))


# ---------------------------------------------------------------------------
# flat-vector views (interpolation, parameter-space perturbations, distances)

def params_vector(m: ModelState) -> np.ndarray:
    return np.concatenate([p.data.ravel() for _, p in m.named_parameters()])


def load_params_vector(m: ModelState, vec: np.ndarray) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(p.data.size for _, p in m.named_parameters())
    if vec.size != total:
        raise ShapeError(f"vector length {vec.size} does not match model size {total}")
    offset = 0
    for _, p in m.named_parameters():
        n = p.data.size
        p.data[...] = vec[offset:offset + n].reshape(p.data.shape)
        offset += n


def param_distance(a: ModelState, b: ModelState) -> float:
    return float(np.linalg.norm(params_vector(a) - params_vector(b)))


def interpolate_weights(pretrained: ModelState, finetuned: ModelState,
                        alpha: float) -> ModelState:
    """Elementwise (1 - alpha) * pretrained + alpha * finetuned, live params only."""
    names_a = [n for n, _ in pretrained.named_parameters()]
    names_b = [n for n, _ in finetuned.named_parameters()]
    if names_a != names_b:
        raise ShapeError("models have different parameter sets")
    out = pretrained.copy(requires_grad=False)
    for (_, dst), (_, a), (_, b) in zip(out.named_parameters(),
                                        pretrained.named_parameters(),
                                        finetuned.named_parameters()):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
        dst.data[...] = (1.0 - alpha) * a.data + alpha * b.data
    return out


# ---------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(m: ModelState, path_base) -> tuple:
    """Write <base>.json manifest and <base>.bin little-endian float64 payload."""
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    payload = bytearray()
    for name, p in m.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(p.data.shape),
            "byte_offset": len(payload),
            "byte_len": len(raw),
        })
        payload.extend(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "tensors": entries,
        "meta": {
            "input_dim": m.encoder.input_dim,
            "embed_dim": m.encoder.embed_dim,
            "n_classes": m.head.n_classes,
            "trainable_head": m.head.trainable,
        },
    }
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    bin_path.write_bytes(bytes(payload))
    return json_path, bin_path


def load_checkpoint(path_base) -> ModelState:
    base = Path(path_base)
    json_path = base if base.suffix == ".json" else base.with_suffix(".json")
    bin_path = json_path.with_suffix(".bin")
    if not json_path.exists():
        raise ParseError(f"checkpoint manifest not found: {json_path}")
    try:
        manifest = json.loads(json_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed checkpoint manifest {json_path}: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {manifest.get('version')!r}")
    if not bin_path.exists():
        raise ParseError(f"checkpoint payload not found: {bin_path}")
    blob = bin_path.read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        off, ln = entry["byte_offset"], entry["byte_len"]
        want = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if ln != want:
            raise ParseError(
                f"tensor {name}: manifest shape {shape} needs {want} bytes, has {ln}")
        if off + ln > len(blob):
            raise ParseError(
                f"truncated payload: tensor {name} ends at byte {off + ln}, "
                f"file has {len(blob)}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=ln // 8,
                                     offset=off).reshape(shape).copy()

    meta = manifest.get("meta", {})
    layers = []
    i = 0
    while f"encoder.{i}.weight" in arrays:
        layers.append((Tensor(arrays[f"encoder.{i}.weight"], requires_grad=True),
                       Tensor(arrays[f"encoder.{i}.bias"], requires_grad=True)))
        i += 1
    if not layers or "head.prototypes" not in arrays:
        raise ParseError("checkpoint missing encoder layers or head.prototypes")
    trainable = bool(meta.get("trainable_head", True))
    head = PrototypeHead(prototypes=Tensor(arrays["head.prototypes"],
                                           requires_grad=trainable),
                         trainable=trainable)
    return ModelState(encoder=EncoderParams(layers=layers), head=head)
