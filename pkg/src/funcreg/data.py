"""Synthetic covariate-shift benchmark on 8x8 intensity grids.

Each class has a canonical 8x8 template (a geometric motif plus a smooth
class-specific blob field that breaks rotational symmetry between classes).
A domain applies a fixed transform stack to every example it emits:

    rotate(template) + intensity_shift + background_texture + noise

Labels are assigned by template, so every transform is label-preserving by
construction. The generator is fully determined by (spec, seed): each split
draws from its own seeded RNG stream, so splits are statistically independent
and regeneration is bit-identical.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .augment import rotate_grid
from .errors import ConfigError, DataError, ParseError, StateError

GRID_SIDE = 8
INPUT_DIM = GRID_SIDE * GRID_SIDE
FEATURE_MIN = -3.0
FEATURE_MAX = 3.0

_TEXTURE_AMPLITUDE = 0.25
_BLOB_AMPLITUDE = 0.6
_MOTIF_AMPLITUDE = 1.4

# fixed stream keys so each split has an independent RNG lineage
_STREAM_PRETRAIN = 0
_STREAM_ID_TRAIN = 1
_STREAM_ID_TEST = 2
_STREAM_OOD_BASE = 3


@dataclass(frozen=True)
class DomainSpec:
    """One environment: a fixed transform stack applied to every example."""

    domain_id: str
    rotation_deg: float = 0.0
    noise_sigma: float = 0.05
    intensity_shift: float = 0.0
    background_texture_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class ShiftBenchmark:
    """Benchmark spec: class templates plus pretrain/ID/OOD domain sets."""

    n_classes: int
    pretrain_domains: list
    id_domain: DomainSpec
    ood_domains: list
    seed: int = 0
    n_per_split: int = 512
    min_per_class: int = 2
    templates: Optional[np.ndarray] = None  # [n_classes, 8, 8]; derived when None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if not self.pretrain_domains or not self.ood_domains:
            raise ConfigError("pretrain_domains and ood_domains must be non-empty")
        ids = [d.domain_id for d in [*self.pretrain_domains, self.id_domain,
                                     *self.ood_domains]]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate domain_id in benchmark: {sorted(ids)}")

    def resolved_templates(self) -> np.ndarray:
        if self.templates is None:
            return build_templates(self.n_classes, self.seed)
        t = np.asarray(self.templates, dtype=np.float64)
        if t.shape != (self.n_classes, GRID_SIDE, GRID_SIDE):
            raise ConfigError(
                f"templates must be [{self.n_classes}, {GRID_SIDE}, {GRID_SIDE}], "
                f"got {t.shape}")
        return t


@dataclass
class Dataset:
    """Columnar split: float64 features [n, 64] and int64 labels [n]."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError("features must be 2-d and labels 1-d")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def filter_classes(self, classes: Sequence[int], remap: bool = False) -> "Dataset":
        """Rows whose label is in ``classes``; optionally remap labels to positions."""
        classes = list(classes)
        mask = np.isin(self.labels, classes)
        feats = self.features[mask]
        labels = self.labels[mask]
        if remap:
            lut = {c: i for i, c in enumerate(classes)}
            labels = np.asarray([lut[int(c)] for c in labels], dtype=np.int64)
        return Dataset(features=feats.copy(), labels=labels.copy())


@dataclass
class BenchmarkData:
    """All generated splits; OOD splits keyed 'ood_<domain_id>'."""

    pretrain: Dataset
    id_train: Dataset
    id_test: Dataset
    ood_tests: dict

    def eval_splits(self) -> dict:
        out = {"id_test": self.id_test}
        out.update(self.ood_tests)
        return out


# ---------------------------------------------------------------------------
# templates and domain rendering

def _bilinear_upsample(small: np.ndarray, out_side: int) -> np.ndarray:
    n = small.shape[0]
    coords = np.linspace(0.0, n - 1.0, out_side)
    r0 = np.floor(coords).astype(np.int64)
    r1 = np.minimum(r0 + 1, n - 1)
    fr = coords - r0
    rows = (1 - fr)[:, None] * small[r0] + fr[:, None] * small[r1]
    cols = (1 - fr)[None, :] * rows[:, r0] + fr[None, :] * rows[:, r1]
    return cols


def _motif(index: int) -> np.ndarray:
    g = np.zeros((GRID_SIDE, GRID_SIDE))
    r, c = np.meshgrid(np.arange(GRID_SIDE), np.arange(GRID_SIDE), indexing="ij")
    kind = index % 10
    if kind == 0:      # horizontal bar
        g[3:5, :] = 1.0
    elif kind == 1:    # vertical bar
        g[:, 3:5] = 1.0
    elif kind == 2:    # main diagonal band
        g[np.abs(r - c) <= 1] = 1.0
    elif kind == 3:    # anti-diagonal band
        g[np.abs(r + c - (GRID_SIDE - 1)) <= 1] = 1.0
    elif kind == 4:    # plus sign
        g[3:5, :] = 1.0
        g[:, 3:5] = 1.0
    elif kind == 5:    # border ring
        g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = 1.0
    elif kind == 6:    # center block
        g[2:6, 2:6] = 1.0
    elif kind == 7:    # corner blocks
        g[:2, :2] = g[:2, -2:] = g[-2:, :2] = g[-2:, -2:] = 1.0
    elif kind == 8:    # coarse checkerboard
        g[((r // 2) + (c // 2)) % 2 == 0] = 1.0
    else:              # T shape
        g[1:3, :] = 1.0
        g[3:, 3:5] = 1.0
    return g


def build_templates(n_classes: int, seed: int) -> np.ndarray:
    """Motif + seeded smooth blob field per class.

    The blob field keeps classes distinguishable under rotation even when two
    motifs are near-rotations of each other (bars, diagonals).
    """
    templates = np.empty((n_classes, GRID_SIDE, GRID_SIDE))
    for c in range(n_classes):
        rng = np.random.default_rng([seed, 101, c])
        blob = _bilinear_upsample(rng.standard_normal((4, 4)), GRID_SIDE)
        templates[c] = np.clip(
            _MOTIF_AMPLITUDE * _motif(c) + _BLOB_AMPLITUDE * blob, -2.5, 2.5)
    return templates


def background_texture(texture_seed: int) -> np.ndarray:
    """Fixed smooth low-amplitude field; a function of the seed alone."""
    rng = np.random.default_rng([texture_seed, 202])
    return _TEXTURE_AMPLITUDE * _bilinear_upsample(rng.standard_normal((4, 4)),
                                                   GRID_SIDE)


def domain_pattern(spec: ShiftBenchmark, domain: DomainSpec, label: int,
                   templates: Optional[np.ndarray] = None) -> np.ndarray:
    """Noiseless transformed template for (domain, label); 8x8 grid."""
    if label < 0 or label >= spec.n_classes:
        raise IndexError(f"label {label} out of range [0, {spec.n_classes})")
    temps = templates if templates is not None else spec.resolved_templates()
    grid = rotate_grid(temps[label], domain.rotation_deg)
    grid = grid + domain.intensity_shift
    grid = grid + background_texture(domain.background_texture_seed)
    return np.clip(grid, FEATURE_MIN, FEATURE_MAX)


# ---------------------------------------------------------------------------
# generation

def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    counts = np.full(n_classes, n // n_classes, dtype=np.int64)
    counts[: n % n_classes] += 1
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), counts)
    return rng.permutation(labels)


def _generate_split(spec: ShiftBenchmark, domains: Sequence[DomainSpec], n: int,
                    stream_key: int, templates: np.ndarray) -> Dataset:
    rng = np.random.default_rng([spec.seed, 303, stream_key])
    labels = _balanced_labels(n, spec.n_classes, rng)
    patterns = {}
    features = np.empty((n, INPUT_DIM))
    for i in range(n):
        domain = domains[i % len(domains)]
        key = (domain.domain_id, int(labels[i]))
        if key not in patterns:
            patterns[key] = domain_pattern(spec, domain, int(labels[i]),
                                           templates).ravel()
        noise = rng.standard_normal(INPUT_DIM) * domain.noise_sigma
        features[i] = np.clip(patterns[key] + noise, FEATURE_MIN, FEATURE_MAX)
    return Dataset(features=features, labels=labels)


def generate_benchmark(spec: ShiftBenchmark,
                       n_per_split: Optional[int] = None) -> BenchmarkData:
    """Render every split. Same spec, same bytes."""
    n = spec.n_per_split if n_per_split is None else n_per_split
    if n < spec.n_classes * spec.min_per_class:
        raise ConfigError(
            f"n_per_split={n} cannot give every one of {spec.n_classes} classes "
            f">= {spec.min_per_class} examples")
    templates = spec.resolved_templates()
    # pretrain split is larger: broad multi-domain exposure
    n_pre = max(n, n * max(1, len(spec.pretrain_domains) // 3))
    ood = {}
    for i, dom in enumerate(spec.ood_domains):
        ood[f"ood_{dom.domain_id}"] = _generate_split(
            spec, [dom], n, _STREAM_OOD_BASE + i, templates)
    return BenchmarkData(
        pretrain=_generate_split(spec, spec.pretrain_domains, n_pre,
                                 _STREAM_PRETRAIN, templates),
        id_train=_generate_split(spec, [spec.id_domain], n, _STREAM_ID_TRAIN,
                                 templates),
        id_test=_generate_split(spec, [spec.id_domain], n, _STREAM_ID_TEST,
                                templates),
        ood_tests=ood,
    )


def default_benchmark(seed: int = 0, n_per_split: int = 512) -> ShiftBenchmark:
    """The stock desk benchmark: broad pretraining, narrow ID, four OOD shifts."""
    rotations = [-60, -40, -20, 0, 20, 40, 60, -50, -10, 10, 30, 50]
    noises = [0.05, 0.15, 0.25]
    shifts = [-0.25, 0.0, 0.25]
    pretrain = [
        DomainSpec(domain_id=f"pre{i}", rotation_deg=rot,
                   noise_sigma=noises[i % len(noises)],
                   intensity_shift=shifts[i % len(shifts)],
                   background_texture_seed=i)
        for i, rot in enumerate(rotations)
    ]
    return ShiftBenchmark(
        n_classes=8,
        pretrain_domains=pretrain,
        id_domain=DomainSpec(domain_id="id", rotation_deg=0.0, noise_sigma=0.05,
                             intensity_shift=0.0, background_texture_seed=100),
        ood_domains=[
            DomainSpec(domain_id="rot30", rotation_deg=30.0, noise_sigma=0.1,
                       intensity_shift=0.0, background_texture_seed=201),
            DomainSpec(domain_id="rot60", rotation_deg=60.0, noise_sigma=0.1,
                       intensity_shift=0.0, background_texture_seed=202),
            DomainSpec(domain_id="noise", rotation_deg=0.0, noise_sigma=0.3,
                       intensity_shift=0.0, background_texture_seed=203),
            DomainSpec(domain_id="mix", rotation_deg=-45.0, noise_sigma=0.2,
                       intensity_shift=0.35, background_texture_seed=204),
        ],
        seed=seed,
        n_per_split=n_per_split,
    )


# ---------------------------------------------------------------------------
# batching

def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple]:
    """Shuffled minibatches; the permutation is keyed by (seed, epoch).

    The final short batch is kept, so one epoch covers the dataset exactly once.
    """
    if ds.n == 0:
        raise StateError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([seed, epoch, 404]).permutation(ds.n)
    for start in range(0, ds.n, batch_size):
        idx = perm[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# CSV and directory I/O

def save_csv(ds: Dataset, path) -> None:
    """Header 'label,x0,...'; floats as shortest round-trip decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["label"] + [f"x{i}" for i in range(ds.dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for label, row in zip(ds.labels, ds.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv(path, n_classes: Optional[int] = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or header[0] != "label" or len(header) < 2:
            raise ParseError(f"{path}: line 1: bad header {header[:3]}...")
        dim = len(header) - 1
        expected = ["label"] + [f"x{i}" for i in range(dim)]
        if header != expected:
            raise ParseError(f"{path}: line 1: header does not match label,x0..x{dim-1}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ParseError(
                    f"{path}: line {lineno}: expected {dim + 1} columns, got {len(row)}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from None
            if label < 0:
                raise ParseError(f"{path}: line {lineno}: negative label {label}")
            if n_classes is not None and label >= n_classes:
                raise ParseError(
                    f"{path}: line {lineno}: label {label} out of range [0, {n_classes})")
            if not np.all(np.isfinite(values)):
                raise ParseError(f"{path}: line {lineno}: non-finite feature value")
            labels.append(label)
            feats.append(values)
    if not labels:
        raise ParseError(f"{path}: no data rows")
    return Dataset(features=np.asarray(feats), labels=np.asarray(labels))


def domain_to_dict(d: DomainSpec) -> dict:
    return {
        "domain_id": d.domain_id,
        "rotation_deg": d.rotation_deg,
        "noise_sigma": d.noise_sigma,
        "intensity_shift": d.intensity_shift,
        "background_texture_seed": d.background_texture_seed,
    }


def domain_from_dict(obj: dict) -> DomainSpec:
    allowed = {"domain_id", "rotation_deg", "noise_sigma", "intensity_shift",
               "background_texture_seed"}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown domain key(s): {sorted(unknown)}")
    if "domain_id" not in obj:
        raise ConfigError("domain is missing required key 'domain_id'")
    return DomainSpec(**obj)


def benchmark_to_dict(spec: ShiftBenchmark) -> dict:
    out = {
        "n_classes": spec.n_classes,
        "seed": spec.seed,
        "n_per_split": spec.n_per_split,
        "min_per_class": spec.min_per_class,
        "pretrain_domains": [domain_to_dict(d) for d in spec.pretrain_domains],
        "id_domain": domain_to_dict(spec.id_domain),
        "ood_domains": [domain_to_dict(d) for d in spec.ood_domains],
    }
    if spec.templates is not None:
        out["templates"] = np.asarray(spec.templates).tolist()
    return out


def benchmark_from_dict(obj: dict) -> ShiftBenchmark:
    allowed = {"n_classes", "seed", "n_per_split", "min_per_class",
               "pretrain_domains", "id_domain", "ood_domains", "templates"}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown benchmark key(s): {sorted(unknown)}")
    required = {"n_classes", "pretrain_domains", "id_domain", "ood_domains"}
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"benchmark spec missing key(s): {sorted(missing)}")
    kwargs = dict(obj)
    kwargs["pretrain_domains"] = [domain_from_dict(d) for d in obj["pretrain_domains"]]
    kwargs["id_domain"] = domain_from_dict(obj["id_domain"])
    kwargs["ood_domains"] = [domain_from_dict(d) for d in obj["ood_domains"]]
    if "templates" in kwargs and kwargs["templates"] is not None:
        kwargs["templates"] = np.asarray(kwargs["templates"], dtype=np.float64)
    return ShiftBenchmark(**kwargs)


def save_benchmark_dir(spec: ShiftBenchmark, data: BenchmarkData, outdir) -> dict:
    """Split CSVs plus benchmark.json describing them; returns the file map."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {"pretrain": "pretrain.csv", "id_train": "id_train.csv",
             "id_test": "id_test.csv"}
    save_csv(data.pretrain, outdir / files["pretrain"])
    save_csv(data.id_train, outdir / files["id_train"])
    save_csv(data.id_test, outdir / files["id_test"])
    for name, ds in data.ood_tests.items():
        files[name] = f"{name}.csv"
        save_csv(ds, outdir / files[name])
    doc = {"benchmark": benchmark_to_dict(spec), "splits": files}
    (outdir / "benchmark.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return files


def load_benchmark_dir(datadir) -> tuple:
    """Inverse of save_benchmark_dir: (spec, BenchmarkData)."""
    datadir = Path(datadir)
    doc_path = datadir / "benchmark.json"
    if not doc_path.exists():
        raise ParseError(f"benchmark manifest not found: {doc_path}")
    try:
        doc = json.loads(doc_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed benchmark manifest {doc_path}: {e}") from e
    spec = benchmark_from_dict(doc["benchmark"])
    splits = doc["splits"]
    k = spec.n_classes

    def load(name):
        return load_csv(datadir / splits[name], n_classes=k)

    ood = {name: load(name) for name in splits if name.startswith("ood_")}
    return spec, BenchmarkData(pretrain=load("pretrain"), id_train=load("id_train"),
                               id_test=load("id_test"), ood_tests=ood)
