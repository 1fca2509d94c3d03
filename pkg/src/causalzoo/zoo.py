"""Model zoo construction: independent hyperparameter sampling, synthetic
datasets, seeded population training, and on-disk persistence.

Sampling never looks at the data or at any trained outcome; every field of
the hyperparameter vector is drawn from its own stream keyed by
(sampling_seed, model index, field name), which realizes exchangeability
and unconfoundedness by construction.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn_engine
from .errors import ConfigurationError, FormatError, InputError
from .nn_engine import ArchitectureSpec, ParameterSet, TrainResult

DATASET_KINDS = ("synthetic_shapes_16x16", "synthetic_blobs_2d", "external")
TRAIN_SEED_MODES = ("shared", "per_model")

# Fraction of every dataset held out as the fixed test split. The sampled
# split_fraction only scales the train subset taken from the remaining pool,
# so test-set identity never varies across the zoo.
TEST_FRACTION = 0.25

WEIGHTS_MAGIC = b"ZOOW"
WEIGHTS_VERSION = 1
MANIFEST_VERSION = 1

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class HyperparamVector:
    """One draw of all training hyperparameters (the treatment vector)."""

    optimizer: str
    activation: str
    w0_type: str
    b0_type: str
    w0_std: float
    learning_rate: float
    l2: float
    dropout: float
    split_fraction: float

    def __post_init__(self):
        checks = [
            (self.optimizer in nn_engine.OPTIMIZERS, f"optimizer {self.optimizer!r}"),
            (self.activation in nn_engine.ACTIVATIONS, f"activation {self.activation!r}"),
            (self.w0_type in nn_engine.INIT_KINDS, f"w0_type {self.w0_type!r}"),
            (self.b0_type in nn_engine.INIT_KINDS, f"b0_type {self.b0_type!r}"),
            (1e-3 <= self.w0_std <= 0.5, f"w0_std {self.w0_std}"),
            (5e-4 <= self.learning_rate <= 5e-2, f"learning_rate {self.learning_rate}"),
            (1e-8 <= self.l2 <= 1e-2, f"l2 {self.l2}"),
            (0.0 <= self.dropout <= 0.7, f"dropout {self.dropout}"),
            (0.0 < self.split_fraction < 1.0, f"split_fraction {self.split_fraction}"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigurationError(f"hyperparameter out of range: {what}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperparamVector":
        _reject_unknown(d, cls.__dataclass_fields__, "hyperparameter vector")
        return cls(**d)


HPARAM_KEYS = tuple(HyperparamVector.__dataclass_fields__)


@dataclass(frozen=True)
class HyperparamSpace:
    """Sampling ranges/choices for each hyperparameter field.

    Continuous fields are sampled log-uniformly except dropout (linear);
    split_fraction is drawn from a small set of discrete choices.
    """

    optimizers: tuple = nn_engine.OPTIMIZERS
    activations: tuple = nn_engine.ACTIVATIONS
    w0_types: tuple = ("normal", "uniform")
    b0_types: tuple = ("normal", "uniform", "zeros")
    w0_std_range: tuple = (1e-3, 0.5)
    learning_rate_range: tuple = (5e-4, 5e-2)
    l2_range: tuple = (1e-8, 1e-2)
    dropout_range: tuple = (0.0, 0.7)
    split_choices: tuple = (0.5, 0.7, 0.9)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperparamSpace":
        _reject_unknown(d, cls.__dataclass_fields__, "hyperparameter space")
        return cls(**{k: tuple(v) for k, v in d.items()})


def _field_rng(sampling_seed: int, index: int, field_name: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(field_name.encode()).digest()[:8], "little")
    seq = np.random.SeedSequence([int(sampling_seed) & _U64, int(index), tag])
    return np.random.default_rng(seq)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(10.0 ** rng.uniform(math.log10(lo), math.log10(hi)))


def sample_hparams(space: HyperparamSpace, index: int, sampling_seed: int) -> HyperparamVector:
    """Draw one hyperparameter vector; every field from an independent stream."""
    if index < 0:
        raise InputError(f"index must be >= 0, got {index}")
    pick = lambda name, choices: choices[int(_field_rng(sampling_seed, index, name).integers(len(choices)))]
    rng = lambda name: _field_rng(sampling_seed, index, name)
    return HyperparamVector(
        optimizer=pick("optimizer", space.optimizers),
        activation=pick("activation", space.activations),
        w0_type=pick("w0_type", space.w0_types),
        b0_type=pick("b0_type", space.b0_types),
        w0_std=_log_uniform(rng("w0_std"), *space.w0_std_range),
        learning_rate=_log_uniform(rng("learning_rate"), *space.learning_rate_range),
        l2=_log_uniform(rng("l2"), *space.l2_range),
        dropout=float(rng("dropout").uniform(*space.dropout_range)),
        split_fraction=pick("split_fraction", space.split_choices),
    )


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    num_classes: int = 3
    size: int = 600
    generation_seed: int = 7
    external_path: str | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.size < 8:
            raise ConfigurationError(f"dataset size must be >= 8, got {self.size}")
        if self.kind == "external" and not self.external_path:
            raise ConfigurationError("external dataset requires external_path")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        _reject_unknown(d, cls.__dataclass_fields__, "dataset spec")
        return cls(**d)


@dataclass
class Dataset:
    """Inputs/labels in canonical order plus the fixed train-pool/test split."""

    inputs: np.ndarray   # (N, H, W, C) float64
    labels: np.ndarray   # (N,) int64
    pool_idx: np.ndarray
    test_idx: np.ndarray

    def train_indices(self, split_fraction: float) -> np.ndarray:
        n = int(math.floor(split_fraction * len(self.pool_idx)))
        return self.pool_idx[:max(n, 1)]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])


# --- synthetic glyph renderers (16x16, one channel) -------------------------

def _glyph_rect(rng, img):
    r0, c0 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    h = int(rng.integers(7, 16 - r0 - 1))
    w = int(rng.integers(7, 16 - c0 - 1))
    img[r0, c0:c0 + w] = 1.0
    img[r0 + h - 1, c0:c0 + w] = 1.0
    img[r0:r0 + h, c0] = 1.0
    img[r0:r0 + h, c0 + w - 1] = 1.0


def _glyph_ellipse(rng, img):
    cy, cx = rng.uniform(6.0, 9.0), rng.uniform(6.0, 9.0)
    ry, rx = rng.uniform(3.0, 6.0), rng.uniform(3.0, 6.0)
    yy, xx = np.mgrid[0:16, 0:16]
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    img[np.abs(d - 1.0) < 0.28] = 1.0


def _glyph_cross(rng, img):
    cy, cx = int(rng.integers(5, 11)), int(rng.integers(5, 11))
    arm = int(rng.integers(4, 8))
    for t in range(-arm, arm + 1):
        y, x = cy + t, cx + t
        if 0 <= y < 16 and 0 <= x < 16:
            img[y, x] = 1.0
        y, x = cy + t, cx - t
        if 0 <= y < 16 and 0 <= x < 16:
            img[y, x] = 1.0


def _glyph_triangle(rng, img):
    top = int(rng.integers(1, 5))
    base = int(rng.integers(11, 15))
    cx = int(rng.integers(6, 10))
    half = int(rng.integers(4, 7))
    img[base, max(cx - half, 0):min(cx + half + 1, 16)] = 1.0
    for r in range(top, base):
        frac = (r - top) / max(base - top, 1)
        off = int(round(frac * half))
        for x in (cx - off, cx + off):
            if 0 <= x < 16:
                img[r, x] = 1.0


def _glyph_stripes_h(rng, img):
    period = int(rng.integers(3, 5))
    phase = int(rng.integers(0, period))
    img[phase::period, :] = 1.0


def _glyph_stripes_v(rng, img):
    period = int(rng.integers(3, 5))
    phase = int(rng.integers(0, period))
    img[:, phase::period] = 1.0


_GLYPHS = (_glyph_rect, _glyph_ellipse, _glyph_cross, _glyph_triangle,
           _glyph_stripes_h, _glyph_stripes_v)


def _balanced_labels(size: int, k: int) -> np.ndarray:
    counts = [size // k + (1 if i < size % k else 0) for i in range(k)]
    return np.concatenate([np.full(c, i, dtype=np.int64) for i, c in enumerate(counts)])


def _split(n: int) -> tuple[np.ndarray, np.ndarray]:
    n_test = max(int(math.ceil(TEST_FRACTION * n)), 1)
    return np.arange(0, n - n_test), np.arange(n - n_test, n)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic dataset construction from the spec alone."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.generation_seed & _U64, 0]))
    if spec.kind == "synthetic_shapes_16x16":
        if spec.num_classes > len(_GLYPHS):
            raise ConfigurationError(
                f"synthetic_shapes_16x16 supports at most {len(_GLYPHS)} classes")
        labels = _balanced_labels(spec.size, spec.num_classes)
        inputs = np.empty((spec.size, 16, 16, 1), dtype=np.float64)
        for i, lab in enumerate(labels):
            img = rng.uniform(0.0, 0.15, (16, 16))
            _GLYPHS[lab](rng, img)
            inputs[i, :, :, 0] = img
    elif spec.kind == "synthetic_blobs_2d":
        labels = _balanced_labels(spec.size, spec.num_classes)
        angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
        centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        pts = centers[labels] + rng.normal(0.0, 0.45, (spec.size, 2))
        inputs = pts.reshape(spec.size, 1, 2, 1).astype(np.float64)
    else:
        inputs, labels = load_external_dataset(spec.external_path)
        if labels.max() >= spec.num_classes:
            raise FormatError(
                f"external dataset has labels up to {labels.max()} but num_classes={spec.num_classes}")
        if len(labels) != spec.size:
            raise FormatError(f"external dataset has {len(labels)} rows, spec says {spec.size}")
    shuffle = np.random.default_rng(
        np.random.SeedSequence([spec.generation_seed & _U64, 1])).permutation(spec.size)
    inputs, labels = inputs[shuffle], labels[shuffle]
    pool, test = _split(spec.size)
    return Dataset(inputs, labels, pool, test)


def save_external_dataset(path, inputs: np.ndarray, labels: np.ndarray) -> None:
    np.savez(path, inputs=np.asarray(inputs, dtype=np.float64),
             labels=np.asarray(labels, dtype=np.int64))


def load_external_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with np.load(path) as z:
            return z["inputs"].astype(np.float64), z["labels"].astype(np.int64)
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read external dataset at {path}: {exc}") from exc


@dataclass
class ModelRecord:
    model_id: int
    hparams: HyperparamVector
    params: ParameterSet | None
    test_accuracy: float
    diverged: bool
    train_seed: int


@dataclass
class ZooManifest:
    zoo_id: str
    arch: ArchitectureSpec
    dataset: DatasetSpec
    sampling_seed: int
    train_seed: int
    train_seed_mode: str
    epochs: int
    batch_size: int
    space: HyperparamSpace
    records: list[ModelRecord] = field(default_factory=list)

    def accuracies(self) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.records], dtype=np.float64)

    def record(self, model_id: int) -> ModelRecord:
        for r in self.records:
            if r.model_id == model_id:
                return r
        raise InputError(f"no model_id {model_id} in zoo {self.zoo_id}")


def _model_train_seed(train_seed: int, mode: str, model_id: int) -> int:
    if mode == "shared":
        return int(train_seed)
    seq = np.random.SeedSequence([int(train_seed) & _U64, int(model_id)])
    return int(seq.generate_state(1, np.uint64)[0])


def build_zoo(n: int, arch: ArchitectureSpec, dataset_spec: DatasetSpec,
              epochs: int, sampling_seed: int,
              train_seed_mode: str = "shared", train_seed: int = 0x5EED,
              space: HyperparamSpace | None = None,
              batch_size: int = nn_engine.DEFAULT_BATCH_SIZE,
              progress=None) -> ZooManifest:
    """Sample and train `n` models. Records are keyed by model_id and each
    one is a pure function of (manifest metadata, model_id), so the build
    order is irrelevant and any record can be rebuilt in isolation."""
    if n < 1:
        raise ConfigurationError(f"zoo size must be >= 1, got {n}")
    if train_seed_mode not in TRAIN_SEED_MODES:
        raise ConfigurationError(f"unknown train_seed_mode {train_seed_mode!r}")
    space = space or HyperparamSpace()
    dataset = generate_dataset(dataset_spec)
    manifest = ZooManifest(
        zoo_id=f"zoo-s{int(sampling_seed)}-n{int(n)}",
        arch=arch, dataset=dataset_spec, sampling_seed=int(sampling_seed),
        train_seed=int(train_seed), train_seed_mode=train_seed_mode,
        epochs=int(epochs), batch_size=int(batch_size), space=space)
    for model_id in range(n):
        manifest.records.append(_train_record(manifest, model_id, dataset))
        if progress is not None:
            progress(model_id + 1, n)
    return manifest


def _train_record(manifest: ZooManifest, model_id: int, dataset: Dataset) -> ModelRecord:
    hp = sample_hparams(manifest.space, model_id, manifest.sampling_seed)
    seed = _model_train_seed(manifest.train_seed, manifest.train_seed_mode, model_id)
    result: TrainResult = nn_engine.train(
        manifest.arch, hp, dataset, manifest.epochs, seed, manifest.batch_size)
    return ModelRecord(model_id, hp, result.params, result.test_accuracy,
                       result.diverged, seed)


def rebuild_model(manifest: ZooManifest, model_id: int,
                  dataset: Dataset | None = None) -> ModelRecord:
    """Retrain a single record from manifest metadata; reproduces it exactly."""
    dataset = dataset or generate_dataset(manifest.dataset)
    return _train_record(manifest, model_id, dataset)


# --- persistence -------------------------------------------------------------

def _reject_unknown(d: dict, allowed, what: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise FormatError(f"unknown field(s) in {what}: {sorted(unknown)}")


def _arch_to_dict(arch: ArchitectureSpec) -> dict:
    return {
        "input_shape": list(arch.input_shape),
        "conv_layers": [list(l) for l in arch.conv_layers],
        "num_classes": arch.num_classes,
        "activation": arch.activation,
    }


def arch_from_dict(d: dict) -> ArchitectureSpec:
    _reject_unknown(d, ("input_shape", "conv_layers", "num_classes", "activation"), "architecture")
    return ArchitectureSpec(
        input_shape=tuple(d["input_shape"]),
        conv_layers=tuple(tuple(l) for l in d["conv_layers"]),
        num_classes=int(d["num_classes"]),
        activation=d["activation"])


def manifest_to_json(manifest: ZooManifest) -> str:
    doc = {
        "format_version": MANIFEST_VERSION,
        "zoo_id": manifest.zoo_id,
        "arch": _arch_to_dict(manifest.arch),
        "dataset": manifest.dataset.to_dict(),
        "sampling_seed": manifest.sampling_seed,
        "train_seed": manifest.train_seed,
        "train_seed_mode": manifest.train_seed_mode,
        "epochs": manifest.epochs,
        "batch_size": manifest.batch_size,
        "space": manifest.space.to_dict(),
        "records": [
            {
                "model_id": r.model_id,
                "hparams": r.hparams.to_dict(),
                "test_accuracy": r.test_accuracy,
                "diverged": bool(r.diverged),
                "train_seed": r.train_seed,
            }
            for r in sorted(manifest.records, key=lambda r: r.model_id)
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


_MANIFEST_FIELDS = ("format_version", "zoo_id", "arch", "dataset", "sampling_seed",
                    "train_seed", "train_seed_mode", "epochs", "batch_size",
                    "space", "records")
_RECORD_FIELDS = ("model_id", "hparams", "test_accuracy", "diverged", "train_seed")


def manifest_from_json(text: str) -> ZooManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt zoo manifest: {exc}") from exc
    _reject_unknown(doc, _MANIFEST_FIELDS, "zoo manifest")
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('format_version')!r}, "
                          f"expected {MANIFEST_VERSION}")
    records = []
    for rd in doc["records"]:
        _reject_unknown(rd, _RECORD_FIELDS, "zoo record")
        records.append(ModelRecord(
            model_id=int(rd["model_id"]),
            hparams=HyperparamVector.from_dict(rd["hparams"]),
            params=None,
            test_accuracy=float(rd["test_accuracy"]),
            diverged=bool(rd["diverged"]),
            train_seed=int(rd["train_seed"])))
    return ZooManifest(
        zoo_id=doc["zoo_id"], arch=arch_from_dict(doc["arch"]),
        dataset=DatasetSpec.from_dict(doc["dataset"]),
        sampling_seed=int(doc["sampling_seed"]), train_seed=int(doc["train_seed"]),
        train_seed_mode=doc["train_seed_mode"], epochs=int(doc["epochs"]),
        batch_size=int(doc["batch_size"]),
        space=HyperparamSpace.from_dict(doc["space"]), records=records)


def write_weights(params: ParameterSet, path) -> None:
    """Binary tensor container: magic, version u32, tensor count u32,
    per-tensor ndim u32 + dims u32s, then all values as f32 little-endian."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(params.tensors)))
        for t in params.tensors:
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
        for t in params.tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_weights(path, arch: ArchitectureSpec, model_id: int) -> ParameterSet:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weights for model {model_id}: {exc}") from exc

    def fail(msg):
        raise FormatError(f"weights file for model {model_id}: {msg}")

    if blob[:4] != WEIGHTS_MAGIC:
        fail("bad magic bytes")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", blob, pos)
    except struct.error:
        fail("truncated header")
    pos += 8
    if version != WEIGHTS_VERSION:
        fail(f"unsupported version {version}")
    shapes = []
    for _ in range(count):
        try:
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
        except struct.error:
            fail("truncated shape header")
        shapes.append(tuple(int(d) for d in dims))
    expected = arch.tensor_shapes()
    if shapes != expected:
        fail(f"tensor shapes {shapes} do not match architecture {expected}")
    tensors = []
    for s in shapes:
        n = int(np.prod(s)) * 4
        if pos + n > len(blob):
            fail("truncated payload")
        tensors.append(np.frombuffer(blob[pos:pos + n], dtype="<f4").reshape(s).astype(np.float64))
        pos += n
    if pos != len(blob):
        fail("trailing bytes after payload")
    return ParameterSet(arch, tensors)


def save_zoo(manifest: ZooManifest, path) -> None:
    """Write manifest.json plus weights/<model_id>.bin under `path`."""
    root = Path(path)
    (root / "weights").mkdir(parents=True, exist_ok=True)
    for r in manifest.records:
        if r.params is None:
            raise InputError(f"record {r.model_id} has no in-memory weights to save")
        write_weights(r.params, root / "weights" / f"{r.model_id}.bin")
    (root / "manifest.json").write_text(manifest_to_json(manifest))


def load_zoo(path) -> ZooManifest:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {root}")
    manifest = manifest_from_json(manifest_path.read_text())
    for r in manifest.records:
        r.params = read_weights(root / "weights" / f"{r.model_id}.bin",
                                manifest.arch, r.model_id)
    return manifest
