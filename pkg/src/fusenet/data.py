"""Multimodal datasets: synthetic generators, CSV ingestion, alignment, batching."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, IngestionError, ParseError

SPLITS = ("train", "val", "test")
TASK_KINDS = ("xor_complementary", "redundant", "noisy_modality")


@dataclass
class MultimodalBatch:
    features: list[np.ndarray]
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass
class MultimodalDataset:
    """Per-modality feature matrices sharing one row order.

    ``labels`` is ``samples x classes`` with 0/1 entries: one-hot rows for
    ``multiclass``, multi-hot rows for ``multilabel``.
    """

    features: list[np.ndarray]
    labels: np.ndarray
    label_mode: str
    splits: np.ndarray
    modality_names: list[str]
    class_names: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.labels.shape[0]
        for name, f in zip(self.modality_names, self.features):
            if f.ndim != 2 or f.shape[0] != n:
                raise ContractError(f"modality {name!r} has shape {f.shape}, expected {n} rows")
        if len(self.modality_names) != len(self.features):
            raise ContractError("one name per modality required")
        if self.label_mode not in ("multiclass", "multilabel"):
            raise ContractError(f"unknown label mode {self.label_mode!r}")
        if len(self.splits) != n:
            raise ContractError(f"{len(self.splits)} split tags for {n} samples")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise ContractError(f"unknown split tags {sorted(bad)}")

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def widths(self) -> list[int]:
        return [f.shape[1] for f in self.features]

    @property
    def class_index(self) -> np.ndarray:
        if self.label_mode != "multiclass":
            raise ContractError("class indices exist only for multiclass labels")
        return self.labels.argmax(axis=1)

    def subset(self, split: str) -> "MultimodalDataset":
        mask = self.splits == split
        return replace(self, features=[f[mask] for f in self.features], labels=self.labels[mask],
                       splits=self.splits[mask])

    def batch(self, idx: np.ndarray | None = None) -> MultimodalBatch:
        if idx is None:
            return MultimodalBatch(list(self.features), self.labels)
        return MultimodalBatch([f[idx] for f in self.features], self.labels[idx])


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    widths: tuple[int, ...] = (8, 8)
    noise_sd: float = 0.1
    n_classes: int = 2
    seed: int = 0


def _unit_rows(rng: np.random.Generator, rows: int, width: int) -> np.ndarray:
    p = rng.standard_normal((rows, width))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gen_synthetic(spec: SyntheticTaskSpec) -> MultimodalDataset:
    """Sample a synthetic two-or-more-modality classification task.

    Each informative modality places a latent value on a unit-norm prototype
    vector and adds isotropic Gaussian noise of ``noise_sd``.

    * ``xor_complementary``: two modalities, bits ``a`` and ``b`` with
      prototypes ``+-u_k``; the label is ``a xor b``. Either modality alone
      carries no information about the label.
    * ``redundant``: every modality encodes the same class.
    * ``noisy_modality``: modality 1 encodes the class, the others are
      standard normal noise.

    Analytic Bayes accuracies are stored in ``metadata["bayes"]`` whenever a
    closed form exists.
    """
    if spec.kind not in TASK_KINDS:
        raise ConfigError(f"unknown synthetic task kind {spec.kind!r}; expected one of {TASK_KINDS}")
    counts = (spec.n_train, spec.n_val, spec.n_test)
    if min(counts) <= 0 or not spec.widths or min(spec.widths) <= 0:
        raise ContractError(f"sample counts {counts} and widths {spec.widths} must be positive")
    if spec.noise_sd < 0:
        raise ContractError(f"noise_sd must be non-negative, got {spec.noise_sd}")
    if spec.n_classes < 2:
        raise ContractError(f"need at least 2 classes, got {spec.n_classes}")
    rng = np.random.default_rng(spec.seed)
    n = sum(counts)
    widths = list(spec.widths)
    sd = spec.noise_sd

    if spec.kind == "xor_complementary":
        if len(widths) != 2 or spec.n_classes != 2:
            raise ConfigError("xor_complementary needs exactly 2 modalities and 2 classes")
        dirs = [_unit_rows(rng, 1, w)[0] for w in widths]
        prototypes = [np.stack([-d, d]) for d in dirs]
        latents = [rng.integers(0, 2, size=n) for _ in widths]
        y = latents[0] ^ latents[1]
        features = [prototypes[k][latents[k]] + sd * rng.standard_normal((n, w)) for k, w in enumerate(widths)]
        p_bit = 1.0 if sd == 0 else _phi(1.0 / sd)
        bayes = {"unimodal": [0.5, 0.5], "multimodal": p_bit ** 2 + (1 - p_bit) ** 2}
    else:
        c = spec.n_classes
        y = rng.integers(0, c, size=n)
        informative = len(widths) if spec.kind == "redundant" else 1
        prototypes = [_unit_rows(rng, c, w) for w in widths[:informative]]
        features = []
        for k, w in enumerate(widths):
            if k < informative:
                features.append(prototypes[k][y] + sd * rng.standard_normal((n, w)))
            else:
                features.append(rng.standard_normal((n, w)))
        bayes = _class_task_bayes(prototypes, sd, c, len(widths))

    labels = np.eye(spec.n_classes)[y]
    splits = np.array(["train"] * spec.n_train + ["val"] * spec.n_val + ["test"] * spec.n_test)
    return MultimodalDataset(
        features=features,
        labels=labels,
        label_mode="multiclass",
        splits=splits,
        modality_names=[f"m{k + 1}" for k in range(len(widths))],
        class_names=[str(i) for i in range(spec.n_classes)],
        metadata={"task": spec.kind, "prototypes": prototypes, "bayes": bayes},
    )


def _class_task_bayes(prototypes, sd, n_classes, n_modalities):
    chance = 1.0 / n_classes
    if sd == 0:
        uni = [1.0] * len(prototypes) + [chance] * (n_modalities - len(prototypes))
        return {"unimodal": uni, "multimodal": 1.0}
    if n_classes != 2:
        return {"unimodal": None, "multimodal": None}
    # two classes: Bayes accuracy is Phi(half the prototype gap / sd), gaps add in quadrature
    gaps = [float(np.linalg.norm(p[1] - p[0])) for p in prototypes]
    uni = [_phi(g / (2 * sd)) for g in gaps] + [0.5] * (n_modalities - len(prototypes))
    return {"unimodal": uni, "multimodal": _phi(math.sqrt(sum(g * g for g in gaps)) / (2 * sd))}


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_features(dataset: MultimodalDataset, out_dir, manifest_name: str = "manifest.ini") -> Path:
    """Write one CSV per modality, a labels CSV and a manifest; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = configparser.ConfigParser()
    manifest["dataset"] = {
        "label_mode": dataset.label_mode,
        "labels": "labels.csv",
        "modalities": ", ".join(dataset.modality_names),
        "classes": ", ".join(dataset.class_names),
    }
    for name, feats in zip(dataset.modality_names, dataset.features):
        fname = f"{name}.csv"
        with open(out / fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"{name}_{j}" for j in range(feats.shape[1])])
            w.writerows([[_fmt(v) for v in row] for row in feats])
        manifest[f"modality.{name}"] = {"path": fname, "width": str(feats.shape[1])}
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        if dataset.label_mode == "multiclass":
            w.writerow(["id", "label", "split"])
            for i, (c, s) in enumerate(zip(dataset.class_index, dataset.splits)):
                w.writerow([i, int(c), s])
        else:
            w.writerow(["id", *dataset.class_names, "split"])
            for i, (row, s) in enumerate(zip(dataset.labels, dataset.splits)):
                w.writerow([i, *(int(v) for v in row), s])
    path = out / manifest_name
    with open(path, "w") as fh:
        manifest.write(fh)
    return path


def _read_numeric_csv(path: Path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{path} is empty (a header row is required)")
    header, body = rows[0], rows[1:]
    out = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {i + 1} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell {cell!r} at row {i + 1}, column {j + 1} ({header[j]})") from None
    return header, out


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def load_features(manifest_path) -> MultimodalDataset:
    """Load a dataset described by a manifest written by :func:`write_features`.

    Paths in the manifest are relative to the manifest's directory. The
    labels CSV starts with an ``id`` column, then either one ``label``
    column of class indices or one 0/1 column per class, and optionally a
    ``split`` column (samples default to ``train`` without it).
    """
    manifest_path = Path(manifest_path)
    parser = configparser.ConfigParser()
    if not parser.read(manifest_path):
        raise IngestionError(f"cannot read manifest {manifest_path}")
    if "dataset" not in parser:
        raise IngestionError(f"{manifest_path}: missing [dataset] section")
    ds = parser["dataset"]
    base = manifest_path.parent
    try:
        names = _split_list(ds["modalities"])
        label_mode = ds.get("label_mode", "multiclass")
        labels_file = base / ds["labels"]
    except KeyError as exc:
        raise IngestionError(f"{manifest_path}: missing key {exc.args[0]!r} in [dataset]") from None

    features, counts = [], {}
    for name in names:
        sect = f"modality.{name}"
        if sect not in parser:
            raise IngestionError(f"{manifest_path}: missing section [{sect}]")
        fpath = base / parser[sect]["path"]
        _, arr = _read_numeric_csv(fpath)
        width = parser[sect].getint("width", fallback=arr.shape[1])
        if arr.shape[1] != width:
            raise IngestionError(f"{fpath}: {arr.shape[1]} columns, manifest declares width {width}")
        features.append(arr)
        counts[str(fpath)] = arr.shape[0]

    try:
        with open(labels_file, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read {labels_file}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{labels_file} is empty")
    header, body = rows[0], rows[1:]
    counts[str(labels_file)] = len(body)
    if len(set(counts.values())) != 1:
        listing = ", ".join(f"{k}: {v} rows" for k, v in counts.items())
        raise IngestionError(f"row counts disagree across files ({listing})")

    split_col = header.index("split") if "split" in header else None
    value_cols = [j for j in range(1, len(header)) if j != split_col]
    values = np.empty((len(body), len(value_cols)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ParseError(f"{labels_file}: row {i + 1} has {len(row)} cells, header has {len(header)}")
        for jj, j in enumerate(value_cols):
            try:
                values[i, jj] = float(row[j])
            except ValueError:
                raise ParseError(f"{labels_file}: non-numeric cell {row[j]!r} at row {i + 1}, column {j + 1}") from None
    splits = np.array([row[split_col] for row in body] if split_col is not None else ["train"] * len(body))

    classes = _split_list(ds.get("classes", ""))
    if label_mode == "multiclass":
        if values.shape[1] != 1:
            raise IngestionError(f"{labels_file}: multiclass labels need exactly one label column")
        idx = values[:, 0].astype(int)
        if np.any(idx != values[:, 0]) or np.any(idx < 0):
            raise ParseError(f"{labels_file}: class indices must be non-negative integers")
        n_classes = len(classes) or int(idx.max()) + 1
        if idx.max() >= n_classes:
            raise IngestionError(f"{labels_file}: class index {idx.max()} out of range for {n_classes} classes")
        labels = np.eye(n_classes)[idx]
    elif label_mode == "multilabel":
        if not np.all((values == 0) | (values == 1)):
            raise ParseError(f"{labels_file}: multilabel columns must hold 0 or 1")
        labels = values
        classes = [header[j] for j in value_cols]
    else:
        raise IngestionError(f"{manifest_path}: unknown label_mode {label_mode!r}")

    try:
        return MultimodalDataset(features, labels, label_mode, splits, names,
                                 classes or [str(i) for i in range(labels.shape[1])],
                                 {"manifest": str(manifest_path)})
    except ContractError as exc:
        raise IngestionError(f"{manifest_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# alignment and batching
# ---------------------------------------------------------------------------


def pad_columns(x: np.ndarray, width: int) -> np.ndarray:
    if x.shape[1] > width:
        raise ContractError(f"cannot pad {x.shape[1]} columns down to {width}")
    if x.shape[1] == width:
        return x
    return np.concatenate([x, np.zeros((x.shape[0], width - x.shape[1]))], axis=1)


def align_features(dataset: MultimodalDataset, mode: str = "zero_pad", target_width: int | None = None) -> MultimodalDataset:
    """Bring every modality to ``target_width`` (default: the widest modality).

    ``zero_pad`` appends zero columns. ``linear_proj`` leaves the features
    untouched and records the target so the model installs a trainable
    projection per modality.
    """
    target = max(dataset.widths) if target_width is None else target_width
    if target < max(dataset.widths):
        raise ContractError(f"target width {target} is smaller than modality widths {dataset.widths}")
    meta = {**dataset.metadata, "alignment": {"mode": mode, "target_width": target}}
    if mode == "zero_pad":
        return replace(dataset, features=[pad_columns(f, target) for f in dataset.features], metadata=meta)
    if mode == "linear_proj":
        return replace(dataset, metadata=meta)
    raise ContractError(f"unknown alignment mode {mode!r}")


def balanced_batch_indices(class_index: np.ndarray, per_class: int, rng: np.random.Generator,
                           n_classes: int | None = None) -> list[np.ndarray]:
    n_classes = int(class_index.max()) + 1 if n_classes is None else n_classes
    pools = []
    for c in range(n_classes):
        members = np.flatnonzero(class_index == c)
        if len(members) < per_class:
            raise ConfigError(f"class {c} has {len(members)} samples, fewer than per_class={per_class}")
        pools.append(rng.permutation(members))
    n_batches = min(len(p) for p in pools) // per_class
    batches = []
    for b in range(n_batches):
        idx = np.concatenate([p[b * per_class:(b + 1) * per_class] for p in pools])
        batches.append(rng.permutation(idx))
    return batches


def balanced_batches(dataset: MultimodalDataset, per_class: int, rng: np.random.Generator) -> list[MultimodalBatch]:
    """One epoch of batches holding exactly ``per_class`` samples of every class."""
    if dataset.label_mode != "multiclass":
        raise ConfigError("balanced batching needs multiclass labels")
    idx = balanced_batch_indices(dataset.class_index, per_class, rng, dataset.n_classes)
    return [dataset.batch(i) for i in idx]


def shuffled_batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniformly shuffled batches; a trailing batch of one sample is dropped (batch norm needs two)."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def nearest_prototype(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Nearest-prototype index for each row."""
    d = ((features[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def modality_count_check(features: Sequence[np.ndarray], expected: int) -> None:
    if len(features) != expected:
        raise ContractError(f"expected {expected} modalities, got {len(features)}")
