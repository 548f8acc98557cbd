"""Long-tailed embedding datasets.

Everything the rest of the library consumes starts here: labeled feature
vectors with per-class frequency metadata, the Manyshot/Mediumshot/Fewshot
fold assignment, contiguous frequency-sorted class subsets (one per expert),
reject-class relabeling, and the three mini-batch sampling regimes.

Datasets are immutable after construction (their arrays are frozen) and safe
to share across threads. Samplers take an explicit ``numpy.random.Generator``
so reproducibility is always in the caller's hands.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, format_float

DEFAULT_MANY_MIN = 100
DEFAULT_FEW_MAX = 20

MANIFEST_FORMAT = "tailens-bundle-v1"


class Fold(IntEnum):
    """Frequency bucket of a class in the training split."""

    MANYSHOT = 0
    MEDIUMSHOT = 1
    FEWSHOT = 2

    @property
    def label(self) -> str:
        return self.name.lower()


class EmptyFoldError(ValueError):
    """Raised when a fold that must hold at least one class is empty."""

    def __init__(self, fold: Fold):
        self.fold = fold
        super().__init__(f"{fold.label} fold is empty")


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EmbeddingDataset:
    """Labeled feature vectors plus per-class frequency metadata.

    ``class_frequency`` is always derived from ``labels`` (recomputed when
    omitted, cross-checked when supplied); it is never trusted blindly.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    class_frequency: np.ndarray | None = None

    def __post_init__(self):
        features = _frozen_array(self.features, np.float64)
        labels = _frozen_array(self.labels, np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be a 2d array, got ndim={features.ndim}")
        if labels.ndim != 1:
            raise ValueError("labels must be a 1d array")
        if len(features) != len(labels):
            raise ValueError(
                f"features/labels length mismatch: {len(features)} vs {len(labels)}"
            )
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), "
                f"found range [{labels.min()}, {labels.max()}]"
            )
        frequency = np.bincount(labels, minlength=self.class_count).astype(np.int64)
        if self.class_frequency is not None:
            declared = np.asarray(self.class_frequency, dtype=np.int64)
            if not np.array_equal(declared, frequency):
                raise ValueError("class_frequency does not match label counts")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_frequency", _frozen_array(frequency, np.int64))
        object.__setattr__(self, "_by_class", None)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def indices_by_class(self) -> list[np.ndarray]:
        """Sample indices grouped by class, in stable (file) order."""
        cached = getattr(self, "_by_class")
        if cached is None:
            order = np.argsort(self.labels, kind="stable")
            bounds = np.concatenate(([0], np.cumsum(self.class_frequency)))
            cached = [
                order[bounds[c] : bounds[c + 1]] for c in range(self.class_count)
            ]
            object.__setattr__(self, "_by_class", cached)
        return cached


@dataclass(frozen=True)
class DatasetBundle:
    """Train/val/test triple sharing one class space and feature dimension.

    The training split is typically long-tailed; val and test are expected to
    be class-balanced. Unbalanced val/test splits are permitted (real-world
    files) but reported through a warning.
    """

    train: EmbeddingDataset
    val: EmbeddingDataset
    test: EmbeddingDataset

    def __post_init__(self):
        splits = {"val": self.val, "test": self.test}
        for name, ds in splits.items():
            if ds.class_count != self.train.class_count:
                raise ValueError(
                    f"{name} split has class_count {ds.class_count}, "
                    f"train has {self.train.class_count}"
                )
            if ds.feature_dim != self.train.feature_dim:
                raise ValueError(
                    f"{name} split has feature_dim {ds.feature_dim}, "
                    f"train has {self.train.feature_dim}"
                )
            counts = ds.class_frequency
            if counts.min() != counts.max():
                warnings.warn(
                    f"{name} split is not class-balanced; "
                    f"per-class counts: {counts.tolist()}",
                    stacklevel=2,
                )

    @property
    def class_count(self) -> int:
        return self.train.class_count

    @property
    def feature_dim(self) -> int:
        return self.train.feature_dim


@dataclass(frozen=True)
class FoldAssignment:
    """Per-class Manyshot/Mediumshot/Fewshot label.

    A class is Manyshot iff its training frequency is >= ``many_min``,
    Fewshot iff it is < ``few_max``, Mediumshot otherwise. The boundaries are
    inclusive on the Manyshot side and on the Mediumshot floor, so every
    class lands in exactly one fold.
    """

    fold_of_class: np.ndarray
    thresholds: tuple[int, int] = (DEFAULT_MANY_MIN, DEFAULT_FEW_MAX)

    def __post_init__(self):
        many_min, few_max = self.thresholds
        if not many_min > few_max > 0:
            raise ValueError(
                f"thresholds must satisfy many_min > few_max > 0, got {self.thresholds}"
            )
        object.__setattr__(
            self, "fold_of_class", _frozen_array(self.fold_of_class, np.int64)
        )

    @classmethod
    def from_frequencies(
        cls,
        frequencies,
        thresholds: tuple[int, int] = (DEFAULT_MANY_MIN, DEFAULT_FEW_MAX),
    ) -> "FoldAssignment":
        freq = np.asarray(frequencies, dtype=np.int64)
        many_min, few_max = thresholds
        if not many_min > few_max > 0:
            raise ValueError(
                f"thresholds must satisfy many_min > few_max > 0, got {thresholds}"
            )
        fold = np.where(
            freq >= many_min,
            int(Fold.MANYSHOT),
            np.where(freq < few_max, int(Fold.FEWSHOT), int(Fold.MEDIUMSHOT)),
        )
        return cls(fold_of_class=fold, thresholds=thresholds)

    def classes_in(self, fold: Fold) -> np.ndarray:
        return np.nonzero(self.fold_of_class == int(fold))[0]

    def class_counts(self) -> dict[Fold, int]:
        return {f: int(np.sum(self.fold_of_class == int(f))) for f in Fold}

    def fold_of_samples(self, labels) -> np.ndarray:
        return self.fold_of_class[np.asarray(labels, dtype=np.int64)]


def assign_folds(
    train: EmbeddingDataset,
    thresholds: tuple[int, int] = (DEFAULT_MANY_MIN, DEFAULT_FEW_MAX),
) -> FoldAssignment:
    """Assign every class of ``train`` to a frequency fold."""
    return FoldAssignment.from_frequencies(train.class_frequency, thresholds)


@dataclass(frozen=True)
class SubsetSpec:
    """One expert's slice of the class space.

    ``classes`` lists global class indices in frequency-sorted order; the
    position of a class in that list is its local index for the expert's
    classifier head (the reject output sits after them, at local index
    ``size``).
    """

    expert_id: Fold
    classes: np.ndarray

    def __post_init__(self):
        classes = _frozen_array(self.classes, np.int64)
        if classes.ndim != 1 or len(classes) == 0:
            raise ValueError("subset must contain at least one class")
        if len(np.unique(classes)) != len(classes):
            raise ValueError("subset classes must be unique")
        if classes.min() < 0:
            raise ValueError("subset classes must be nonnegative")
        object.__setattr__(self, "classes", classes)

    @property
    def size(self) -> int:
        return len(self.classes)

    def local_map(self, class_count: int) -> np.ndarray:
        """Global->local index map of length ``class_count``; -1 outside."""
        if self.classes.max() >= class_count:
            raise ValueError("subset references a class beyond class_count")
        lookup = np.full(class_count, -1, dtype=np.int64)
        lookup[self.classes] = np.arange(self.size, dtype=np.int64)
        return lookup

    def out_classes(self, class_count: int) -> np.ndarray:
        """Global indices not covered by this subset."""
        mask = np.ones(class_count, dtype=bool)
        mask[self.classes] = False
        return np.nonzero(mask)[0]


def partition_subsets(
    assignment: FoldAssignment, train: EmbeddingDataset
) -> tuple[SubsetSpec, SubsetSpec, SubsetSpec]:
    """Split the frequency-sorted class list into the three expert subsets.

    Classes are ordered by descending training frequency with ties broken by
    ascending class index; the three contiguous ranges of that order are
    exactly the Manyshot, Mediumshot, and Fewshot folds. Raises
    :class:`EmptyFoldError` if any fold has no classes.
    """
    freq = train.class_frequency
    class_count = train.class_count
    if len(assignment.fold_of_class) != class_count:
        raise ValueError("fold assignment does not match dataset class count")
    order = np.lexsort((np.arange(class_count), -freq))
    fold_sorted = assignment.fold_of_class[order]
    # Fold is a function of frequency alone, so the descending-frequency order
    # must group the folds contiguously.
    if np.any(np.diff(fold_sorted) < 0):
        raise RuntimeError("fold assignment is not monotone in frequency")
    subsets = []
    start = 0
    for fold in Fold:
        members = order[fold_sorted == int(fold)]
        if len(members) == 0:
            raise EmptyFoldError(fold)
        if not np.array_equal(members, order[start : start + len(members)]):
            raise RuntimeError("fold ranges are not contiguous")
        subsets.append(SubsetSpec(expert_id=fold, classes=members))
        start += len(members)
    return tuple(subsets)


def relabel_for_expert(train: EmbeddingDataset, subset: SubsetSpec) -> EmbeddingDataset:
    """Map ``train`` into the expert's local label space plus a reject class.

    Samples whose global class belongs to ``subset`` keep their feature rows
    bit-exactly and get the class's local index; everything else is labeled
    with the reject index ``subset.size``. The output has ``subset.size + 1``
    classes even when nothing was rejected.
    """
    lookup = subset.local_map(train.class_count)
    local = lookup[train.labels]
    local = np.where(local >= 0, local, subset.size)
    return EmbeddingDataset(
        features=train.features,
        labels=local,
        class_count=subset.size + 1,
    )


_SAMPLER_KINDS = ("instance_balanced", "uniform_class", "reject_undersampled")


@dataclass(frozen=True)
class SamplerMode:
    """Mini-batch sampling regime.

    * ``instance_balanced`` draws uniformly over samples.
    * ``uniform_class`` draws a class uniformly, then a sample within it.
    * ``reject_undersampled`` draws uniformly over samples but keeps a
      reject-labeled draw only with probability 1/rho, resampling otherwise.
    """

    kind: str
    rho: float = 1.0

    def __post_init__(self):
        if self.kind not in _SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "reject_undersampled" and not self.rho >= 1.0:
            raise ValueError(f"undersampling ratio must be >= 1, got {self.rho}")

    @classmethod
    def instance_balanced(cls) -> "SamplerMode":
        return cls(kind="instance_balanced")

    @classmethod
    def uniform_class(cls) -> "SamplerMode":
        return cls(kind="uniform_class")

    @classmethod
    def reject_undersampled(cls, rho: float) -> "SamplerMode":
        return cls(kind="reject_undersampled", rho=float(rho))


def draw_batch(
    dataset: EmbeddingDataset,
    mode: SamplerMode,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one mini-batch of (features, labels) under ``mode``.

    Deterministic given the generator state. For ``reject_undersampled`` the
    reject class is the dataset's last label (the convention produced by
    :func:`relabel_for_expert`).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if dataset.n == 0:
        raise ValueError("cannot sample from an empty dataset")

    if mode.kind == "instance_balanced":
        idx = rng.integers(0, dataset.n, size=batch_size)
    elif mode.kind == "uniform_class":
        freq = dataset.class_frequency
        empty = np.nonzero(freq == 0)[0]
        if len(empty):
            raise ValueError(
                f"uniform class sampling requires every class to be nonempty; "
                f"class {int(empty[0])} has no samples"
            )
        by_class = dataset.indices_by_class()
        bounds = np.concatenate(([0], np.cumsum(freq)))
        order = np.concatenate(by_class)
        cls = rng.integers(0, dataset.class_count, size=batch_size)
        within = (rng.random(batch_size) * freq[cls]).astype(np.int64)
        idx = order[bounds[cls] + within]
    else:  # reject_undersampled
        reject_label = dataset.class_count - 1
        accept_p = 1.0 / mode.rho
        idx = np.empty(batch_size, dtype=np.int64)
        filled = 0
        while filled < batch_size:
            need = batch_size - filled
            cand = rng.integers(0, dataset.n, size=need)
            keep = dataset.labels[cand] != reject_label
            if accept_p < 1.0:
                keep |= rng.random(need) < accept_p
            else:
                keep[:] = True
            kept = cand[keep]
            idx[filled : filled + len(kept)] = kept
            filled += len(kept)

    return dataset.features[idx], dataset.labels[idx]


def powerlaw_frequencies(class_count: int, n_max: int, alpha: float) -> np.ndarray:
    """Training frequency of each class under a power-law profile.

    The c-th most frequent class (0-based) receives
    ``max(round(n_max * (c+1)**-alpha), 1)`` samples.
    """
    ranks = np.arange(1, class_count + 1, dtype=np.float64)
    freq = np.maximum(np.rint(n_max * ranks ** (-alpha)), 1.0)
    return freq.astype(np.int64)


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic long-tailed generator."""

    class_count: int
    feature_dim: int
    n_max: int
    alpha: float
    n_val_per_class: int
    n_test_per_class: int
    noise_scale: float


def generate_longtailed(
    config: SyntheticConfig,
    seed: int,
    thresholds: tuple[int, int] = (DEFAULT_MANY_MIN, DEFAULT_FEW_MAX),
) -> DatasetBundle:
    """Generate a long-tailed train split plus balanced val/test splits.

    Each class is an isotropic Gaussian blob whose mean is drawn once from a
    seeded generator; class index equals frequency rank (class 0 is the most
    frequent). Configurations whose frequency profile leaves any fold empty
    under ``thresholds`` are rejected, because the three-expert split would
    be ill-defined.
    """
    if config.class_count < 3:
        raise ValueError("need at least 3 classes")
    if config.feature_dim < 2:
        raise ValueError("need feature_dim >= 2")
    if config.n_max < 1 or config.alpha <= 0:
        raise ValueError("n_max must be >= 1 and alpha > 0")
    if config.n_val_per_class < 1 or config.n_test_per_class < 1:
        raise ValueError("val/test per-class counts must be >= 1")
    if not config.noise_scale > 0:
        raise ValueError("noise_scale must be positive")

    freq = powerlaw_frequencies(config.class_count, config.n_max, config.alpha)
    assignment = FoldAssignment.from_frequencies(freq, thresholds)
    for fold in Fold:
        if not np.any(assignment.fold_of_class == int(fold)):
            raise EmptyFoldError(fold)

    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(config.class_count, config.feature_dim))

    def blob(count_per_class) -> EmbeddingDataset:
        feats = []
        labels = []
        for c in range(config.class_count):
            n_c = int(count_per_class[c])
            feats.append(
                means[c]
                + rng.normal(0.0, config.noise_scale, size=(n_c, config.feature_dim))
            )
            labels.append(np.full(n_c, c, dtype=np.int64))
        return EmbeddingDataset(
            features=np.concatenate(feats),
            labels=np.concatenate(labels),
            class_count=config.class_count,
        )

    train = blob(freq)
    val = blob(np.full(config.class_count, config.n_val_per_class))
    test = blob(np.full(config.class_count, config.n_test_per_class))
    return DatasetBundle(train=train, val=val, test=test)


def write_embeddings_csv(path, dataset: EmbeddingDataset) -> None:
    """Write one split in the ``label,f0,...,f{d-1}`` CSV format."""
    d = dataset.feature_dim
    lines = ["label," + ",".join(f"f{j}" for j in range(d))]
    for label, row in zip(dataset.labels, dataset.features):
        lines.append(str(int(label)) + "," + ",".join(format_float(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_embeddings_csv(path, *, class_count: int | None = None):
    """Parse one embedding CSV into (features, labels) arrays."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split(",")
        if len(fields) < 2 or fields[0] != "label":
            raise ValueError(f"{path.name}: malformed header {header!r}")
        expected = ["label"] + [f"f{j}" for j in range(len(fields) - 1)]
        if fields != expected:
            raise ValueError(f"{path.name}: malformed header {header!r}")
        dim = len(fields) - 1

        features = []
        labels = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) - 1 != dim:
                raise ValueError(
                    f"{path.name} line {line_no}: expected {dim} features, "
                    f"got {len(parts) - 1}"
                )
            try:
                label = int(parts[0])
            except ValueError:
                raise ValueError(
                    f"{path.name} line {line_no}: label {parts[0]!r} is not an integer"
                ) from None
            if label < 0:
                raise ValueError(f"{path.name} line {line_no}: negative label {label}")
            if class_count is not None and label >= class_count:
                raise ValueError(
                    f"{path.name} line {line_no}: label {label} out of range "
                    f"[0, {class_count})"
                )
            labels.append(label)
            features.append([float(v) for v in parts[1:]])

    if not labels:
        raise ValueError(f"{path.name}: no samples")
    return np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def load_embeddings(
    train_path,
    val_path,
    test_path,
    *,
    class_count: int | None = None,
) -> DatasetBundle:
    """Load a bundle from three embedding CSVs.

    When ``class_count`` is omitted it is inferred as one past the largest
    label seen across the three files. Train frequencies are recomputed from
    the train rows. Unbalanced val/test splits warn rather than fail.
    """
    train_f, train_l = read_embeddings_csv(train_path, class_count=class_count)
    val_f, val_l = read_embeddings_csv(val_path, class_count=class_count)
    test_f, test_l = read_embeddings_csv(test_path, class_count=class_count)
    if class_count is None:
        class_count = int(max(train_l.max(), val_l.max(), test_l.max())) + 1
    return DatasetBundle(
        train=EmbeddingDataset(train_f, train_l, class_count),
        val=EmbeddingDataset(val_f, val_l, class_count),
        test=EmbeddingDataset(test_f, test_l, class_count),
    )


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    """Write train/val/test CSVs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {"train": bundle.train, "val": bundle.val, "test": bundle.test}
    for name, ds in names.items():
        write_embeddings_csv(directory / f"{name}.csv", ds)
    manifest = {
        "format": MANIFEST_FORMAT,
        "class_count": bundle.class_count,
        "feature_dim": bundle.feature_dim,
        "train": "train.csv",
        "val": "val.csv",
        "test": "test.csv",
    }
    manifest_path = directory / "manifest.json"
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_bundle(manifest_path) -> DatasetBundle:
    """Load a bundle via its manifest (paths resolved relative to it)."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported manifest format {manifest.get('format')!r}")
    base = manifest_path.parent
    return load_embeddings(
        base / manifest["train"],
        base / manifest["val"],
        base / manifest["test"],
        class_count=int(manifest["class_count"]),
    )
