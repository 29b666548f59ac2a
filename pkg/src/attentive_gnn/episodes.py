"""Feature datasets and N-way K-shot episode sampling.

Random streams use numpy's ``default_rng`` (PCG64 bit generator) seeded
with a 64-bit integer or a sequence of integers, so every dataset and task
is reproducible from its seed alone.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

SETTINGS = ("inductive", "transductive")
QUERY_DISTS = ("uniform", "random")


class CapacityError(ValueError):
    """The dataset cannot supply the requested task shape."""


class FeatureFileError(ValueError):
    """Malformed feature CSV."""


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples")
        self.classes = np.unique(self.labels)
        self._by_class = {c: np.flatnonzero(self.labels == c) for c in self.classes}

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return self.features.shape[0]

    def indices_of(self, cls) -> np.ndarray:
        return self._by_class[cls]

    def min_class_size(self) -> int:
        return min(len(v) for v in self._by_class.values()) if self._by_class else 0


def generate_synthetic(classes: int, per_class: int, d: int, between_sigma: float,
                       within_sigma: float, seed: int, split: str = "train") -> FeatureDataset:
    """Gaussian class clusters: means ~ N(0, between^2 I), samples ~ N(mean, within^2 I)."""
    for name, value in (("classes", classes), ("per_class", per_class), ("d", d)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    for name, value in (("between_sigma", between_sigma), ("within_sigma", within_sigma)):
        if not value > 0:
            raise ValueError(f"{name} must be > 0, got {value}")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, between_sigma, size=(classes, d))
    noise = rng.normal(0.0, within_sigma, size=(classes, per_class, d))
    features = (means[:, None, :] + noise).reshape(classes * per_class, d)
    labels = np.repeat(np.arange(classes), per_class)
    return FeatureDataset(features, labels, split)


def split_classes(ds: FeatureDataset, test_classes: int) -> tuple[FeatureDataset, FeatureDataset]:
    """Hold out the last ``test_classes`` class ids (sorted) as a disjoint test split."""
    if not 0 < test_classes < ds.n_classes:
        raise ValueError(f"test_classes must lie in [1, {ds.n_classes - 1}], got {test_classes}")
    held = set(ds.classes[-test_classes:].tolist())
    is_test = np.array([lab in held for lab in ds.labels.tolist()])
    return (FeatureDataset(ds.features[~is_test], ds.labels[~is_test], "train"),
            FeatureDataset(ds.features[is_test], ds.labels[is_test], "test"))


def save_features_csv(ds: FeatureDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(ds.d)])
        for lab, row in zip(ds.labels.tolist(), ds.features):
            w.writerow([lab] + [repr(float(v)) for v in row])


def _parse_label(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def load_features_csv(path, split: str = "train") -> FeatureDataset:
    """Read a ``label,f0,...,f{d-1}`` file; integer-looking labels become ints."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"feature file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label" or len(header) < 2:
            raise FeatureFileError(f"{path}: line 1: expected header 'label,f0,...'")
        d = len(header) - 1
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise FeatureFileError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(rec)}")
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FeatureFileError(f"{path}: line {lineno}: non-numeric feature ({exc})") from None
            labels.append(_parse_label(rec[0]))
    if not rows:
        raise FeatureFileError(f"{path}: no samples")
    return FeatureDataset(np.array(rows, dtype=np.float64), np.array(labels), split)


@dataclass
class TaskGraph:
    """One episode as a complete graph: support nodes first, then queries."""

    X: np.ndarray
    Y0: np.ndarray
    support_indices: np.ndarray
    query_indices: np.ndarray
    truth: np.ndarray
    n_way: int
    classes: np.ndarray = field(default_factory=lambda: np.array([]))
    sample_ids: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    node_classes: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    @property
    def V(self) -> int:
        return self.X.shape[0]

    @property
    def Q(self) -> int:
        return len(self.query_indices)


def build_task_graph(support_X, support_y, query_X, query_y, n_way: int,
                     query_init: str = "uniform") -> TaskGraph:
    """Assemble node features and initial label rows.

    ``support_y`` / ``query_y`` are class positions in ``[0, n_way)``.
    Support rows of ``Y0`` are one-hot; query rows are ``1/N`` (uniform) or 0.
    """
    support_X = np.asarray(support_X, dtype=np.float64)
    query_X = np.asarray(query_X, dtype=np.float64).reshape(-1, support_X.shape[1])
    support_y = np.asarray(support_y, dtype=int).reshape(-1)
    query_y = np.asarray(query_y, dtype=int).reshape(-1)
    if query_init not in ("uniform", "zero"):
        raise ValueError(f"query_init must be 'uniform' or 'zero', got {query_init!r}")
    s, q = len(support_y), len(query_X)
    if support_X.shape[0] != s or len(query_y) != q:
        raise ValueError("feature rows and labels disagree in count")
    Y0 = np.zeros((s + q, n_way))
    Y0[np.arange(s), support_y] = 1.0
    if query_init == "uniform":
        Y0[s:] = 1.0 / n_way
    return TaskGraph(
        X=np.vstack([support_X, query_X]),
        Y0=Y0,
        support_indices=np.arange(s),
        query_indices=np.arange(s, s + q),
        truth=query_y.copy(),
        n_way=n_way,
        node_classes=np.concatenate([support_y, query_y]),
    )


def sample_task(ds: FeatureDataset, n_way: int, k_shot: int, q_query: int = 1,
                setting: str = "transductive", query_dist: str = "uniform", seed=None,
                query_init: str = "uniform") -> TaskGraph:
    """Draw one episode.

    Inductive tasks carry a single query from a uniformly chosen episode
    class. Transductive tasks carry ``n_way * q_query`` queries, either
    ``q_query`` per class (uniform) or with classes drawn i.i.d. (random).
    """
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got {setting!r}")
    if query_dist not in QUERY_DISTS:
        raise ValueError(f"query_dist must be one of {QUERY_DISTS}, got {query_dist!r}")
    if n_way < 2 or k_shot < 1 or q_query < 1:
        raise ValueError(f"need n_way >= 2, k_shot >= 1, q_query >= 1; got {n_way}, {k_shot}, {q_query}")
    rng = np.random.default_rng(seed)
    per_class_queries = 1 if setting == "inductive" else q_query
    eligible = [c for c in ds.classes if len(ds.indices_of(c)) >= k_shot + per_class_queries]
    if len(eligible) < n_way:
        raise CapacityError(
            f"need {n_way} classes with >= {k_shot + per_class_queries} samples, dataset has {len(eligible)}")
    picked = rng.choice(len(eligible), size=n_way, replace=False)
    classes = np.array([eligible[i] for i in picked])

    if setting == "inductive":
        counts = np.zeros(n_way, dtype=int)
        counts[rng.integers(n_way)] = 1
    elif query_dist == "uniform":
        counts = np.full(n_way, q_query)
    else:
        counts = np.bincount(rng.integers(n_way, size=n_way * q_query), minlength=n_way)

    support_ids, support_y, query_ids, query_y = [], [], [], []
    for pos, cls in enumerate(classes):
        pool = ds.indices_of(cls)
        need = k_shot + counts[pos]
        if len(pool) < need:
            raise CapacityError(f"class {cls!r} has {len(pool)} samples, task needs {need}")
        chosen = rng.choice(pool, size=need, replace=False)
        support_ids.extend(chosen[:k_shot])
        support_y.extend([pos] * k_shot)
        query_ids.extend(chosen[k_shot:])
        query_y.extend([pos] * counts[pos])
    perm = rng.permutation(len(query_ids))
    query_ids = np.asarray(query_ids, dtype=int)[perm]
    query_y = np.asarray(query_y, dtype=int)[perm]
    support_ids = np.asarray(support_ids, dtype=int)

    task = build_task_graph(ds.features[support_ids], support_y, ds.features[query_ids],
                            query_y, n_way, query_init)
    task.classes = classes
    task.sample_ids = np.concatenate([support_ids, query_ids])
    return task


def centroid_accuracy(train: FeatureDataset, test: FeatureDataset) -> float:
    """Nearest-class-centroid accuracy; a separability check for synthetic data."""
    cents = np.stack([train.features[train.indices_of(c)].mean(axis=0) for c in train.classes])
    dist = ((test.features[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    pred = train.classes[np.argmin(dist, axis=1)]
    return float(np.mean(pred == test.labels))


def holdout_split(ds: FeatureDataset, per_class_train: int) -> tuple[FeatureDataset, FeatureDataset]:
    """Split every class into its first ``per_class_train`` samples and the rest."""
    tr, te = [], []
    for c in ds.classes:
        idx = ds.indices_of(c)
        tr.extend(idx[:per_class_train])
        te.extend(idx[per_class_train:])
    tr, te = np.array(tr), np.array(te)
    return (FeatureDataset(ds.features[tr], ds.labels[tr], "train"),
            FeatureDataset(ds.features[te], ds.labels[te], "test"))
