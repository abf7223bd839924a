"""
LDA, QDA, kNN and random forest with one fit/predict contract.

All families share the same pipeline: z-score standardization fitted on the
training rows, then the family-specific model in standardized space. Ties
are always broken towards the lowest class label.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from config import DEFAULT_KNN_K, DEFAULT_RF_TREES, DEFAULT_RIDGE_GAMMA, MODEL_FORMAT_VERSION
from errors import ModelError
from features import FeatureMatrix, FeatureVector
from workers import run_parallel

logger = logging.getLogger(__name__)

KNN_QUERY_CHUNK = 512


class ClassifierFamily(Enum):
    LDA = "lda"
    QDA = "qda"
    KNN = "knn"
    RF = "rf"


_TITLES = {
    ClassifierFamily.LDA: "LDA",
    ClassifierFamily.QDA: "QDA",
    ClassifierFamily.KNN: "kNN",
    ClassifierFamily.RF: "RF",
}


@dataclass(frozen=True)
class ClassifierSpec:
    family: ClassifierFamily
    k: int = DEFAULT_KNN_K
    trees: int = DEFAULT_RF_TREES
    gamma: float = DEFAULT_RIDGE_GAMMA

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ModelError(f"k must be >= 1, got {self.k}")
        if self.trees < 1:
            raise ModelError(f"trees must be >= 1, got {self.trees}")
        if self.gamma < 0:
            raise ModelError("ridge gamma must be >= 0")

    @property
    def name(self) -> str:
        if self.family is ClassifierFamily.KNN and self.k != DEFAULT_KNN_K:
            return f"knn:{self.k}"
        if self.family is ClassifierFamily.RF and self.trees != DEFAULT_RF_TREES:
            return f"rf:{self.trees}"
        return self.family.value

    @property
    def title(self) -> str:
        return _TITLES[self.family]

    @classmethod
    def parse(cls, text: str) -> "ClassifierSpec":
        """"lda", "qda", "knn", "knn:7", "rf", "rf:50"."""
        head, _, arg = text.strip().lower().partition(":")
        try:
            family = ClassifierFamily(head)
        except ValueError:
            raise ModelError(f"unknown classifier {text!r} (expected lda, qda, knn[:k], rf[:trees])") from None
        if not arg:
            return cls(family)
        if family not in (ClassifierFamily.KNN, ClassifierFamily.RF) or not arg.isdigit():
            raise ModelError(f"invalid classifier parameter in {text!r}")
        return cls(family, k=int(arg)) if family is ClassifierFamily.KNN else cls(family, trees=int(arg))


@dataclass(frozen=True)
class Standardizer:
    """Per-feature mean/std from training rows; zero-variance features divide by 1."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        return cls(_frozen(mean), _frozen(scale))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass(frozen=True)
class GaussianParams:
    """LDA (shared=True, one factor) or QDA (one factor per class)."""

    means: np.ndarray        # classes x d
    chol: np.ndarray         # d x d (shared) or classes x d x d, lower triangular
    log_dets: np.ndarray     # classes
    log_priors: np.ndarray   # classes
    shared: bool


@dataclass(frozen=True)
class KnnParams:
    train: np.ndarray        # standardized n x d
    targets: np.ndarray      # class index per training row
    k: int


@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray       # nodes x classes, training histogram per node


@dataclass(frozen=True)
class ForestParams:
    trees: tuple[Tree, ...]


Params = Union[GaussianParams, KnnParams, ForestParams]


@dataclass(frozen=True)
class TrainedModel:
    spec: ClassifierSpec
    classes: tuple[int, ...]
    standardizer: Standardizer
    params: Params
    seed: int
    dim: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def _as_values(X: Union[FeatureMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(X, FeatureMatrix):
        return X.values
    arr = np.asarray(X, dtype=np.float64)
    return arr


# ============================================================================
# Gaussian discriminants
# ============================================================================

def _ridge(cov: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 0:
        return cov
    d = cov.shape[0]
    trace = float(np.trace(cov))
    scale = trace / d if trace > 0 else 1.0
    return cov + gamma * scale * np.eye(d)


def _cholesky(cov: np.ndarray, what: str) -> np.ndarray:
    cov = (cov + cov.T) / 2.0
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        raise ModelError(f"{what} covariance is not positive definite") from None


def _fit_gaussian(Z: np.ndarray, targets: np.ndarray, n_classes: int, gamma: float, shared: bool) -> GaussianParams:
    n, d = Z.shape
    counts = np.bincount(targets, minlength=n_classes)
    means = np.vstack([Z[targets == c].mean(axis=0) for c in range(n_classes)])
    log_priors = np.log(counts / n)

    if shared:
        centered = Z - means[targets]
        cov = centered.T @ centered / max(n - n_classes, 1)
        chol = _cholesky(_ridge(cov, gamma), "pooled")
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        log_dets = np.full(n_classes, log_det)
    else:
        factors = []
        log_dets = np.empty(n_classes)
        for c in range(n_classes):
            centered = Z[targets == c] - means[c]
            cov = centered.T @ centered / (counts[c] - 1)
            chol_c = _cholesky(_ridge(cov, gamma), f"class {c}")
            factors.append(chol_c)
            log_dets[c] = 2.0 * np.sum(np.log(np.diag(chol_c)))
        chol = np.stack(factors)

    return GaussianParams(_frozen(means), _frozen(chol), _frozen(log_dets), _frozen(log_priors), shared)


def _gaussian_scores(p: GaussianParams, Z: np.ndarray) -> np.ndarray:
    scores = np.empty((Z.shape[0], p.means.shape[0]))
    for c in range(p.means.shape[0]):
        factor = p.chol if p.shared else p.chol[c]
        white = linalg.solve_triangular(factor, (Z - p.means[c]).T, lower=True)
        mahalanobis = np.sum(white ** 2, axis=0)
        scores[:, c] = -0.5 * p.log_dets[c] - 0.5 * mahalanobis + p.log_priors[c]
    return scores


# ============================================================================
# k nearest neighbours
# ============================================================================

def _knn_predict(p: KnnParams, Z: np.ndarray, n_classes: int) -> np.ndarray:
    k = min(p.k, p.train.shape[0])
    out = np.empty(Z.shape[0], dtype=np.int64)
    for start in range(0, Z.shape[0], KNN_QUERY_CHUNK):
        block = Z[start:start + KNN_QUERY_CHUNK]
        dist = cdist(block, p.train, metric="sqeuclidean")
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        votes = np.zeros((block.shape[0], n_classes), dtype=np.int64)
        np.add.at(votes, (np.arange(block.shape[0])[:, None], p.targets[nearest]), 1)
        out[start:start + block.shape[0]] = np.argmax(votes, axis=1)
    return out


# ============================================================================
# Random forest
# ============================================================================

def _best_split(x: np.ndarray, targets: np.ndarray, n_classes: int) -> Optional[tuple[float, float]]:
    """(weighted Gini, threshold) of the best split of one feature, or None if constant."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], targets[order]
    valid = xs[:-1] < xs[1:]
    if not valid.any():
        return None

    n = xs.shape[0]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), ys] = 1.0
    left = np.cumsum(onehot, axis=0)[:-1]
    right = left[-1] + onehot[-1] - left
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    gini_left = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
    gini_right = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
    weighted = (n_left * gini_left + n_right * gini_right) / n
    weighted = np.where(valid, weighted, np.inf)

    i = int(np.argmin(weighted))
    threshold = (xs[i] + xs[i + 1]) / 2.0
    if threshold >= xs[i + 1]:
        threshold = xs[i]
    return float(weighted[i]), float(threshold)


def _grow_tree(Z: np.ndarray, targets: np.ndarray, n_classes: int, rng: np.random.Generator) -> Tree:
    n, d = Z.shape
    sample = rng.integers(0, n, size=n)
    X, y = Z[sample], targets[sample]
    n_candidates = math.ceil(math.sqrt(d))

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    counts: list[np.ndarray] = []

    def new_node(rows: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[rows], minlength=n_classes))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n))]
    while stack:
        node, rows = stack.pop()
        if np.count_nonzero(counts[node]) <= 1 or rows.shape[0] < 2:
            continue

        order = rng.permutation(d)
        best: Optional[tuple[float, float, int]] = None
        # keep drawing features past the candidate budget only while no split exists
        for begin in range(0, d, n_candidates):
            for f in order[begin:begin + n_candidates]:
                found = _best_split(X[rows, f], y[rows], n_classes)
                if found is not None and (best is None or found[0] < best[0]):
                    best = (found[0], found[1], int(f))
            if best is not None:
                break
        if best is None:
            continue

        _, thr, f = best
        go_left = X[rows, f] <= thr
        left_rows, right_rows = rows[go_left], rows[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(left_rows)
        right[node] = new_node(right_rows)
        stack.append((right[node], right_rows))
        stack.append((left[node], left_rows))

    return Tree(
        _frozen(np.array(feature, dtype=np.int64)),
        _frozen(np.array(threshold, dtype=np.float64)),
        _frozen(np.array(left, dtype=np.int64)),
        _frozen(np.array(right, dtype=np.int64)),
        _frozen(np.vstack(counts).astype(np.int64)),
    )


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    """Counter-based generator for one tree, a function of (seed, tree_index) only."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(tree_index)])))


def _tree_leaves(tree: Tree, Z: np.ndarray) -> np.ndarray:
    node = np.zeros(Z.shape[0], dtype=np.int64)
    while True:
        feat = tree.feature[node]
        internal = np.flatnonzero(feat >= 0)
        if internal.size == 0:
            return node
        current = node[internal]
        go_left = Z[internal, feat[internal]] <= tree.threshold[current]
        node[internal] = np.where(go_left, tree.left[current], tree.right[current])


def _forest_predict(p: ForestParams, Z: np.ndarray, n_classes: int) -> np.ndarray:
    votes = np.zeros((Z.shape[0], n_classes), dtype=np.int64)
    rows = np.arange(Z.shape[0])
    for tree in p.trees:
        leaf_counts = tree.counts[_tree_leaves(tree, Z)]
        np.add.at(votes, (rows, np.argmax(leaf_counts, axis=1)), 1)
    return np.argmax(votes, axis=1)


# ============================================================================
# Public contract
# ============================================================================

def fit(
    spec: ClassifierSpec,
    X: Union[FeatureMatrix, np.ndarray],
    y,
    seed: int = 0,
    jobs: int = 1,
) -> TrainedModel:
    """
    Fit one classifier.

    Args:
        spec: classifier family and parameters
        X: training rows
        y: integer class label per row
        seed: RF randomness; tree t draws from Philox(seed, t)
        jobs: RF trees grown concurrently (result independent of jobs)

    Returns:
        TrainedModel: immutable fitted model
    """
    values = _as_values(X)
    labels = np.asarray(y, dtype=np.int64)
    if values.ndim != 2:
        raise ModelError("training data must be a 2-D matrix")
    if values.shape[0] != labels.shape[0]:
        raise ModelError(f"{values.shape[0]} rows but {labels.shape[0]} labels")
    if not np.all(np.isfinite(values)):
        raise ModelError("non-finite feature values in training data")

    classes, targets, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if classes.shape[0] < 2:
        raise ModelError(f"need at least 2 classes, got {classes.tolist()}")
    if spec.family is ClassifierFamily.QDA and counts.min() < 2:
        small = classes[counts < 2].tolist()
        raise ModelError(f"QDA needs at least 2 rows per class; classes {small} have fewer")

    standardizer = Standardizer.fit(values)
    Z = standardizer.transform(values)
    n_classes = classes.shape[0]

    if spec.family in (ClassifierFamily.LDA, ClassifierFamily.QDA):
        params: Params = _fit_gaussian(Z, targets, n_classes, spec.gamma, spec.family is ClassifierFamily.LDA)
    elif spec.family is ClassifierFamily.KNN:
        params = KnnParams(_frozen(Z), _frozen(targets.astype(np.int64)), spec.k)
    else:
        trees = run_parallel(
            lambda t: _grow_tree(Z, targets, n_classes, tree_rng(seed, t)),
            range(spec.trees),
            jobs=jobs,
        )
        params = ForestParams(tuple(trees))

    return TrainedModel(spec, tuple(int(c) for c in classes), standardizer, params, int(seed), values.shape[1])


def _standardized(m: TrainedModel, X) -> np.ndarray:
    values = _as_values(X)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[0] and values.shape[1] != m.dim:
        raise ModelError(f"dimension mismatch: model expects {m.dim} features, got {values.shape[1]}")
    return m.standardizer.transform(values)


def discriminants(m: TrainedModel, X) -> np.ndarray:
    """Per-class Gaussian discriminant scores (LDA/QDA only), rows x classes."""
    if not isinstance(m.params, GaussianParams):
        raise ModelError(f"{m.spec.title} has no discriminant functions")
    return _gaussian_scores(m.params, _standardized(m, X))


def predict_batch(m: TrainedModel, X: Union[FeatureMatrix, np.ndarray]) -> np.ndarray:
    """Row-wise predict, order preserving; empty input gives an empty array."""
    values = _as_values(X)
    if values.size == 0:
        return np.empty(0, dtype=np.int64)
    Z = _standardized(m, values)
    n_classes = len(m.classes)

    if isinstance(m.params, GaussianParams):
        index = np.argmax(_gaussian_scores(m.params, Z), axis=1)
    elif isinstance(m.params, KnnParams):
        index = _knn_predict(m.params, Z, n_classes)
    else:
        index = _forest_predict(m.params, Z, n_classes)
    return np.asarray(m.classes, dtype=np.int64)[index]


def predict(m: TrainedModel, x: Union[FeatureVector, np.ndarray]) -> int:
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    if values.ndim != 1:
        raise ModelError("predict takes a single feature vector")
    if values.shape[0] != m.dim:
        raise ModelError(f"dimension mismatch: model expects {m.dim} features, got {values.shape[0]}")
    return int(predict_batch(m, values[None, :])[0])


# ============================================================================
# Serialization
# ============================================================================

def _tree_to_dict(t: Tree) -> dict:
    return {
        "feature": t.feature.tolist(),
        "threshold": t.threshold.tolist(),
        "left": t.left.tolist(),
        "right": t.right.tolist(),
        "counts": t.counts.tolist(),
    }


def model_to_dict(m: TrainedModel) -> dict:
    p = m.params
    if isinstance(p, GaussianParams):
        params = {
            "means": p.means.tolist(),
            "chol": p.chol.tolist(),
            "log_dets": p.log_dets.tolist(),
            "log_priors": p.log_priors.tolist(),
            "shared": p.shared,
        }
    elif isinstance(p, KnnParams):
        params = {"train": p.train.tolist(), "targets": p.targets.tolist(), "k": p.k}
    else:
        params = {"trees": [_tree_to_dict(t) for t in p.trees]}

    return {
        "model_format": MODEL_FORMAT_VERSION,
        "classifier": m.spec.name,
        "gamma": m.spec.gamma,
        "classes": list(m.classes),
        "seed": m.seed,
        "dim": m.dim,
        "standardizer": {"mean": m.standardizer.mean.tolist(), "scale": m.standardizer.scale.tolist()},
        "params": params,
    }


def model_from_dict(data: dict) -> TrainedModel:
    if data.get("model_format") != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model format {data.get('model_format')!r}")
    spec = ClassifierSpec.parse(data["classifier"])
    spec = ClassifierSpec(spec.family, spec.k, spec.trees, float(data.get("gamma", spec.gamma)))
    p = data["params"]

    if spec.family in (ClassifierFamily.LDA, ClassifierFamily.QDA):
        params: Params = GaussianParams(
            _frozen(np.array(p["means"], dtype=np.float64)),
            _frozen(np.array(p["chol"], dtype=np.float64)),
            _frozen(np.array(p["log_dets"], dtype=np.float64)),
            _frozen(np.array(p["log_priors"], dtype=np.float64)),
            bool(p["shared"]),
        )
    elif spec.family is ClassifierFamily.KNN:
        params = KnnParams(
            _frozen(np.array(p["train"], dtype=np.float64).reshape(-1, data["dim"])),
            _frozen(np.array(p["targets"], dtype=np.int64)),
            int(p["k"]),
        )
    else:
        params = ForestParams(tuple(
            Tree(
                _frozen(np.array(t["feature"], dtype=np.int64)),
                _frozen(np.array(t["threshold"], dtype=np.float64)),
                _frozen(np.array(t["left"], dtype=np.int64)),
                _frozen(np.array(t["right"], dtype=np.int64)),
                _frozen(np.array(t["counts"], dtype=np.int64)),
            )
            for t in p["trees"]
        ))

    std = data["standardizer"]
    return TrainedModel(
        spec,
        tuple(int(c) for c in data["classes"]),
        Standardizer(_frozen(np.array(std["mean"], dtype=np.float64)),
                     _frozen(np.array(std["scale"], dtype=np.float64))),
        params,
        int(data["seed"]),
        int(data["dim"]),
    )


def save_model(m: TrainedModel, path: str | Path, extra: Optional[dict] = None) -> None:
    payload = {**model_to_dict(m), **(extra or {})}
    Path(path).write_text(json.dumps(payload) + "\n")


def load_model(path: str | Path) -> TrainedModel:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ModelError(f"cannot read model {path}: {e}") from None
    return model_from_dict(data)
