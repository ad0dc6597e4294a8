"""Classical anomaly detectors used as comparison points.

All three detectors fit on a training (context) matrix only and score test
rows independently, so adding or removing test rows never changes another
row's score.  Higher scores mean more anomalous.

- kNN: Euclidean distance to the k-th nearest training row.  Scoring the
  training set itself excludes each row from its own neighbour list.
- PCA: squared reconstruction residual after projecting onto the leading
  principal components of the training data.
- Isolation forest: average isolation depth over randomly built trees,
  normalised to a score in (0, 1].
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .rng import derive_rng

EULER_GAMMA = 0.5772156649
DEFAULT_K = 5
DEFAULT_TREES = 100
DEFAULT_SUBSAMPLE = 256
VARIANCE_TARGET = 0.9


def _as_matrix(name: str, rows) -> np.ndarray:
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2D array, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError(f"{name} contains non-finite values")
    return data


def _train_test(train, test):
    train = _as_matrix("train", train)
    if test is None:
        return train, None
    test = _as_matrix("test", test)
    if test.shape[1] != train.shape[1]:
        raise ValueError(
            f"test has {test.shape[1]} features but train has {train.shape[1]}"
        )
    return train, test


# ---------------------------------------------------------------------------
# k-nearest-neighbour distance
# ---------------------------------------------------------------------------


def knn_scores(train, test=None, k: int = DEFAULT_K) -> np.ndarray:
    """Distance to the k-th nearest training row (self excluded on train)."""
    train, test = _train_test(train, test)
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if test is None:
        if k > len(train) - 1:
            raise ValueError(
                f"k={k} needs at least {k + 1} training rows for self-excluded scoring, "
                f"got {len(train)}"
            )
        distances = cdist(train, train)
        np.fill_diagonal(distances, np.inf)
    else:
        if k > len(train):
            raise ValueError(f"k={k} exceeds the {len(train)} training rows")
        distances = cdist(test, train)
    return np.sort(distances, axis=1)[:, k - 1]


# ---------------------------------------------------------------------------
# PCA reconstruction residual
# ---------------------------------------------------------------------------


def _principal_axes(train: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = train.mean(axis=0)
    cov = np.cov(train - mean, rowvar=False)
    cov = np.atleast_2d(cov)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1]
    values = values[order]
    vectors = vectors[:, order]
    # eigh signs are arbitrary; make each axis point toward its largest coordinate
    for j in range(vectors.shape[1]):
        peak = np.argmax(np.abs(vectors[:, j]))
        if vectors[peak, j] < 0:
            vectors[:, j] = -vectors[:, j]
    return mean, values, vectors


def _default_components(values: np.ndarray, d: int) -> int:
    total = float(values.sum())
    if total <= 0.0:
        return min(1, d - 1)
    covered = np.cumsum(values) / total
    enough = int(np.searchsorted(covered, VARIANCE_TARGET) + 1)
    return min(enough, d - 1)


def pca_scores(train, test=None, n_components: int | None = None) -> np.ndarray:
    """Squared residual after projecting onto the leading principal axes.

    ``n_components`` defaults to however many axes are needed to explain 90%
    of the training variance, capped at d-1 so the residual is never
    trivially zero.
    """
    train, test = _train_test(train, test)
    d = train.shape[1]
    if d < 2:
        raise ValueError("PCA scoring needs at least 2 features")
    mean, values, vectors = _principal_axes(train)
    if n_components is None:
        n_components = _default_components(values, d)
    if not 1 <= n_components <= d - 1:
        raise ValueError(f"n_components must be in [1, {d - 1}], got {n_components}")
    axes = vectors[:, :n_components]
    centered = (train if test is None else test) - mean
    residual = centered - (centered @ axes) @ axes.T
    return np.sum(residual**2, axis=1)


# ---------------------------------------------------------------------------
# isolation forest
# ---------------------------------------------------------------------------


def average_path_length(m: int) -> float:
    """Expected unsuccessful-search depth in a binary tree over m points."""
    if m <= 1:
        return 0.0
    if m == 2:
        return 1.0
    return 2.0 * (math.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m


@dataclass
class _TreeNode:
    feature: int = -1
    split: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    size: int = 0


def _grow_tree(data: np.ndarray, depth: int, cap: int, rng: np.random.Generator) -> _TreeNode:
    if depth >= cap or len(data) <= 1:
        return _TreeNode(size=len(data))
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:
        return _TreeNode(size=len(data))
    feature = int(rng.choice(splittable))
    split = float(rng.uniform(lo[feature], hi[feature]))
    mask = data[:, feature] < split
    return _TreeNode(
        feature=feature,
        split=split,
        left=_grow_tree(data[mask], depth + 1, cap, rng),
        right=_grow_tree(data[~mask], depth + 1, cap, rng),
    )


def _tree_depths(node: _TreeNode, data: np.ndarray, index: np.ndarray, depth: int, out: np.ndarray):
    if node.feature < 0:
        out[index] = depth + average_path_length(node.size)
        return
    mask = data[index, node.feature] < node.split
    if mask.any():
        _tree_depths(node.left, data, index[mask], depth + 1, out)
    if not mask.all():
        _tree_depths(node.right, data, index[~mask], depth + 1, out)


def iforest_scores(
    train,
    test=None,
    n_trees: int = DEFAULT_TREES,
    subsample: int = DEFAULT_SUBSAMPLE,
    seed: int = 0,
) -> np.ndarray:
    """Isolation-forest score 2**(-mean_depth / c(subsample)) in (0, 1]."""
    train, test = _train_test(train, test)
    if n_trees < 1:
        raise ValueError(f"n_trees must be at least 1, got {n_trees}")
    if subsample < 2:
        raise ValueError(f"subsample must be at least 2, got {subsample}")
    scored = train if test is None else test
    psi = min(subsample, len(train))
    cap = math.ceil(math.log2(psi)) if psi > 1 else 1
    depths = np.zeros(len(scored))
    for t in range(n_trees):
        rng = derive_rng(seed, "iforest-tree", t)
        picks = rng.choice(len(train), size=psi, replace=False)
        root = _grow_tree(train[picks], 0, cap, rng)
        tree_depth = np.empty(len(scored))
        _tree_depths(root, scored, np.arange(len(scored)), 0, tree_depth)
        depths += tree_depth
    depths /= n_trees
    return np.power(2.0, -depths / average_path_length(psi))


# ---------------------------------------------------------------------------
# score thresholding
# ---------------------------------------------------------------------------


def threshold_from_scores(train_scores, contamination: float) -> float:
    """The (1 - contamination) linear-interpolated quantile of the train scores."""
    scores = np.asarray(train_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError(f"train_scores must be a non-empty 1D array, got shape {scores.shape}")
    if not 0.0 < contamination < 0.5:
        raise ValueError(f"contamination must sit strictly inside (0, 0.5), got {contamination}")
    return float(np.quantile(scores, 1.0 - contamination, method="linear"))


def labels_from_scores(scores, threshold: float) -> np.ndarray:
    """1 where the score strictly exceeds the threshold, else 0."""
    return (np.asarray(scores) > threshold).astype(np.int64)


BASELINES = {
    "knn": lambda train, test, seed: knn_scores(train, test),
    "pca": lambda train, test, seed: pca_scores(train, test),
    "iforest": lambda train, test, seed: iforest_scores(train, test, seed=seed),
}
