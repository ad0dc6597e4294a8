"""Synthetic data priors for pretraining and evaluation.

Episodes are drawn from a mixture of two dataset families:

* a Gaussian-mixture family whose anomalies are injected by one of three
  mechanisms — ``local`` (inflated component covariance), ``cluster``
  (displaced component means), ``global`` (uniform over a slightly enlarged
  bounding box of the rescaled nominal data);
* a classification family where a random network carves latent Gaussian noise
  into class modes and a random subset of classes is declared nominal, so
  anomalies are entire data modes.

Each episode is a context table, a balanced query table, and query labels.
Under the clean protocol the context is purely nominal; under the noisy
protocol it is contaminated at a rate drawn from ``contamination_range``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

GMM_ANOMALY_KINDS = ("local", "cluster", "global")
ANOMALY_KINDS = GMM_ANOMALY_KINDS + ("class_based",)
PROTOCOLS = ("clean", "noisy")

_LATENT_DIM = 8
_HIDDEN_WIDTH = 32
_HEAD_NOISE = 0.1
_HEAD_RETRIES = 20
_GLOBAL_MARGIN = 1.1
_CONSTANT_HALF_WIDTH = 0.1


def _hash_arrays(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(str(arr.shape).encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()[:12]


@dataclass(frozen=True)
class PriorConfig:
    """Parameters of the episode-generating distribution."""

    prob_gmm: float = 0.3
    prob_classification: float = 0.7
    dim_range: tuple[int, int] = (2, 50)
    components_range: tuple[int, int] = (1, 20)
    classes_range: tuple[int, int] = (2, 10)
    alpha: float = 5.0
    contamination_range: tuple[float, float] = (0.05, 0.3)
    protocol: str = "noisy"
    episode_rows_range: tuple[int, int] = (200, 1000)
    query_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.prob_gmm < 0 or self.prob_classification < 0:
            raise ValueError("mixture probabilities must be non-negative")
        if abs(self.prob_gmm + self.prob_classification - 1.0) > 1e-9:
            raise ValueError(
                f"prob_gmm + prob_classification must equal 1, got "
                f"{self.prob_gmm} + {self.prob_classification}"
            )
        for name, lo_bound in (("dim_range", 1), ("components_range", 1), ("classes_range", 2)):
            lo, hi = getattr(self, name)
            if lo < lo_bound or hi < lo:
                raise ValueError(f"{name} must be an ordered range with min >= {lo_bound}")
        lo, hi = self.contamination_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"contamination_range must sit inside (0,1), got [{lo}, {hi}]")
        if self.alpha <= 1.0:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.query_size < 2 or self.query_size % 2:
            raise ValueError(f"query_size must be even and >= 2, got {self.query_size}")
        lo, hi = self.episode_rows_range
        if hi < lo:
            raise ValueError(f"episode_rows_range must be ordered, got [{lo}, {hi}]")
        if lo < self.query_size + 16:
            raise ValueError(
                f"episode_rows_range min {lo} leaves too little context for "
                f"query_size {self.query_size}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass
class GmmSpec:
    """Gaussian mixture parameters: weights, means, per-component covariances."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    d: int

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def validate(self) -> None:
        m = self.n_components
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ValueError("mixture weights must be a probability vector")
        if self.means.shape != (m, self.d):
            raise ValueError(f"means shape {self.means.shape} != ({m}, {self.d})")
        if self.covariances.shape != (m, self.d, self.d):
            raise ValueError(f"covariances shape {self.covariances.shape} != ({m}, {self.d}, {self.d})")
        for i, cov in enumerate(self.covariances):
            if not np.allclose(cov, cov.T, atol=1e-9):
                raise ValueError(f"covariance {i} is not symmetric")
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise ValueError(f"covariance {i} is not positive definite")

    def spec_hash(self) -> str:
        return _hash_arrays(self.weights, self.means, self.covariances)


@dataclass
class LabeledDataset:
    """A feature table with binary anomaly labels and generator provenance."""

    features: np.ndarray
    labels: np.ndarray
    anomaly_kind: str
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError(f"features must be a non-empty matrix, got shape {self.features.shape}")
        if self.labels.shape != (len(self.features),):
            raise ValueError("labels length must match feature rows")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (nominal) or 1 (anomaly)")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")

    @property
    def anomaly_rate(self) -> float:
        return float(self.labels.mean())


@dataclass
class Episode:
    """One context/query pair; the unit of pretraining and inference.

    ``context_labels`` is diagnostic only: the model never reads it.
    """

    context: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    context_labels: np.ndarray
    d: int
    meta: dict = field(default_factory=dict)

    @property
    def n_context(self) -> int:
        return len(self.context)

    @property
    def n_query(self) -> int:
        return len(self.query)


# ---------------------------------------------------------------------------
# GMM family
# ---------------------------------------------------------------------------


def sample_gmm_spec(cfg: PriorConfig, rng: np.random.Generator, dim: int | None = None) -> GmmSpec:
    """Draw mixture parameters: Dirichlet weights, uniform means, random-rotation
    covariances with eigenvalues in [0.05, 0.3]."""
    d = int(rng.integers(cfg.dim_range[0], cfg.dim_range[1] + 1)) if dim is None else int(dim)
    m = int(rng.integers(cfg.components_range[0], cfg.components_range[1] + 1))
    weights = rng.dirichlet(np.ones(m))
    means = rng.uniform(-2.0, 2.0, size=(m, d))
    covariances = np.empty((m, d, d))
    for i in range(m):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        lam = rng.uniform(0.05, 0.3, size=d)
        cov = (q * lam) @ q.T
        covariances[i] = 0.5 * (cov + cov.T)
    return GmmSpec(weights=weights, means=means, covariances=covariances, d=d)


def sample_from_gmm(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n i.i.d. rows from the mixture."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    assignments = rng.choice(spec.n_components, size=n, p=spec.weights)
    rows = np.empty((n, spec.d))
    for comp in np.unique(assignments):
        idx = assignments == comp
        chol = np.linalg.cholesky(spec.covariances[comp])
        rows[idx] = spec.means[comp] + rng.standard_normal((int(idx.sum()), spec.d)) @ chol.T
    return rows


def sample_gmm_nominal(cfg: PriorConfig, n: int, rng: np.random.Generator):
    """Sample a fresh mixture spec and n nominal rows from it."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    spec = sample_gmm_spec(cfg, rng)
    return spec, sample_from_gmm(spec, n, rng)


def inject_anomalies(
    spec: GmmSpec,
    nominal: np.ndarray,
    kind: str,
    count: int,
    alpha: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw anomalous rows from one mechanism, in the nominal coordinate frame.

    local   — component covariances inflated by alpha;
    cluster — component means scaled by alpha;
    global  — uniform over [-1.1, 1.1]^d in min/max-rescaled coordinates,
              mapped back through the inverse affine map.  A constant nominal
              feature falls back to a half-width-0.1 interval around it.
    """
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    if kind not in GMM_ANOMALY_KINDS:
        raise ValueError(f"kind must be one of {GMM_ANOMALY_KINDS}, got {kind!r}")
    if kind in ("local", "cluster") and alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1 for {kind} anomalies, got {alpha}")
    if count == 0:
        return np.empty((0, spec.d))

    if kind == "global":
        if nominal.ndim != 2 or nominal.shape[1] != spec.d or len(nominal) == 0:
            raise ValueError("global anomalies need a non-empty nominal sample for the bounding box")
        lo = nominal.min(axis=0)
        hi = nominal.max(axis=0)
        span = hi - lo
        unit = rng.uniform(-_GLOBAL_MARGIN, _GLOBAL_MARGIN, size=(count, spec.d))
        rows = (unit + 1.0) * 0.5 * span + lo
        for j in np.flatnonzero(span == 0):
            c = lo[j]
            rows[:, j] = rng.uniform(c - _CONSTANT_HALF_WIDTH, c + _CONSTANT_HALF_WIDTH, size=count)
        return rows

    assignments = rng.choice(spec.n_components, size=count, p=spec.weights)
    rows = np.empty((count, spec.d))
    for comp in np.unique(assignments):
        idx = assignments == comp
        k = int(idx.sum())
        if kind == "local":
            center = spec.means[comp]
            chol = math.sqrt(alpha) * np.linalg.cholesky(spec.covariances[comp])
        else:  # cluster
            center = alpha * spec.means[comp]
            chol = np.linalg.cholesky(spec.covariances[comp])
        rows[idx] = center + rng.standard_normal((k, spec.d)) @ chol.T
    return rows


# ---------------------------------------------------------------------------
# classification family
# ---------------------------------------------------------------------------

_NONLINEARITIES = {
    "tanh": np.tanh,
    "piecewise_linear": lambda x: np.where(x > 0, x, 0.2 * x),
    "sine": np.sin,
}


def sample_classification_source(cfg: PriorConfig, n: int, rng: np.random.Generator) -> LabeledDataset:
    """Random-network dataset where anomalies are whole class modes.

    A two-hidden-layer network maps latent Gaussian noise to feature space,
    a random linear head (plus small noise) assigns one of C classes, and a
    random nonempty proper subset of classes is declared nominal.
    """
    n_classes = int(rng.integers(cfg.classes_range[0], cfg.classes_range[1] + 1))
    if n < 10 * n_classes:
        raise ValueError(f"need n >= {10 * n_classes} rows to populate {n_classes} classes, got {n}")
    d = int(rng.integers(cfg.dim_range[0], cfg.dim_range[1] + 1))
    nl_name = tuple(_NONLINEARITIES)[int(rng.integers(len(_NONLINEARITIES)))]
    nonlin = _NONLINEARITIES[nl_name]

    z = rng.standard_normal((n, _LATENT_DIM))
    w1 = rng.standard_normal((_LATENT_DIM, _HIDDEN_WIDTH)) / math.sqrt(_LATENT_DIM)
    b1 = rng.normal(0.0, 0.5, size=_HIDDEN_WIDTH)
    w2 = rng.standard_normal((_HIDDEN_WIDTH, _HIDDEN_WIDTH)) / math.sqrt(_HIDDEN_WIDTH)
    b2 = rng.normal(0.0, 0.5, size=_HIDDEN_WIDTH)
    w3 = rng.standard_normal((_HIDDEN_WIDTH, d)) / math.sqrt(_HIDDEN_WIDTH)
    features = nonlin(nonlin(z @ w1 + b1) @ w2 + b2) @ w3

    for _ in range(_HEAD_RETRIES):
        head = rng.standard_normal((d, n_classes)) / math.sqrt(d)
        logits = features @ head + rng.normal(0.0, _HEAD_NOISE, size=(n, n_classes))
        klass = logits.argmax(axis=1)
        counts = np.bincount(klass, minlength=n_classes)
        if (counts > 0).all():
            break
    else:
        raise ValueError(
            f"failed to populate all {n_classes} classes after {_HEAD_RETRIES} head resamplings"
        )

    n_nominal_classes = int(rng.integers(1, n_classes))
    nominal_classes = rng.choice(n_classes, size=n_nominal_classes, replace=False)
    labels = (~np.isin(klass, nominal_classes)).astype(int)

    return LabeledDataset(
        features=features,
        labels=labels,
        anomaly_kind="class_based",
        provenance={
            "spec_hash": _hash_arrays(w1, w2, w3, head),
            "n_classes": n_classes,
            "n_nominal_classes": n_nominal_classes,
            "nonlinearity": nl_name,
        },
    )


# ---------------------------------------------------------------------------
# episode assembly
# ---------------------------------------------------------------------------


def _context_composition(n_ctx_budget: int, cfg: PriorConfig, rng: np.random.Generator):
    """Split the context budget into nominal and anomalous row counts.

    Under the noisy protocol the anomaly count is rounded to the nearest
    integer and clamped so the realized anomaly/nominal ratio stays inside
    contamination_range (never below one anomaly).
    """
    if cfg.protocol == "clean":
        return n_ctx_budget, 0, 0.0
    lo, hi = cfg.contamination_range
    rate = float(rng.uniform(lo, hi))
    n_nominal = int(round(n_ctx_budget / (1.0 + rate)))
    if n_nominal < 8:
        raise ValueError(f"context budget {n_ctx_budget} too small for the noisy protocol")
    floor_hi = int(math.floor(hi * n_nominal + 1e-9))
    ceil_lo = max(1, int(math.ceil(lo * n_nominal - 1e-9)))
    if floor_hi < ceil_lo:
        raise ValueError(f"contamination_range {cfg.contamination_range} infeasible at {n_nominal} rows")
    n_anom = min(max(int(round(rate * n_nominal)), ceil_lo), floor_hi)
    return n_nominal, n_anom, rate


def assemble_episode(
    source: LabeledDataset,
    cfg: PriorConfig,
    rng: np.random.Generator,
    context_size: int | None = None,
) -> Episode:
    """Carve a source dataset into a balanced query and a protocol context.

    The query takes query_size/2 rows of each class; the context takes
    ``context_size`` further rows (drawn from the episode-size range when not
    given), all nominal under the clean protocol or contaminated at a sampled
    rate under the noisy protocol.  Rows are never shared between the two
    sides, and both sides are shuffled.
    """
    source.validate()
    half = cfg.query_size // 2
    if context_size is None:
        lo, hi = cfg.episode_rows_range
        context_size = int(rng.integers(lo, hi + 1)) - cfg.query_size
    if context_size < 1:
        raise ValueError(f"context budget must be >= 1, got {context_size}")

    n_ctx_nominal, n_ctx_anom, rate = _context_composition(context_size, cfg, rng)
    need_nominal = half + n_ctx_nominal
    need_anom = half + n_ctx_anom

    nominal_idx = np.flatnonzero(source.labels == 0)
    anomaly_idx = np.flatnonzero(source.labels == 1)
    if len(anomaly_idx) < need_anom:
        raise ValueError(
            f"source supplies {len(anomaly_idx)} anomalies but the episode needs "
            f"{need_anom} (short {need_anom - len(anomaly_idx)})"
        )
    if len(nominal_idx) < need_nominal:
        raise ValueError(
            f"source supplies {len(nominal_idx)} nominal rows but the episode needs "
            f"{need_nominal} (short {need_nominal - len(nominal_idx)})"
        )

    nominal_pick = rng.permutation(nominal_idx)[:need_nominal]
    anomaly_pick = rng.permutation(anomaly_idx)[:need_anom]

    query_idx = np.concatenate([nominal_pick[:half], anomaly_pick[:half]])
    query_labels = np.concatenate([np.zeros(half, dtype=int), np.ones(half, dtype=int)])
    ctx_idx = np.concatenate([nominal_pick[half:], anomaly_pick[half:]])
    ctx_labels = np.concatenate(
        [np.zeros(n_ctx_nominal, dtype=int), np.ones(n_ctx_anom, dtype=int)]
    )

    q_perm = rng.permutation(len(query_idx))
    c_perm = rng.permutation(len(ctx_idx))
    return Episode(
        context=source.features[ctx_idx[c_perm]],
        query=source.features[query_idx[q_perm]],
        query_labels=query_labels[q_perm],
        context_labels=ctx_labels[c_perm],
        d=source.features.shape[1],
        meta={
            "kind": source.anomaly_kind,
            "protocol": cfg.protocol,
            "contamination": rate,
        },
    )


def sample_pretraining_episode(cfg: PriorConfig, rng: np.random.Generator) -> Episode:
    """Draw one fresh episode from the full prior mixture.

    With probability ``prob_gmm`` the source is a Gaussian mixture with one
    uniformly chosen anomaly mechanism; otherwise it is a classification
    source (retried with more rows if a class is too small to fill the
    episode).
    """
    lo, hi = cfg.episode_rows_range
    total = int(rng.integers(lo, hi + 1))
    half = cfg.query_size // 2
    n_ctx_budget = total - cfg.query_size
    worst_ctx_anom = int(math.floor(cfg.contamination_range[1] * n_ctx_budget)) + 2
    need_anom = half + (worst_ctx_anom if cfg.protocol == "noisy" else 0)
    need_nominal = half + n_ctx_budget

    if rng.random() < cfg.prob_gmm:
        kind = GMM_ANOMALY_KINDS[int(rng.integers(len(GMM_ANOMALY_KINDS)))]
        spec = sample_gmm_spec(cfg, rng)
        nominal = sample_from_gmm(spec, need_nominal, rng)
        anomalies = inject_anomalies(spec, nominal, kind, need_anom, cfg.alpha, rng)
        source = LabeledDataset(
            features=np.concatenate([nominal, anomalies], axis=0),
            labels=np.concatenate(
                [np.zeros(need_nominal, dtype=int), np.ones(need_anom, dtype=int)]
            ),
            anomaly_kind=kind,
            provenance={"spec_hash": spec.spec_hash()},
        )
    else:
        n_try = max(2 * total, 10 * cfg.classes_range[1])
        for _ in range(6):
            try:
                source = sample_classification_source(cfg, n_try, rng)
            except ValueError:
                n_try *= 2
                continue
            have_nom = int((source.labels == 0).sum())
            have_anom = int(source.labels.sum())
            if have_nom >= need_nominal and have_anom >= need_anom:
                break
            n_try *= 2
        else:
            raise ValueError(
                f"classification source kept too few rows per class for an episode of {total} rows"
            )

    return assemble_episode(source, cfg, rng, context_size=n_ctx_budget)


# ---------------------------------------------------------------------------
# standalone datasets (generate CLI, evaluation corpora)
# ---------------------------------------------------------------------------


def sample_gmm_dataset(
    cfg: PriorConfig,
    n: int,
    anomaly_rate: float,
    kind: str,
    rng: np.random.Generator,
) -> LabeledDataset:
    """A shuffled labeled dataset with a fixed anomaly rate and mechanism."""
    if not 0.0 < anomaly_rate < 1.0:
        raise ValueError(f"anomaly_rate must sit inside (0,1), got {anomaly_rate}")
    if n < 10:
        raise ValueError(f"dataset needs at least 10 rows, got {n}")
    n_anom = min(max(int(round(n * anomaly_rate)), 1), n - 1)
    spec = sample_gmm_spec(cfg, rng)
    nominal = sample_from_gmm(spec, n - n_anom, rng)
    anomalies = inject_anomalies(spec, nominal, kind, n_anom, cfg.alpha, rng)
    features = np.concatenate([nominal, anomalies], axis=0)
    labels = np.concatenate([np.zeros(n - n_anom, dtype=int), np.ones(n_anom, dtype=int)])
    perm = rng.permutation(n)
    return LabeledDataset(
        features=features[perm],
        labels=labels[perm],
        anomaly_kind=kind,
        provenance={
            "spec_hash": spec.spec_hash(),
            "kind": kind,
            "anomaly_rate": anomaly_rate,
        },
    )


def sample_classification_dataset(cfg: PriorConfig, n: int, rng: np.random.Generator) -> LabeledDataset:
    """A shuffled classification-family dataset; the anomaly rate is emergent."""
    source = sample_classification_source(cfg, n, rng)
    perm = rng.permutation(len(source.features))
    return LabeledDataset(
        features=source.features[perm],
        labels=source.labels[perm],
        anomaly_kind=source.anomaly_kind,
        provenance=source.provenance,
    )
