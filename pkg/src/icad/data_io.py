"""CSV dataset files and JSON run configuration.

Dataset CSVs carry one header row; every column except the mandatory
``label`` column is a feature.  Values are written with 9 significant
digits.  Load errors point at the offending file line and column so bad
exports are easy to fix.

A run configuration is a JSON object with optional ``seed``, ``threads``,
``prior``, ``model`` and ``train`` sections layered over the package
defaults.  The canonical fully-merged form is hashed (sha256) and that
``config_hash`` is embedded in checkpoints and reports to tie outputs back
to the exact configuration that produced them.
"""

import csv
import hashlib
import json
from dataclasses import asdict

import numpy as np

from .model import ModelConfig
from .priors import PriorConfig
from .train import TrainConfig


class DataFormatError(ValueError):
    """A dataset file does not parse."""


class ConfigError(ValueError):
    """A run configuration is malformed."""


LABEL_COLUMN = "label"
_TRAIN_DEFAULTS = {
    "steps": 3000,
    "lr0": 1e-4,
    "batch_episodes": 4,
    "grad_accum": 16,
    "checkpoint_every": 500,
    "log_every": 50,
}
_TUPLE_PRIOR_FIELDS = (
    "dim_range",
    "components_range",
    "classes_range",
    "contamination_range",
    "episode_rows_range",
)


# ---------------------------------------------------------------------------
# dataset CSV
# ---------------------------------------------------------------------------


def save_dataset_csv(path, features, labels) -> None:
    """Write features plus a trailing label column, 9 significant digits."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise ValueError(f"features must be 2D, got shape {features.shape}")
    if labels.shape != (features.shape[0],):
        raise ValueError(
            f"labels must hold one entry per row: got {labels.shape} for {features.shape[0]} rows"
        )
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{j}" for j in range(features.shape[1])] + [LABEL_COLUMN])
        for row, label in zip(features, labels):
            writer.writerow([f"{v:.9g}" for v in row] + [int(label)])


def load_dataset_csv(path, require_label: bool = True):
    """Read a dataset CSV and return ``(features, labels)``.

    ``labels`` is None when the file has no label column and
    ``require_label`` is False.
    """
    with open(str(path), newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise DataFormatError(f"{path} is empty")
    header = [name.strip() for name in rows[0]]
    if require_label and LABEL_COLUMN not in header:
        raise DataFormatError(f"{path} has no '{LABEL_COLUMN}' column (columns: {header})")
    label_at = header.index(LABEL_COLUMN) if LABEL_COLUMN in header else None
    feature_names = [name for name in header if name != LABEL_COLUMN]
    if not feature_names:
        raise DataFormatError(f"{path} has no feature columns")
    if len(rows) == 1:
        raise DataFormatError(f"{path} contains no data rows")

    features = np.empty((len(rows) - 1, len(feature_names)), dtype=np.float64)
    labels = np.empty(len(rows) - 1, dtype=np.int64) if label_at is not None else None
    for i, row in enumerate(rows[1:]):
        line = i + 2  # header is file line 1
        if len(row) != len(header):
            raise DataFormatError(
                f"{path} line {line}: expected {len(header)} cells, found {len(row)}"
            )
        j = 0
        for name, cell in zip(header, row):
            if name == LABEL_COLUMN:
                try:
                    value = float(cell)
                except ValueError:
                    raise DataFormatError(
                        f"{path} line {line}: label {cell!r} is not a number"
                    ) from None
                if value not in (0.0, 1.0):
                    raise DataFormatError(
                        f"{path} line {line}: label must be 0 or 1, got {cell!r}"
                    )
                labels[i] = int(value)
                continue
            try:
                value = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path} line {line}: column {name!r} has non-numeric value {cell!r}"
                ) from None
            if not np.isfinite(value):
                raise DataFormatError(
                    f"{path} line {line}: column {name!r} has non-finite value {cell!r}"
                )
            features[i, j] = value
            j += 1
    return features, labels


def dataset_summary(features, labels) -> dict:
    """Row/feature/anomaly counts, as written into dataset sidecar files."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    n = int(labels.size)
    anomalies = int(labels.sum())
    return {
        "n_samples": n,
        "n_features": int(features.shape[1]),
        "n_anomalies": anomalies,
        "anomaly_rate": anomalies / n if n else 0.0,
    }


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _merge_section(section: str, defaults: dict, given: dict) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown {section} option(s): {', '.join(unknown)}")
    merged = dict(defaults)
    merged.update(given)
    return merged


class RunConfig:
    """Fully-merged run settings with a stable content hash."""

    TOP_LEVEL = ("seed", "threads", "prior", "model", "train")

    def __init__(self, raw: dict | None = None, seed: int | None = None, threads: int | None = None):
        raw = dict(raw or {})
        unknown = sorted(set(raw) - set(self.TOP_LEVEL))
        if unknown:
            raise ConfigError(f"unknown top-level option(s): {', '.join(unknown)}")

        self.seed = int(seed if seed is not None else raw.get("seed", 0))
        self.threads = int(threads if threads is not None else raw.get("threads", 1))
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")

        prior_given = dict(raw.get("prior", {}))
        prior_given.setdefault("seed", self.seed)
        merged = _merge_section("prior", asdict(PriorConfig()), prior_given)
        for name in _TUPLE_PRIOR_FIELDS:
            merged[name] = tuple(merged[name])
        try:
            self.prior = PriorConfig(**merged)
        except ValueError as exc:
            raise ConfigError(f"bad prior section: {exc}") from exc

        merged = _merge_section("model", asdict(ModelConfig()), dict(raw.get("model", {})))
        try:
            self.model = ModelConfig(**merged)
        except ValueError as exc:
            raise ConfigError(f"bad model section: {exc}") from exc

        self.train_options = _merge_section("train", _TRAIN_DEFAULTS, dict(raw.get("train", {})))

        self.canonical = {
            "seed": self.seed,
            "threads": self.threads,
            "prior": asdict(self.prior),
            "model": asdict(self.model),
            "train": dict(self.train_options),
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                prior=self.prior, model=self.model, seed=self.seed, **self.train_options
            )
        except ValueError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc


def load_run_config(path=None, seed: int | None = None, threads: int | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus CLI overrides."""
    raw = {}
    if path is not None:
        try:
            with open(str(path)) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    return RunConfig(raw, seed=seed, threads=threads)
