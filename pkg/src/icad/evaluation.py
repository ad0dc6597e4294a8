"""Metrics, method ranking, dataset splitting, and the benchmark loop.

The splitting pipeline turns a labelled table into a context/query episode
the way tabular anomaly benchmarks do: oversized datasets are subsampled to
10000 rows, undersized ones resampled with replacement up to 1000, both
stratified by label.  Three protocols control where anomalies end up:

- "clean": context takes nominal rows only (70%, or 60% when anomalies
  exceed 30% of the data); every anomaly goes to the query.
- "noisy": stratified 70/30 split, so the context keeps the dataset's
  contamination rate.
- "level": like noisy, then anomalies are dropped from the context until
  its contamination is at the requested level.  Datasets whose overall rate
  sits below the level cannot reach it and are skipped (None).  Level 0 is
  the clean split.

Features are rescaled per column to [-1, 1] using context statistics only;
constant columns collapse to zero.  Query rows may land outside the
interval, which is fine: the map is linear, not a clamp.
"""

import csv
import datetime
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .baselines import BASELINES, labels_from_scores, threshold_from_scores
from .model import labels_from_probs, predict
from .priors import Episode
from .rng import derive_rng

EVAL_PROTOCOLS = ("clean", "noisy", "level")
MAX_ROWS = 10000
MIN_ROWS = 1000
CONTEXT_FRACTION = 0.7
CONTEXT_FRACTION_DENSE = 0.6
DENSE_RATE = 0.3


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _scores_and_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0 or 1)")
    return scores, labels.astype(np.int64)


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic; ties get half credit."""
    scores, labels = _scores_and_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def f1_score(y_true, y_pred) -> float:
    """F1 of the anomaly class (label 1); degenerate cases score zero."""
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in length: {y_true.size} vs {y_pred.size}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary (0 or 1)")
    y_true = y_true.astype(np.int64)
    y_pred = y_pred.astype(np.int64)
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def rank_methods(metric_by_dataset: dict) -> dict:
    """Rank methods per dataset (1 is best, ties average) and aggregate.

    ``metric_by_dataset`` maps dataset -> method -> metric where higher is
    better.  Every dataset must report every method.
    """
    if not metric_by_dataset:
        raise ValueError("no datasets to rank")
    datasets = list(metric_by_dataset)
    methods = list(metric_by_dataset[datasets[0]])
    if not methods:
        raise ValueError("no methods to rank")
    per_dataset = {}
    for dataset in datasets:
        cells = metric_by_dataset[dataset]
        for method in methods:
            if method not in cells:
                raise ValueError(f"dataset {dataset!r} is missing a value for method {method!r}")
        if set(cells) != set(methods):
            extra = sorted(set(cells) - set(methods))
            raise ValueError(f"dataset {dataset!r} reports unexpected methods {extra}")
        values = np.array([cells[m] for m in methods], dtype=np.float64)
        ranks = rankdata(-values, method="average")
        per_dataset[dataset] = {m: float(r) for m, r in zip(methods, ranks)}
    stacked = {m: np.array([per_dataset[d][m] for d in datasets]) for m in methods}
    return {
        "per_dataset": per_dataset,
        "mean_rank": {m: float(r.mean()) for m, r in stacked.items()},
        "median_rank": {m: float(np.median(r)) for m, r in stacked.items()},
    }


# ---------------------------------------------------------------------------
# dataset splitting
# ---------------------------------------------------------------------------


def _adjust_size(features: np.ndarray, labels: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    n = labels.size
    if MIN_ROWS <= n <= MAX_ROWS:
        return features, labels
    target = MAX_ROWS if n > MAX_ROWS else MIN_ROWS
    replace = n < MIN_ROWS
    n_anom = int(round(target * labels.mean()))
    if labels.sum() > 0:
        n_anom = min(max(n_anom, 1), target - 1)
    picks = []
    for value, count in ((0, target - n_anom), (1, n_anom)):
        pool = np.flatnonzero(labels == value)
        if count == 0:
            continue
        picks.append(rng.choice(pool, size=count, replace=replace))
    order = rng.permutation(np.concatenate(picks))
    return features[order], labels[order]


def _clean_indices(labels: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    nominal = np.flatnonzero(labels == 0)
    anomalies = np.flatnonzero(labels == 1)
    ratio = CONTEXT_FRACTION if labels.mean() <= DENSE_RATE else CONTEXT_FRACTION_DENSE
    n_ctx = min(int(round(ratio * labels.size)), nominal.size)
    shuffled = rng.permutation(nominal)
    context = shuffled[:n_ctx]
    query = rng.permutation(np.concatenate([shuffled[n_ctx:], anomalies]))
    return context, query


def _stratified_indices(labels: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    ctx_parts, query_parts = [], []
    for value in (0, 1):
        pool = rng.permutation(np.flatnonzero(labels == value))
        cut = int(round(CONTEXT_FRACTION * pool.size))
        ctx_parts.append(pool[:cut])
        query_parts.append(pool[cut:])
    context = rng.permutation(np.concatenate(ctx_parts))
    query = rng.permutation(np.concatenate(query_parts))
    return context, query


def _trim_context_to_level(context: np.ndarray, labels: np.ndarray, level: float, rng) -> np.ndarray:
    flags = labels[context]
    total = context.size
    n_anom = int(flags.sum())
    need = math.ceil((n_anom - level * total) / (1.0 - level) - 1e-12)
    if need <= 0:
        return context
    spots = np.flatnonzero(flags == 1)
    drop = rng.choice(spots, size=need, replace=False)
    keep = np.setdiff1d(np.arange(total), drop)
    return context[keep]


def scale_about_context(context: np.ndarray):
    lo = context.min(axis=0)
    hi = context.max(axis=0)
    span = hi - lo
    moving = span > 0

    def apply(rows: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rows)
        out[:, moving] = 2.0 * (rows[:, moving] - lo[moving]) / span[moving] - 1.0
        return out

    return apply


def adbench_episode(features, labels, protocol="noisy", level=None, rng=None):
    """Split a labelled table into a scaled context/query Episode.

    Returns None when the "level" protocol asks for more context
    contamination than the dataset holds.
    """
    if rng is None:
        raise ValueError("an explicit rng is required for reproducible splits")
    if protocol not in EVAL_PROTOCOLS:
        raise ValueError(f"protocol must be one of {EVAL_PROTOCOLS}, got {protocol!r}")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError(f"features must be a non-empty 2D array, got shape {features.shape}")
    if labels.shape != (features.shape[0],):
        raise ValueError(
            f"labels must be 1D with one entry per row: got {labels.shape} for "
            f"{features.shape[0]} rows"
        )
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0 or 1)")
    labels = labels.astype(np.int64)

    requested_level = level
    if protocol == "level":
        if level is None:
            raise ValueError("the level protocol needs an explicit level")
        if not 0.0 <= level < 0.5:
            raise ValueError(f"level must sit in [0, 0.5), got {level}")
        if level == 0.0:
            protocol = "clean"
        elif labels.mean() < level:
            return None

    features, labels = _adjust_size(features, labels, rng)
    if protocol == "clean":
        context_idx, query_idx = _clean_indices(labels, rng)
    else:
        context_idx, query_idx = _stratified_indices(labels, rng)
        if protocol == "level":
            context_idx = _trim_context_to_level(context_idx, labels, level, rng)

    scale = scale_about_context(features[context_idx])
    return Episode(
        context=scale(features[context_idx]),
        query=scale(features[query_idx]),
        query_labels=labels[query_idx],
        context_labels=labels[context_idx],
        d=features.shape[1],
        meta={"protocol": protocol, "level": requested_level},
    )


# ---------------------------------------------------------------------------
# benchmark loop
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    dataset: str
    method: str
    seed: int
    aucroc: float
    f1: float
    status: str
    error: str = ""


@dataclass
class BenchmarkResult:
    rows: list
    aggregates: dict
    status: str
    protocol: str
    level: float | None = None


def _dataset_arrays(entry):
    if hasattr(entry, "features") and hasattr(entry, "labels"):
        return entry.features, entry.labels
    features, labels = entry
    return features, labels


def run_benchmark(
    datasets: dict,
    methods,
    seeds,
    protocol: str = "noisy",
    level: float | None = None,
    model_params=None,
    bench_seed: int = 0,
) -> BenchmarkResult:
    """Score every (dataset, method, seed) cell and aggregate.

    All methods see the same split for a given (dataset, seed): the split
    generator is derived without the method name.  Failures in one cell are
    recorded and do not stop the run.
    """
    methods = list(methods)
    known = set(BASELINES) | {"icad"}
    for method in methods:
        if method not in known:
            raise ValueError(f"unknown method {method!r}; expected one of {sorted(known)}")
    if "icad" in methods and model_params is None:
        raise ValueError("the icad method needs model parameters (model_params is None)")

    rows = []
    for name, entry in datasets.items():
        features, labels = _dataset_arrays(entry)
        for seed in seeds:
            split_rng = derive_rng(bench_seed, "split", name, int(seed))
            episode = adbench_episode(features, labels, protocol=protocol, level=level, rng=split_rng)
            if episode is None:
                for method in methods:
                    rows.append(BenchRow(name, method, int(seed), math.nan, math.nan, "skipped"))
                continue
            total_anoms = int(episode.context_labels.sum() + episode.query_labels.sum())
            contamination = total_anoms / (episode.n_context + episode.n_query)
            for method in methods:
                try:
                    if method == "icad":
                        prediction = predict(episode, model_params)
                        scores = prediction.probs[:, 1]
                        predicted = prediction.labels
                    else:
                        method_seed = int(
                            derive_rng(bench_seed, "method", method, name, int(seed)).integers(2**31)
                        )
                        scorer = BASELINES[method]
                        scores = scorer(episode.context, episode.query, method_seed)
                        train_scores = scorer(episode.context, None, method_seed)
                        threshold = threshold_from_scores(train_scores, contamination)
                        predicted = labels_from_scores(scores, threshold)
                    rows.append(
                        BenchRow(
                            name,
                            method,
                            int(seed),
                            auc_roc(scores, episode.query_labels),
                            f1_score(episode.query_labels, predicted),
                            "ok",
                        )
                    )
                except Exception as exc:
                    rows.append(
                        BenchRow(name, method, int(seed), math.nan, math.nan, "failed", str(exc))
                    )

    any_failed = any(r.status == "failed" for r in rows)
    aggregates = aggregate_rows(rows, methods)
    return BenchmarkResult(
        rows=rows,
        aggregates=aggregates,
        status="partial" if any_failed else "ok",
        protocol=protocol,
        level=level,
    )


def aggregate_rows(rows, methods) -> dict:
    """Seed-mean, per-method mean metric, and (when no cell failed) rank tables."""
    ok = [r for r in rows if r.status == "ok"]
    any_failed = any(r.status == "failed" for r in rows)
    seed_means = {}
    for row in ok:
        seed_means.setdefault((row.dataset, row.method), []).append(row)
    auc_means = {
        key: float(np.mean([r.aucroc for r in group])) for key, group in seed_means.items()
    }
    f1_means = {key: float(np.mean([r.f1 for r in group])) for key, group in seed_means.items()}

    aggregates = {}
    for label, table in (("mean_aucroc", auc_means), ("mean_f1", f1_means)):
        per_method = {}
        for method in methods:
            values = [v for (d, m), v in table.items() if m == method]
            if values:
                per_method[method] = float(np.mean(values))
        aggregates[label] = per_method

    if not any_failed:
        covered = sorted({d for d, _ in auc_means})
        complete = {
            d: {m: auc_means[(d, m)] for m in methods}
            for d in covered
            if all((d, m) in auc_means for m in methods)
        }
        if complete and len(complete) == len(covered):
            ranks = rank_methods(complete)
            aggregates["per_dataset_rank"] = ranks["per_dataset"]
            aggregates["mean_rank"] = ranks["mean_rank"]
            aggregates["median_rank"] = ranks["median_rank"]
    return aggregates


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------


def write_benchmark_csv(result: BenchmarkResult, path) -> None:
    """Long-format rows: dataset, method, seed, aucroc, f1 (blank when not ok)."""
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "seed", "aucroc", "f1"])
        for row in result.rows:
            if row.status == "ok":
                writer.writerow(
                    [row.dataset, row.method, row.seed, f"{row.aucroc:.10g}", f"{row.f1:.10g}"]
                )
            else:
                writer.writerow([row.dataset, row.method, row.seed, "", ""])


def write_benchmark_json(result: BenchmarkResult, path, config_hash: str = "") -> None:
    blob = {
        "config_hash": config_hash,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "status": result.status,
        "protocol": result.protocol,
        "level": result.level,
        "aggregates": result.aggregates,
        "failed": [
            {"dataset": r.dataset, "method": r.method, "seed": r.seed, "error": r.error}
            for r in result.rows
            if r.status == "failed"
        ],
        "skipped": [
            {"dataset": r.dataset, "method": r.method, "seed": r.seed}
            for r in result.rows
            if r.status == "skipped"
        ],
    }
    with open(str(path), "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_benchmark_svg(result: BenchmarkResult, path, config_hash: str = "") -> None:
    """A small hand-rolled bar chart of mean AUC-ROC per method."""
    table = result.aggregates.get("mean_aucroc", {})
    methods = sorted(table)
    bar_w, gap, left, bottom, height = 70, 30, 60, 30, 220
    width = left + len(methods) * (bar_w + gap) + gap
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 60}" '
        f'viewBox="0 0 {width} {height + 60}">',
        f"  <desc>mean AUC-ROC by method; config {config_hash}</desc>",
        f'  <line x1="{left - 10}" y1="{height + 10}" x2="{width - 10}" y2="{height + 10}" '
        'stroke="black"/>',
    ]
    for i, method in enumerate(methods):
        value = table[method]
        bar_h = int(round(value * (height - bottom)))
        x = left + i * (bar_w + gap)
        y = height + 10 - bar_h
        lines.append(f'  <rect x="{x}" y="{y}" width="{bar_w}" height="{bar_h}" fill="#4878a8"/>')
        lines.append(
            f'  <text x="{x + bar_w // 2}" y="{height + 30}" text-anchor="middle" '
            f'font-size="13">{method}</text>'
        )
        lines.append(
            f'  <text x="{x + bar_w // 2}" y="{y - 6}" text-anchor="middle" '
            f'font-size="12">{value:.3f}</text>'
        )
    lines.append("</svg>")
    with open(str(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")
