"""Command line interface.

Subcommands:

- generate: synthesize labelled datasets from the prior into CSV files.
- pretrain: train a detector on synthetic episodes and write checkpoints.
- detect:   score a CSV with a trained checkpoint.
- bench:    run detectors over a directory of labelled CSVs and report.
- report:   re-aggregate an existing benchmark CSV into JSON and SVG.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.  Heavy
imports happen after argument parsing so --threads can cap the BLAS pools
before numpy loads.
"""

import argparse
import datetime
import json
import os
import sys

KINDS = ("local", "cluster", "global", "class_based")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icad",
        description="In-context anomaly detection for tabular data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="JSON run configuration file")
            p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")

    g = sub.add_parser("generate", help="synthesize labelled datasets")
    common(g)
    g.add_argument("--kind", choices=KINDS, default="global", help="anomaly mechanism")
    g.add_argument("--rows", type=int, default=1000, help="rows per dataset")
    g.add_argument(
        "--rate", type=float, default=0.1,
        help="anomaly rate (mixture kinds only; class_based rates are emergent)",
    )
    g.add_argument("--count", type=int, default=1, help="number of datasets")

    t = sub.add_parser("pretrain", help="pretrain a detector on synthetic episodes")
    common(t)

    d = sub.add_parser("detect", help="score a dataset with a trained checkpoint")
    common(d, needs_config=False)
    d.add_argument("--checkpoint", required=True, help="model checkpoint file")
    d.add_argument("--data", required=True, help="CSV of rows to score")
    d.add_argument("--context", help="CSV of reference rows (defaults to --data itself)")
    d.add_argument("--threshold", type=float, default=0.5, help="anomaly probability cutoff")

    b = sub.add_parser("bench", help="benchmark detectors over a dataset directory")
    common(b)
    b.add_argument("--datasets", required=True, help="directory of labelled CSV files")
    b.add_argument("--methods", default="knn,pca,iforest", help="comma-separated method names")
    b.add_argument("--bench-seeds", default="0", help="comma-separated split seeds")
    b.add_argument("--protocol", choices=("clean", "noisy", "level"), default="noisy")
    b.add_argument("--level", type=float, help="context contamination for the level protocol")
    b.add_argument("--checkpoint", help="model checkpoint (required for the icad method)")

    r = sub.add_parser("report", help="re-aggregate a benchmark CSV")
    common(r)
    r.add_argument("--results", required=True, help="benchmark CSV produced by bench")
    return parser


def _apply_threads(threads):
    if threads is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def _write_run_json(out_dir: str, payload: dict) -> None:
    payload = dict(payload)
    payload["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    from .data_io import dataset_summary, load_run_config, save_dataset_csv
    from .priors import sample_classification_dataset, sample_gmm_dataset
    from .rng import derive_rng

    cfg = load_run_config(args.config, seed=args.seed, threads=args.threads)
    if args.count < 1:
        raise ValueError(f"--count must be at least 1, got {args.count}")
    os.makedirs(args.out, exist_ok=True)
    written = []
    for i in range(args.count):
        rng = derive_rng(cfg.seed, "generate", args.kind, i)
        if args.kind == "class_based":
            dataset = sample_classification_dataset(cfg.prior, args.rows, rng)
        else:
            dataset = sample_gmm_dataset(cfg.prior, args.rows, args.rate, args.kind, rng)
        stem = f"dataset_{i:03d}"
        csv_path = os.path.join(args.out, f"{stem}.csv")
        save_dataset_csv(csv_path, dataset.features, dataset.labels)
        sidecar = dataset_summary(dataset.features, dataset.labels)
        sidecar.update(
            {
                "kind": dataset.anomaly_kind,
                "seed": cfg.seed,
                "provenance": dataset.provenance,
                "config_hash": cfg.config_hash,
            }
        )
        with open(os.path.join(args.out, f"{stem}.json"), "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(os.path.basename(csv_path))
    _write_run_json(
        args.out,
        {
            "command": "generate",
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "kind": args.kind,
            "rows": args.rows,
            "rate": args.rate,
            "count": args.count,
            "files": written,
        },
    )
    return 0


def cmd_pretrain(args) -> int:
    from .data_io import load_run_config
    from .train import pretrain

    cfg = load_run_config(args.config, seed=args.seed, threads=args.threads)
    train_cfg = cfg.train_config()
    params, log = pretrain(
        train_cfg, out_dir=args.out, checkpoint_meta={"config_hash": cfg.config_hash}
    )
    last = log.records[-1]
    _write_run_json(
        args.out,
        {
            "command": "pretrain",
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "steps": train_cfg.steps,
            "final_loss": last.loss,
            "final_acc": last.acc,
            "checkpoint": log.checkpoint_path,
        },
    )
    return 0


def cmd_detect(args) -> int:
    import numpy as np

    from .data_io import load_dataset_csv
    from .evaluation import scale_about_context
    from .model import predict
    from .priors import Episode
    from .train import load_checkpoint

    params, header = load_checkpoint(args.checkpoint)
    features, _ = load_dataset_csv(args.data, require_label=False)
    if args.context is not None:
        context, _ = load_dataset_csv(args.context, require_label=False)
        if context.shape[1] != features.shape[1]:
            raise ValueError(
                f"context has {context.shape[1]} features but data has {features.shape[1]}"
            )
    else:
        context = features

    scale = scale_about_context(context)
    episode = Episode(
        context=scale(context),
        query=scale(features),
        query_labels=np.zeros(len(features), dtype=np.int64),
        context_labels=np.zeros(len(context), dtype=np.int64),
        d=features.shape[1],
    )
    prediction = predict(episode, params, threshold=args.threshold)

    os.makedirs(args.out, exist_ok=True)
    scores_path = os.path.join(args.out, "scores.csv")
    with open(scores_path, "w") as fh:
        fh.write("row,anomaly_prob,label\n")
        for i, (prob, label) in enumerate(zip(prediction.probs[:, 1], prediction.labels)):
            fh.write(f"{i},{prob:.10g},{int(label)}\n")
    _write_run_json(
        args.out,
        {
            "command": "detect",
            "checkpoint": args.checkpoint,
            "checkpoint_meta": header.get("meta", {}),
            "data": args.data,
            "context": args.context,
            "threshold": args.threshold,
            "rows": len(features),
            "flagged": int(prediction.labels.sum()),
        },
    )
    return 0


def cmd_bench(args) -> int:
    from .data_io import load_dataset_csv, load_run_config
    from .evaluation import (
        run_benchmark,
        write_benchmark_csv,
        write_benchmark_json,
        write_benchmark_svg,
    )

    cfg = load_run_config(args.config, seed=args.seed, threads=args.threads)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = [int(s) for s in args.bench_seeds.split(",") if s.strip()]
    if not methods or not seeds:
        raise ValueError("--methods and --bench-seeds must not be empty")

    names = sorted(n for n in os.listdir(args.datasets) if n.endswith(".csv"))
    if not names:
        raise ValueError(f"no .csv files in {args.datasets}")
    datasets = {}
    for name in names:
        features, labels = load_dataset_csv(os.path.join(args.datasets, name))
        datasets[name[:-4]] = (features, labels)

    model_params = None
    if "icad" in methods:
        if args.checkpoint is None:
            raise ValueError("the icad method needs --checkpoint")
        from .train import load_checkpoint

        model_params, _ = load_checkpoint(args.checkpoint)

    result = run_benchmark(
        datasets,
        methods=methods,
        seeds=seeds,
        protocol=args.protocol,
        level=args.level,
        model_params=model_params,
        bench_seed=cfg.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    write_benchmark_csv(result, os.path.join(args.out, "bench.csv"))
    write_benchmark_json(result, os.path.join(args.out, "bench.json"), config_hash=cfg.config_hash)
    write_benchmark_svg(result, os.path.join(args.out, "bench.svg"), config_hash=cfg.config_hash)
    _write_run_json(
        args.out,
        {
            "command": "bench",
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "datasets": list(datasets),
            "methods": methods,
            "bench_seeds": seeds,
            "protocol": args.protocol,
            "level": args.level,
            "status": result.status,
        },
    )
    return 0


def cmd_report(args) -> int:
    import csv as csv_module
    import math

    from .data_io import load_run_config
    from .evaluation import (
        BenchmarkResult,
        BenchRow,
        aggregate_rows,
        write_benchmark_json,
        write_benchmark_svg,
    )

    cfg = load_run_config(args.config, seed=args.seed, threads=args.threads)
    with open(args.results, newline="") as fh:
        reader = csv_module.reader(fh)
        header = next(reader, None)
        if header != ["dataset", "method", "seed", "aucroc", "f1"]:
            raise ValueError(f"{args.results} is not a benchmark CSV (header {header})")
        rows = []
        for record in reader:
            dataset, method, seed, aucroc, f1 = record
            if aucroc == "" or f1 == "":
                rows.append(BenchRow(dataset, method, int(seed), math.nan, math.nan, "failed"))
            else:
                rows.append(BenchRow(dataset, method, int(seed), float(aucroc), float(f1), "ok"))
    if not rows:
        raise ValueError(f"{args.results} has no result rows")
    methods = list(dict.fromkeys(row.method for row in rows))
    any_failed = any(row.status == "failed" for row in rows)
    result = BenchmarkResult(
        rows=rows,
        aggregates=aggregate_rows(rows, methods),
        status="partial" if any_failed else "ok",
        protocol="csv",
    )
    os.makedirs(args.out, exist_ok=True)
    write_benchmark_json(result, os.path.join(args.out, "report.json"), config_hash=cfg.config_hash)
    write_benchmark_svg(result, os.path.join(args.out, "report.svg"), config_hash=cfg.config_hash)
    _write_run_json(
        args.out,
        {
            "command": "report",
            "config_hash": cfg.config_hash,
            "results": args.results,
            "rows": len(rows),
            "status": result.status,
        },
    )
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "detect": cmd_detect,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(getattr(args, "threads", None))
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
