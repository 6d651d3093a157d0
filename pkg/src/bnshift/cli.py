"""Command-line entry point wiring data generation, training, evaluation,
diagnostics, and the full experiment matrix.

Exit codes: 0 success, 2 usage error (argparse default), 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

import dataclasses

from .batchnorm import set_mode, tap_activations
from .datagen import (
    DEFAULT_COUNTS,
    DomainSpec,
    compose_batch,
    generate,
    load_dataset,
    save_dataset,
)
from .diagnostics import kde, layer_divergence
from .matrix import default_matrix_config, run_matrix
from .model import ModelConfig, load_checkpoint
from .training import (
    DivergenceError,
    ExperimentSpec,
    config_digest,
    csv_header_line,
    derive_rng,
    evaluate_model,
    parse_stats,
    run_experiment,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="bnshift",
        description="Batch-norm statistics adaptation toolkit: synthetic multi-domain "
        "benchmark, selective BN+FC fine-tuning, adversarial adaptation, diagnostics.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic domain datasets")
    p.add_argument("--domains", required=True,
                   help="comma-separated domain config files (JSON), or A,B,C for built-ins")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--counts", help="JSON file overriding per-split class counts")

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", required=True, help="experiment spec (JSON)")
    p.add_argument("--data", required=True, help="root directory holding dataset subdirs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="a dataset directory")
    p.add_argument("--stats", default="tr", help="tr | tt8 | tt64 | tt<N>")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="optional output directory for metrics.csv")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("diagnose", help="per-BN-layer divergence between two models")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--data", required=True, help="a dataset directory")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-a", default="tr")
    p.add_argument("--stats-b", default="tr")
    p.add_argument("--bins", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-channel", action="store_true",
                   help="also write a per-channel divergence profile")

    p = sub.add_parser("matrix", help="run the full experiment matrix")
    p.add_argument("--config", help="matrix config (JSON); omit for the default matrix")
    p.add_argument("--data", help="dataset root for the default matrix config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)

    return parser


def cmd_gen_data(args):
    counts = DEFAULT_COUNTS
    if args.counts:
        with open(args.counts) as f:
            counts = json.load(f)
    from .matrix import BENCHMARK_DOMAINS

    for token in args.domains.split(","):
        token = token.strip()
        if token in BENCHMARK_DOMAINS:
            spec = dataclasses.replace(BENCHMARK_DOMAINS[token])
        else:
            with open(token) as f:
                spec = DomainSpec(**json.load(f))
        if args.seed:
            spec.seed = int(derive_rng(args.seed, spec.name).integers(0, 2**31))
        ds = generate(spec, counts=counts, image_size=args.size)
        out_dir = os.path.join(args.out, spec.name)
        save_dataset(ds, out_dir)
        print(f"wrote {len(ds.records)} images to {out_dir}")
    return EXIT_OK


def cmd_train(args):
    with open(args.config) as f:
        raw = json.load(f)
    model_cfg = ModelConfig.from_dict(raw.pop("model")) if "model" in raw else None
    spec = ExperimentSpec(**raw)
    names = set(spec.sources) | ({spec.target} if spec.target else set()) | set(spec.eval_on or [])
    registry = {n: load_dataset(os.path.join(args.data, n)) for n in sorted(names)}
    _, reports, history = run_experiment(spec, registry, args.out, model_cfg)
    for r in reports:
        print(f"{r.experiment} {r.dataset} {r.stats_mode}: "
              f"ROC-AUC {r.roc_auc:.4f} PR-AUC {r.pr_auc:.4f}")
    return EXIT_OK


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    parse_stats(args.stats)
    report = evaluate_model(model, dataset, args.stats, experiment="eval",
                            split=args.split, seed=args.seed)
    print(f"{report.dataset} {report.stats_mode} [{args.split}]: "
          f"ROC-AUC {report.roc_auc:.6f} ({report.roc_ci[0]:.6f}, {report.roc_ci[1]:.6f}) "
          f"PR-AUC {report.pr_auc:.6f} ({report.pr_ci[0]:.6f}, {report.pr_ci[1]:.6f})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        digest = config_digest(vars(args))
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), [report], args.seed, digest)
    return EXIT_OK


def cmd_diagnose(args):
    model_a, _ = load_checkpoint(args.model_a)
    model_b, _ = load_checkpoint(args.model_b)
    dataset = load_dataset(args.data)
    # trace batches follow the training class ratio over the train split
    batch = compose_batch(
        dataset, "classification",
        rng=derive_rng(args.seed, "diagnose"),
        batch_size=args.batch,
    )
    for model, token in ((model_a, args.stats_a), (model_b, args.stats_b)):
        mode, tt_batch = parse_stats(token)
        set_mode(model, mode, tt_batch if tt_batch else None)
    trace_a = tap_activations(model_a, batch.images)
    trace_b = tap_activations(model_b, batch.images)
    profile = layer_divergence(trace_a, trace_b, bins=args.bins)
    os.makedirs(args.out, exist_ok=True)
    digest = config_digest(vars(args))
    header = csv_header_line(args.seed, digest)
    with open(os.path.join(args.out, "divergence_profile.csv"), "w") as f:
        f.write(header)
        f.write("layer,depth,jsd\n")
        for e in profile.entries:
            f.write(f"{e.layer},{e.depth},{e.jsd:.6f}\n")
    if args.per_channel:
        channel_profile = layer_divergence(trace_a, trace_b, bins=args.bins, per_channel=True)
        with open(os.path.join(args.out, "divergence_profile_channels.csv"), "w") as f:
            f.write(header)
            f.write("layer,depth,channel,jsd\n")
            for e in channel_profile.entries:
                f.write(f"{e.layer},{e.depth},{e.channel},{e.jsd:.6f}\n")
    for ea, eb in zip(trace_a.entries, trace_b.entries):
        a, b = ea.values.ravel(), eb.values.ravel()
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        pad = 0.05 * (hi - lo) if hi > lo else 1.0
        grid = np.linspace(lo - pad, hi + pad, 256)
        try:
            da, db = kde(a, grid), kde(b, grid)
        except ValueError as err:
            logging.getLogger("bnshift.cli").warning("skipping KDE for %s: %s", ea.layer, err)
            continue
        with open(os.path.join(args.out, f"kde_layer_{ea.layer}.csv"), "w") as f:
            f.write(header)
            f.write("grid,density_a,density_b\n")
            for g, x, y in zip(grid, da, db):
                f.write(f"{g:.6f},{x:.6f},{y:.6f}\n")
    print(f"wrote divergence profile for {len(profile.entries)} BN layers to {args.out}")
    return EXIT_OK


def cmd_matrix(args):
    if args.config:
        with open(args.config) as f:
            config = json.load(f)
    else:
        if not args.data:
            print("error: matrix without --config requires --data", file=sys.stderr)
            return EXIT_USAGE
        config = default_matrix_config(args.data, seed=args.seed)
    csv_path = run_matrix(config, args.out)
    print(f"wrote consolidated matrix to {csv_path}")
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "diagnose": cmd_diagnose,
        "matrix": cmd_matrix,
    }
    try:
        return handlers[args.command](args)
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, KeyError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
