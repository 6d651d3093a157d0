"""Experiment-matrix runner and the default benchmark domain layout.

A matrix config names datasets, a list of model rows (trained once each,
or borrowing another row's checkpoint for evaluation-only variants), and
the statistics modes to evaluate under. The consolidated CSV has one row
per model x stats mode and per-domain ROC/PR AUC columns.

Domain roles at desk scale: A is the pretraining-like domain, B a second
labeled domain whose intensity map differs from A by a pure affine shift,
and C an unseen domain used as the adversarial target (class labels from C
never enter training).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict

from .datagen import DomainSpec, load_dataset
from .model import ModelConfig, load_checkpoint
from .training import (
    ExperimentSpec,
    TOOL_VERSION,
    config_digest,
    csv_header_line,
    evaluate_model,
    save_checkpoint,
    train_model,
)

__all__ = ["BENCHMARK_DOMAINS", "run_matrix", "default_matrix_config", "load_registry"]

log = logging.getLogger("bnshift.matrix")

BENCHMARK_DOMAINS = {
    "A": DomainSpec("A", gain=1.0, offset=0.0, gamma_exp=1.0, noise_sigma=0.02, seed=11),
    "B": DomainSpec("B", gain=1.7, offset=0.55, gamma_exp=1.0, noise_sigma=0.02, seed=22),
    "C": DomainSpec("C", gain=0.85, offset=0.25, gamma_exp=1.35, noise_sigma=0.03, seed=33),
}


def default_matrix_config(data_root, seed=42, epochs=10, ft_epochs=5, dat_epochs=12):
    """The desk-scale analogue of the cross-domain experiment families."""
    return {
        "datasets": {name: os.path.join(data_root, name) for name in ("A", "B", "C")},
        "seed": seed,
        "lr": 1e-3,
        "beta_reg": 1e-4,
        "eval_stats": ["tr", "tt8", "tt64"],
        "models": [
            {"name": "base_A", "sources": ["A"], "freeze": "full", "epochs": epochs},
            {"name": "base_A_unit", "base": "base_A", "input_transform": "unit_range"},
            {"name": "ft_B_full", "base": "base_A", "sources": ["B"], "freeze": "full",
             "epochs": ft_epochs},
            {"name": "ft_AB_full", "base": "base_A", "sources": ["A", "B"], "freeze": "full",
             "epochs": ft_epochs},
            {"name": "ft_B_bnfc", "base": "base_A", "sources": ["B"], "freeze": "bnfc",
             "epochs": ft_epochs},
            {"name": "dat_AB_bnfc", "base": "base_A", "sources": ["A", "B"], "target": "C",
             "freeze": "bnfc", "dat": True, "epochs": dat_epochs},
        ],
    }


def load_registry(dataset_paths):
    return {name: load_dataset(path) for name, path in dataset_paths.items()}


def _row_spec(row, config, checkpoint_of):
    fields = {
        "name": row["name"],
        "sources": row.get("sources", []),
        "target": row.get("target"),
        "freeze": row.get("freeze", "full"),
        "dat": row.get("dat", False),
        "epochs": row.get("epochs", 0),
        "seed": row.get("seed", config.get("seed", 0)),
        "lr": row.get("lr", config.get("lr", 1e-3)),
        "beta_reg": row.get("beta_reg", config.get("beta_reg", 1e-4)),
        "input_transform": row.get("input_transform", "none"),
        "steps_per_epoch": row.get("steps_per_epoch", config.get("steps_per_epoch")),
    }
    base = row.get("base")
    if base is not None:
        if base not in checkpoint_of:
            raise ValueError(f"matrix row {row['name']!r} references unknown base {base!r}")
        fields["init_checkpoint"] = checkpoint_of[base]
    if not fields["sources"]:
        raise ValueError(f"matrix row {row['name']!r} trains but names no sources")
    return fields


def run_matrix(config, out_root, registry=None, model_cfg=None):
    """Run every matrix row and write one consolidated CSV.

    Any failing sub-run aborts the whole matrix with the failing row named.
    Returns the path of the consolidated CSV.
    """
    os.makedirs(out_root, exist_ok=True)
    digest = config_digest(config)
    seed = config.get("seed", 0)
    registry = registry if registry is not None else load_registry(config["datasets"])
    domain_names = sorted(registry)
    eval_stats = config.get("eval_stats", ["tr"])
    model_cfg = model_cfg or (
        ModelConfig.from_dict(config["model"]) if config.get("model") else ModelConfig()
    )

    checkpoint_of = {}
    rows_out = []
    for row in config.get("models", []):
        name = row["name"]
        eval_only = "sources" not in row
        try:
            if eval_only:
                base = row.get("base")
                if base not in checkpoint_of:
                    raise ValueError(f"evaluation-only row {name!r} needs a trained base")
                model, _ = load_checkpoint(checkpoint_of[base])
            else:
                spec = ExperimentSpec(**_row_spec(row, config, checkpoint_of))
                model, _ = train_model(spec, registry, model_cfg)
                ckpt = os.path.join(out_root, f"{name}.bnck")
                save_checkpoint(ckpt, model, meta={"spec": asdict(spec), "seed": spec.seed,
                                                   "tool": TOOL_VERSION, "config_digest": digest})
                checkpoint_of[name] = ckpt
            transform = row.get("input_transform", "none")
            per_stats = {}
            for stats in eval_stats:
                per_stats[stats] = {
                    dom: evaluate_model(
                        model, registry[dom], stats, experiment=name,
                        input_transform=transform, seed=row.get("seed", seed),
                    )
                    for dom in domain_names
                }
            rows_out.append((name, per_stats))
            log.info("matrix row %s done", name)
        except Exception as err:
            raise RuntimeError(f"matrix row {name!r} failed: {err}") from err

    csv_path = os.path.join(out_root, "matrix.csv")
    with open(csv_path, "w") as f:
        f.write(csv_header_line(seed, digest))
        cols = ["model", "stats_mode"]
        for dom in domain_names:
            cols += [f"{dom}_roc_auc", f"{dom}_pr_auc"]
        f.write(",".join(cols) + "\n")
        for name, per_stats in rows_out:
            for stats, by_dom in per_stats.items():
                cells = [name, stats]
                for dom in domain_names:
                    cells += [f"{by_dom[dom].roc_auc:.6f}", f"{by_dom[dom].pr_auc:.6f}"]
                f.write(",".join(cells) + "\n")
    with open(os.path.join(out_root, "matrix_config.json"), "w") as f:
        json.dump({"tool": TOOL_VERSION, "seed": seed, "config_digest": digest,
                   "config": config}, f, sort_keys=True, indent=1)
    return csv_path
