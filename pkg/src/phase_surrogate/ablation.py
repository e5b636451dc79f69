"""Component-removal study: trains each variant and tabulates held-out R^2.

Variants differ from the full model by exactly one designated component;
the physics-off variant shares the full architecture and differs only in
the loss weight.
"""

import dataclasses
import io

import numpy as np

from . import blobio
from . import pipeline
from .errors import ConfigurationError
from .metrics import evaluate, format_mean_std
from .model import VARIANTS, ModelConfig
from .training import TrainConfig, train

TABLE_TASKS = pipeline.SLOW_TASKS


def build_variant(name, model_config=None, train_config=None):
    """Model and train configs for one ablation run."""
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}")
    if model_config is None:
        model_config = ModelConfig()
    if train_config is None:
        train_config = TrainConfig()
    arch = "full" if name == "no_phys" else name
    model_config = dataclasses.replace(model_config, variant=arch)
    if name == "no_phys":
        train_config = dataclasses.replace(train_config, phys_weight=0.0)
    return model_config, train_config


def run_variant(name, dataset, seed, model_config=None, train_config=None):
    """Trains one variant at one seed; returns (model, report)."""
    mc, tc = build_variant(name, model_config, train_config)
    tc = dataclasses.replace(tc, seed=seed)
    model = train(tc, dataset, model_config=mc)
    return model, evaluate(model, dataset, "test")


def run_ablation_suite(dataset, seeds, model_config=None, train_config=None,
                       out_csv=None, variants=VARIANTS):
    """Per-task R^2 (mean +- std over seeds) for every variant.

    Returns {"variants": names, "r2": {variant: {task: [per-seed]}},
    "mean_r2": {variant: float}}; optionally writes the comparison table.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigurationError("need at least one seed")
    scores = {}
    for name in variants:
        per_task = {t: [] for t in TABLE_TASKS}
        for seed in seeds:
            _, report = run_variant(name, dataset, seed, model_config,
                                    train_config)
            for t in TABLE_TASKS:
                per_task[t].append(report.tasks[t]["r2"])
        scores[name] = per_task
    mean_r2 = {name: float(np.mean([np.mean(v) for v in per_task.values()]))
               for name, per_task in scores.items()}
    result = {"variants": tuple(variants), "r2": scores, "mean_r2": mean_r2}
    if out_csv is not None:
        write_table(out_csv, result)
    return result


def write_table(path, result):
    variants = result["variants"]
    buf = io.StringIO()
    buf.write("task," + ",".join(variants) + "\n")
    for t in TABLE_TASKS:
        cells = []
        for name in variants:
            vals = result["r2"][name][t]
            cells.append(format_mean_std(float(np.mean(vals)),
                                         float(np.std(vals))))
        buf.write(f"{t}," + ",".join(cells) + "\n")
    buf.write("mean," + ",".join(f"{result['mean_r2'][name]:.3f}"
                                 for name in variants) + "\n")
    blobio.atomic_write_bytes(path, buf.getvalue().encode("ascii"))


def read_table(path):
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return header, rows
