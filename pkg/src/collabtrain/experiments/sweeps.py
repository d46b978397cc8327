"""Multi-arm comparisons: noise levels, scaling modes, optimizer modes, grids.

Every arm of a comparison runs with the same seed list, the same batch
order (order depends only on seed and epoch), and the same noise
partition, so differences come from the arm itself.
"""

from __future__ import annotations

import csv
import json
import os

from ..graphs import HeadPattern, build_training_graph
from .config import ExperimentConfig
from .runner import aggregate, run_experiment

SCALING_ARMS = ("none", "loss-scale", "backprop-rescale")
OPT_ARMS = ("simultaneous", "alternative")


def default_patterns() -> dict:
    """The standard comparison set: baseline plus the collaborative patterns."""
    return {
        "individual": HeadPattern("individual"),
        "simple-ilr-h2": HeadPattern("simple-ilr", 2, splits=["s1"]),
        "hierarchical-h4": HeadPattern("hierarchical-ilr", 4, splits=["s1", "s2"]),
    }


def _arm_config(cfg: ExperimentConfig, out_dir: str, pattern=None, **overrides):
    fields = dict(overrides)
    fields["out_dir"] = out_dir
    if pattern is not None:
        fields["pattern"] = pattern
        if pattern.heads == 1:
            fields["loss"] = {**cfg.loss.to_json(), "beta": 1.0}
    return cfg.clone(**fields)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _dump(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def run_noise_sweep(cfg: ExperimentConfig, levels, patterns=None) -> dict:
    """Label-noise protocol at each level for each pattern; long-format CSV."""
    patterns = patterns or default_patterns()
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    table = {}
    for level in levels:
        for label, pattern in patterns.items():
            arm_dir = os.path.join(cfg.out_dir, f"rho{level:g}", label)
            arm = _arm_config(
                cfg,
                arm_dir,
                pattern=pattern,
                noise={**cfg.noise.to_json(), "level": level},
            )
            result = run_experiment(arm)
            for record in result.records:
                rows.append([level, label, record.seed, repr(record.final_error_head1)])
            table[(level, label)] = aggregate(
                [r.final_error_head1 for r in result.records]
            )
    _write_rows(
        os.path.join(cfg.out_dir, "noise_sweep.csv"),
        ["noise_level", "pattern", "seed", "final_error_head1"],
        rows,
    )
    summary = {
        "levels": list(levels),
        "patterns": sorted({label for _, label in table}),
        "cells": [
            {"noise_level": level, "pattern": label, **stats}
            for (level, label), stats in sorted(table.items())
        ],
    }
    _dump(os.path.join(cfg.out_dir, "noise_sweep_summary.json"), summary)
    return summary


def run_scaling_ablation(cfg: ExperimentConfig, modes=SCALING_ARMS) -> dict:
    """Same seeds and data across scaling modes; reports the graph's factors."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    cells = {}
    inspection = {}
    for mode in modes:
        arm_dir = os.path.join(cfg.out_dir, f"mode_{mode}")
        arm = _arm_config(cfg, arm_dir, loss={**cfg.loss.to_json(), "scaling_mode": mode})
        probe = build_training_graph(arm.net, arm.pattern, mode, arm.seeds[0])
        inspection[mode] = [
            {
                "segment": bp.segment_path,
                "after_layer": bp.after_layer,
                "branches": bp.branches,
                "rescale_factor": bp.rescale_factor,
            }
            for bp in probe.branch_points
        ]
        result = run_experiment(arm)
        for record in result.records:
            rows.append([mode, record.seed, repr(record.final_error_head1)])
        cells[mode] = aggregate([r.final_error_head1 for r in result.records])
        cells[mode]["failures"] = result.summary["failures"]
    _write_rows(
        os.path.join(cfg.out_dir, "scaling_ablation.csv"),
        ["scaling_mode", "seed", "final_error_head1"],
        rows,
    )
    summary = {"modes": list(modes), "cells": cells, "branch_points": inspection}
    _dump(os.path.join(cfg.out_dir, "scaling_ablation_summary.json"), summary)
    return summary


def run_opt_mode_comparison(cfg: ExperimentConfig, modes=OPT_ARMS) -> dict:
    """Simultaneous vs per-head round-robin: errors per head and wall-clock."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    cells = {}
    for mode in modes:
        arm_dir = os.path.join(cfg.out_dir, f"opt_{mode}")
        arm = _arm_config(cfg, arm_dir, sgd={**cfg.sgd.to_json(), "mode": mode})
        result = run_experiment(arm)
        heads = arm.pattern.heads
        for record in result.records:
            for h in range(heads):
                rows.append([mode, record.seed, h + 1, repr(record.final_head_errors[h])])
        cells[mode] = {
            "per_head": [
                aggregate([r.final_head_errors[h] for r in result.records])
                for h in range(heads)
            ],
            "wall_clock_per_epoch": aggregate(
                [r.mean_epoch_wall_clock for r in result.records]
            ),
        }
    _write_rows(
        os.path.join(cfg.out_dir, "opt_compare.csv"),
        ["opt_mode", "seed", "head", "final_error"],
        rows,
    )
    slow = cells["alternative"]["wall_clock_per_epoch"]["mean"] if "alternative" in cells else 0.0
    fast = cells["simultaneous"]["wall_clock_per_epoch"]["mean"] if "simultaneous" in cells else 0.0
    summary = {
        "modes": list(modes),
        "cells": cells,
        "wall_clock_ratio": (slow / fast) if fast else None,
    }
    _dump(os.path.join(cfg.out_dir, "opt_compare_summary.json"), summary)
    return summary


def run_hyper_sweep(cfg: ExperimentConfig, betas=None, temperatures=None, splits=None) -> dict:
    """Grid over mixing weight, temperature, and split-point placement."""
    betas = list(betas) if betas else [cfg.loss.beta]
    temperatures = list(temperatures) if temperatures else [cfg.loss.temperature]
    if splits:
        splits = list(splits)
    elif cfg.pattern.variant == "simple-ilr":
        splits = list(cfg.pattern.splits)
    else:
        splits = [None]
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    cells = []
    for beta in betas:
        for temperature in temperatures:
            for split in splits:
                label = f"beta{beta:g}_T{temperature:g}" + (f"_{split}" if split else "")
                overrides = {
                    "loss": {**cfg.loss.to_json(), "beta": beta, "temperature": temperature}
                }
                if split:
                    overrides["pattern"] = HeadPattern(
                        "simple-ilr", max(cfg.pattern.heads, 2), splits=[split]
                    )
                arm = _arm_config(cfg, os.path.join(cfg.out_dir, label), **overrides)
                result = run_experiment(arm)
                for record in result.records:
                    rows.append(
                        [beta, temperature, split or "", record.seed, repr(record.final_error_head1)]
                    )
                cells.append(
                    {
                        "beta": beta,
                        "temperature": temperature,
                        "split": split,
                        **aggregate([r.final_error_head1 for r in result.records]),
                    }
                )
    _write_rows(
        os.path.join(cfg.out_dir, "hyper_sweep.csv"),
        ["beta", "temperature", "split", "seed", "final_error_head1"],
        rows,
    )
    summary = {"cells": cells}
    _dump(os.path.join(cfg.out_dir, "hyper_sweep_summary.json"), summary)
    return summary
