"""Training runs: per-seed execution, metrics files, and aggregation.

Everything a run records is a pure function of (config, seed), so two runs
of the same pair produce byte-identical metrics files.  Wall-clock goes to
a separate timing file; it measures the batch steps of each epoch and
excludes evaluation.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..data import augment, corrupt_labels, load_dataset
from ..errors import ShapeError, TrainingDiverged
from ..graphs import activation_count, build_training_graph, extract_inference_graph, parameter_counts
from ..optim import TrainState, schedule_lr, step
from .config import ExperimentConfig
from .histograms import export_weight_histograms, weight_histograms

_ORDER_TAG = 0x07DE  # stream tag for batch order
_AUG_TAG = 0x0A46


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Batch index order: depends only on (seed, epoch, n), never on the model."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _ORDER_TAG, epoch]))
    return rng.permutation(n)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss_total: float
    train_loss_heads: list
    test_error_head1: float
    wall_clock_s: float


@dataclass
class RunRecord:
    seed: int
    epochs: list = field(default_factory=list)
    final_head_errors: list = field(default_factory=list)
    param_total: int = 0
    activation_total: int = 0
    weight_std: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    failed: bool = False
    fail_reason: str = ""
    fail_epoch: int = -1
    epoch0_order: list = field(default_factory=list, compare=False, repr=False)

    @property
    def final_error_head1(self) -> float:
        return self.final_head_errors[0]

    @property
    def mean_epoch_wall_clock(self) -> float:
        return float(np.mean([e.wall_clock_s for e in self.epochs])) if self.epochs else 0.0


def evaluate_error(net, ds, batch_size: int) -> float:
    """Fraction of test examples the network misclassifies."""
    wrong = 0
    with np.errstate(all="ignore"):
        for off in range(0, len(ds), batch_size):
            x = ds.x[off : off + batch_size]
            pred = np.argmax(net.predict(x), axis=-1)
            wrong += int(np.sum(pred != ds.y[off : off + batch_size]))
    return wrong / len(ds)


def run_single(cfg: ExperimentConfig, seed: int, train, test) -> RunRecord:
    """Train one seed end to end and collect its record (no file output)."""
    tg = build_training_graph(cfg.net, cfg.pattern, cfg.loss.scaling_mode, seed)
    loss_cfg = cfg.loss_config()
    sgd_cfg = cfg.sgd
    state = TrainState()
    n = len(train)
    eye = np.eye(train.num_classes)
    record = RunRecord(seed=seed)
    record.param_total = parameter_counts(tg).total
    record.activation_total = activation_count(tg)
    heads = [extract_inference_graph(tg, h) for h in range(1, tg.num_heads + 1)]

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        schedule_lr(state, sgd_cfg)
        labels = corrupt_labels(train, cfg.noise, epoch) if cfg.noise.level > 0 else train.y
        order = epoch_order(seed, epoch, n)
        if epoch == 0:
            record.epoch0_order = [int(i) for i in order]
        aug_rng = np.random.default_rng(np.random.SeedSequence([seed, _AUG_TAG, epoch]))
        loss_sum = 0.0
        head_sums = [0.0] * tg.num_heads
        started = time.perf_counter()
        try:
            for off in range(0, n, cfg.batch_size):
                idx = order[off : off + cfg.batch_size]
                xb = train.x[idx]
                if cfg.augment.kind != "none":
                    xb = augment(xb, cfg.augment, aug_rng)
                yb = eye[labels[idx]]
                result = step(tg, xb, yb, loss_cfg, sgd_cfg, state)
                k = len(idx)
                loss_sum += result.total * k
                for h, v in enumerate(result.per_head):
                    head_sums[h] += v * k
        except TrainingDiverged as exc:
            record.failed = True
            record.fail_reason = str(exc)
            record.fail_epoch = epoch
            break
        wall = time.perf_counter() - started
        record.epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss_total=loss_sum / n,
                train_loss_heads=[s / n for s in head_sums],
                test_error_head1=evaluate_error(heads[0], test, cfg.eval_batch_size),
                wall_clock_s=wall,
            )
        )

    record.final_head_errors = [
        evaluate_error(net, test, cfg.eval_batch_size) for net in heads
    ]
    hists = weight_histograms(heads[0], cfg.histogram_bins)
    record.histograms = hists
    record.weight_std = {layer: h["std"] for layer, h in hists.items()}
    return record


def metrics_path(out_dir, seed):
    return os.path.join(out_dir, f"metrics_{seed}.csv")


def timing_path(out_dir, seed):
    return os.path.join(out_dir, f"timing_{seed}.csv")


def write_metrics_csv(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "epoch", "metric", "value"])

        def row(epoch, metric, value):
            writer.writerow([record.seed, epoch, metric, value])

        for em in record.epochs:
            row(em.epoch, "train_loss_total", repr(em.train_loss_total))
            for h, v in enumerate(em.train_loss_heads, start=1):
                row(em.epoch, f"train_loss_head_{h}", repr(v))
            row(em.epoch, "test_error_head1", repr(em.test_error_head1))
        row(-1, "param_total", record.param_total)
        row(-1, "activation_total", record.activation_total)
        for h, v in enumerate(record.final_head_errors, start=1):
            row(-1, f"final_error_head_{h}", repr(v))
        row(-1, "failed", int(record.failed))
        row(-1, "fail_epoch", record.fail_epoch)
        row(-1, "fail_reason", record.fail_reason)
        for layer, hist in record.histograms.items():
            row(-1, f"weight_std:{layer}", repr(hist["std"]))
            row(-1, f"hist:{layer}:lo", repr(hist["lo"]))
            row(-1, f"hist:{layer}:hi", repr(hist["hi"]))
            row(-1, f"hist:{layer}:counts", " ".join(str(c) for c in hist["counts"]))


def write_timing_csv(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "epoch", "wall_clock_s"])
        for em in record.epochs:
            writer.writerow([record.seed, em.epoch, repr(em.wall_clock_s)])


def read_run_record(out_dir, seed: int) -> RunRecord:
    """Rebuild a RunRecord from its metrics and timing files."""
    record = RunRecord(seed=seed)
    epochs: dict = {}
    with open(metrics_path(out_dir, seed), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for _seed, epoch_s, metric, value in reader:
            epoch = int(epoch_s)
            if epoch >= 0:
                em = epochs.setdefault(
                    epoch,
                    EpochMetrics(epoch, 0.0, [], 0.0, 0.0),
                )
                if metric == "train_loss_total":
                    em.train_loss_total = float(value)
                elif metric.startswith("train_loss_head_"):
                    em.train_loss_heads.append(float(value))
                elif metric == "test_error_head1":
                    em.test_error_head1 = float(value)
            elif metric == "param_total":
                record.param_total = int(value)
            elif metric == "activation_total":
                record.activation_total = int(value)
            elif metric.startswith("final_error_head_"):
                record.final_head_errors.append(float(value))
            elif metric == "failed":
                record.failed = bool(int(value))
            elif metric == "fail_epoch":
                record.fail_epoch = int(value)
            elif metric == "fail_reason":
                record.fail_reason = value
            elif metric.startswith("weight_std:"):
                record.weight_std[metric.split(":", 1)[1]] = float(value)
            elif metric.startswith("hist:"):
                _, layer, which = metric.split(":")
                hist = record.histograms.setdefault(
                    layer, {"lo": 0.0, "hi": 0.0, "counts": [], "std": 0.0, "count": 0}
                )
                if which == "lo":
                    hist["lo"] = float(value)
                elif which == "hi":
                    hist["hi"] = float(value)
                else:
                    hist["counts"] = [int(v) for v in value.split()]
                    hist["count"] = sum(hist["counts"])
    for layer in record.histograms:
        record.histograms[layer]["std"] = record.weight_std[layer]
    with open(timing_path(out_dir, seed), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for _seed, epoch_s, wall in reader:
            epochs[int(epoch_s)].wall_clock_s = float(wall)
    record.epochs = [epochs[e] for e in sorted(epochs)]
    return record


def aggregate(values) -> dict:
    """Mean and sample standard deviation (the +/- convention)."""
    values = [float(v) for v in values]
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return {"mean": mean, "stddev": std, "values": values}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    summary: dict

    @property
    def mean_final_error(self) -> float:
        return self.summary["aggregate"]["final_error_head1"]["mean"]


def summarize(cfg: ExperimentConfig, records: list) -> dict:
    head_count = cfg.pattern.heads
    per_seed = {}
    for r in records:
        per_seed[str(r.seed)] = {
            "final_error_head1": r.final_head_errors[0],
            "final_head_errors": r.final_head_errors,
            "failed": r.failed,
            "fail_epoch": r.fail_epoch,
            "mean_epoch_wall_clock_s": r.mean_epoch_wall_clock,
        }
    summary = {
        "config": cfg.to_json(),
        "per_seed": per_seed,
        "aggregate": {
            "final_error_head1": aggregate([r.final_head_errors[0] for r in records]),
            "final_error_per_head": [
                aggregate([r.final_head_errors[h] for r in records])
                for h in range(head_count)
            ],
            "mean_epoch_wall_clock_s": float(
                np.mean([r.mean_epoch_wall_clock for r in records])
            ),
        },
        "memory": {
            "param_total": records[0].param_total,
            "activation_total": records[0].activation_total,
            "single_net_params": cfg.net.param_count(),
        },
        "weight_std": records[0].weight_std,
        "failures": [
            {"seed": r.seed, "epoch": r.fail_epoch, "reason": r.fail_reason}
            for r in records
            if r.failed
        ],
    }
    return summary


def run_experiment(cfg: ExperimentConfig, write_files: bool = True) -> ExperimentResult:
    """Train every seed, write per-seed metrics plus a summary, aggregate."""
    train, test = load_dataset(cfg.dataset)
    if train.example_shape != cfg.net.input_shape:
        raise ShapeError(
            f"dataset examples have shape {train.example_shape}, "
            f"net expects {cfg.net.input_shape}"
        )
    records = []
    if write_files:
        os.makedirs(cfg.out_dir, exist_ok=True)
    for seed in cfg.seeds:
        record = run_single(cfg, seed, train, test)
        records.append(record)
        if write_files:
            write_metrics_csv(record, metrics_path(cfg.out_dir, seed))
            write_timing_csv(record, timing_path(cfg.out_dir, seed))
    summary = summarize(cfg, records)
    if write_files:
        with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        # canonical histogram export: first seed's head-1 layers
        first = records[0]
        hist_dir = cfg.out_dir
        for layer, hist in first.histograms.items():
            _write_hist_csv(hist_dir, layer, hist)
    return ExperimentResult(cfg, records, summary)


def _write_hist_csv(out_dir, layer, hist) -> None:
    width = (hist["hi"] - hist["lo"]) / len(hist["counts"])
    name = "hist_" + layer.replace("/", "__") + ".csv"
    with open(os.path.join(out_dir, name), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for k, c in enumerate(hist["counts"]):
            writer.writerow(
                [repr(hist["lo"] + k * width), repr(hist["lo"] + (k + 1) * width), c]
            )
