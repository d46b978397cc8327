"""Scratch calibration: blob geometry + training hyperparams for the noise sweep.

Not part of the package; writes findings to /tmp/calib_blobs.json.
"""
import itertools
import json
import tempfile
import time

from collabtrain.experiments import ExperimentConfig, run_experiment
from collabtrain.graphs import HeadPattern


def experiment(center_scale, lr, epochs, level, pattern, heads, splits, seeds, train_size=2000):
    doc = {
        "dataset": {
            "kind": "synthetic-blobs", "classes": 10, "dim": 32,
            "train_size": train_size, "test_size": 2000, "seed": 7,
            "cluster_std": 1.0, "center_scale": center_scale,
        },
        "net": {"preset": "blobs-mlp"},
        "pattern": {"variant": pattern, "heads": heads, "splits": splits},
        "loss": {"beta": 0.5, "temperature": 2.0, "scaling_mode": "backprop-rescale"},
        "sgd": {"lr": lr, "momentum": 0.9, "weight_decay": 1e-4,
                "milestones": [[int(epochs * 0.6), 10.0], [int(epochs * 0.85), 10.0]]},
        "noise": {"level": level, "partition_seed": 11},
        "epochs": epochs, "batch_size": 32, "seeds": seeds,
        "out_dir": tempfile.mkdtemp(),
    }
    cfg = ExperimentConfig.from_json(doc)
    res = run_experiment(cfg, write_files=False)
    return res.summary["aggregate"]["final_error_head1"]


def main():
    seeds = [0, 1, 2]
    out = []
    for center_scale, lr, epochs in itertools.product([0.35, 0.5, 0.7], [0.05, 0.1], [30]):
        row = {"center_scale": center_scale, "lr": lr, "epochs": epochs}
        t0 = time.perf_counter()
        for level in (0.0, 0.2, 0.4):
            base = experiment(center_scale, lr, epochs, level, "individual", 1, [], seeds)
            ilr2 = experiment(center_scale, lr, epochs, level, "simple-ilr", 2, ["s1"], seeds)
            hier4 = experiment(center_scale, lr, epochs, level, "hierarchical-ilr", 4, ["s1", "s2"], seeds)
            row[f"rho{level}"] = {
                "individual": round(base["mean"], 4),
                "simple2": round(ilr2["mean"], 4),
                "hier4": round(hier4["mean"], 4),
                "ind_sd": round(base["stddev"], 4),
            }
        row["wall_s"] = round(time.perf_counter() - t0, 1)
        out.append(row)
        print(json.dumps(row), flush=True)
    with open("/tmp/calib_blobs.json", "w") as fh:
        json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
