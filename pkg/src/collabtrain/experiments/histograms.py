"""Per-layer weight histograms and standard deviations.

Diagnostic for dead weights: a tall spike in the central bin of a bottom
layer means many near-zero values.  Bins are fixed-width over a range
symmetric about zero; every value of the layer falls inside it, so counts
sum to the layer's parameter count.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from ..graphs import Network, TrainingGraph, extract_inference_graph


def layer_values(net: Network) -> dict:
    """Concatenated parameter values (weights and biases) per named layer."""
    out = {}
    for name, tensor in net.named_params():
        layer = name.rsplit("/", 1)[0]
        out.setdefault(layer, []).append(tensor.data.reshape(-1))
    return {layer: np.concatenate(parts) for layer, parts in out.items()}


def weight_histograms(net: Network, bins: int = 51) -> dict:
    """{layer: {lo, hi, counts, std, count}} over the net's layers."""
    result = {}
    for layer, values in layer_values(net).items():
        if not np.all(np.isfinite(values)):
            continue  # diverged run: a histogram of inf/nan is meaningless
        r = float(np.max(np.abs(values)))
        if r == 0.0:
            r = 1.0  # all-zero layer: everything lands in the central bin
        counts, edges = np.histogram(values, bins=bins, range=(-r, r))
        result[layer] = {
            "lo": float(edges[0]),
            "hi": float(edges[-1]),
            "counts": [int(c) for c in counts],
            "std": float(np.std(values)),
            "count": int(values.size),
        }
    return result


def _file_name(layer: str) -> str:
    return "hist_" + layer.replace("/", "__") + ".csv"


def export_weight_histograms(source, bins: int, out_dir, head: int = 1) -> dict:
    """Write one hist_<layer>.csv per layer of the given head's dependency set."""
    net = extract_inference_graph(source, head) if isinstance(source, TrainingGraph) else source
    hists = weight_histograms(net, bins)
    os.makedirs(out_dir, exist_ok=True)
    for layer, h in hists.items():
        width = (h["hi"] - h["lo"]) / len(h["counts"])
        with open(os.path.join(out_dir, _file_name(layer)), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for k, c in enumerate(h["counts"]):
                writer.writerow([repr(h["lo"] + k * width), repr(h["lo"] + (k + 1) * width), c])
    return hists
