"""Runtime layers: thin callables over the autodiff ops, plus He-style init."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .netspec import AvgPoolDef, ConvDef, DenseDef, FlattenDef, ReluDef


class Dense:
    kind = "dense"

    def __init__(self, w: ad.Tensor, b: ad.Tensor):
        self.w = w
        self.b = b

    def __call__(self, t):
        return ad.add_bias(ad.matmul(t, self.w), self.b)

    def predict(self, x):
        return x @ self.w.data + self.b.data

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Conv2d:
    kind = "conv"

    def __init__(self, w: ad.Tensor, b: ad.Tensor, stride: int, pad: int):
        self.w = w
        self.b = b
        self.stride = stride
        self.pad = pad

    def __call__(self, t):
        return ad.add_bias(ad.conv2d(t, self.w, stride=self.stride, pad=self.pad), self.b)

    def predict(self, x):
        out = ad.conv2d_raw(x, self.w.data, self.stride, self.pad)
        return out + self.b.data.reshape(1, -1, 1, 1)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class ReLU:
    kind = "relu"

    def __call__(self, t):
        return ad.relu(t)

    def predict(self, x):
        return np.maximum(x, 0.0)

    def params(self):
        return []


class AvgPool2d:
    kind = "avgpool"

    def __init__(self, size: int):
        self.size = size

    def __call__(self, t):
        return ad.avgpool2d(t, self.size)

    def predict(self, x):
        return ad.avgpool2d_raw(x, self.size)

    def params(self):
        return []


class Flatten:
    kind = "flatten"

    def __call__(self, t):
        return ad.flatten(t)

    def predict(self, x):
        return x.reshape(x.shape[0], -1)

    def params(self):
        return []


def instantiate(defn, rng: np.random.Generator):
    """Build a runtime layer with freshly initialized parameters.

    Weights use scaled-normal init with std sqrt(2 / fan_in); biases start
    at zero.
    """
    if isinstance(defn, DenseDef):
        std = math.sqrt(2.0 / defn.in_features)
        w = ad.Tensor(rng.normal(0.0, std, size=(defn.in_features, defn.out_features)))
        b = ad.Tensor(np.zeros(defn.out_features))
        return Dense(w, b)
    if isinstance(defn, ConvDef):
        fan_in = defn.in_channels * defn.kernel * defn.kernel
        std = math.sqrt(2.0 / fan_in)
        w = ad.Tensor(
            rng.normal(
                0.0, std, size=(defn.out_channels, defn.in_channels, defn.kernel, defn.kernel)
            )
        )
        b = ad.Tensor(np.zeros(defn.out_channels))
        return Conv2d(w, b, stride=defn.stride, pad=defn.pad)
    if isinstance(defn, ReluDef):
        return ReLU()
    if isinstance(defn, AvgPoolDef):
        return AvgPool2d(defn.size)
    if isinstance(defn, FlattenDef):
        return Flatten()
    raise ConfigError(f"cannot instantiate layer definition {defn!r}")
