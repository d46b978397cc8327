"""Group training objective: hard labels, peer-consensus soft targets, totals.

Each head h is trained on beta x cross-entropy(label) plus
(1 - beta) x T^2 x cross-entropy(consensus-of-peers at temperature T).
The T^2 factor keeps the hard/soft gradient balance roughly constant when
the temperature is tuned.  The group total is the (correctly rounded) sum
of head losses plus an L2 term over distinct parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .graphs import SCALING_MODES


@dataclass
class CollabLossConfig:
    num_heads: int
    beta: float = 0.5
    temperature: float = 2.0
    weight_decay: float = 0.0
    scaling_mode: str = "backprop-rescale"
    backprop_through_consensus: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.scaling_mode not in SCALING_MODES:
            raise ConfigError(
                f"scaling_mode must be one of {SCALING_MODES}, got {self.scaling_mode!r}"
            )
        if self.num_heads == 1 and self.beta != 1.0:
            raise ConfigError("a single head has no peers; use beta=1.0")

    def to_json(self) -> dict:
        return {
            "beta": self.beta,
            "temperature": self.temperature,
            "weight_decay": self.weight_decay,
            "scaling_mode": self.scaling_mode,
            "backprop_through_consensus": self.backprop_through_consensus,
        }


def _check_one_hot(y: np.ndarray, classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    rows = y.reshape(-1, y.shape[-1])
    if y.shape[-1] != classes:
        raise ShapeError(f"labels have {y.shape[-1]} classes, logits have {classes}")
    ok = np.all((rows == 0.0) | (rows == 1.0)) and np.all(rows.sum(axis=-1) == 1.0)
    if not ok:
        raise ConfigError("labels must be one-hot rows")
    return y


def _check_distribution(q: np.ndarray) -> None:
    if np.any(q < 0.0) or np.any(np.abs(q.sum(axis=-1) - 1.0) > 1e-9):
        raise ConfigError("soft target is not a probability distribution")


def _cross_entropy(target: Tensor, z: Tensor, temperature: float) -> Tensor:
    """Mean over the batch of -sum_i target_i log softmax_i(z; T)."""
    if target.data.shape != z.data.shape:
        raise ShapeError(
            f"cross entropy: target {target.data.shape} vs logits {z.data.shape}"
        )
    logp = ad.log(ad.softmax_t(z, temperature))
    per_example = ad.scale(ad.reduce_sum(ad.mul(target, logp), axis=-1), -1.0)
    return ad.scale(ad.reduce_sum(per_example), 1.0 / per_example.data.size)


def consensus_target(logits: list, h: int, temperature: float, stop_gradient: bool = True) -> Tensor:
    """Soft target for head ``h``: softmax of the mean of the other heads' logits.

    Returned detached by default, so peers receive no gradient through it.
    """
    heads = len(logits)
    if heads < 2:
        raise ConfigError("consensus needs at least 2 heads; use beta=1.0 for one head")
    if not 0 <= h < heads:
        raise ConfigError(f"head index {h} out of range 0..{heads - 1}")
    acc = None
    for j, z in enumerate(logits):
        if j == h:
            continue
        acc = z if acc is None else ad.add(acc, z)
    mean = ad.scale(acc, 1.0 / (heads - 1))
    q = ad.softmax_t(mean, temperature)
    return q.detach() if stop_gradient else q


def hard_loss(y, z: Tensor) -> Tensor:
    """Cross entropy against the one-hot label at temperature 1."""
    y = _check_one_hot(y, z.data.shape[-1])
    return _cross_entropy(ad.constant(y), z, 1.0)


def soft_loss(q, z: Tensor, temperature: float) -> Tensor:
    """Cross entropy against a soft target at the given temperature.

    With the default (detached) consensus targets, gradient flows into the
    logits only.
    """
    q_t = q if isinstance(q, Tensor) else ad.constant(np.asarray(q, dtype=np.float64))
    _check_distribution(q_t.data)
    return _cross_entropy(q_t, z, temperature)


def head_loss(y, logits: list, h: int, cfg: CollabLossConfig) -> Tensor:
    """beta x hard + (1 - beta) x T^2 x soft for head ``h`` (0-based)."""
    z = logits[h]
    hard = hard_loss(y, z)
    if cfg.beta == 1.0 or cfg.num_heads == 1:
        return hard
    q = consensus_target(
        logits, h, cfg.temperature, stop_gradient=not cfg.backprop_through_consensus
    )
    soft = soft_loss(q, z, cfg.temperature)
    t2 = cfg.temperature * cfg.temperature
    return ad.add(ad.scale(hard, cfg.beta), ad.scale(soft, (1.0 - cfg.beta) * t2))


def regularization(params) -> Tensor:
    """Half the squared L2 norm over distinct parameters."""
    terms = [ad.reduce_sum(ad.mul(t, t)) for t in params]
    return ad.scale(ad.sum_scalars(terms), 0.5)


def total_loss(y, logits: list, cfg: CollabLossConfig, params=()) -> tuple:
    """Group loss: sum of head losses (1/H-scaled under loss-scale mode)
    plus weight decay.  Returns (scalar tensor, per-head float values)."""
    if len(logits) != cfg.num_heads:
        raise ConfigError(f"{len(logits)} logit sets for num_heads={cfg.num_heads}")
    heads = [head_loss(y, logits, h, cfg) for h in range(cfg.num_heads)]
    total = ad.sum_scalars(heads)
    if cfg.scaling_mode == "loss-scale":
        total = ad.scale(total, 1.0 / cfg.num_heads)
    if cfg.weight_decay > 0.0:
        total = ad.add(total, ad.scale(regularization(params), cfg.weight_decay))
    return total, [float(t.data) for t in heads]
