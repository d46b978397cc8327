"""SGD with Nesterov momentum plus the two group-update strategies.

``simultaneous`` does one forward over all heads, one backward on the
group total, and updates every parameter once.  ``alternative`` walks the
heads round-robin: before each head's update the full forward is
recomputed so peers are fresh, then only that head's dependencies move.
Weight decay enters through the loss's L2 term, not as a decoupled decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, TrainingDiverged
from .graphs import TrainingGraph
from .losses import CollabLossConfig, head_loss, regularization, total_loss
from . import autodiff as ad

OPT_MODES = ("simultaneous", "alternative")


@dataclass
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    milestones: list = field(default_factory=list)  # (epoch, divisor) pairs
    mode: str = "simultaneous"

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.mode not in OPT_MODES:
            raise ConfigError(f"mode must be one of {OPT_MODES}, got {self.mode!r}")
        self.milestones = [(int(e), float(d)) for e, d in self.milestones]
        epochs = [e for e, _ in self.milestones]
        if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
            raise ConfigError(f"milestones must be strictly increasing, got {epochs}")
        if any(d <= 0 for _, d in self.milestones):
            raise ConfigError("milestone divisors must be positive")

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "nesterov": self.nesterov,
            "weight_decay": self.weight_decay,
            "milestones": [[e, d] for e, d in self.milestones],
            "mode": self.mode,
        }


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.0


def lr_at(cfg: SgdConfig, epoch: int) -> float:
    """Base rate divided by the divisors of every passed milestone."""
    lr = cfg.lr
    for at_epoch, divisor in cfg.milestones:
        if epoch >= at_epoch:
            lr /= divisor
    return lr


def schedule_lr(state: TrainState, cfg: SgdConfig) -> float:
    state.lr = lr_at(cfg, state.epoch)
    return state.lr


@dataclass
class StepResult:
    total: float
    per_head: list
    updates: dict


def sgd_update(store, names, lr: float, cfg: SgdConfig) -> None:
    """One Nesterov-momentum step on the named parameters.

    v <- mu v + g;  step g + mu v (nesterov) or v;  p <- p - lr step.
    """
    for name in names:
        p = store[name]
        g = p.grad
        if g is None:
            continue
        if cfg.momentum != 0.0:
            buf = store.momentum.get(name)
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            store.momentum[name] = buf
            d = g + cfg.momentum * buf if cfg.nesterov else buf
        else:
            d = g
        p.data -= lr * d


def _check_finite(value: float, state: TrainState, mode: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value} in {mode} mode "
            f"(epoch {state.epoch}, step {state.step}); gradients are exploding",
            epoch=state.epoch,
            step=state.step,
            mode=mode,
        )


def compute_gradients(tg: TrainingGraph, x, y, loss_cfg: CollabLossConfig) -> tuple:
    """Zero, forward, total loss, backward; returns ({name: grad}, total, per_head)."""
    tg.store.zero_grad()
    logits = tg.forward(x)
    total, per_head = total_loss(y, logits, loss_cfg, tg.store.tensors())
    total.backward()
    grads = {n: t.grad.copy() for n, t in tg.store.items() if t.grad is not None}
    return grads, float(total.data), per_head


def step_simultaneous(
    tg: TrainingGraph,
    x,
    y,
    loss_cfg: CollabLossConfig,
    sgd_cfg: SgdConfig,
    state: TrainState,
) -> StepResult:
    """One forward for all heads, one backward on the group loss, one update."""
    tg.store.zero_grad()
    try:
        logits = tg.forward(x)
        total, per_head = total_loss(y, logits, loss_cfg, tg.store.tensors())
    except NumericError as exc:
        raise TrainingDiverged(
            f"non-finite values in forward pass: {exc}",
            epoch=state.epoch,
            step=state.step,
            mode="simultaneous",
        ) from exc
    value = float(total.data)
    _check_finite(value, state, "simultaneous")
    total.backward()
    names = tg.store.names()
    sgd_update(tg.store, names, state.lr, sgd_cfg)
    state.step += 1
    return StepResult(value, per_head, {n: 1 for n in names})


def step_alternative(
    tg: TrainingGraph,
    x,
    y,
    loss_cfg: CollabLossConfig,
    sgd_cfg: SgdConfig,
    state: TrainState,
) -> StepResult:
    """Round-robin per-head updates with fresh peer logits each sub-step.

    Each sub-step optimizes that head's loss plus weight decay restricted
    to the parameters the head depends on; shared parameters therefore
    move once per sub-step.
    """
    per_head = []
    updates: dict = {}
    for h in range(tg.num_heads):
        tg.store.zero_grad()
        try:
            logits = tg.forward(x)
            loss = head_loss(y, logits, h, loss_cfg)
            if loss_cfg.scaling_mode == "loss-scale":
                loss = ad.scale(loss, 1.0 / tg.num_heads)
            names = tg.head_param_names(h)
            if loss_cfg.weight_decay > 0.0:
                reg = regularization(tg.store[n] for n in names)
                loss = ad.add(loss, ad.scale(reg, loss_cfg.weight_decay))
        except NumericError as exc:
            raise TrainingDiverged(
                f"non-finite values in forward pass: {exc}",
                epoch=state.epoch,
                step=state.step,
                mode="alternative",
            ) from exc
        value = float(loss.data)
        _check_finite(value, state, "alternative")
        loss.backward()
        sgd_update(tg.store, names, state.lr, sgd_cfg)
        per_head.append(value)
        for n in names:
            updates[n] = updates.get(n, 0) + 1
    state.step += 1
    return StepResult(math.fsum(per_head), per_head, updates)


def step(tg, x, y, loss_cfg, sgd_cfg, state) -> StepResult:
    fn = step_simultaneous if sgd_cfg.mode == "simultaneous" else step_alternative
    return fn(tg, x, y, loss_cfg, sgd_cfg, state)
