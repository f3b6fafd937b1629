"""Parameters, initializers, optimizers, learning-rate schedules, clipping.

Three optimizer presets mirror the pipeline's stages: backbone pretraining
(Adam 1e-4, step decay), classifier training (SGD momentum 0.9, cosine
warm-up, global-norm clip 1.0), severity training (SGD 3e-3, constant).
Optimizers iterate parameters sorted by name so updates do not depend on
enumeration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


@dataclass
class Param:
    """Named trainable value plus its optimizer state slots."""

    name: str
    value: Tensor
    trainable: bool = True
    state: dict = field(default_factory=dict)

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.zero_grad()


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32) -> np.ndarray:
    """N(0, std^2) samples clamped to +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    return np.clip(out, -2.0 * std, 2.0 * std).astype(dtype)


def weight_param(name, rng, shape, dtype=np.float32, std=0.02) -> Param:
    return Param(name, Tensor(trunc_normal(rng, shape, std, dtype), requires_grad=True))


def zeros_param(name, shape, dtype=np.float32) -> Param:
    return Param(name, Tensor(np.zeros(shape, dtype=dtype), requires_grad=True))


def ones_param(name, shape, dtype=np.float32) -> Param:
    return Param(name, Tensor(np.ones(shape, dtype=dtype), requires_grad=True))


# ---------------------------------------------------------------------------
# schedules


@dataclass
class Schedule:
    """Learning-rate schedule: constant, step-decay, or cosine-warmup.

    cosine-warmup rises linearly (strictly positive from step 0, reaching
    base_lr exactly at warmup_steps) then follows a half cosine to 0 at
    total_steps. step-decay multiplies by decay_factor at each fraction in
    decay_points.
    """

    kind: str = "constant"
    base_lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 1
    decay_factor: float = 0.1
    decay_points: tuple = (0.5, 0.75)

    def __post_init__(self):
        if self.kind not in ("constant", "step-decay", "cosine-warmup"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.kind == "cosine-warmup" and not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")


def lr_at(schedule: Schedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.base_lr
    if schedule.kind == "step-decay":
        factor = 1.0
        for point in schedule.decay_points:
            if step >= point * schedule.total_steps:
                factor *= schedule.decay_factor
        return schedule.base_lr * factor
    # cosine-warmup
    w = schedule.warmup_steps
    if step < w:
        return schedule.base_lr * (step + 1) / (w + 1)
    span = schedule.total_steps - w
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


# ---------------------------------------------------------------------------
# gradient clipping and optimizers


def _trainable(params) -> list[Param]:
    chosen = [p for p in params if p.trainable]
    chosen.sort(key=lambda p: p.name)
    return chosen


def clip_global_norm(params, max_norm: float | None) -> float:
    """Scale all trainable gradients jointly so their global L2 norm <= max_norm.

    Returns the pre-clip norm. Raises on non-finite gradients.
    """
    chosen = [p for p in _trainable(params) if p.grad is not None]
    total = 0.0
    for p in chosen:
        s = float(np.sum(p.grad.astype(np.float64) ** 2))
        if not math.isfinite(s):
            raise NumericError(f"non-finite gradient in {p.name}")
        total += s
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in chosen:
            p.value.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def sgd_step(params, lr: float, momentum: float = 0.0, max_grad_norm: float | None = None):
    """v <- momentum*v + g; p <- p - lr*v, after joint global-norm clipping."""
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0,1), got {momentum}")
    clip_global_norm(params, max_grad_norm)
    for p in _trainable(params):
        if p.grad is None:
            continue
        v = p.state.get("momentum")
        if v is None:
            v = np.zeros_like(p.value.data)
        v = momentum * v + p.grad
        p.state["momentum"] = v
        p.value.data = p.value.data - np.asarray(lr, dtype=v.dtype) * v


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              max_grad_norm: float | None = None):
    """Bias-corrected Adam update; the step counter lives in each param's state."""
    clip_global_norm(params, max_grad_norm)
    for p in _trainable(params):
        if p.grad is None:
            continue
        t = p.state.get("step", 0) + 1
        m = p.state.get("m")
        v = p.state.get("v")
        if m is None:
            m = np.zeros_like(p.value.data)
            v = np.zeros_like(p.value.data)
        g = p.grad
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p.state.update(step=t, m=m, v=v)
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.value.data = p.value.data - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class StagePreset:
    optimizer: str
    lr: float
    momentum: float
    clip: float | None
    schedule: str
    warmup: int


PRESETS = {
    "pretrain": StagePreset("adam", 1e-4, 0.0, None, "step-decay", 0),
    "classifier": StagePreset("sgd", 1e-3, 0.9, 1.0, "cosine-warmup", 500),
    "severity": StagePreset("sgd", 3e-3, 0.0, None, "constant", 0),
}
