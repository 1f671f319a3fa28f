"""Dense arithmetic, a replayable RNG and the optimizer/schedule stack.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here returns new
arrays rather than mutating its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError

Matrix = np.ndarray

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Matrix:
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite product of {a.shape} and {b.shape}")
    return out


def global_norm(grads: Sequence[Matrix]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_global_norm(grads: Sequence[Matrix], max_norm: float = 0.3) -> tuple[list[Matrix], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise InputError(f"max_norm must be positive, got {max_norm}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite entry in gradient {i} (shape {g.shape})")
    norm = global_norm(grads)
    if norm <= max_norm:
        return [g.copy() for g in grads], 1.0
    scale = max_norm / norm
    return [g * scale for g in grads], scale


# -- RNG -------------------------------------------------------------------


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Hash a seed and integer keys into an independent 64-bit stream seed."""
    state = np.array([seed & _MASK64], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in keys:
            state = _mix64(state + _GAMMA) ^ np.uint64(k & _MASK64)
        state = _mix64(state + _GAMMA)
    return int(state[0])


@dataclass(frozen=True)
class RngState:
    seed: int
    position: int = 0


class Rng:
    """Counter-based splitmix64 generator.

    Output ``i`` is ``mix(seed + (i + 1) * gamma)``, so any draw can be
    replayed from ``(seed, position)`` alone.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & _MASK64
        self.position = int(position)

    @classmethod
    def from_state(cls, state: RngState) -> Rng:
        return cls(state.seed, state.position)

    @property
    def state(self) -> RngState:
        return RngState(self.seed, self.position)

    def child(self, *keys: int) -> Rng:
        return Rng(derive_seed(self.seed, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.position + 1, self.position + 1 + n, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 bits of resolution."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]
        u2 = u[pairs:]
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
        return z[:n] * std

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        if high <= low:
            raise InputError(f"empty integer range [{low}, {high})")
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)

    def integer(self, low: int, high: int) -> int:
        return int(self.integers(low, high, 1)[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def shuffled(self, items: Sequence) -> list:
        return [items[i] for i in self.permutation(len(items))]

    def bernoulli(self, p: float, n: int) -> np.ndarray:
        return self.uniform(n) < p


# -- schedule and optimizer --------------------------------------------------


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    base_lr: float = 3e-4
    warmup_ratio: float = 0.03

    def __post_init__(self):
        if not 0 <= self.warmup_ratio < 1:
            raise InputError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if not self.base_lr > 0:
            raise InputError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_steps < 0:
            raise InputError(f"total_steps must be non-negative, got {self.total_steps}")

    @property
    def warmup_steps(self) -> int:
        return round_half_up(self.warmup_ratio * self.total_steps)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""
    total, warmup = schedule.total_steps, schedule.warmup_steps
    if step < 0 or step > total:
        raise InputError(f"step {step} outside schedule range [0, {total}]")
    if step < warmup:
        return schedule.base_lr * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, Matrix] = field(default_factory=dict)
    v: dict[str, Matrix] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> OptimizerState:
        return OptimizerState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )


def adamw_step(
    params: Mapping[str, Matrix],
    grads: Mapping[str, Matrix],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.001,
) -> tuple[dict[str, Matrix], OptimizerState]:
    """One AdamW update with decoupled weight decay and bias correction."""
    if set(params) != set(grads):
        raise DimensionError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"{name}: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = p - lr * weight_decay * p - lr * update
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(new_m, new_v, step)
