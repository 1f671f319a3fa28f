"""Local supervised fine-tuning of adapter parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .data import Example
from .errors import ConfigError, InputError, NumericError, TrainingError
from .lora import AdapterPair, AdapterSet, entry_name
from .model import Batch, TransformerWeights, loss_and_grads, sequence_loss
from .numerics import LrSchedule, OptimizerState, Rng, adamw_step, clip_global_norm, derive_seed, lr_at


@dataclass(frozen=True)
class TrainHyper:
    """Local optimization settings; defaults mirror the 8B recipe."""

    lr: float = 3e-4
    warmup_ratio: float = 0.03
    batch_size: int = 2
    epochs: int = 1
    max_grad_norm: float = 0.3
    weight_decay: float = 0.001

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.lr > 0 or not self.max_grad_norm > 0:
            raise ConfigError("lr and max_grad_norm must be positive")


# the 8B recipe barely moves a 2-layer model within a handful of rounds
DESK_HYPER = TrainHyper(lr=1e-2, batch_size=8)


def default_hyper(geometry: str) -> TrainHyper:
    return DESK_HYPER if geometry == "toy" else TrainHyper()


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    clip_scales: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses)


def batches_for(examples: Sequence[Example], order: Sequence[int], batch_size: int) -> list[Batch]:
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        out.append(Batch.from_pairs([(e.prompt, e.target) for e in chunk]))
    return out


def mean_loss(weights: TransformerWeights, adapters: AdapterSet | None, examples: Sequence[Example], batch_size: int = 32) -> float:
    """Average per-example loss, dropout-free."""
    if not examples:
        raise InputError("mean_loss needs at least one example")
    total = 0.0
    for batch in batches_for(examples, range(len(examples)), batch_size):
        total += sequence_loss(weights, adapters, batch) * batch.tokens.shape[0]
    return total / len(examples)


def train_adapters(
    weights: TransformerWeights,
    adapters: AdapterSet,
    examples: Sequence[Example],
    hyper: TrainHyper,
    seed: int,
) -> tuple[AdapterSet, TrainLog]:
    """Run ``hyper.epochs`` shuffled passes of AdamW over ``examples``.

    Returns a new adapter set; the input set is left untouched. The optimizer
    state starts fresh on every call.
    """
    if not examples:
        raise InputError("cannot train on an empty example list")
    n_batches = math.ceil(len(examples) / hyper.batch_size)
    schedule = LrSchedule(n_batches * hyper.epochs, hyper.lr, hyper.warmup_ratio)
    keys = adapters.keys()
    params = {}
    for key in keys:
        pair = adapters.pairs[key]
        params[entry_name(*key, "A")] = pair.A.copy()
        params[entry_name(*key, "B")] = pair.B.copy()
    state = OptimizerState()
    log = TrainLog()
    current = adapters.copy()
    step = 0
    for epoch in range(hyper.epochs):
        order = Rng(derive_seed(seed, 0x5F, epoch)).permutation(len(examples))
        for batch in batches_for(examples, order, hyper.batch_size):
            dropout_rng = Rng(derive_seed(seed, 0xD0, step))
            try:
                loss, grads = loss_and_grads(weights, current, batch, dropout_rng)
            except NumericError as exc:
                raise TrainingError(f"divergence at step {step}: {exc}") from exc
            names = [entry_name(*key, w) for key in keys for w in "AB"]
            flat = [grads[key][i] for key in keys for i in (0, 1)]
            try:
                clipped, scale = clip_global_norm(flat, hyper.max_grad_norm)
            except NumericError as exc:
                raise TrainingError(f"non-finite gradient at step {step}: {exc}") from exc
            lr = lr_at(schedule, step)
            params, state = adamw_step(params, dict(zip(names, clipped)), state, lr, weight_decay=hyper.weight_decay)
            current = AdapterSet(
                adapters.geometry,
                adapters.config,
                {key: AdapterPair(params[entry_name(*key, "A")], params[entry_name(*key, "B")]) for key in keys},
            )
            log.losses.append(loss)
            log.lrs.append(lr)
            log.clip_scales.append(scale)
            step += 1
    return current, log
