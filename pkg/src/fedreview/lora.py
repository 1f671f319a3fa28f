"""LoRA adapters: construction, merging, accounting and state export.

An adapter pair for a projection ``W`` of shape ``(d_in, d_out)`` holds
``A (d_in x r)`` and ``B (r x d_out)``; the effective update is
``(alpha / r) * A @ B``. With ``alpha == r`` this is the bare ``A @ B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError, StateError
from .model import INIT_STD, TARGETS, ModelGeometry, TransformerWeights
from .numerics import Matrix, Rng, matmul

Entry = tuple[str, Matrix]


@dataclass(frozen=True)
class LoraConfig:
    targets: tuple[str, ...]
    rank: int
    alpha: float = 16.0
    dropout: float = 0.1

    def __post_init__(self):
        targets = tuple(self.targets)
        if not targets:
            raise ConfigError("LoRA targets must be non-empty")
        unknown = set(targets) - set(TARGETS)
        if unknown:
            raise ConfigError(f"unknown LoRA targets {sorted(unknown)}")
        if len(set(targets)) != len(targets):
            raise ConfigError(f"duplicate LoRA targets in {targets}")
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"LoRA dropout must lie in [0, 1), got {self.dropout}")
        object.__setattr__(self, "targets", tuple(t for t in TARGETS if t in targets))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def describe(self) -> str:
        return "".join(self.targets) + f"@r{self.rank}"


# Per-task winners of the target-module / rank search, plus the shared
# all-projection profile used by the multi-task strategies.
TASK_ADAPTER_PROFILE: dict[str, LoraConfig] = {
    "T1": LoraConfig(("k", "v"), 8),
    "T2": LoraConfig(("v",), 8),
    "T3": LoraConfig(("q", "o"), 16),
}
MULTITASK_PROFILE = LoraConfig(("q", "k", "v", "o"), 8)


@dataclass
class AdapterPair:
    A: Matrix
    B: Matrix

    def copy(self) -> AdapterPair:
        return AdapterPair(self.A.copy(), self.B.copy())


@dataclass
class AdapterSet:
    geometry: ModelGeometry
    config: LoraConfig
    pairs: dict[tuple[int, str], AdapterPair] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.config.scale

    def keys(self) -> list[tuple[int, str]]:
        return [(layer, t) for layer in range(self.geometry.n_layers) for t in self.config.targets]

    def copy(self) -> AdapterSet:
        return AdapterSet(self.geometry, self.config, {k: p.copy() for k, p in self.pairs.items()})

    def equals(self, other: AdapterSet) -> bool:
        return (
            self.config == other.config
            and self.pairs.keys() == other.pairs.keys()
            and all(
                np.array_equal(p.A, other.pairs[k].A) and np.array_equal(p.B, other.pairs[k].B)
                for k, p in self.pairs.items()
            )
        )


def init_adapters(geometry: ModelGeometry, config: LoraConfig, seed: int) -> AdapterSet:
    """A ~ Normal(0, 0.02), B = 0, so the initial update is exactly zero."""
    rng = Rng(seed)
    pairs = {}
    for layer in range(geometry.n_layers):
        for target in config.targets:
            d_in, d_out = geometry.target_shape(target)
            a = rng.normal(d_in * config.rank, INIT_STD).reshape(d_in, config.rank)
            pairs[(layer, target)] = AdapterPair(a, np.zeros((config.rank, d_out)))
    return AdapterSet(geometry, config, pairs)


def effective_delta(pair: AdapterPair, alpha: float, r: int) -> Matrix:
    if pair.A.shape[1] != r or pair.B.shape[0] != r:
        raise DimensionError(f"adapter shapes {pair.A.shape} / {pair.B.shape} disagree with rank {r}")
    return (alpha / r) * matmul(pair.A, pair.B)


def merge(weights: TransformerWeights, adapters: AdapterSet) -> TransformerWeights:
    """Fold adapters into a copy of the base weights.

    Non-idempotent: merging the same set twice adds its update twice.
    """
    if adapters.geometry != weights.geometry:
        raise DimensionError("adapter geometry does not match the model")
    merged = weights.copy()
    cfg = adapters.config
    for (layer, target), pair in adapters.pairs.items():
        w = merged.projection(layer, target)
        delta = effective_delta(pair, cfg.alpha, cfg.rank)
        if delta.shape != w.shape:
            raise DimensionError(f"layer {layer} {target}: delta {delta.shape} vs weight {w.shape}")
        w += delta
    return merged


def param_count(geometry: ModelGeometry, config: LoraConfig) -> int:
    total = 0
    for target in config.targets:
        d_in, d_out = geometry.target_shape(target)
        total += config.rank * (d_in + d_out)
    return geometry.n_layers * total


def trainable_fraction(geometry: ModelGeometry, config: LoraConfig) -> float:
    """Adapter parameters as a percentage of the base model's parameters."""
    if not geometry.total_base_params:
        raise InputError("geometry has no total_base_params for accounting")
    return 100.0 * param_count(geometry, config) / geometry.total_base_params


def entry_name(layer: int, target: str, which: str) -> str:
    return f"layer.{layer}.{target}.{which}"


def expected_entries(geometry: ModelGeometry, config: LoraConfig) -> list[tuple[str, tuple[int, int]]]:
    out = []
    for layer in range(geometry.n_layers):
        for target in config.targets:
            d_in, d_out = geometry.target_shape(target)
            out.append((entry_name(layer, target, "A"), (d_in, config.rank)))
            out.append((entry_name(layer, target, "B"), (config.rank, d_out)))
    return out


def export_state(adapters: AdapterSet) -> list[Entry]:
    """Named matrices in canonical order: layer, then q/k/v/o, then A before B."""
    out = []
    for layer, target in adapters.keys():
        pair = adapters.pairs[(layer, target)]
        out.append((entry_name(layer, target, "A"), pair.A.copy()))
        out.append((entry_name(layer, target, "B"), pair.B.copy()))
    return out


def import_state(geometry: ModelGeometry, config: LoraConfig, entries: Iterable[Entry]) -> AdapterSet:
    expected = dict(expected_entries(geometry, config))
    seen: dict[str, Matrix] = {}
    for name, matrix in entries:
        if name not in expected:
            raise StateError(f"unknown adapter entry {name!r}")
        if name in seen:
            raise StateError(f"duplicate adapter entry {name!r}")
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != expected[name]:
            raise StateError(f"entry {name!r} has shape {matrix.shape}, expected {expected[name]}")
        seen[name] = matrix.copy()
    missing = [n for n in expected if n not in seen]
    if missing:
        raise StateError(f"missing adapter entry {missing[0]!r} ({len(missing)} missing)")
    pairs = {}
    for layer in range(geometry.n_layers):
        for target in config.targets:
            pairs[(layer, target)] = AdapterPair(
                seen[entry_name(layer, target, "A")], seen[entry_name(layer, target, "B")]
            )
    return AdapterSet(geometry, config, pairs)


def grads_to_entries(grads: Mapping[tuple[int, str], tuple[Matrix, Matrix]]) -> dict[str, Matrix]:
    out = {}
    for (layer, target), (ga, gb) in grads.items():
        out[entry_name(layer, target, "A")] = ga
        out[entry_name(layer, target, "B")] = gb
    return out


def entries_equal(a: Sequence[Entry], b: Sequence[Entry]) -> bool:
    return len(a) == len(b) and all(
        na == nb and np.array_equal(ma, mb) for (na, ma), (nb, mb) in zip(a, b)
    )


def config_from_entries(entries: Sequence[Entry], alpha: float = 16.0, dropout: float = 0.1) -> LoraConfig:
    """Recover targets and rank from exported entry names and shapes."""
    targets, rank = [], None
    for name, matrix in entries:
        parts = name.split(".")
        if len(parts) != 4 or parts[0] != "layer" or parts[2] not in TARGETS or parts[3] not in ("A", "B"):
            raise StateError(f"malformed adapter entry name {name!r}")
        if parts[2] not in targets:
            targets.append(parts[2])
        if parts[3] == "A":
            rank = matrix.shape[1] if rank is None else rank
            if matrix.shape[1] != rank:
                raise StateError(f"entry {name!r} has rank {matrix.shape[1]}, expected {rank}")
    if rank is None:
        raise StateError("no adapter entries to infer a configuration from")
    return LoraConfig(tuple(targets), rank, alpha, dropout)
