"""The federated round loop: local training, FedAvg, merge, evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from ..data import ClientShard, Corpus, Example, to_examples
from ..errors import AggregationError, ConfigError, FedReviewError, InputError, TrainingError
from ..evaluation import evaluate_task
from ..lora import AdapterSet, Entry, LoraConfig, export_state, import_state, init_adapters, merge
from ..metrics import RoundHistory, select_best_round, selection_kind
from ..model import TransformerWeights
from ..numerics import Rng, derive_seed
from ..training import TrainHyper, TrainLog, train_adapters
from ..vocab import Vocabulary
from .protocol import AdapterUpdate, MsgType, same_layout, write_checkpoint

log = logging.getLogger(__name__)

Evaluator = Callable[[TransformerWeights], dict[str, dict[str, float]]]


class AggregationPolicy(str, Enum):
    UNIFORM = "uniform"
    SAMPLE_WEIGHTED = "sample_weighted"


@dataclass(frozen=True)
class FedConfig:
    lora: LoraConfig
    rounds: int = 20
    policy: AggregationPolicy = AggregationPolicy.SAMPLE_WEIGHTED
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 42
    continue_adapters: bool = False
    jobs: int = 1
    timeout: float = 300.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        object.__setattr__(self, "policy", AggregationPolicy(self.policy))


@dataclass(frozen=True)
class Client:
    """A participant's local data, as one or more sequential training stages."""

    client_id: int
    stages: tuple[tuple[Example, ...], ...]

    def __post_init__(self):
        stages = tuple(tuple(s) for s in self.stages)
        if not stages or any(not s for s in stages):
            raise InputError(f"client {self.client_id} has an empty training stage")
        object.__setattr__(self, "stages", stages)

    @property
    def sample_count(self) -> int:
        return sum(len(s) for s in self.stages)

    @classmethod
    def from_shard(cls, shard: ClientShard, vocab: Vocabulary) -> Client:
        return cls(shard.client_id, (tuple(to_examples(shard.corpus, vocab)),))

    @classmethod
    def sequential(cls, client_id: int, corpora: Sequence[Corpus], vocab: Vocabulary) -> Client:
        """Train the same adapters on each corpus in turn within one round."""
        return cls(client_id, tuple(tuple(to_examples(c, vocab)) for c in corpora))

    @classmethod
    def mixed(cls, client_id: int, corpora: Sequence[Corpus], vocab: Vocabulary, seed: int) -> Client:
        """Concatenate the corpora and shuffle them into a single stage."""
        pooled = [e for c in corpora for e in to_examples(c, vocab)]
        return cls(client_id, (tuple(Rng(derive_seed(seed, 0xC0F, client_id)).shuffled(pooled)),))


def local_train(
    weights: TransformerWeights,
    start: AdapterSet,
    client: Client,
    hyper: TrainHyper,
    seed: int,
    round_index: int,
) -> tuple[AdapterSet, list[TrainLog]]:
    adapters, logs = start, []
    for stage, examples in enumerate(client.stages):
        adapters, tlog = train_adapters(
            weights, adapters, examples, hyper, derive_seed(seed, client.client_id, round_index, stage)
        )
        logs.append(tlog)
    return adapters, logs


def client_train_round(
    weights: TransformerWeights,
    start: AdapterSet,
    client: Client,
    hyper: TrainHyper,
    seed: int,
    round_index: int,
) -> AdapterUpdate:
    """One local epoch per stage, returned as a shareable update."""
    adapters, _ = local_train(weights, start, client, hyper, seed, round_index)
    return AdapterUpdate(client.client_id, round_index, client.sample_count, tuple(export_state(adapters)))


# -- aggregation -----------------------------------------------------------


def aggregation_weights(updates: Sequence[AdapterUpdate], policy: AggregationPolicy) -> list[Fraction]:
    policy = AggregationPolicy(policy)
    if policy is AggregationPolicy.UNIFORM:
        return [Fraction(1, len(updates))] * len(updates)
    total = sum(u.sample_count for u in updates)
    if total <= 0 or any(u.sample_count < 1 for u in updates):
        raise AggregationError("sample-weighted aggregation needs sample_count >= 1 for every update")
    return [Fraction(u.sample_count, total) for u in updates]


def weighted_average(entry_sets: Sequence[Sequence[Entry]], weights: Sequence[Fraction]) -> list[Entry]:
    """Entrywise sum of ``weight * matrix``, accumulated in the given order."""
    if not entry_sets:
        raise InputError("nothing to aggregate")
    if len(entry_sets) != len(weights):
        raise InputError(f"{len(entry_sets)} entry sets but {len(weights)} weights")
    first = entry_sets[0]
    for i, other in enumerate(entry_sets[1:], 1):
        if not same_layout(first, other):
            raise AggregationError(f"update {i} has entry names or shapes that differ from update 0")
    out = []
    for k, (name, _) in enumerate(first):
        acc = np.zeros_like(first[k][1])
        for entries, w in zip(entry_sets, weights):
            acc = acc + float(w) * entries[k][1]
        out.append((name, acc))
    return out


def _canonical(updates: Sequence[AdapterUpdate]) -> list[AdapterUpdate]:
    if not updates:
        raise InputError("fedavg needs at least one update")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise AggregationError(f"updates span several rounds: {sorted(rounds)}")
    return sorted(updates, key=lambda u: u.client_id)


def fedavg(updates: Sequence[AdapterUpdate], policy: AggregationPolicy = AggregationPolicy.SAMPLE_WEIGHTED) -> list[Entry]:
    """Weighted entrywise mean of client adapter states.

    Updates are ordered by client id before summation, so the result does not
    depend on arrival order.
    """
    ordered = _canonical(updates)
    return weighted_average([u.entries for u in ordered], aggregation_weights(ordered, policy))


# -- transports ------------------------------------------------------------


class Transport(Protocol):
    def collect(self, round_index: int, weights: TransformerWeights, start: AdapterSet) -> list[AdapterUpdate]: ...

    def publish(self, aggregate: AdapterUpdate) -> None: ...

    def finish(self) -> None: ...


def _train_job(args) -> AdapterUpdate:
    weights, start, client, hyper, seed, round_index = args
    return client_train_round(weights, start, client, hyper, seed, round_index)


class InProcessTransport:
    """Trains every client locally, optionally across worker processes."""

    def __init__(self, clients: Sequence[Client], config: FedConfig):
        if not clients:
            raise InputError("federation needs at least one client")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate client ids {ids}")
        self.clients = list(clients)
        self.config = config

    def collect(self, round_index, weights, start):
        cfg = self.config
        jobs = [(weights, start, c, cfg.hyper, cfg.seed, round_index) for c in self.clients]
        if cfg.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(jobs))) as pool:
                futures = [pool.submit(_train_job, j) for j in jobs]
                return [self._result(f.result, c) for f, c in zip(futures, self.clients)]
        return [self._result(lambda j=j: _train_job(j), c) for j, c in zip(jobs, self.clients)]

    @staticmethod
    def _result(get, client: Client) -> AdapterUpdate:
        try:
            return get()
        except FedReviewError as exc:
            raise TrainingError(f"client {client.client_id} failed: {exc}") from exc

    def publish(self, aggregate):
        pass

    def finish(self):
        pass


# -- round loop --------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    metrics: dict[str, dict[str, float]]
    checkpoint: Path | None = None
    aggregate: tuple[Entry, ...] | None = None


@dataclass
class FederationResult:
    config: FedConfig
    records: list[RoundRecord]
    models: list[TransformerWeights]

    def histories(self) -> dict[str, RoundHistory]:
        out: dict[str, RoundHistory] = {}
        for rec in self.records:
            for task, metrics in rec.metrics.items():
                out.setdefault(task, RoundHistory(task)).append(metrics)
        return out

    def best_round(self, task: str) -> int:
        return select_best_round(self.histories()[task], selection_kind(task))

    def model_at(self, round_index: int) -> TransformerWeights:
        return self.models[round_index]


def round_start_adapters(
    weights: TransformerWeights, config: FedConfig, round_index: int, previous: Sequence[Entry] | None
) -> AdapterSet:
    """Adapters every client starts from; identical across clients."""
    if config.continue_adapters and previous is not None:
        return import_state(weights.geometry, config.lora, previous)
    return init_adapters(weights.geometry, config.lora, derive_seed(config.seed, 0xADA, round_index))


def make_evaluator(corpora: Mapping[str, Corpus], vocab: Vocabulary, max_new: int = 24) -> Evaluator:
    def evaluate(weights: TransformerWeights) -> dict[str, dict[str, float]]:
        return {task: evaluate_task(weights, corpus, vocab, max_new) for task, corpus in corpora.items()}

    return evaluate


def run_federation(
    base: TransformerWeights,
    clients: Sequence[Client] | Transport,
    config: FedConfig,
    evaluate: Evaluator,
    checkpoint_dir: str | Path | None = None,
    aggregate: Callable[[list[AdapterUpdate]], list[Entry]] | None = None,
) -> FederationResult:
    """Round 0 scores ``base``; rounds 1..T train, aggregate, merge and score.

    In the default mode every round starts from freshly initialized adapters
    on the previous round's merged model, and the aggregate is folded into
    that model. With ``continue_adapters`` clients keep training the last
    aggregate and each round's model is ``base`` plus that aggregate.
    """
    transport = clients if hasattr(clients, "collect") else InProcessTransport(clients, config)
    aggregate = aggregate or (lambda ups: fedavg(ups, config.policy))
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    records = [RoundRecord(0, evaluate(base))]
    models = [base]
    current, previous = base, None
    try:
        for t in range(1, config.rounds + 1):
            train_base = base if config.continue_adapters else current
            start = round_start_adapters(train_base, config, t, previous)
            updates = transport.collect(t, train_base, start)
            entries = aggregate(updates)
            agg_set = import_state(base.geometry, config.lora, entries)
            current = merge(train_base, agg_set)
            message = AdapterUpdate(0, t, sum(u.sample_count for u in updates), tuple(entries), MsgType.AGGREGATE)
            transport.publish(message)
            path = write_checkpoint(ckpt_dir / f"round_{t:03d}.fedlora", message) if ckpt_dir else None
            records.append(RoundRecord(t, evaluate(current), path, tuple(entries)))
            models.append(current)
            previous = entries
            log.info("round %d/%d aggregated %d updates", t, config.rounds, len(updates))
    finally:
        transport.finish()
    return FederationResult(config, records, models)
