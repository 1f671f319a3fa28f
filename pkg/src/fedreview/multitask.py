"""Five ways of federating three review tasks into shared or separate models.

* ``toc``: one full federation per task in sequence, each starting from the
  previous task's best model.
* ``cot``: every client trains one adapter set on each task in turn per round.
* ``cat``: every client trains a separate adapter set per task per round and
  the server averages all of them together.
* ``cft``: every client trains on a shuffled mix of its task data.
* ``cft_reg``: the yes/no task gets its own single-task federation; the two
  generation tasks share a ``cft``-style model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from .data import ClientShard, Corpus
from .errors import ConfigError, FedReviewError, TrainingError
from .experiment import TASK_ORDER, TaskMetricsTable, clients_for, run_individual
from .federation import (
    AdapterUpdate,
    AggregationPolicy,
    Client,
    FedConfig,
    FederationResult,
    InProcessTransport,
    aggregation_weights,
    make_evaluator,
    run_federation,
    weighted_average,
)
from .lora import MULTITASK_PROFILE, TASK_ADAPTER_PROFILE, Entry, LoraConfig
from .metrics import select_best_round, selection_kind
from .model import TransformerWeights
from .training import TrainHyper
from .vocab import Vocabulary


class StrategyKind(str, Enum):
    TOC = "toc"
    COT = "cot"
    CAT = "cat"
    CFT = "cft"
    CFT_REG = "cft_reg"


class CatWeighting(str, Enum):
    TASK_UNIFORM = "task_uniform"
    SAMPLE = "sample"


@dataclass(frozen=True)
class MultiTaskPlan:
    strategy: StrategyKind
    rounds: int = 20
    task_order: tuple[str, ...] = TASK_ORDER
    stage_lora: Mapping[str, LoraConfig] = field(default_factory=lambda: dict(TASK_ADAPTER_PROFILE))
    shared_lora: LoraConfig = MULTITASK_PROFILE
    policy: AggregationPolicy = AggregationPolicy.SAMPLE_WEIGHTED
    cat_weighting: CatWeighting = CatWeighting.TASK_UNIFORM
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 42
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", StrategyKind(self.strategy))
        object.__setattr__(self, "cat_weighting", CatWeighting(self.cat_weighting))
        if sorted(self.task_order) != sorted(TASK_ORDER):
            raise ConfigError(f"task_order must be a permutation of {TASK_ORDER}, got {self.task_order}")

    def fed_config(self, lora: LoraConfig) -> FedConfig:
        return FedConfig(lora, self.rounds, self.policy, self.hyper, self.seed, jobs=self.jobs)


@dataclass
class StrategyResult:
    strategy: StrategyKind
    history: TaskMetricsTable
    summary: TaskMetricsTable
    best_rounds: dict[str, int]
    models: dict[str, TransformerWeights]
    lineages: dict[str, FederationResult]

    def best_metrics(self) -> dict[str, dict[str, float]]:
        """Each task's metrics at its own best round (the BEST row)."""
        row = {r.label: r for r in self.summary.rows}["BEST"]
        return row.metrics


def _stage_error(stage: str, exc: Exception) -> TrainingError:
    return TrainingError(f"stage {stage} failed: {exc}")


def _per_round_table(result: FederationResult, offset: int = 0, skip_zero: bool = False) -> TaskMetricsTable:
    table = TaskMetricsTable()
    for rec in result.records:
        if skip_zero and rec.round == 0:
            continue
        table.add(f"round {offset + rec.round}", offset + rec.round, rec.metrics)
    return table


def _best_per_task(result: FederationResult, tasks: Sequence[str]) -> dict[str, int]:
    histories = result.histories()
    return {t: select_best_round(histories[t], selection_kind(t)) for t in tasks}


def _best_summary(result: FederationResult, best: Mapping[str, int]) -> TaskMetricsTable:
    summary = TaskMetricsTable()
    summary.add("Vanilla", 0, result.records[0].metrics)
    summary.add("BEST", None, {t: result.records[r].metrics[t] for t, r in best.items()})
    return summary


def compromise_round(result: FederationResult, tasks: Sequence[str]) -> int:
    """Single round for a model serving several generation tasks.

    Uses the per-task choice when the tasks agree, otherwise the round with the
    highest summed ROUGE-L (earliest on ties).
    """
    best = _best_per_task(result, tasks)
    if len(set(best.values())) == 1:
        return next(iter(best.values()))
    scores = [sum(rec.metrics[t]["rougel"] for t in tasks) for rec in result.records[1:]]
    return 1 + scores.index(max(scores))


def run_toc(
    plan: MultiTaskPlan,
    base: TransformerWeights,
    shards: Mapping[str, Sequence[ClientShard]],
    tests: Mapping[str, Corpus],
    vocab: Vocabulary,
    checkpoint_dir: str | Path | None = None,
) -> StrategyResult:
    """Task-after-task federation; stage k starts from stage k-1's best round."""
    evaluate = make_evaluator(tests, vocab)
    history = TaskMetricsTable()
    summary = TaskMetricsTable()
    models, lineages, best_rounds = {}, {}, {}
    current, label = base, "M"
    for k, task in enumerate(plan.task_order):
        cfg = plan.fed_config(plan.stage_lora[task])
        ckpt = Path(checkpoint_dir) / f"stage{k + 1}_{task}" if checkpoint_dir else None
        try:
            result = run_federation(current, clients_for(shards[task], vocab), cfg, evaluate, ckpt)
        except FedReviewError as exc:
            raise _stage_error(f"{k + 1} ({task})", exc) from exc
        offset = k * plan.rounds
        if k == 0:
            summary.add("Vanilla", 0, result.records[0].metrics)
        for row in _per_round_table(result, offset, skip_zero=k > 0).rows:
            history.rows.append(row)
        best = result.best_round(task)
        best_rounds[task] = best
        label += task[1:]
        current = result.model_at(best)
        models[label] = current
        lineages[task] = result
        summary.add(label, offset + best, result.records[best].metrics)
    final = summary.rows[-1]
    summary.add("BEST", final.round, final.metrics)
    return StrategyResult(StrategyKind.TOC, history, summary, best_rounds, models, lineages)


def _single_lineage(
    kind: StrategyKind,
    plan: MultiTaskPlan,
    base: TransformerWeights,
    clients: Sequence[Client],
    tests: Mapping[str, Corpus],
    vocab: Vocabulary,
    checkpoint_dir,
    transport=None,
    aggregate=None,
) -> StrategyResult:
    cfg = plan.fed_config(plan.shared_lora)
    try:
        result = run_federation(
            base, transport or clients, cfg, make_evaluator(tests, vocab), checkpoint_dir, aggregate
        )
    except FedReviewError as exc:
        raise _stage_error(kind.value, exc) from exc
    best = _best_per_task(result, list(tests))
    models = {f"BEST-{t}": result.model_at(r) for t, r in best.items()}
    return StrategyResult(kind, _per_round_table(result), _best_summary(result, best), best, models, {kind.value: result})


def _client_ids(shards: Mapping[str, Sequence[ClientShard]], tasks: Sequence[str]) -> list[int]:
    ids = sorted({s.client_id for t in tasks for s in shards[t]})
    for t in tasks:
        if sorted(s.client_id for s in shards[t]) != ids:
            raise ConfigError(f"task {t} does not have a shard for every client {ids}")
    return ids


def _shard(shards: Sequence[ClientShard], client_id: int) -> ClientShard:
    return next(s for s in shards if s.client_id == client_id)


def run_cot(plan, base, shards, tests, vocab, checkpoint_dir=None) -> StrategyResult:
    """Per round, each client trains one adapter set on the tasks in order, then shares it once."""
    clients = [
        Client.sequential(cid, [_shard(shards[t], cid).corpus for t in plan.task_order], vocab)
        for cid in _client_ids(shards, plan.task_order)
    ]
    return _single_lineage(StrategyKind.COT, plan, base, clients, tests, vocab, checkpoint_dir)


class _CatTransport(InProcessTransport):
    """Trains one adapter set per (client, task); updates ordered by client, then task."""

    def __init__(self, per_task_clients: Sequence[Client], config: FedConfig):
        self.clients = list(per_task_clients)
        self.config = config


def cat_weights(updates: Sequence[AdapterUpdate], policy: AggregationPolicy, weighting: CatWeighting) -> list[Fraction]:
    """Weights for client-task updates grouped by client id (input order kept within a client)."""
    if CatWeighting(weighting) is CatWeighting.SAMPLE:
        total = sum(u.sample_count for u in updates)
        return [Fraction(u.sample_count, total) for u in updates]
    groups: dict[int, list[int]] = {}
    for i, u in enumerate(updates):
        groups.setdefault(u.client_id, []).append(i)
    ids = sorted(groups)
    per_client = [
        AdapterUpdate(cid, updates[0].round, sum(updates[i].sample_count for i in groups[cid])) for cid in ids
    ]
    client_w = dict(zip(ids, aggregation_weights(per_client, policy)))
    out = [Fraction(0)] * len(updates)
    for cid in ids:
        for i in groups[cid]:
            out[i] = client_w[cid] / len(groups[cid])
    return out


def cat_aggregate(updates: Sequence[AdapterUpdate], policy: AggregationPolicy, weighting: CatWeighting) -> list[Entry]:
    ordered = sorted(updates, key=lambda u: u.client_id)
    return weighted_average([u.entries for u in ordered], cat_weights(ordered, policy, weighting))


def run_cat(plan, base, shards, tests, vocab, checkpoint_dir=None) -> StrategyResult:
    """Per round, separate per-task adapter sets from every client are averaged together."""
    tasks = [t for t in plan.task_order if t in shards]
    per_task = [
        Client(cid, (tuple(Client.from_shard(_shard(shards[t], cid), vocab).stages[0]),))
        for cid in _client_ids(shards, tasks)
        for t in tasks
    ]
    cfg = plan.fed_config(plan.shared_lora)
    transport = _CatTransport(per_task, cfg)
    return _single_lineage(
        StrategyKind.CAT,
        plan,
        base,
        per_task,
        tests,
        vocab,
        checkpoint_dir,
        transport=transport,
        aggregate=lambda ups: cat_aggregate(ups, plan.policy, plan.cat_weighting),
    )


def _mixed_clients(plan, shards, tasks, vocab) -> list[Client]:
    return [
        Client.mixed(cid, [_shard(shards[t], cid).corpus for t in tasks], vocab, plan.seed)
        for cid in _client_ids(shards, tasks)
    ]


def run_cft(plan, base, shards, tests, vocab, checkpoint_dir=None) -> StrategyResult:
    """Standard federation over each client's shuffled union of task shards."""
    clients = _mixed_clients(plan, shards, plan.task_order, vocab)
    return _single_lineage(StrategyKind.CFT, plan, base, clients, tests, vocab, checkpoint_dir)


def run_cft_reg(plan, base, shards, tests, vocab, checkpoint_dir=None) -> StrategyResult:
    """Classification model from the single-task T1 federation; generation model from mixed T2+T3."""
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    cls_cfg = plan.fed_config(plan.stage_lora["T1"])
    try:
        cls_result = run_individual("T1", base, shards["T1"], tests["T1"], cls_cfg, vocab, ckpt / "classification" if ckpt else None)
    except FedReviewError as exc:
        raise _stage_error("classification", exc) from exc
    gen_tasks = [t for t in plan.task_order if t != "T1"]
    clients = _mixed_clients(plan, shards, gen_tasks, vocab)
    try:
        reg_result = run_federation(
            base,
            clients,
            plan.fed_config(plan.shared_lora),
            make_evaluator({t: tests[t] for t in gen_tasks}, vocab),
            ckpt / "regression" if ckpt else None,
        )
    except FedReviewError as exc:
        raise _stage_error("regression", exc) from exc
    history = TaskMetricsTable()
    for c_rec, r_rec in zip(cls_result.records, reg_result.records):
        history.add(f"round {c_rec.round}", c_rec.round, {**c_rec.metrics, **r_rec.metrics})
    cls_best = cls_result.best_round("T1")
    reg_best = compromise_round(reg_result, gen_tasks)
    best = {"T1": cls_best, **{t: reg_best for t in gen_tasks}}
    summary = TaskMetricsTable()
    summary.add("Vanilla", 0, {**cls_result.records[0].metrics, **reg_result.records[0].metrics})
    summary.add(
        "BEST",
        None,
        {"T1": cls_result.records[cls_best].metrics["T1"], **{t: reg_result.records[reg_best].metrics[t] for t in gen_tasks}},
    )
    models = {"classification": cls_result.model_at(cls_best), "regression": reg_result.model_at(reg_best)}
    lineages = {"classification": cls_result, "regression": reg_result}
    return StrategyResult(StrategyKind.CFT_REG, history, summary, best, models, lineages)


RUNNERS = {
    StrategyKind.TOC: run_toc,
    StrategyKind.COT: run_cot,
    StrategyKind.CAT: run_cat,
    StrategyKind.CFT: run_cft,
    StrategyKind.CFT_REG: run_cft_reg,
}


def run_strategy(plan, base, shards, tests, vocab, checkpoint_dir=None) -> StrategyResult:
    return RUNNERS[plan.strategy](plan, base, shards, tests, vocab, checkpoint_dir)


def evaluate_multitask(
    models: Mapping[str, TransformerWeights] | TransformerWeights,
    tests: Mapping[str, Corpus],
    vocab: Vocabulary,
) -> TaskMetricsTable:
    """Score each labelled model on every task's test corpus."""
    if isinstance(models, TransformerWeights):
        models = {"model": models}
    evaluate = make_evaluator(tests, vocab)
    table = TaskMetricsTable()
    for label, weights in models.items():
        table.add(label, None, evaluate(weights))
    return table
