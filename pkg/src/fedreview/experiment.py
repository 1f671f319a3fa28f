"""Single-task federated experiments and labelled metric tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .data import ClientShard, Corpus
from .federation import Client, FedConfig, FederationResult, make_evaluator, run_federation
from .federation.core import local_train, round_start_adapters
from .lora import merge
from .metrics import CSV_HEADER, METRIC_LABELS, MetricRow, format_percent, rows_to_csv, task_metrics
from .model import TransformerWeights
from .vocab import Vocabulary

TASK_ORDER = ("T1", "T2", "T3")


@dataclass
class TableRow:
    label: str
    round: int | None
    metrics: dict[str, dict[str, float]]


@dataclass
class TaskMetricsTable:
    """Rows of per-task metrics (fractions), one per evaluated model or round."""

    rows: list[TableRow] = field(default_factory=list)

    def add(self, label: str, round_index: int | None, metrics: Mapping[str, Mapping[str, float]]) -> None:
        self.rows.append(TableRow(label, round_index, {t: dict(m) for t, m in metrics.items()}))

    def metric_rows(self) -> list[MetricRow]:
        out = []
        for i, row in enumerate(self.rows):
            rnd = row.round if row.round is not None else i
            for task in TASK_ORDER:
                for metric, value in row.metrics.get(task, {}).items():
                    out.append(MetricRow(rnd, task, metric, 100.0 * value))
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.metric_rows())

    def labelled_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("model",) + CSV_HEADER)
        for mr, label in zip(self.metric_rows(), self._labels_per_metric()):
            writer.writerow((label, mr.round, mr.task, mr.metric, format_percent(mr.value_percent)))
        return buf.getvalue()

    def _labels_per_metric(self) -> list[str]:
        return [
            row.label for row in self.rows for task in TASK_ORDER for _ in row.metrics.get(task, {})
        ]

    def to_markdown(self, tasks: Sequence[str] = TASK_ORDER) -> str:
        columns = [(t, m) for t in tasks for m in task_metrics(t)]
        head = "| Model | " + " | ".join(f"{t} {METRIC_LABELS[m]}" for t, m in columns) + " |"
        sep = "|---|" + "---:|" * len(columns)
        lines = [head, sep]
        for row in self.rows:
            cells = []
            for t, m in columns:
                v = row.metrics.get(t, {}).get(m)
                cells.append("-" if v is None else f"{100 * v:.3f}")
            lines.append(f"| {row.label} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def clients_for(shards: Sequence[ClientShard], vocab: Vocabulary) -> list[Client]:
    return [Client.from_shard(s, vocab) for s in shards]


def run_individual(
    task: str,
    base: TransformerWeights,
    shards: Sequence[ClientShard],
    test: Corpus,
    config: FedConfig,
    vocab: Vocabulary,
    checkpoint_dir: str | Path | None = None,
) -> FederationResult:
    """Federate one task and score every round on that task's test corpus."""
    return run_federation(base, clients_for(shards, vocab), config, make_evaluator({task: test}, vocab), checkpoint_dir)


def train_single(base: TransformerWeights, client: Client, config: FedConfig) -> TransformerWeights:
    """One local round without any aggregation (a lone client, or central training)."""
    start = round_start_adapters(base, config, 1, None)
    adapters, _ = local_train(base, start, client, config.hyper, config.seed, 1)
    return merge(base, adapters)


def comparison_table(
    task: str,
    base: TransformerWeights,
    shards: Sequence[ClientShard],
    test: Corpus,
    result: FederationResult,
    config: FedConfig,
    vocab: Vocabulary,
    with_central: bool = False,
) -> TaskMetricsTable:
    """Vanilla / Central / Client@1 / Fed@1 / Fed@BEST rows for one task."""
    evaluate = make_evaluator({task: test}, vocab)
    table = TaskMetricsTable()
    table.add("Vanilla", 0, result.records[0].metrics)
    if with_central:
        pooled = [e for s in shards for e in Client.from_shard(s, vocab).stages[0]]
        central = Client(0, (tuple(pooled),))
        table.add("Central", None, evaluate(train_single(base, central, replace(config, rounds=1))))
    for shard in shards:
        client = Client.from_shard(shard, vocab)
        table.add(f"Client {chr(ord('a') + shard.client_id)}@1", None, evaluate(train_single(base, client, config)))
    table.add("Fed@1", 1, result.records[1].metrics)
    best = result.best_round(task)
    table.add(f"Fed@BEST ({best})", best, result.records[best].metrics)
    return table


def history_table(result: FederationResult, label: str = "round") -> TaskMetricsTable:
    table = TaskMetricsTable()
    for rec in result.records:
        table.add(f"{label} {rec.round}", rec.round, rec.metrics)
    return table

