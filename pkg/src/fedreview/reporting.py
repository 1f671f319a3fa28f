"""Cross-run comparison reports and the bundled published-result fixtures."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import InputError
from .experiment import TASK_ORDER, TaskMetricsTable
from .metrics import RoundHistory, WilcoxonResult, task_metrics, wilcoxon_signed_rank

log = logging.getLogger(__name__)

MODEL_ORDER = ("Vanilla", "Central", "FedBEST", "TOC", "COT", "CAT", "CFT", "CFT-reg")
COMPARISONS = (("FedBEST", "Vanilla"), ("Central", "Vanilla"), ("CFT-reg", "FedBEST"))
FIXTURES = ("round_metrics", "individual_models", "toc", "cot", "cat", "cft", "cft_reg", "overall")
SUMMARY_FILE = "summary.csv"


def read_labelled_csv(text: str) -> TaskMetricsTable:
    """Parse ``model,round,task,metric,value_percent`` rows into a table (fractions)."""
    reader = csv.DictReader(io.StringIO(text))
    expected = ["model", "round", "task", "metric", "value_percent"]
    if reader.fieldnames != expected:
        raise InputError(f"labelled metric CSV header must be {','.join(expected)}")
    table = TaskMetricsTable()
    index: dict[str, int] = {}
    for row in reader:
        label = row["model"]
        if label not in index:
            index[label] = len(table.rows)
            rnd = int(row["round"]) if row["round"] else None
            table.add(label, rnd, {})
        metrics = table.rows[index[label]].metrics
        metrics.setdefault(row["task"], {})[row["metric"]] = float(row["value_percent"]) / 100.0
    return table


def load_fixture(name: str) -> TaskMetricsTable:
    if name not in FIXTURES:
        raise InputError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    text = resources.files("fedreview").joinpath("fixtures", f"{name}.csv").read_text(encoding="utf-8")
    return read_labelled_csv(text)


def fixture_histories(name: str = "round_metrics") -> dict[str, RoundHistory]:
    """Per-task round histories from the rows of a fixture that carry a round number."""
    table = load_fixture(name)
    rows = sorted((r for r in table.rows if r.round is not None), key=lambda r: r.round)
    out = {}
    for task in TASK_ORDER:
        out[task] = RoundHistory(task, [r.metrics[task] for r in rows])
    return out


def metric_vector(table: TaskMetricsTable, label: str) -> list[float]:
    """The nine headline values of one row, in percent, task by task."""
    row = {r.label: r for r in table.rows}[label]
    return [100.0 * row.metrics[t][m] for t in TASK_ORDER for m in task_metrics(t)]


@dataclass(frozen=True)
class Comparison:
    better: str
    worse: str
    result: WilcoxonResult


def compare_rows(table: TaskMetricsTable, pairs: Sequence[tuple[str, str]] = COMPARISONS) -> list[Comparison]:
    present = {r.label for r in table.rows if all(t in r.metrics for t in TASK_ORDER)}
    out = []
    for a, b in pairs:
        if a in present and b in present:
            try:
                result = wilcoxon_signed_rank(metric_vector(table, a), metric_vector(table, b))
            except InputError as exc:
                log.warning("skipping %s vs %s: %s", a, b, exc)
                continue
            out.append(Comparison(a, b, result))
    return out


def ordered(table: TaskMetricsTable) -> TaskMetricsTable:
    rank = {label: i for i, label in enumerate(MODEL_ORDER)}
    rows = sorted(table.rows, key=lambda r: (rank.get(r.label, len(rank)), r.label))
    return TaskMetricsTable(list(rows))


def render_report(table: TaskMetricsTable, warnings: Sequence[str] = ()) -> str:
    lines = ["# Model comparison", "", ordered(table).to_markdown()]
    comparisons = compare_rows(table)
    if comparisons:
        lines += ["## Wilcoxon signed-rank (two-sided, exact)", "", "| Comparison | n | W | p |", "|---|---:|---:|---:|"]
        for c in comparisons:
            lines.append(f"| {c.better} vs {c.worse} | {c.result.n} | {c.result.statistic:g} | {c.result.p_value:.4f} |")
        lines.append("")
    if warnings:
        lines += ["## Warnings", ""] + [f"- {w}" for w in warnings] + [""]
    return "\n".join(lines)


def collect_runs(output_dir: str | Path) -> tuple[TaskMetricsTable, list[str]]:
    """Merge every ``*/summary.csv`` below ``output_dir`` into one table."""
    root = Path(output_dir)
    warnings: list[str] = []
    merged: dict[str, dict[str, dict[str, float]]] = {}
    files = sorted(root.glob(f"*/{SUMMARY_FILE}")) if root.is_dir() else []
    if not files:
        warnings.append(f"no completed runs found under {root}")
    for path in files:
        for row in read_labelled_csv(path.read_text(encoding="utf-8")).rows:
            merged.setdefault(row.label, {}).update(row.metrics)
    missing = [m for m in MODEL_ORDER if m not in merged]
    if files and missing:
        warnings.append("missing runs: " + ", ".join(missing))
    table = TaskMetricsTable()
    for label, metrics in merged.items():
        table.add(label, None, metrics)
    return table, warnings
