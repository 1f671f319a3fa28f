"""End-to-end experiment steps shared by the command-line subcommands."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .config import ExperimentConfig
from .data import (
    TASKS,
    ClientShard,
    Corpus,
    SyntheticTaskSpec,
    assert_project_disjoint,
    load_jsonl,
    resplit_eval,
    sample_shards,
    sample_test,
    synth_generate,
    write_jsonl,
)
from .errors import DataError
from .experiment import TASK_ORDER, TaskMetricsTable, comparison_table, history_table, run_individual
from .federation import FederationResult
from .metrics import history_rows, rows_to_csv
from .model import TransformerWeights, init_weights
from .multitask import StrategyResult, run_strategy
from .numerics import derive_seed
from .reporting import SUMMARY_FILE
from .vocab import COMMENT_WORDS, SPECIAL_TOKENS, Vocabulary, default_code_symbols

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    vocab: Vocabulary
    shards: dict[str, tuple[ClientShard, ClientShard]]
    tests: dict[str, Corpus]


def _vocabulary_for(corpora, vocab_size: int) -> Vocabulary:
    reserved = set(SPECIAL_TOKENS) | set(COMMENT_WORDS)
    seen = set()
    for corpus in corpora:
        for r in corpus.records:
            for text in (r.patch, r.comment, r.refined):
                if text:
                    seen.update(tok for tok in text.split() if tok not in reserved)
    default = default_code_symbols(vocab_size)
    if seen <= set(default):
        return Vocabulary.build(default)
    room = vocab_size - len(reserved)
    if len(seen) > room:
        raise DataError(f"corpora use {len(seen)} distinct symbols; the model vocabulary has room for {room}")
    return Vocabulary.build(sorted(seen))


def _task_sources(cfg: ExperimentConfig, task: str):
    files = cfg.data.files[task]
    fmap = cfg.data.field_map
    test = load_jsonl(files.test, task, fmap, "test")
    if files.valid:
        test = resplit_eval(load_jsonl(files.valid, task, fmap, "valid"), test)[1]
    if files.clients:
        train = tuple(load_jsonl(p, task, fmap, f"client-{i}") for i, p in enumerate(files.clients))
    else:
        train = load_jsonl(files.train, task, fmap, "train")
    return train, test


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Build (or load) corpora, then draw both client shards and the test subset per task."""
    seed = cfg.seed
    if cfg.data.source == "synthetic":
        s = cfg.data.synthetic
        spec = SyntheticTaskSpec(
            n_projects=s.n_projects, n_test_projects=s.n_test_projects, min_len=s.min_len, max_len=s.max_len, seed=seed
        )
        corpora = synth_generate(spec, s.n_per_task, s.n_test)
        sources = {t: (corpora.train[t], corpora.test[t]) for t in cfg.tasks}
        vocab = spec.vocabulary()
    else:
        sources = {t: _task_sources(cfg, t) for t in cfg.tasks}
        flat = [c for train, test in sources.values() for c in (train if isinstance(train, tuple) else (train,)) + (test,)]
        vocab = _vocabulary_for(flat, cfg.geometry_spec.vocab_size)
    shards, tests = {}, {}
    for t in cfg.tasks:
        train, test = sources[t]
        balance = t == "T1"
        task_seed = derive_seed(seed, TASKS.index(t))
        shards[t] = sample_shards(train, cfg.data.total, cfg.data.ratio, balance, task_seed, cfg.data.n_buckets)
        tests[t] = sample_test(test, cfg.data.test_total, balance, task_seed, cfg.data.n_buckets)
        assert_project_disjoint(shards[t][0], shards[t][1], tests[t])
    return PreparedData(vocab, shards, tests)


def partition(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Write shard and test JSONL files plus a JSON report of sizes and overlaps."""
    data = prepare_data(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {"seed": cfg.seed, "ratio": list(cfg.data.ratio), "tasks": {}}
    for t in cfg.tasks:
        a, b = data.shards[t]
        test = data.tests[t]
        for shard in (a, b):
            write_jsonl(shard.corpus, out_dir / f"{t}_client{shard.client_id}.jsonl")
        write_jsonl(test, out_dir / f"{t}_test.jsonl")
        groups = {"client0": a.corpus.projects, "client1": b.corpus.projects, "test": test.projects}
        overlaps = {
            f"{x}/{y}": sorted(groups[x] & groups[y])
            for i, x in enumerate(groups)
            for y in list(groups)[i + 1 :]
        }
        report["tasks"][t] = {
            "client0": len(a.corpus),
            "client1": len(b.corpus),
            "test": len(test),
            "projects": {k: len(v) for k, v in groups.items()},
            "labels": {k: dict(sorted(c.label_counts().items())) for k, c in (("client0", a.corpus), ("client1", b.corpus), ("test", test))}
            if t == "T1"
            else None,
            "overlaps": overlaps,
        }
    (out_dir / "partition_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def base_model(cfg: ExperimentConfig) -> TransformerWeights:
    return init_weights(cfg.geometry_spec, derive_seed(cfg.seed, 0xBA5E))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))


def _rounds_csv(results: Mapping[str, FederationResult]) -> str:
    rows = []
    for task, result in results.items():
        rows.extend(history_rows(result.histories()[task]))
    rows.sort(key=lambda r: (r.round, TASK_ORDER.index(r.task)))
    return rows_to_csv(rows)


@dataclass
class RunOutput:
    directory: Path
    summary: TaskMetricsTable
    report: str


def run_individual_tasks(
    cfg: ExperimentConfig, data: PreparedData, out_dir: Path, results: Mapping[str, FederationResult] | None = None
) -> RunOutput:
    """Per-task federations plus their comparison tables; ``results`` may come from another transport."""
    base = base_model(cfg)
    results = dict(results or {})
    sections, summary_metrics = [], {"Vanilla": {}, "Central": {}, "FedBEST": {}}
    for t in cfg.tasks:
        if t not in results:
            results[t] = run_individual(
                t, base, data.shards[t], data.tests[t], cfg.fed_config(t), data.vocab, out_dir / "checkpoints" / t
            )
        table = comparison_table(
            t, base, data.shards[t], data.tests[t], results[t], cfg.fed_config(t), data.vocab, cfg.with_central
        )
        best = results[t].best_round(t)
        sections.append(
            f"## {t}\n\nFedBEST: round {best}\n\n"
            + table.to_markdown(tasks=(t,))
            + "\n### Rounds\n\n"
            + history_table(results[t]).to_markdown(tasks=(t,))
        )
        rows = {r.label: r for r in table.rows}
        summary_metrics["Vanilla"][t] = rows["Vanilla"].metrics[t]
        summary_metrics["FedBEST"][t] = rows[f"Fed@BEST ({best})"].metrics[t]
        if "Central" in rows:
            summary_metrics["Central"][t] = rows["Central"].metrics[t]
        _write(out_dir / f"{t}_rounds.csv", rows_to_csv(history_rows(results[t].histories()[t])))
    summary = TaskMetricsTable()
    for label, metrics in summary_metrics.items():
        if metrics:
            summary.add(label, None, metrics)
    _write(out_dir / "rounds.csv", _rounds_csv({t: results[t] for t in cfg.tasks}))
    report = "# Individual-task federation\n\n" + "\n".join(sections)
    return _finish(out_dir, summary, report)


_DISPLAY = {"toc": "TOC", "cot": "COT", "cat": "CAT", "cft": "CFT", "cft_reg": "CFT-reg"}


def run_multitask(cfg: ExperimentConfig, data: PreparedData, out_dir: Path) -> tuple[RunOutput, StrategyResult]:
    result = run_strategy(cfg.plan(), base_model(cfg), data.shards, data.tests, data.vocab, out_dir / "checkpoints")
    label = _DISPLAY[cfg.strategy]
    _write(out_dir / "rounds.csv", result.history.to_csv())
    summary = TaskMetricsTable()
    summary.add(label, None, result.best_metrics())
    best = ", ".join(f"{t}: round {r}" for t, r in sorted(result.best_rounds.items()))
    report = (
        f"# Strategy {label}\n\nSelected rounds ({best})\n\n"
        + result.summary.to_markdown()
        + "\n## Round history\n\n"
        + result.history.to_markdown()
    )
    return _finish(out_dir, summary, report), result


def _finish(out_dir: Path, summary: TaskMetricsTable, report: str) -> RunOutput:
    _write(out_dir / SUMMARY_FILE, summary.labelled_csv())
    _write(out_dir / "report.md", report)
    return RunOutput(out_dir, summary, report)
