"""Evaluation metrics, best-round selection and the exact Wilcoxon signed-rank test.

All scores are fractions in [0, 1]; reports multiply by 100.
"""

from __future__ import annotations

import csv
import io
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Iterable, Mapping, Sequence

from .errors import InputError

CLASSIFICATION_METRICS = ("precision", "recall", "f1")
GENERATION_METRICS = ("cbleu", "meteor", "rougel")
METRIC_LABELS = {
    "precision": "P",
    "recall": "R",
    "f1": "F1",
    "cbleu": "C-BLEU",
    "meteor": "METEOR",
    "rougel": "ROUGE-L",
}
CSV_HEADER = ("round", "task", "metric", "value_percent")

_PUNCT = str.maketrans({c: f" {c} " for c in string.punctuation if c not in "_<>:?/"})


def tokenize(text: str) -> list[str]:
    """Whitespace split after isolating punctuation (markup-like tokens stay whole)."""
    return text.translate(_PUNCT).split()


# -- classification --------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InputError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, predicted: Sequence[str], gold: Sequence[str], positive: str = "yes") -> ConfusionCounts:
        if len(predicted) != len(gold):
            raise InputError(f"{len(predicted)} predictions for {len(gold)} gold labels")
        c = Counter((p == positive, g == positive) for p, g in zip(predicted, gold))
        return cls(tp=c[True, True], fp=c[True, False], fn=c[False, True], tn=c[False, False])


def f1_from_pr(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def prf1(counts: ConfusionCounts) -> tuple[float, float, float]:
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return p, r, f1_from_pr(p, r)


# -- generation ------------------------------------------------------------


@dataclass(frozen=True)
class GenPair:
    hypothesis: tuple[str, ...]
    reference: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "hypothesis", tuple(self.hypothesis))
        object.__setattr__(self, "reference", tuple(self.reference))
        if not self.reference:
            raise InputError("reference must be non-empty")

    @classmethod
    def from_text(cls, hypothesis: str, reference: str) -> GenPair:
        return cls(tokenize(hypothesis), tokenize(reference))


def _require(pairs: Sequence[GenPair], name: str) -> None:
    if not pairs:
        raise InputError(f"{name} needs at least one pair")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs: Sequence[GenPair], max_n: int = 4, smooth: bool = False) -> float:
    """Micro-averaged BLEU: clipped n-gram counts pooled over the corpus.

    Without ``smooth`` any n-gram order with zero pooled matches yields 0.
    ``smooth`` adds one to numerator and denominator for orders above 1.
    """
    _require(pairs, "corpus_bleu")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for pair in pairs:
        hyp_len += len(pair.hypothesis)
        ref_len += len(pair.reference)
        for n in range(1, max_n + 1):
            h = _ngrams(pair.hypothesis, n)
            r = _ngrams(pair.reference, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(pair.hypothesis) - n + 1)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / max_n)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    if not hypothesis or not reference:
        return 0.0
    lcs = lcs_length(hypothesis, reference)
    return f1_from_pr(lcs / len(hypothesis), lcs / len(reference))


def rouge_l(pairs: Sequence[GenPair]) -> float:
    """Mean over pairs of the LCS-based F-measure (beta = 1)."""
    _require(pairs, "rouge_l")
    return sum(rouge_l_pair(p.hypothesis, p.reference) for p in pairs) / len(pairs)


def _common_prefix(a: str, b: str) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def _stage_match(hyp, ref, h_free, r_free, related) -> dict[int, int]:
    """Greedy left-to-right pairing of free positions under ``related``."""
    taken: set[int] = set()
    out = {}
    for i in h_free:
        for j in r_free:
            if j not in taken and related(hyp[i], ref[j]):
                out[i] = j
                taken.add(j)
                break
    return out


def _meteor_alignment(hyp: Sequence[str], ref: Sequence[str], synonyms: Mapping[str, Iterable[str]]) -> dict[int, int]:
    syn = {k: set(v) for k, v in synonyms.items()}
    stages = (
        lambda a, b: a == b,
        lambda a, b: _common_prefix(a, b) >= 4,
        lambda a, b: b in syn.get(a, ()) or a in syn.get(b, ()),
    )
    alignment: dict[int, int] = {}
    for related in stages:
        h_free = [i for i in range(len(hyp)) if i not in alignment]
        used = set(alignment.values())
        r_free = [j for j in range(len(ref)) if j not in used]
        alignment.update(_stage_match(hyp, ref, h_free, r_free, related))
    return alignment


def meteor_pair(hypothesis: Sequence[str], reference: Sequence[str], synonyms: Mapping[str, Iterable[str]] | None = None) -> float:
    alignment = _meteor_alignment(hypothesis, reference, synonyms or {})
    m = len(alignment)
    if m == 0:
        return 0.0
    p, r = m / len(hypothesis), m / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    ordered = sorted(alignment.items())
    chunks = 1 + sum(
        1 for (h0, r0), (h1, r1) in zip(ordered, ordered[1:]) if not (h1 == h0 + 1 and r1 == r0 + 1)
    )
    return f_mean * (1 - 0.5 * (chunks / m) ** 3)


def meteor(pairs: Sequence[GenPair], synonyms: Mapping[str, Iterable[str]] | None = None) -> float:
    """Simplified METEOR averaged over pairs (exact, shared-prefix, then synonym matching)."""
    _require(pairs, "meteor")
    return sum(meteor_pair(p.hypothesis, p.reference, synonyms) for p in pairs) / len(pairs)


def generation_scores(pairs: Sequence[GenPair], synonyms: Mapping[str, Iterable[str]] | None = None) -> dict[str, float]:
    return {"cbleu": corpus_bleu(pairs), "meteor": meteor(pairs, synonyms), "rougel": rouge_l(pairs)}


# -- Wilcoxon signed-rank --------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    w_plus: float
    w_minus: float


def _signed_ranks(differences: Sequence[float]) -> tuple[list[Fraction], list[bool]]:
    nonzero = [d for d in differences if d != 0]
    if not nonzero:
        raise InputError("all paired differences are zero; the test is undefined")
    order = sorted(range(len(nonzero)), key=lambda i: abs(nonzero[i]))
    ranks = [Fraction(0)] * len(nonzero)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and abs(nonzero[order[j + 1]]) == abs(nonzero[order[i]]):
            j += 1
        mean_rank = Fraction(i + 1 + j + 1, 2)
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks, [d > 0 for d in nonzero]


def _differences(x: Sequence[float], y: Sequence[float] | None) -> list[float]:
    if y is None:
        return list(x)
    if len(x) != len(y):
        raise InputError(f"paired samples differ in length: {len(x)} vs {len(y)}")
    return [a - b for a, b in zip(x, y)]


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float] | None = None, max_n: int = 25) -> WilcoxonResult:
    """Exact two-sided test; zero differences dropped, tied magnitudes get mean ranks.

    The null distribution of the positive rank sum is counted exactly with a
    subset-sum table over doubled (hence integral) ranks.
    """
    ranks, positive = _signed_ranks(_differences(x, y))
    n = len(ranks)
    if n > max_n:
        raise InputError(f"exact enumeration supports at most {max_n} non-zero differences, got {n}")
    w_plus = sum(r for r, pos in zip(ranks, positive) if pos)
    total = sum(ranks)
    w = min(w_plus, total - w_plus)
    doubled = [int(2 * r) for r in ranks]
    counts = {0: 1}
    for d in doubled:
        nxt = dict(counts)
        for s, c in counts.items():
            nxt[s + d] = nxt.get(s + d, 0) + c
        counts = nxt
    t2, w2 = int(2 * total), int(2 * w)
    extreme = sum(c for s, c in counts.items() if min(s, t2 - s) <= w2)
    return WilcoxonResult(float(w), extreme / 2**n, n, float(w_plus), float(total - w_plus))


def wilcoxon_bruteforce(x: Sequence[float], y: Sequence[float] | None = None) -> WilcoxonResult:
    """Reference implementation enumerating all 2^n sign assignments."""
    ranks, positive = _signed_ranks(_differences(x, y))
    n = len(ranks)
    total = sum(ranks)
    w_plus = sum(r for r, pos in zip(ranks, positive) if pos)
    w = min(w_plus, total - w_plus)
    extreme = 0
    for signs in product((False, True), repeat=n):
        t = sum(r for r, s in zip(ranks, signs) if s)
        if min(t, total - t) <= w:
            extreme += 1
    return WilcoxonResult(float(w), extreme / 2**n, n, float(w_plus), float(total - w_plus))


# -- round histories and best-round selection ---------------------------------


@dataclass
class RoundHistory:
    """Per-round metric values for one task; index 0 is the untrained model."""

    task: str
    rounds: list[dict[str, float]] = field(default_factory=list)

    def append(self, metrics: Mapping[str, float]) -> None:
        self.rounds.append(dict(metrics))

    @property
    def last_round(self) -> int:
        return len(self.rounds) - 1

    def series(self, metric: str) -> list[float]:
        return [r[metric] for r in self.rounds]


def _first_argmax(values: Sequence[float], offset: int) -> int:
    best = max(values)
    return offset + values.index(best)


def select_best_round(history: RoundHistory, kind: str) -> int:
    """Pick the round to keep from rounds 1..T.

    Classification keeps the highest F1. Generation keeps the round that is the
    unique best in at least two of C-BLEU / METEOR / ROUGE-L; when no round
    qualifies, the highest ROUGE-L wins (a normalized-mean fallback would pick
    round 4 instead of the published round 8 on the bundled T3 history). Ties
    go to the earliest round.
    """
    if history.last_round < 1:
        raise InputError("best-round selection needs at least one trained round")
    if kind == "classification":
        return _first_argmax(history.series("f1")[1:], 1)
    if kind != "generation":
        raise InputError(f"unknown selection kind {kind!r}")
    wins = Counter()
    for metric in GENERATION_METRICS:
        values = history.series(metric)[1:]
        best = max(values)
        if values.count(best) == 1:
            wins[values.index(best) + 1] += 1
    dominant = [r for r, c in wins.items() if c >= 2]
    if dominant:
        return dominant[0]
    return _first_argmax(history.series("rougel")[1:], 1)



def selection_kind(task: str) -> str:
    return "classification" if task == "T1" else "generation"


def task_metrics(task: str) -> tuple[str, ...]:
    return CLASSIFICATION_METRICS if task == "T1" else GENERATION_METRICS


def primary_metric(task: str) -> str:
    return "f1" if task == "T1" else "rougel"


# -- CSV -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    round: int
    task: str
    metric: str
    value_percent: float


def history_rows(history: RoundHistory) -> list[MetricRow]:
    return [
        MetricRow(i, history.task, m, 100.0 * v)
        for i, metrics in enumerate(history.rounds)
        for m, v in metrics.items()
    ]


def format_percent(value: float) -> str:
    return f"{value:.6f}"


def rows_to_csv(rows: Iterable[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow((r.round, r.task, r.metric, format_percent(r.value_percent)))
    return buf.getvalue()


def read_metric_csv(text: str) -> list[MetricRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise InputError(f"metric CSV header must be {','.join(CSV_HEADER)}")
    return [MetricRow(int(r["round"]), r["task"], r["metric"], float(r["value_percent"])) for r in reader]


def histories_from_rows(rows: Iterable[MetricRow]) -> dict[str, RoundHistory]:
    """Rebuild per-task histories from percent rows (values returned as fractions)."""
    table: dict[str, dict[int, dict[str, float]]] = {}
    for r in rows:
        table.setdefault(r.task, {}).setdefault(r.round, {})[r.metric] = r.value_percent / 100.0
    out = {}
    for task, by_round in table.items():
        rounds = sorted(by_round)
        if rounds != list(range(len(rounds))):
            raise InputError(f"{task}: rounds must be contiguous from 0, got {rounds}")
        out[task] = RoundHistory(task, [by_round[i] for i in rounds])
    return out
