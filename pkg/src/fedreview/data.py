"""Review corpora: ingestion, the resplit/partition pipeline, prompts, synthetic tasks.

Tasks: ``T1`` review necessity (yes/no), ``T2`` review comment generation,
``T3`` code refinement (input also carries the review comment).
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import CapacityError, ConfigError, DataError, FormatError
from .numerics import Rng, derive_seed
from .vocab import (
    ASK_REVIEW,
    COMMENT_CLOSE,
    COMMENT_OPEN,
    EOS,
    GEN_COMMENT,
    GEN_REFINED,
    NO,
    PATCH_CLOSE,
    PATCH_OPEN,
    YES,
    Vocabulary,
    default_code_symbols,
)

log = logging.getLogger(__name__)

TASKS = ("T1", "T2", "T3")
TASK_FIELDS = {"T1": ("label",), "T2": ("comment",), "T3": ("comment", "refined")}
MAX_PATCH_CHARS = 5000
DEFAULT_FIELD_MAP = {
    "project": "proj",
    "patch": "patch",
    "label": "y",
    "comment": "msg",
    "refined": "new_patch",
}


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class ReviewRecord:
    project: str
    patch: str
    label: str | None = None
    comment: str | None = None
    refined: str | None = None

    @property
    def patch_length(self) -> int:
        return len(self.patch)

    def missing_for(self, task: str) -> list[str]:
        missing = [] if self.patch else ["patch"]
        return missing + [f for f in TASK_FIELDS[task] if getattr(self, f) in (None, "")]


@dataclass(frozen=True)
class Corpus:
    task: str
    records: tuple[ReviewRecord, ...]
    provenance: str = "train"
    skipped: int = 0

    def __post_init__(self):
        _check_task(self.task)
        object.__setattr__(self, "records", tuple(self.records))
        for r in self.records:
            missing = r.missing_for(self.task)
            if missing:
                raise DataError(f"{self.task} record from {r.project!r} lacks {missing}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def projects(self) -> set[str]:
        return {r.project for r in self.records}

    def label_counts(self) -> Counter:
        return Counter(r.label for r in self.records)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    corpus: Corpus

    @property
    def sample_count(self) -> int:
        return len(self.corpus)

    @property
    def task(self) -> str:
        return self.corpus.task


# -- JSONL ingestion -------------------------------------------------------


def _parse_label(value) -> str | None:
    if value is None or value == "":
        return None
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("yes", "no"):
            return v
        value = int(v)
    return "yes" if int(value) else "no"


def load_jsonl(
    path: str | Path,
    task: str,
    field_map: Mapping[str, str] | None = None,
    provenance: str = "train",
) -> Corpus:
    """Read one review record per line; rows lacking task fields are skipped and counted."""
    _check_task(task)
    names = {**DEFAULT_FIELD_MAP, **(field_map or {})}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    records, skipped, rows = [], 0, 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        rows += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        try:
            label = _parse_label(obj.get(names["label"]))
        except ValueError:
            label = None
        record = ReviewRecord(
            project=str(obj.get(names["project"]) or ""),
            patch=obj.get(names["patch"]) or "",
            label=label,
            comment=obj.get(names["comment"]),
            refined=obj.get(names["refined"]),
        )
        if record.missing_for(task):
            skipped += 1
            continue
        records.append(record)
    if rows and skipped * 2 > rows:
        raise FormatError(f"{path}: {skipped} of {rows} rows lack required {task} fields")
    return Corpus(task, records, provenance, skipped)


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in corpus.records:
            obj = {"proj": r.project, "patch": r.patch}
            if r.label is not None:
                obj["y"] = 1 if r.label == "yes" else 0
            if r.comment is not None:
                obj["msg"] = r.comment
            if r.refined is not None:
                obj["new_patch"] = r.refined
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# -- resplit, disjointness, bucketing ---------------------------------------


def resplit_eval(valid: Corpus, test: Corpus) -> tuple[Corpus, Corpus]:
    """Merge validation and test, then give the larger half of projects to new-valid.

    Projects are ranked by record count (descending, ties by name) and the
    top ``ceil(n / 2)`` go to new-valid; a project never straddles the split.
    """
    if valid.task != test.task:
        raise DataError(f"cannot merge {valid.task} and {test.task} corpora")
    merged = valid.records + test.records
    if not merged:
        raise DataError("resplit_eval: merged corpus is empty")
    counts = Counter(r.project for r in merged)
    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    top = set(ranked[: math.ceil(len(ranked) / 2)])
    if len(ranked) == 1:
        log.warning("resplit_eval: single project %r, new-test is empty", ranked[0])
    new_valid = [r for r in merged if r.project in top]
    new_test = [r for r in merged if r.project not in top]
    return (
        Corpus(valid.task, new_valid, "new-valid"),
        Corpus(valid.task, new_test, "new-test"),
    )


def assert_project_disjoint(*groups: Corpus | ClientShard | Iterable[ReviewRecord]) -> set[str]:
    """Project names that occur in more than one of the given groups."""
    seen: dict[str, int] = {}
    overlap = set()
    for i, group in enumerate(groups):
        if isinstance(group, ClientShard):
            group = group.corpus
        records = group.records if isinstance(group, Corpus) else group
        for project in {r.project for r in records}:
            if project in seen and seen[project] != i:
                overlap.add(project)
            seen.setdefault(project, i)
    return overlap


def length_boundaries(lengths: Sequence[int], n_buckets: int) -> list[int]:
    """Quantile cut points: bucket ``i`` holds lengths in ``[cut[i-1], cut[i])``."""
    ordered = sorted(lengths)
    n = len(ordered)
    return [ordered[math.ceil(k * n / n_buckets)] for k in range(1, n_buckets) if math.ceil(k * n / n_buckets) < n]


def _bucket_index(length: int, cuts: Sequence[int]) -> int:
    from bisect import bisect_right

    return bisect_right(cuts, length)


def bucket_by_length(
    corpus: Corpus | Sequence[ReviewRecord],
    n_buckets: int = 10,
    cuts: Sequence[int] | None = None,
) -> list[list[ReviewRecord]]:
    """Split records into patch-length quantile groups after dropping oversized patches.

    Equal lengths always share a bucket, so a corpus of identical lengths
    lands entirely in one bucket and the rest stay empty.
    """
    if n_buckets < 1:
        raise ConfigError("n_buckets must be >= 1")
    records = corpus.records if isinstance(corpus, Corpus) else tuple(corpus)
    if not records:
        raise DataError("bucket_by_length: empty corpus")
    kept = [r for r in records if r.patch_length < MAX_PATCH_CHARS]
    if cuts is None:
        cuts = length_boundaries([r.patch_length for r in kept], n_buckets) if kept else []
    buckets: list[list[ReviewRecord]] = [[] for _ in range(n_buckets)]
    for r in kept:
        buckets[_bucket_index(r.patch_length, cuts)].append(r)
    return buckets


# -- shard sampling --------------------------------------------------------


def split_projects(corpus: Corpus, ratio: tuple[int, int], seed: int) -> tuple[Corpus, Corpus]:
    """Assign whole projects to two pools so pool sizes follow ``ratio``."""
    by_project: dict[str, list[ReviewRecord]] = defaultdict(list)
    for r in corpus.records:
        by_project[r.project].append(r)
    names = Rng(derive_seed(seed, 0x5917)).shuffled(sorted(by_project))
    share = (ratio[0] / sum(ratio), ratio[1] / sum(ratio))
    pools: tuple[list, list] = ([], [])
    for name in names:
        fill = [len(pools[i]) / share[i] for i in (0, 1)]
        pools[0 if fill[0] <= fill[1] else 1].extend(by_project[name])
    return (
        Corpus(corpus.task, pools[0], corpus.provenance),
        Corpus(corpus.task, pools[1], corpus.provenance),
    )


def _round_robin(buckets: Sequence[Sequence[ReviewRecord]], quota: int, rng: Rng, what: str) -> list[ReviewRecord]:
    queues = [rng.shuffled(list(b)) for b in buckets]
    cursor = [0] * len(queues)
    chosen: list[ReviewRecord] = []
    while len(chosen) < quota:
        progressed = False
        for i, q in enumerate(queues):
            if len(chosen) == quota:
                break
            if cursor[i] < len(q):
                chosen.append(q[cursor[i]])
                cursor[i] += 1
                progressed = True
        if not progressed:
            raise CapacityError(f"{what}: needed {quota} records, only {len(chosen)} available (short by {quota - len(chosen)})")
    return chosen


def _sample_pool(
    pool: Corpus,
    quota: int,
    cuts: Sequence[int],
    n_buckets: int,
    balance_labels: bool,
    rng: Rng,
    what: str,
) -> list[ReviewRecord]:
    if not pool.records:
        if quota:
            raise CapacityError(f"{what}: needed {quota} records, pool is empty")
        return []
    if not balance_labels:
        return _round_robin(bucket_by_length(pool, n_buckets, cuts), quota, rng, what)
    if quota % 2:
        raise ConfigError(f"{what}: label balancing needs an even quota, got {quota}")
    picked = {}
    for label in ("yes", "no"):
        subset = [r for r in pool.records if r.label == label]
        buckets = bucket_by_length(subset, n_buckets, cuts) if subset else []
        picked[label] = _round_robin(buckets, quota // 2, rng, f"{what} ({label})")
    return [r for pair in zip(picked["yes"], picked["no"]) for r in pair]


def sample_shards(
    corpus: Corpus | tuple[Corpus, Corpus],
    total: int,
    ratio: tuple[int, int] = (3, 1),
    balance_labels: bool = False,
    seed: int = 0,
    n_buckets: int = 10,
) -> tuple[ClientShard, ClientShard]:
    """Draw two project-disjoint client shards of sizes ``total`` split by ``ratio``.

    ``corpus`` may be one corpus (its projects are divided between the clients
    first) or a pair of per-client source corpora. Within each client, records
    are taken one per length bucket per pass until the quota is met.
    """
    if isinstance(corpus, Corpus):
        sources = split_projects(corpus, ratio, seed)
    else:
        sources = tuple(corpus)
    task = sources[0].task
    quota_a = total * ratio[0] // sum(ratio)
    quotas = (quota_a, total - quota_a)
    all_records = [r for s in sources for r in s.records if r.patch_length < MAX_PATCH_CHARS]
    if not all_records:
        raise DataError("sample_shards: no usable records")
    cuts = length_boundaries([r.patch_length for r in all_records], n_buckets)
    shards = []
    for cid, (pool, quota) in enumerate(zip(sources, quotas)):
        rng = Rng(derive_seed(seed, 0xC11E, cid))
        picked = _sample_pool(pool, quota, cuts, n_buckets, balance_labels, rng, f"client {cid}")
        shards.append(ClientShard(cid, Corpus(task, picked, pool.provenance)))
    return shards[0], shards[1]


def sample_test(corpus: Corpus, total: int, balance_labels: bool = False, seed: int = 0, n_buckets: int = 10) -> Corpus:
    """Length-stratified test subset drawn with the same round-robin rule."""
    kept = [r for r in corpus.records if r.patch_length < MAX_PATCH_CHARS]
    if not kept:
        raise DataError("sample_test: no usable records")
    cuts = length_boundaries([r.patch_length for r in kept], n_buckets)
    rng = Rng(derive_seed(seed, 0x7E57))
    picked = _sample_pool(corpus, total, cuts, n_buckets, balance_labels, rng, "test")
    return Corpus(corpus.task, picked, "new-test")


# -- prompts ---------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    task: str
    prompt: tuple[int, ...]
    target: tuple[int, ...]


def format_prompt(task: str, record: ReviewRecord, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Canonical prompt ids and expected completion ids for one record."""
    _check_task(task)
    missing = record.missing_for(task)
    if missing:
        raise DataError(f"cannot format {task} prompt: record lacks {missing}")
    patch = [PATCH_OPEN, *record.patch.split(), PATCH_CLOSE]
    if task == "T1":
        prompt = patch + [ASK_REVIEW]
        target = [YES if record.label == "yes" else NO]
    elif task == "T2":
        prompt = patch + [GEN_COMMENT]
        target = record.comment.split() + [EOS]
    else:
        prompt = patch + [COMMENT_OPEN, *record.comment.split(), COMMENT_CLOSE, GEN_REFINED]
        target = record.refined.split() + [EOS]
    return vocab.encode(prompt), vocab.encode(target)


def parse_prompt(ids: Sequence[int], vocab: Vocabulary) -> dict[str, str]:
    """Recover task and text segments from prompt ids (inverse of ``format_prompt``)."""
    symbols = vocab.decode(ids)
    if not symbols or symbols[0] != PATCH_OPEN or PATCH_CLOSE not in symbols:
        raise DataError("not a formatted prompt")
    close = symbols.index(PATCH_CLOSE)
    out = {"patch": " ".join(symbols[1:close])}
    rest = symbols[close + 1 :]
    if rest == [ASK_REVIEW]:
        out["task"] = "T1"
    elif rest == [GEN_COMMENT]:
        out["task"] = "T2"
    elif len(rest) >= 3 and rest[0] == COMMENT_OPEN and rest[-2:] == [COMMENT_CLOSE, GEN_REFINED]:
        out["task"] = "T3"
        out["comment"] = " ".join(rest[1:-2])
    else:
        raise DataError("unrecognized prompt suffix")
    return out


def to_examples(corpus: Corpus, vocab: Vocabulary) -> list[Example]:
    out = []
    for r in corpus.records:
        prompt, target = format_prompt(corpus.task, r, vocab)
        out.append(Example(corpus.task, tuple(prompt), tuple(target)))
    return out


# -- synthetic three-task world ---------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Desk-scale stand-in for a code-review corpus.

    A patch is buggy iff it contains one of the ``bug_fixes`` keys. The review
    comment names the offending symbol and its replacement; the refined patch
    applies that replacement. Each project draws patches from its own subset
    of the code alphabet, which makes clients heterogeneous.
    """

    vocab: tuple[str, ...] = field(default_factory=default_code_symbols)
    n_projects: int = 24
    n_test_projects: int = 8
    bug_fixes: tuple[tuple[str, str], ...] = (("c44", "c40"), ("c45", "c41"), ("c46", "c42"), ("c47", "c43"))
    min_len: int = 4
    max_len: int = 8
    symbols_per_project: int = 16
    seed: int = 42

    @property
    def fixes(self) -> dict[str, str]:
        return dict(self.bug_fixes)

    @property
    def clean_symbols(self) -> tuple[str, ...]:
        bad = self.fixes
        return tuple(s for s in self.vocab if s not in bad)

    def bug_position(self, tokens: Sequence[str]) -> int | None:
        for i, tok in enumerate(tokens):
            if tok in self.fixes:
                return i
        return None

    def comment_for(self, tokens: Sequence[str]) -> str:
        pos = self.bug_position(tokens)
        if pos is None:
            raise DataError("comment rule applies only to buggy patches")
        bad = tokens[pos]
        return f"use {self.fixes[bad]} instead of {bad}"

    def rewrite(self, tokens: Sequence[str]) -> list[str]:
        pos = self.bug_position(tokens)
        out = list(tokens)
        if pos is not None:
            out[pos] = self.fixes[out[pos]]
        return out

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.build(self.vocab)


@dataclass(frozen=True)
class SyntheticCorpora:
    train: dict[str, Corpus]
    test: dict[str, Corpus]


def _project_names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}-{i:03d}" for i in range(n)]


def _project_alphabets(spec: SyntheticTaskSpec, names: Sequence[str], rng: Rng) -> dict[str, list[str]]:
    clean = spec.clean_symbols
    k = min(spec.symbols_per_project, len(clean))
    return {name: [clean[i] for i in rng.permutation(len(clean))[:k]] for name in names}


def _project_weights(n: int) -> list[float]:
    # skewed project sizes so project ranking is meaningful
    raw = [1.0 / (i + 1) ** 0.7 for i in range(n)]
    s = sum(raw)
    return [w / s for w in raw]


def _draw_patch(spec: SyntheticTaskSpec, alphabet: Sequence[str], buggy: bool, rng: Rng) -> list[str]:
    n = rng.integer(spec.min_len, spec.max_len + 1)
    toks = [alphabet[i] for i in rng.integers(0, len(alphabet), n)]
    if buggy:
        bad = list(spec.fixes)[rng.integer(0, len(spec.fixes))]
        toks[rng.integer(0, n)] = bad
    return toks


def _make_corpus(
    spec: SyntheticTaskSpec,
    task: str,
    n: int,
    projects: Sequence[str],
    alphabets: Mapping[str, Sequence[str]],
    rng: Rng,
    provenance: str,
) -> Corpus:
    weights = _project_weights(len(projects))
    cum = [sum(weights[: i + 1]) for i in range(len(weights))]
    draws = rng.uniform(n)
    records = []
    for i in range(n):
        project = projects[min(next(j for j, c in enumerate(cum) if draws[i] < c or j == len(cum) - 1), len(projects) - 1)]
        buggy = task != "T1" or i % 2 == 0
        toks = _draw_patch(spec, alphabets[project], buggy, rng)
        patch = " ".join(toks)
        if task == "T1":
            records.append(ReviewRecord(project, patch, label="yes" if buggy else "no"))
        elif task == "T2":
            records.append(ReviewRecord(project, patch, comment=spec.comment_for(toks)))
        else:
            records.append(
                ReviewRecord(project, patch, comment=spec.comment_for(toks), refined=" ".join(spec.rewrite(toks)))
            )
    return Corpus(task, records, provenance)


def synth_generate(spec: SyntheticTaskSpec, n_per_task: int, n_test: int | None = None) -> SyntheticCorpora:
    """Deterministic train and held-out test corpora for T1/T2/T3.

    Train and test draw from disjoint project sets; T1 labels are exactly
    balanced whenever the requested size is even.
    """
    if n_per_task < 10:
        raise ConfigError("synth_generate needs n_per_task >= 10")
    n_test = n_test if n_test is not None else max(10, n_per_task // 4)
    root = Rng(spec.seed)
    train_projects = _project_names("proj", spec.n_projects)
    test_projects = _project_names("heldout", spec.n_test_projects)
    alphabets = _project_alphabets(spec, train_projects + test_projects, root.child(1))
    train, test = {}, {}
    for t_idx, task in enumerate(TASKS):
        train[task] = _make_corpus(spec, task, n_per_task, train_projects, alphabets, root.child(10, t_idx), "train")
        test[task] = _make_corpus(spec, task, n_test, test_projects, alphabets, root.child(20, t_idx), "new-test")
    return SyntheticCorpora(train, test)


def with_oversized(corpus: Corpus, n: int, project: str = "oversized") -> Corpus:
    """Copy of ``corpus`` plus ``n`` records whose patches exceed the length cap."""
    template = corpus.records[0]
    extra = [replace(template, project=f"{project}-{i}", patch=(template.patch + " ") * (MAX_PATCH_CHARS // max(1, len(template.patch)) + 1)) for i in range(n)]
    return Corpus(corpus.task, corpus.records + tuple(extra), corpus.provenance)
