"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line, and the lines are
repeated in the terminal summary.
"""

import contextlib
import math
import threading
import time
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fedreview.config import ExperimentConfig
from fedreview.data import (
    MAX_PATCH_CHARS,
    Corpus,
    assert_project_disjoint,
    resplit_eval,
    sample_shards,
    sample_test,
    synth_generate,
    with_oversized,
)
from fedreview.experiment import run_individual
from fedreview.federation import (
    AdapterUpdate,
    Client,
    FedConfig,
    TcpServerTransport,
    fedavg,
    make_evaluator,
    participate_all,
    run_federation,
    serve,
)
from fedreview.lora import (
    LoraConfig,
    expected_entries,
    export_state,
    init_adapters,
    merge,
    param_count,
    trainable_fraction,
)
from fedreview.metrics import (
    GenPair,
    corpus_bleu,
    f1_from_pr,
    history_rows,
    meteor_pair,
    rouge_l_pair,
    rows_to_csv,
    select_best_round,
    wilcoxon_signed_rank,
)
from fedreview.model import ModelGeometry, forward, init_weights, loss_and_grads
from fedreview.multitask import run_strategy
from fedreview.pipeline import base_model, prepare_data
from fedreview.reporting import fixture_histories, load_fixture, metric_vector
from fedreview.training import DESK_HYPER
from oracles import (
    brute_fedavg,
    exhaustive_rouge_errors,
    f1_percent,
    finite_difference_errors,
    random_adapters,
    random_batch,
    wilcoxon_enumerate,
)


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS when the block finishes cleanly, FAIL with the reason otherwise."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        line = f"criterion {number}: FAIL  {title}  ({reason})"
        raise
    else:
        detail = f"  [{'; '.join(notes)}]" if notes else ""
        line = f"criterion {number}: PASS  {title}{detail}"
    finally:
        print(line)
        ACCEPTANCE_LINES.append(line)


def test_criterion_01_f1_recomposition():
    with criterion(1, "F1 recomposes from P and R on every fixture row") as notes:
        start = time.perf_counter()
        checked = 0
        for name in ("round_metrics", "individual_models", "toc", "cot", "cat", "cft", "cft_reg", "overall"):
            for row in load_fixture(name).rows:
                m = row.metrics.get("T1", {})
                if {"precision", "recall", "f1"} <= set(m):
                    p, r = 100 * m["precision"], 100 * m["recall"]
                    got = f1_from_pr(p, r)
                    assert abs(got - f1_percent(p, r)) < 1e-9
                    assert abs(got - 100 * m["f1"]) <= 0.002 + 1e-9, f"{name} / {row.label}"
                    checked += 1
        elapsed = time.perf_counter() - start
        assert checked > 0 and elapsed < 1.0
        notes.append(f"{checked} rows, {elapsed:.3f}s")


def test_criterion_02_wilcoxon():
    with criterion(2, "exact Wilcoxon on FedBEST minus Vanilla") as notes:
        start = time.perf_counter()
        table = load_fixture("overall")
        res = wilcoxon_signed_rank(metric_vector(table, "FedBEST"), metric_vector(table, "Vanilla"))
        assert res.statistic == 4
        assert 0.0270 <= res.p_value <= 0.0275
        rnd = np.random.default_rng(2)
        for n in range(1, 13):
            diffs = (rnd.choice([-1, 1], n) * rnd.choice([0.5, 1.0, 1.5, 2.0, 3.0], n)).tolist()
            got = wilcoxon_signed_rank(diffs)
            assert (got.statistic, got.p_value) == wilcoxon_enumerate(diffs)
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0
        notes.append(f"W={res.statistic:g}, p={res.p_value:.5f}, {elapsed:.3f}s")


def test_criterion_03_lora_accounting():
    with criterion(3, "adapter parameter accounting on the 8B geometry"):
        geo = ModelGeometry.preset("llama3-8b-accounting")
        cases = [
            (LoraConfig(("k", "v"), 8), 2_621_440, 0.0326),
            (LoraConfig(("v",), 8), 1_310_720, 0.0163),
            (LoraConfig(("q", "o"), 16), 8_388_608, 0.104),
        ]
        for cfg, count, percent in cases:
            assert param_count(geo, cfg) == count
            assert abs(trainable_fraction(geo, cfg) - percent) <= 0.001
        kv = LoraConfig(("k", "v"), 8)
        assert len(expected_entries(geo, kv)) == geo.n_layers * 2 * 2 == 128
        toy = ModelGeometry.preset("toy")
        adapters = init_adapters(toy, kv, 0)
        assert len(export_state(adapters)) == toy.n_layers * 2 * 2


def test_criterion_04_gradients():
    with criterion(4, "adapter gradients match central differences") as notes:
        start = time.perf_counter()
        toy = ModelGeometry.preset("toy")
        config = LoraConfig(("q", "k", "v", "o"), 8)
        worst = 0.0
        for seed in (1, 2, 3):
            weights = init_weights(toy, seed)
            adapters = random_adapters(toy, config, seed)
            batch = random_batch(toy.vocab_size, 2, 8, 3, seed)
            _, grads = loss_and_grads(weights, adapters, batch)
            worst = max(worst, float(finite_difference_errors(weights, adapters, batch, grads, h=1e-4).max()))
        elapsed = time.perf_counter() - start
        assert worst < 1e-4
        assert elapsed < 60
        notes.append(f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_05_merge_equivalence():
    with criterion(5, "attached and merged adapters give the same logits") as notes:
        toy = ModelGeometry.preset("toy")
        base = init_weights(toy, 42)
        config = LoraConfig(("q", "k", "v", "o"), 8)
        worst = 0.0
        for seed in range(20):
            adapters = random_adapters(toy, config, 100 + seed)
            batch = random_batch(toy.vocab_size, 3, 10, 4, seed)
            diff = np.abs(forward(merge(base, adapters), None, batch) - forward(base, adapters, batch)).max()
            worst = max(worst, float(diff))
        assert worst < 1e-6
        assert merge(base, init_adapters(toy, config, 7)).equals(base)
        notes.append(f"max abs diff {worst:.1e}")


class _ServerThread(threading.Thread):
    def __init__(self, *args):
        super().__init__(daemon=True)
        self.args = args
        self.result = self.error = None

    def run(self):
        try:
            self.result = serve(*self.args)
        except BaseException as exc:
            self.error = exc


def _history_csv(result, task):
    return rows_to_csv(history_rows(result.histories()[task]))


def test_criterion_06_transport_equivalence(base, corpora, vocab):
    with criterion(6, "in-process and TCP runs agree; client order is irrelevant") as notes:
        task = "T2"
        shards = sample_shards(corpora.train[task], 48, seed=42)
        clients = [Client.from_shard(s, vocab) for s in shards]
        evaluate = make_evaluator({task: sample_test(corpora.test[task], 12, seed=42)}, vocab, max_new=12)
        config = FedConfig(LoraConfig(("k", "v"), 8), rounds=3, hyper=DESK_HYPER, seed=42, timeout=60.0)

        local = run_federation(base, clients, config, evaluate)
        transport = TcpServerTransport("127.0.0.1:0", 2, config.timeout)
        server = _ServerThread(transport, base, config, evaluate)
        server.start()
        participate_all(transport.address, clients, base, config)
        server.join(120)
        assert server.error is None and server.result is not None
        assert _history_csv(server.result, task) == _history_csv(local, task)

        flipped = run_federation(base, clients[::-1], config, evaluate)
        worst = 0.0
        for a, b in zip(local.records, flipped.records):
            for metric, value in a.metrics[task].items():
                worst = max(worst, abs(value - b.metrics[task][metric]))
            if a.aggregate is not None:
                for (na, ma), (nb, mb) in zip(a.aggregate, b.aggregate):
                    assert na == nb
                    worst = max(worst, float(np.abs(ma - mb).max()))
        assert worst <= 1e-12
        notes.append(f"reordered max diff {worst:.1e}")


def test_criterion_07_fedavg():
    with criterion(7, "FedAvg against hand values and a brute-force mean"):
        def update(cid, value, count):
            return AdapterUpdate(cid, 1, count, (("m", np.full((2, 2), value)),))

        ups = [update(0, 1.0, 19_500), update(1, 3.0, 6_500)]
        assert np.all(fedavg(ups, "sample_weighted")[0][1] == 1.5)
        assert np.all(fedavg(ups, "uniform")[0][1] == 2.0)
        rnd = np.random.default_rng(7)
        for _ in range(10):
            k = int(rnd.integers(2, 7))
            counts = rnd.integers(1, 500, k).tolist()
            entry_sets = [[("a", rnd.normal(size=(3, 2))), ("b", rnd.normal(size=(2, 4)))] for _ in range(k)]
            updates = [AdapterUpdate(i, 1, c, tuple(e)) for i, (c, e) in enumerate(zip(counts, entry_sets))]
            for policy, weights in (("sample_weighted", counts), ("uniform", None)):
                got = fedavg(updates, policy)
                for (gn, gm), (en, em) in zip(got, brute_fedavg(entry_sets, weights)):
                    assert gn == en
                    assert np.allclose(gm, em, rtol=0, atol=1e-12)


def test_criterion_08_partitioner(synth_spec):
    with criterion(8, "project-disjoint 3:1 shards, balanced labels, long patches excluded, top-half resplit"):
        corpora = synth_generate(synth_spec, 600, 200)
        for task in ("T1", "T2", "T3"):
            balance = task == "T1"
            train = with_oversized(corpora.train[task], 40)
            assert sum(r.patch_length >= MAX_PATCH_CHARS for r in train.records) == 40
            a, b = sample_shards(train, 400, balance_labels=balance, seed=42)
            test = sample_test(corpora.test[task], 40, balance_labels=balance, seed=42)
            assert (a.sample_count, b.sample_count) == (300, 100)
            assert assert_project_disjoint(a, b, test) == set()
            for records in (a.corpus.records, b.corpus.records, test.records):
                assert all(r.patch_length < MAX_PATCH_CHARS for r in records)
                if balance:
                    labels = Counter(r.label for r in records)
                    assert labels["yes"] == labels["no"]

        pool = corpora.test["T2"].records
        projects = sorted({r.project for r in pool})
        half = set(projects[::2])
        valid = Corpus("T2", tuple(r for r in pool if r.project in half))
        test = Corpus("T2", tuple(r for r in pool if r.project not in half))
        new_valid, new_test = resplit_eval(valid, test)
        counts = Counter(r.project for r in pool)
        ranked = sorted(counts, key=lambda p: (-counts[p], p))
        top = set(ranked[: math.ceil(len(ranked) / 2)])
        assert new_valid.projects == top
        assert new_test.projects == set(ranked) - top


def test_criterion_09_metric_oracles():
    with criterion(9, "BLEU, ROUGE-L and METEOR against oracles") as notes:
        same = [GenPair("a b c d e f".split(), "a b c d e f".split()), GenPair("x y z w".split(), "x y z w".split())]
        assert corpus_bleu(same) == 1.0
        assert corpus_bleu([GenPair("a b c e".split(), "a b c d".split())]) == 0.0
        pairs, worst = exhaustive_rouge_errors(rouge_l_pair, 8, canonical_hypotheses=True)
        assert worst <= 1e-12
        assert meteor_pair("w x y z".split(), "w x y z".split()) == 0.9921875
        notes.append(f"{pairs} ROUGE-L pairs")


@pytest.fixture(scope="module")
def desk_run():
    """Individual, TOC and CFT-reg federations at seed 42 on the toy geometry."""
    start = time.perf_counter()
    cfg = ExperimentConfig(seed=42, rounds=5)
    data = prepare_data(cfg)
    base = base_model(cfg)
    individual = {
        t: run_individual(t, base, data.shards[t], data.tests[t], cfg.fed_config(t), data.vocab) for t in cfg.tasks
    }
    strategies = {
        s: run_strategy(replace(cfg, strategy=s).plan(), base, data.shards, data.tests, data.vocab)
        for s in ("toc", "cft_reg")
    }
    return cfg, individual, strategies, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_10_desk_reproduction(desk_run):
    with criterion(10, "desk-scale directional reproduction") as notes:
        cfg, individual, strategies, elapsed = desk_run
        assert cfg.geometry == "toy" and len(cfg.fed_config("T1").lora.targets) > 0
        primary = {"T1": "f1", "T2": "rougel", "T3": "rougel"}
        fed_best = {}
        for t, result in individual.items():
            best = result.best_round(t)
            fed_best[t] = result.records[best].metrics[t][primary[t]]
            vanilla = result.records[0].metrics[t][primary[t]]
            notes.append(f"{t} {100 * vanilla:.2f}->{100 * fed_best[t]:.2f}")
            assert fed_best[t] > vanilla, f"(a) {t} FedBEST does not beat vanilla"

        toc = strategies["toc"]
        toc_final = toc.lineages[list(toc.lineages)[-1]].records[-1].metrics["T1"]["f1"]
        notes.append(f"TOC T1 F1 {100 * toc_final:.2f}")
        assert 100 * toc_final <= 100 * fed_best["T1"] - 10, "(b) no forgetting gap on T1"

        reg = strategies["cft_reg"]
        cls = reg.lineages["classification"]
        assert _history_csv(cls, "T1") == _history_csv(individual["T1"], "T1"), "(c) classification differs"
        assert reg.best_rounds["T1"] == individual["T1"].best_round("T1")

        reg_t3 = reg.best_metrics()["T3"]["rougel"]
        notes.append(f"CFT-reg T3 {100 * reg_t3:.2f}")
        assert 100 * reg_t3 >= 100 * fed_best["T3"] - 1, "(d) CFT-reg T3 ROUGE-L too low"
        notes.append(f"{elapsed:.0f}s")
        assert elapsed < 30 * 60


def test_criterion_11_best_round_selection():
    with criterion(11, "best-round selection on the published round history") as notes:
        h = fixture_histories()
        got = {
            "T1": select_best_round(h["T1"], "classification"),
            "T2": select_best_round(h["T2"], "generation"),
            "T3": select_best_round(h["T3"], "generation"),
        }
        assert got == {"T1": 1, "T2": 1, "T3": 8}
        notes.append(str(got))
