import random

import pytest

from fedreview.errors import InputError
from fedreview.experiment import TaskMetricsTable
from fedreview.reporting import (
    FIXTURES,
    MODEL_ORDER,
    SUMMARY_FILE,
    collect_runs,
    compare_rows,
    load_fixture,
    metric_vector,
    ordered,
    read_labelled_csv,
    render_report,
)


def test_all_fixtures_load():
    for name in FIXTURES:
        assert load_fixture(name).rows
    with pytest.raises(InputError):
        load_fixture("table99")


def test_overall_order_and_wilcoxon():
    table = load_fixture("overall")
    shuffled = TaskMetricsTable(list(table.rows))
    random.Random(1).shuffle(shuffled.rows)
    assert [r.label for r in ordered(shuffled).rows] == list(MODEL_ORDER)
    report = render_report(shuffled)
    positions = [report.index(f"| {m} |") for m in MODEL_ORDER]
    assert positions == sorted(positions)
    comparisons = {(c.better, c.worse): c.result for c in compare_rows(table)}
    fed = comparisons["FedBEST", "Vanilla"]
    assert fed.statistic == 4 and 0.0270 <= fed.p_value <= 0.0275
    assert "| FedBEST vs Vanilla | 9 | 4 | 0.0273 |" in report


def test_metric_vector_percent():
    table = load_fixture("overall")
    assert metric_vector(table, "FedBEST")[:3] == pytest.approx([49.141, 62.900, 55.175])


def test_labelled_csv_round_trip():
    table = load_fixture("overall")
    again = read_labelled_csv(table.labelled_csv())
    assert [r.label for r in again.rows] == [r.label for r in table.rows]
    for a, b in zip(again.rows, table.rows):
        for t in a.metrics:
            assert a.metrics[t] == pytest.approx(b.metrics[t], abs=1e-9)
    with pytest.raises(InputError):
        read_labelled_csv("model,task\n")


def test_empty_directory_warns(tmp_path):
    table, warnings = collect_runs(tmp_path)
    assert not table.rows and warnings == [f"no completed runs found under {tmp_path}"]
    report = render_report(table, warnings)
    assert "## Warnings" in report and "Wilcoxon" not in report
    _, missing_dir = collect_runs(tmp_path / "nope")
    assert "no completed runs" in missing_dir[0]


def test_collect_merges_and_lists_missing(tmp_path):
    overall = load_fixture("overall")
    rows = {r.label: r for r in overall.rows}
    for sub, labels in (("individual", ("Vanilla", "FedBEST")), ("cft_reg", ("CFT-reg",))):
        t = TaskMetricsTable()
        for label in labels:
            t.add(label, None, rows[label].metrics)
        (tmp_path / sub).mkdir()
        (tmp_path / sub / SUMMARY_FILE).write_text(t.labelled_csv())
    table, warnings = collect_runs(tmp_path)
    assert [r.label for r in ordered(table).rows] == ["Vanilla", "FedBEST", "CFT-reg"]
    assert warnings == ["missing runs: Central, TOC, COT, CAT, CFT"]
    pairs = [(c.better, c.worse) for c in compare_rows(table)]
    assert pairs == [("FedBEST", "Vanilla"), ("CFT-reg", "FedBEST")]


def test_zero_difference_pair_is_skipped(caplog):
    t = TaskMetricsTable()
    metrics = load_fixture("overall").rows[0].metrics
    t.add("FedBEST", None, metrics)
    t.add("Vanilla", None, metrics)
    assert compare_rows(t) == []
    assert "skipping FedBEST vs Vanilla" in caplog.text
