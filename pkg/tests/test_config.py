import pytest

from fedreview.config import SEED_ENV, ExperimentConfig, load_config, parse_config
from fedreview.errors import ConfigError
from fedreview.federation import AggregationPolicy
from fedreview.lora import MULTITASK_PROFILE, TASK_ADAPTER_PROFILE, LoraConfig
from fedreview.multitask import StrategyKind
from fedreview.training import DESK_HYPER, TrainHyper


def write(tmp_path, text, name="c.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults():
    cfg = load_config(None, environ={})
    assert cfg == ExperimentConfig()
    assert cfg.seed == 42 and cfg.rounds == 20 and cfg.policy is AggregationPolicy.SAMPLE_WEIGHTED
    assert cfg.train == DESK_HYPER
    assert cfg.data.ratio == (3, 1) and cfg.data.n_buckets == 10
    assert dict(cfg.task_lora) == TASK_ADAPTER_PROFILE and cfg.shared_lora == MULTITASK_PROFILE


def test_full_file(tmp_path):
    path = write(tmp_path, """
seed = 7
rounds = 3
strategy = "cat"
policy = "uniform"
cat_weighting = "sample"
output_dir = "out"
timeout = 5

[train]
lr = 0.02

[lora.shared]
targets = ["q", "v"]
rank = 4

[data]
total = 80
ratio = [1, 1]

[data.synthetic]
n_per_task = 100
""")
    cfg = load_config(path, environ={})
    assert (cfg.seed, cfg.rounds, cfg.strategy, cfg.timeout) == (7, 3, "cat", 5.0)
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.train == TrainHyper(lr=0.02, batch_size=8)
    assert cfg.shared_lora == LoraConfig(("q", "v"), 4)
    assert (cfg.data.total, cfg.data.ratio, cfg.data.synthetic.n_per_task) == (80, (1, 1), 100)
    plan = cfg.plan()
    assert plan.strategy is StrategyKind.CAT and plan.rounds == 3 and plan.hyper == cfg.train
    fc = cfg.fed_config("T2")
    assert fc.lora == TASK_ADAPTER_PROFILE["T2"] and fc.policy is AggregationPolicy.UNIFORM and fc.seed == 7


def test_accounting_geometry_keeps_large_model_recipe():
    assert parse_config({"geometry": "llama3-8b-accounting", "train": {"epochs": 2}}).train == TrainHyper(epochs=2)


def test_env_seed(tmp_path):
    path = write(tmp_path, "seed = 1\n")
    assert load_config(path, environ={SEED_ENV: "99"}).seed == 99
    assert load_config(path, environ={SEED_ENV: ""}).seed == 1
    with pytest.raises(ConfigError, match=SEED_ENV):
        load_config(path, environ={SEED_ENV: "x"})


@pytest.mark.parametrize(
    "text, match",
    [
        ("colour = 1\n", "top level: colour"),
        ("[train]\nlearning_rate = 1.0\n", r"\[train\]: learning_rate"),
        ("[lora.T4]\nrank = 2\n", r"\[lora\]"),
        ("[lora.T1]\nranks = 2\n", r"\[lora.T1\]"),
        ("[data]\nsize = 2\n", r"\[data\]"),
        ("[data.field_map]\nauthor = 'a'\n", "field_map"),
        ("rounds = 'five'\n", "rounds must be int"),
        ("rounds = 0\n", "rounds must be >= 1"),
        ("strategy = 'fedprox'\n", "unknown strategy"),
        ("geometry = 'huge'\n", "unknown geometry"),
        ("tasks = ['T1']\nstrategy = 'toc'\n", "needs all three tasks"),
        ("tasks = ['T1', 'T1']\n", "distinct"),
        ("policy = 'median'\n", "median"),
        ("[data]\nratio = [3]\n", "ratio"),
        ("[data]\ntotal = 0\n", "total must be >= 1"),
        ("[data]\nsource = 'jsonl'\n", "no \\[data.files\\]"),
        ("[data.files.T1]\ntest = 't'\n", "exactly one of"),
        ("[data.files.T1]\ntest = 't'\nclients = ['a']\n", "two paths"),
        ("[data.files.T1]\nclients = ['a', 'b']\n", "test is required"),
        ("seed = \n", "invalid TOML"),
    ],
)
def test_rejections(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text), environ={})


def test_unreadable(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml", environ={})


def test_relative_paths_resolve_against_config(tmp_path):
    path = write(tmp_path, """
tasks = ["T1"]
[data]
source = "jsonl"
[data.files.T1]
test = "t1_test.jsonl"
clients = ["a.jsonl", "/abs/b.jsonl"]
""")
    cfg = load_config(path, environ={})
    files = cfg.data.files["T1"]
    assert files.test == str(tmp_path / "t1_test.jsonl")
    assert files.clients == (str(tmp_path / "a.jsonl"), "/abs/b.jsonl")
