"""Experiment configuration: TOML file, validated eagerly, unknown keys rejected.

Example::

    seed = 42
    geometry = "toy"
    tasks = ["T1", "T2", "T3"]
    strategy = "individual"
    rounds = 5
    output_dir = "runs"

    [train]
    lr = 0.01
    batch_size = 8

    [data]
    source = "synthetic"
    total = 4000

    [lora.T1]
    targets = ["k", "v"]
    rank = 8
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DEFAULT_FIELD_MAP, TASKS
from .errors import ConfigError
from .federation import AggregationPolicy, FedConfig
from .lora import MULTITASK_PROFILE, TASK_ADAPTER_PROFILE, LoraConfig
from .model import PRESETS, ModelGeometry
from .multitask import CatWeighting, MultiTaskPlan, StrategyKind
from .training import TrainHyper, default_hyper

SEED_ENV = "FEDREVIEW_SEED"
STRATEGIES = ("individual",) + tuple(s.value for s in StrategyKind)


def _reject_unknown(section: str, given: Mapping[str, Any], allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        where = f"[{section}]" if section else "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {', '.join(unknown)}")


def _typed(section: str, key: str, value, kind):
    ok = isinstance(value, kind) and not (kind in (int, float) and isinstance(value, bool))
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not ok:
        raise ConfigError(f"{section}.{key} must be {getattr(kind, '__name__', kind)}, got {value!r}")
    return value


def _section(raw: Mapping[str, Any], name: str, cls, defaults=None):
    """Build a flat dataclass from a TOML table, checking names and scalar types."""
    given = raw.get(name, {})
    if not isinstance(given, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    specs = {f.name: f for f in fields(cls)}
    _reject_unknown(name, given, specs)
    defaults = cls() if defaults is None else defaults
    values = {}
    for key, value in given.items():
        default = getattr(defaults, key)
        if isinstance(default, bool):
            values[key] = _typed(name, key, value, bool)
        elif isinstance(default, int):
            values[key] = _typed(name, key, value, int)
        elif isinstance(default, float):
            values[key] = _typed(name, key, value, float)
        else:
            values[key] = value
    return replace(defaults, **values)


@dataclass(frozen=True)
class SyntheticSettings:
    n_per_task: int = 6000
    n_test: int = 400
    n_projects: int = 24
    n_test_projects: int = 8
    min_len: int = 4
    max_len: int = 8


@dataclass(frozen=True)
class TaskFiles:
    """JSONL inputs for one task: two client corpora, or one corpus split by project."""

    test: str
    clients: tuple[str, ...] = ()
    train: str | None = None
    valid: str | None = None


@dataclass(frozen=True)
class DataSettings:
    source: str = "synthetic"
    total: int = 4000
    test_total: int = 200
    ratio: tuple[int, int] = (3, 1)
    n_buckets: int = 10
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    files: Mapping[str, TaskFiles] = field(default_factory=dict)
    field_map: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_FIELD_MAP))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 42
    geometry: str = "toy"
    tasks: tuple[str, ...] = TASKS
    strategy: str = "individual"
    rounds: int = 20
    policy: AggregationPolicy = AggregationPolicy.SAMPLE_WEIGHTED
    continue_adapters: bool = False
    cat_weighting: CatWeighting = CatWeighting.TASK_UNIFORM
    with_central: bool = False
    jobs: int = 1
    timeout: float = 300.0
    max_new_tokens: int = 24
    output_dir: Path = Path("runs")
    train: TrainHyper | None = None  # None picks the geometry's default recipe
    task_lora: Mapping[str, LoraConfig] = field(default_factory=lambda: dict(TASK_ADAPTER_PROFILE))
    shared_lora: LoraConfig = MULTITASK_PROFILE
    data: DataSettings = field(default_factory=DataSettings)

    def __post_init__(self):
        if self.geometry not in PRESETS:
            raise ConfigError(f"unknown geometry {self.geometry!r}; choose from {sorted(PRESETS)}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not self.tasks or any(t not in TASKS for t in self.tasks) or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"tasks must be distinct entries of {TASKS}, got {list(self.tasks)}")
        if self.strategy != "individual" and sorted(self.tasks) != sorted(TASKS):
            raise ConfigError(f"strategy {self.strategy} needs all three tasks")
        for name in ("rounds", "jobs", "max_new_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.train is None:
            object.__setattr__(self, "train", default_hyper(self.geometry))

    @property
    def geometry_spec(self) -> ModelGeometry:
        return ModelGeometry.preset(self.geometry)

    def fed_config(self, task: str | None = None) -> FedConfig:
        lora = self.task_lora[task] if task else self.shared_lora
        return FedConfig(
            lora, self.rounds, self.policy, self.train, self.seed, self.continue_adapters, self.jobs, self.timeout
        )

    def plan(self) -> MultiTaskPlan:
        return MultiTaskPlan(
            StrategyKind(self.strategy),
            self.rounds,
            tuple(self.tasks),
            dict(self.task_lora),
            self.shared_lora,
            self.policy,
            self.cat_weighting,
            self.train,
            self.seed,
            self.jobs,
        )


_TOP_KEYS = {
    "seed", "geometry", "tasks", "strategy", "rounds", "policy", "continue_adapters", "cat_weighting",
    "with_central", "jobs", "timeout", "max_new_tokens", "output_dir", "train", "lora", "data",
}
_LORA_KEYS = {"targets", "rank", "alpha", "dropout"}


def _lora(name: str, raw: Mapping[str, Any], default: LoraConfig) -> LoraConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[lora.{name}] must be a table")
    _reject_unknown(f"lora.{name}", raw, _LORA_KEYS)
    targets = raw.get("targets", default.targets)
    if not isinstance(targets, (list, tuple)) or not all(isinstance(t, str) for t in targets):
        raise ConfigError(f"lora.{name}.targets must be a list of strings")
    return LoraConfig(
        tuple(targets),
        _typed(f"lora.{name}", "rank", raw.get("rank", default.rank), int),
        _typed(f"lora.{name}", "alpha", raw.get("alpha", default.alpha), float),
        _typed(f"lora.{name}", "dropout", raw.get("dropout", default.dropout), float),
    )


def _data(raw: Mapping[str, Any], tasks) -> DataSettings:
    if not isinstance(raw, Mapping):
        raise ConfigError("[data] must be a table")
    _reject_unknown("data", raw, {f.name for f in fields(DataSettings)})
    defaults = DataSettings()
    source = raw.get("source", defaults.source)
    if source not in ("synthetic", "jsonl"):
        raise ConfigError(f"data.source must be 'synthetic' or 'jsonl', got {source!r}")
    ratio = raw.get("ratio", list(defaults.ratio))
    if not (isinstance(ratio, (list, tuple)) and len(ratio) == 2 and all(isinstance(x, int) and x > 0 for x in ratio)):
        raise ConfigError(f"data.ratio must be two positive integers, got {ratio!r}")
    synthetic = _section(raw, "synthetic", SyntheticSettings)
    files = {}
    for task, spec in raw.get("files", {}).items():
        if task not in TASKS or not isinstance(spec, Mapping):
            raise ConfigError(f"[data.files.{task}] must name a task table")
        _reject_unknown(f"data.files.{task}", spec, {f.name for f in fields(TaskFiles)})
        if "test" not in spec:
            raise ConfigError(f"data.files.{task}.test is required")
        clients = tuple(spec.get("clients", ()))
        if bool(clients) == bool(spec.get("train")):
            raise ConfigError(f"data.files.{task} needs exactly one of 'clients' (two paths) or 'train'")
        if clients and len(clients) != 2:
            raise ConfigError(f"data.files.{task}.clients must list two paths")
        files[task] = TaskFiles(spec["test"], clients, spec.get("train"), spec.get("valid"))
    if source == "jsonl":
        missing = [t for t in tasks if t not in files]
        if missing:
            raise ConfigError(f"data.source = 'jsonl' but no [data.files] for {', '.join(missing)}")
    field_map = dict(DEFAULT_FIELD_MAP)
    given_map = raw.get("field_map", {})
    _reject_unknown("data.field_map", given_map, DEFAULT_FIELD_MAP)
    field_map.update(given_map)
    scalars = {k: raw[k] for k in ("total", "test_total", "n_buckets") if k in raw}
    for k, v in scalars.items():
        if _typed("data", k, v, int) < 1:
            raise ConfigError(f"data.{k} must be >= 1")
    return DataSettings(source, ratio=tuple(ratio), synthetic=synthetic, files=files, field_map=field_map, **scalars)


def parse_config(raw: Mapping[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    _reject_unknown("", raw, _TOP_KEYS)
    kwargs: dict[str, Any] = {}
    scalar_types = {"seed": int, "geometry": str, "strategy": str, "rounds": int, "continue_adapters": bool,
                    "with_central": bool, "jobs": int, "timeout": float, "max_new_tokens": int}
    for key, kind in scalar_types.items():
        if key in raw:
            kwargs[key] = _typed("config", key, raw[key], kind)
    if "tasks" in raw:
        if not isinstance(raw["tasks"], list):
            raise ConfigError("tasks must be a list")
        kwargs["tasks"] = tuple(raw["tasks"])
    try:
        if "policy" in raw:
            kwargs["policy"] = AggregationPolicy(raw["policy"])
        if "cat_weighting" in raw:
            kwargs["cat_weighting"] = CatWeighting(raw["cat_weighting"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if "output_dir" in raw:
        out = Path(_typed("config", "output_dir", raw["output_dir"], str))
        kwargs["output_dir"] = out if out.is_absolute() or base_dir is None else base_dir / out
    if "train" in raw:
        geometry = kwargs.get("geometry", "toy")
        kwargs["train"] = _section(raw, "train", TrainHyper, default_hyper(geometry) if geometry in PRESETS else None)
    lora_raw = raw.get("lora", {})
    _reject_unknown("lora", lora_raw, set(TASKS) | {"shared"})
    kwargs["task_lora"] = {t: _lora(t, lora_raw.get(t, {}), TASK_ADAPTER_PROFILE[t]) for t in TASKS}
    kwargs["shared_lora"] = _lora("shared", lora_raw.get("shared", {}), MULTITASK_PROFILE)
    kwargs["data"] = _data(raw.get("data", {}), kwargs.get("tasks", TASKS))
    if base_dir is not None:
        kwargs["data"] = _resolve_paths(kwargs["data"], base_dir)
    return ExperimentConfig(**kwargs)


def _resolve_paths(data: DataSettings, base_dir: Path) -> DataSettings:
    def fix(p):
        return None if p is None else str(p if Path(p).is_absolute() else base_dir / p)

    files = {
        t: TaskFiles(fix(f.test), tuple(fix(c) for c in f.clients), fix(f.train), fix(f.valid))
        for t, f in data.files.items()
    }
    return DataSettings(data.source, data.total, data.test_total, data.ratio, data.n_buckets, data.synthetic, files, data.field_map)


def load_config(path: str | Path | None, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read a TOML config (or defaults when ``path`` is None); ``FEDREVIEW_SEED`` overrides the seed."""
    raw: dict[str, Any] = {}
    base_dir = None
    if path is not None:
        p = Path(path)
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {p}: {exc}") from exc
        base_dir = p.resolve().parent
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return parse_config(raw, base_dir)
