"""Strict JSON run configuration shared by every CLI command."""

import dataclasses
import json
import os

from .adapt import AdaptConfig
from .augmix import AugMixConfig
from .corruptions import CORRUPTION_NAMES, CorruptionSpec
from .model import ARCHITECTURES, DEFAULT_EXIT_FRACTIONS
from .strategies import DEFAULT_GRIDS, STRATEGY_KINDS
from .train import TrainConfig

CONFIG_SCHEMA_VERSION = 1


def _take(section, name, allowed):
    """Reject unknown keys so typos fail loudly instead of silently
    falling back to defaults."""
    unknown = set(section) - set(allowed)
    if unknown:
        raise ValueError(
            f"unknown key(s) in {name}: {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}")
    return section


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    kind: str = "minishapes"
    n_train: int = 2000
    n_test: int = 400
    n_val: int = 200
    num_classes: int = 10
    train_path: str = None
    test_path: str = None

    def __post_init__(self):
        if self.kind not in ("minishapes", "cifar10_bin"):
            raise ValueError(f"dataset.kind must be minishapes or "
                             f"cifar10_bin, got {self.kind!r}")
        if self.kind == "cifar10_bin":
            for field in ("train_path", "test_path"):
                path = getattr(self, field)
                if path is None:
                    raise ValueError(f"dataset.{field} required for cifar10_bin")
                if not os.path.exists(path):
                    raise ValueError(f"dataset.{field} does not exist: {path}")
        if self.n_val >= self.n_train:
            raise ValueError(
                f"dataset.n_val ({self.n_val}) must be smaller than "
                f"n_train ({self.n_train})")


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    arch: str = "convnet8"
    exit_fractions: tuple = tuple(DEFAULT_EXIT_FRACTIONS)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"model.arch must be one of "
                             f"{sorted(ARCHITECTURES)}, got {self.arch!r}")
        object.__setattr__(self, "exit_fractions",
                           tuple(float(f) for f in self.exit_fractions))


@dataclasses.dataclass(frozen=True)
class StrategySpec:
    kinds: tuple = STRATEGY_KINDS
    grids: dict = None
    k: int = None  # None -> default_k(num_classes)

    def __post_init__(self):
        for kind in self.kinds:
            if kind not in STRATEGY_KINDS:
                raise ValueError(f"strategies.kinds entry {kind!r} not in "
                                 f"{STRATEGY_KINDS}")
        grids = dict(DEFAULT_GRIDS)
        for kind, grid in (self.grids or {}).items():
            if kind not in DEFAULT_GRIDS:
                raise ValueError(f"strategies.grids has no grid for {kind!r}")
            grids[kind] = tuple(grid)
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "kinds", tuple(self.kinds))


@dataclasses.dataclass(frozen=True)
class EvalSpec:
    split: str = "test"
    kind: str = "confidence"
    threshold: float = 0.8

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"eval.kind must be one of {STRATEGY_KINDS}, "
                             f"got {self.kind!r}")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    augmix_enabled: bool = False
    augmix: AugMixConfig = AugMixConfig()
    adapt: AdaptConfig = AdaptConfig()
    corruptions: tuple = ()
    strategies: StrategySpec = StrategySpec()
    include_repr: bool = True
    eval: EvalSpec = EvalSpec()


def _corruption_specs(entries):
    specs = []
    if entries is None:
        entries = [{"name": name} for name in CORRUPTION_NAMES]
    for i, entry in enumerate(entries):
        entry = _take(dict(entry), f"corruptions[{i}]", ("name", "severities"))
        severities = entry.get("severities", (1, 2, 3, 4, 5))
        for severity in severities:
            specs.append(CorruptionSpec(entry["name"], int(severity)))
    return tuple(specs)


def parse_run_config(doc: dict) -> RunConfig:
    doc = _take(dict(doc), "config",
                ("schema_version", "seed", "out_dir", "dataset", "model",
                 "train", "augmix", "adapt", "corruptions", "strategies",
                 "trace", "eval"))
    version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema_version {version}")

    dataset = DatasetSpec(**_take(
        doc.get("dataset", {}), "dataset",
        ("kind", "n_train", "n_test", "n_val", "num_classes",
         "train_path", "test_path")))
    model = ModelSpec(**_take(doc.get("model", {}), "model",
                              ("arch", "exit_fractions")))
    train = TrainConfig(**_take(
        doc.get("train", {}), "train",
        ("epochs", "lr", "momentum", "decay_factor", "decay_epochs",
         "batch_size", "seed", "exit_weights")))
    augmix_doc = dict(doc.get("augmix", {}))
    augmix_enabled = bool(augmix_doc.pop("enabled", False))
    augmix = AugMixConfig(**_take(
        augmix_doc, "augmix",
        ("width", "depth_min", "depth_max", "alpha", "jsd_weight")))
    adapt = AdaptConfig(**_take(doc.get("adapt", {}), "adapt",
                                ("batch_size",)))
    strategies = StrategySpec(**_take(doc.get("strategies", {}), "strategies",
                                      ("kinds", "grids", "k")))
    trace_doc = _take(doc.get("trace", {}), "trace", ("include_repr",))
    eval_spec = EvalSpec(**_take(doc.get("eval", {}), "eval",
                                 ("split", "kind", "threshold")))
    return RunConfig(
        seed=int(doc.get("seed", 0)),
        out_dir=str(doc.get("out_dir", "runs/out")),
        dataset=dataset,
        model=model,
        train=train,
        augmix_enabled=augmix_enabled,
        augmix=augmix,
        adapt=adapt,
        corruptions=_corruption_specs(doc.get("corruptions")),
        strategies=strategies,
        include_repr=bool(trace_doc.get("include_repr", True)),
        eval=eval_spec,
    )


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValueError(f"config file does not exist: {path}")
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return parse_run_config(doc)
