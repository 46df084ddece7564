"""Run-config parsing: strict keys, defaults, validation errors."""

import json

import pytest

from exitbench.config import (CONFIG_SCHEMA_VERSION, load_run_config,
                              parse_run_config)
from exitbench.corruptions import CORRUPTION_NAMES
from exitbench.strategies import DEFAULT_GRIDS, STRATEGY_KINDS


def test_empty_doc_gives_defaults():
    config = parse_run_config({})
    assert config.seed == 0
    assert config.dataset.kind == "minishapes"
    assert config.model.arch == "convnet8"
    assert config.train.epochs == 100
    assert config.augmix_enabled is False
    assert config.include_repr is True
    assert config.strategies.kinds == STRATEGY_KINDS
    assert config.strategies.grids == dict(DEFAULT_GRIDS)
    assert config.eval.split == "test"
    assert config.eval.kind == "confidence"


def test_default_corruptions_cover_all_names_and_severities():
    config = parse_run_config({})
    keys = {(s.name, s.severity) for s in config.corruptions}
    assert keys == {(n, s) for n in CORRUPTION_NAMES for s in range(1, 6)}


def test_explicit_corruption_subset():
    config = parse_run_config({
        "corruptions": [{"name": "gaussian_noise", "severities": [1, 3]},
                        {"name": "contrast"}]})
    got = [(s.name, s.severity) for s in config.corruptions]
    assert ("gaussian_noise", 1) in got
    assert ("gaussian_noise", 3) in got
    assert ("gaussian_noise", 2) not in got
    assert sum(1 for n, _ in got if n == "contrast") == 5


def test_unknown_top_level_key_rejected():
    with pytest.raises(ValueError, match="unknown key.*trian"):
        parse_run_config({"trian": {}})


@pytest.mark.parametrize("section,payload", [
    ("dataset", {"n_trian": 10}),
    ("model", {"architecture": "convnet8"}),
    ("train", {"learning_rate": 0.1}),
    ("augmix", {"widht": 3}),
    ("adapt", {"batchsize": 4}),
    ("strategies", {"kind": "oracle"}),
    ("trace", {"reprs": True}),
    ("eval", {"metric": "accuracy"}),
])
def test_unknown_nested_key_rejected(section, payload):
    with pytest.raises(ValueError, match=f"unknown key.*{section}"):
        parse_run_config({section: payload})


def test_unknown_corruption_entry_key_rejected():
    with pytest.raises(ValueError, match=r"corruptions\[0\]"):
        parse_run_config({"corruptions": [{"name": "contrast", "sev": [1]}]})


def test_bad_schema_version():
    with pytest.raises(ValueError, match="schema_version"):
        parse_run_config({"schema_version": CONFIG_SCHEMA_VERSION + 1})


def test_bad_dataset_kind():
    with pytest.raises(ValueError, match="dataset.kind"):
        parse_run_config({"dataset": {"kind": "imagenet"}})


def test_cifar_requires_existing_paths(tmp_path):
    with pytest.raises(ValueError, match="train_path required"):
        parse_run_config({"dataset": {"kind": "cifar10_bin"}})
    with pytest.raises(ValueError, match="does not exist"):
        parse_run_config({"dataset": {"kind": "cifar10_bin",
                                      "train_path": str(tmp_path / "nope.bin"),
                                      "test_path": str(tmp_path / "nope.bin")}})


def test_val_must_fit_inside_train():
    with pytest.raises(ValueError, match="n_val"):
        parse_run_config({"dataset": {"n_train": 100, "n_val": 100}})


def test_bad_arch():
    with pytest.raises(ValueError, match="model.arch"):
        parse_run_config({"model": {"arch": "vgg"}})


def test_bad_strategy_kind():
    with pytest.raises(ValueError, match="strategies.kinds"):
        parse_run_config({"strategies": {"kinds": ["oracle", "entropy"]}})


def test_grid_override_merges_over_defaults():
    config = parse_run_config(
        {"strategies": {"grids": {"confidence": [0.5, 0.75]}}})
    assert config.strategies.grids["confidence"] == (0.5, 0.75)
    assert config.strategies.grids["patience"] == DEFAULT_GRIDS["patience"]


def test_grid_for_unknown_kind_rejected():
    with pytest.raises(ValueError, match="no grid"):
        parse_run_config({"strategies": {"grids": {"entropy": [0.5]}}})


def test_bad_eval_kind():
    with pytest.raises(ValueError, match="eval.kind"):
        parse_run_config({"eval": {"kind": "entropy"}})


def test_augmix_enabled_flag():
    config = parse_run_config({"augmix": {"enabled": True, "width": 2}})
    assert config.augmix_enabled is True
    assert config.augmix.width == 2


def test_train_section_feeds_train_config():
    config = parse_run_config(
        {"train": {"epochs": 3, "lr": 0.02, "decay_epochs": [2]}})
    assert config.train.epochs == 3
    assert config.train.lr == 0.02
    assert config.train.decay_epochs == (2,)


def test_load_run_config_round_trip(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 9, "out_dir": "x",
                                "dataset": {"n_train": 60, "n_val": 10,
                                            "n_test": 20}}))
    config = load_run_config(path)
    assert config.seed == 9
    assert config.out_dir == "x"
    assert config.dataset.n_train == 60


def test_load_missing_file():
    with pytest.raises(ValueError, match="does not exist"):
        load_run_config("/no/such/config.json")


def test_load_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ValueError, match="not valid JSON"):
        load_run_config(path)


def test_load_non_object(tmp_path):
    path = tmp_path / "list.json"
    path.write_text("[1, 2]")
    with pytest.raises(ValueError, match="JSON object"):
        load_run_config(path)
