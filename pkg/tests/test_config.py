import json
import os

import pytest

import tswitch.configs as configs
from tswitch.configs import config_factory, get_all_registered_configs
from tswitch.configs.config import Config
from tswitch.utils.errors import UserError


def test_registered_benches():
    assert set(get_all_registered_configs()) >= {"controlled", "merge"}
    with pytest.raises(UserError):
        config_factory("ablation")


def test_defaults():
    merge = config_factory("merge")
    assert merge.bench_name == "merge"
    assert merge.bench.N == 100
    assert merge.bench.C == 5
    assert merge.bench.scope == "global"
    assert merge.experiment.seeds == [0, 1, 2, 3, 4]
    controlled = config_factory("controlled")
    assert controlled.bench.alphas[0] == 0.0
    assert controlled.bench.alphas[-1] == 0.9
    assert "N" not in controlled.bench
    assert merge.model.hidden == [64]
    assert merge.suite.spread < merge.suite.class_radius < merge.suite.task_radius


def test_key_lock_rejects_new_keys():
    config = config_factory("merge")
    with pytest.raises(UserError):
        config.bench.K = 3
    with pytest.raises(UserError):
        config.suite["radius"]
    with config.values_unlocked():
        config.bench.C = 7
        with pytest.raises(UserError):
            config.update({"bench": {"k": 1}})
    assert config.bench.C == 7


def test_full_lock():
    config = config_factory("merge")
    config.lock()
    assert config.is_locked
    with pytest.raises(UserError):
        config.bench.C = 1
    with config.values_unlocked():
        config.bench.C = 1
    assert config.is_locked
    assert config.bench.C == 1


def test_lazy_sections_and_dump(tmp_path):
    config = Config()
    config.a.b.c = 3
    assert config.to_dict() == {"a": {"b": {"c": 3}}}
    # reading a missing key does not create it
    config.x
    assert "x" not in config

    path = tmp_path / "cfg.json"
    config_factory("controlled").dump(str(path))
    loaded = json.loads(path.read_text())
    assert loaded["bench_name"] == "controlled"
    assert loaded["suite"]["K"] == 8


def test_shipped_json_matches_defaults():
    root = os.path.dirname(configs.__file__)
    for name in ("controlled", "merge"):
        with open(os.path.join(root, name + ".json")) as f:
            shipped = json.load(f)
        assert shipped == config_factory(name).to_dict()
