import json

import pytest

from semforecast.config import RunConfig, apply_overrides, from_dict, load_config
from semforecast.scene import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg.model.d_model == 128 and cfg.model.n_modes == 6 and cfg.model.gain_hidden == 32
    assert cfg.mllm.max_concurrent == 4
    assert cfg.eval.k == 6 and cfg.eval.profile == "womd"
    assert cfg.ablate.gain_modes == ["none", "added", "constant", "learned"]
    assert cfg.ablate.delays_s == [0.0, 1.0, 2.0]
    assert len(cfg.ablate.groups) == 6


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[data]\nn_train = 7\n[model]\nd_model = 32\n[mllm.fault]\np_wrong_answer = 0.5\n')
    cfg = load_config(p, ["model.n_heads=2", "paths.out=somewhere", 'mllm.fault.seed=3', "ablate.delays_s=[0, 1]"])
    assert cfg.data.n_train == 7 and cfg.model.d_model == 32 and cfg.model.n_heads == 2
    assert cfg.paths.out == "somewhere"
    assert cfg.mllm.fault_profile().p_wrong_answer == 0.5 and cfg.mllm.fault_profile().seed == 3
    assert cfg.ablate.delays_s == [0, 1]


def test_hash_ignores_paths_only():
    a = from_dict({"paths": {"out": "a"}})
    b = from_dict({"paths": {"out": "b", "cache": "c.jsonl"}})
    c = from_dict({"train": {"steps": 3}})
    assert a.hash() == b.hash() != c.hash()


@pytest.mark.parametrize("raw", [
    {"bogus": {}},
    {"model": {"d_modl": 3}},
    {"mllm": {"backend": "carrier-pigeon"}},
    {"mllm": {"fault": {"p_wrong_answer": 2.0}}},
    {"eval": {"profile": "argoverse"}},
    {"data": {"generator": {"profile": "mars"}}},
    {"model": {"gain_mode": "sometimes"}},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_override_syntax_errors():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["nokey"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["nosection=1"])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_http_backend_needs_endpoint():
    with pytest.raises(ConfigError):
        from_dict({"mllm": {"backend": "http"}}).mllm.http_config()


def test_snapshot(tmp_path):
    cfg = RunConfig()
    path = cfg.write_snapshot(tmp_path / "x")
    d = json.loads(path.read_text())
    assert d["config_hash"] == cfg.hash()
    assert from_dict(d["config"]).hash() == cfg.hash()
