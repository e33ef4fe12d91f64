import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokendrop.config import PipelineConfig, load_config
from tokendrop.errors import ConfigError

CONFIGS = Path(__file__).parent.parent / "configs"


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_json(cfg.to_json()) == cfg


@given(
    seed=st.integers(0, 2**63),
    baseline=st.sampled_from(["mustdrop", "none", "random_drop", "fastv_like", "encoder_only"]),
    geometry=st.sampled_from(["llava-1.5-7b", "llava-next-7b"]),
    tau=st.floats(0.01, 0.99),
    layers=st.sets(st.integers(0, 3), min_size=1),
    budget=st.one_of(st.none(), st.floats(0, 64)),
    kind=st.sampled_from(["noise", "blocks", "needle"]),
    count=st.integers(1, 500),
)
def test_round_trip_is_identity(seed, baseline, geometry, tau, layers, budget, kind, count):
    data = {"seed": seed, "baseline": baseline, "geometry": geometry, "encode": {"tau_mean": tau},
            "prefill": {"prune_layers": sorted(layers), "budget": budget},
            "fixtures": {"kind": kind, "count": count}}
    cfg = PipelineConfig.from_dict(data)
    text = cfg.to_json()
    again = PipelineConfig.from_json(text)
    assert again == cfg and again.to_json() == text


@pytest.mark.parametrize("data", [
    {"extra": 1},
    {"model": {"hidden": 32}},
    {"encode": {"tau": 0.5}},
    {"prefill": {"gamma": 0.1, "beta": 2}},
    {"decode": {"greedy": False}},
    {"fixtures": {"kind": "needle", "size": 3}},
])
def test_unknown_or_invalid_keys_rejected(data):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(data)


@pytest.mark.parametrize("data", [
    {"baseline": "oracle"},
    {"geometry": "gpt-4"},
    {"prefill": {"gamma": 0.1, "budget": 5}},
    {"prefill": {"prune_layers": [7], "gamma": 0.1}},
    {"decode": {"keep_from_layer": 9}},
    {"encode": {"key_layer": 4}},
    {"fixtures": {"count": 0}},
    {"baseline": "fastv_like", "prefill": {"prune_layers": [], "gamma": 0.1}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(data)


def test_not_json():
    with pytest.raises(ConfigError):
        PipelineConfig.from_json("{")
    with pytest.raises(ConfigError):
        PipelineConfig.from_json("[1, 2]")


def test_shipped_configs_load():
    paths = sorted(CONFIGS.glob("*.json"))
    assert paths
    for path in paths:
        cfg = load_config(path)
        assert json.loads(cfg.to_json())["baseline"] in ("mustdrop",)
