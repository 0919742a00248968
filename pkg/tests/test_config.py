import json

import pytest

import harp
from harp.errors import ContractError


def valid_kwargs(**overrides):
    base = dict(
        num_layers=2, hidden_size=16, ffn_size=32, num_query_heads=4,
        num_kv_heads=2, head_dim=4, vocab_size=256, max_seq_len=64,
    )
    base.update(overrides)
    return base


def test_group_size_and_widths():
    cfg = harp.ModelConfig(**valid_kwargs())
    assert cfg.group_size == 2
    assert cfg.kv_width == 8


@pytest.mark.parametrize(
    "overrides",
    [
        {"num_layers": 0},
        {"hidden_size": -16},
        {"rope_base": 0.0},
        {"num_query_heads": 3},  # not divisible by num_kv_heads=2
        {"head_dim": 5},  # odd, breaks rotary pairing
        {"head_dim": 8},  # n_q * head_dim != hidden_size
        {"vocab_size": 0},
    ],
)
def test_invalid_configs_rejected(overrides):
    with pytest.raises(ContractError):
        harp.ModelConfig(**valid_kwargs(**overrides))


def test_presets_are_valid():
    for name, cfg in harp.PRESETS.items():
        assert cfg.num_query_heads % cfg.num_kv_heads == 0, name
        assert cfg.num_query_heads * cfg.head_dim == cfg.hidden_size, name


def test_resolve_config_preset_file_and_garbage(tmp_path):
    assert harp.resolve_config("desk") is harp.PRESETS["desk"]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(valid_kwargs()))
    assert harp.resolve_config(str(path)).hidden_size == 16
    with pytest.raises(ContractError):
        harp.resolve_config("no-such-preset")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(valid_kwargs(bogus_field=1)))
    with pytest.raises(ContractError):
        harp.resolve_config(str(bad))


def test_round_trip_dict():
    cfg = harp.ModelConfig(**valid_kwargs())
    assert harp.ModelConfig.from_dict(cfg.to_dict()) == cfg
