import json

import pytest

from protofuse.config import (
    ParseError,
    RangeError,
    RunConfig,
    UnknownKey,
    default_config,
    from_dict,
    load_config,
)


def test_minimal_file_gets_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    cfg = load_config(path)
    assert cfg.model["T"] == 200
    assert cfg.vsc["lambda_loc"] == 0.1
    assert cfg.seed == 0


def test_hash_stable_and_covers_fields():
    a = from_dict({})
    b = from_dict({})
    assert a.content_hash() == b.content_hash()
    c = from_dict({"train": {"lr": 1e-3}})
    assert c.content_hash() != a.content_hash()
    d = from_dict({"seed": 1})
    assert d.content_hash() != a.content_hash()


def test_partial_section_merges():
    cfg = from_dict({"model": {"T": 100}})
    assert cfg.model["T"] == 100
    assert cfg.model["d"] == 64  # untouched default


def test_unknown_key_rejected():
    with pytest.raises(UnknownKey) as e:
        from_dict({"model": {"depth": 3}})
    assert e.value.key == "depth"
    with pytest.raises(UnknownKey):
        from_dict({"modle": {}})


def test_negative_lambda_range_error():
    with pytest.raises(RangeError):
        from_dict({"vsc": {"lambda_loc": -1}})


def test_other_range_errors():
    with pytest.raises(RangeError):
        from_dict({"model": {"T": 1}})
    with pytest.raises(RangeError):
        from_dict({"model": {"schedule": "warped"}})
    with pytest.raises(RangeError):
        from_dict({"world": {"categories": ["color", "smell"]}})
    with pytest.raises(RangeError):
        from_dict({"eval": {"ddim_steps": 0}})


def test_parse_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ParseError):
        load_config(bad)
    with pytest.raises(ParseError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ParseError):
        from_dict({"seed": "zero"})


def test_round_trip_through_json():
    cfg = from_dict({"vsc": {"lambda_loc": 0.25}, "seed": 3})
    again = from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.content_hash() == cfg.content_hash()
