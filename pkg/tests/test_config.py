import json

import pytest

from nailfold.config import ConfigError, PipelineConfig


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.scale.fps == 20.0 and cfg.scale.microns_per_pixel is None
    assert cfg.segmentation.scales == (2.0, 3.0, 4.0, 5.0) and cfg.segmentation.threshold == 0.25
    assert cfg.analysis.tau_tortuous == 1.7 and cfg.flow.k_sigma == 4.0
    assert PipelineConfig.load(None) == cfg


def test_round_trip_through_json(tmp_path):
    cfg = PipelineConfig.from_dict({"scale": {"microns_per_pixel": 0.8}, "analysis": {"counting_region": [0, 0, 50, 60]},
                                    "ranges": {"venous_um": [10, 18]}, "seed": 7})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = PipelineConfig.load(path)
    assert back == cfg
    assert back.ranges.venous_um == (10.0, 18.0) and back.analysis.counting_region == (0, 0, 50, 60)


@pytest.mark.parametrize("doc, key", [
    ({"bogus": 1}, "bogus"),
    ({"flow": {"k_sigmaa": 3}}, "k_sigmaa"),
    ({"ranges": {"venous": [1, 2]}}, "venous"),
])
def test_unknown_keys_are_named(doc, key):
    with pytest.raises(ConfigError, match=key):
        PipelineConfig.from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"segmentation": {"backend": "unet"}},
    {"segmentation": {"threshold": 1.5}},
    {"segmentation": {"scales": []}},
    {"analysis": {"tau_tortuous": 1.0}},
    {"analysis": {"min_clear": 0}},
    {"analysis": {"counting_region": [0, 0, 5]}},
    {"flow": {"n_corners": 4}},
    {"preprocess": {"p_low": 99, "p_high": 1}},
    {"scale": {"fps": 0}},
    {"ranges": {"apical_um": [18, 12]}},
    {"scale": 3},
])
def test_invalid_values_rejected(doc):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="no such"):
        PipelineConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"seed\": ,\n}")
    with pytest.raises(ConfigError, match="line 2"):
        PipelineConfig.load(bad)
