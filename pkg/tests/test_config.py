import pytest

from slmpda.config import (PROFILES, ConfigError, RunConfig, apply_overrides, default_config, dump_config, flatten,
                           load_config, parse_config_text)


def test_empty_config_is_runnable_and_reference_profile_is_pristine():
    assert default_config("reference") == RunConfig()
    desk = default_config()
    assert desk.task.rotation_deg == 17.5 and desk.train.select.reg1_form == "batch"


def test_unknown_profile():
    with pytest.raises(ConfigError):
        default_config("nope")


def test_every_profile_key_is_known():
    for name, pairs in PROFILES.items():
        apply_overrides(RunConfig(), pairs)


def test_dump_round_trips():
    cfg = load_config(overrides=["select.margin=3.5", "model.g_hidden=16,8", "train.use_mix=false"])
    again = load_config(None, [f"{k}={v}" for k, v in parse_config_text(dump_config(cfg)).items()])
    assert again == cfg
    assert flatten(cfg)["model.g_hidden"] == "16,8"


def test_file_then_overrides_last_wins(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nselect.margin = 2.0\ntrain.steps = 7\n")
    cfg = load_config(path, ["select.margin=4", "select.margin=5"])
    assert cfg.train.select.margin == 5.0 and cfg.train.steps == 7


@pytest.mark.parametrize("item,key", [
    ("select.margin=-1", "select.margin"),
    ("train.steps=abc", "train.steps"),
    ("train.bogus=1", "train.bogus"),
    ("nosection.x=1", "nosection.x"),
    ("label.alpha=0", "label.alpha"),
    ("train.use_mix=maybe", "train.use_mix"),
])
def test_errors_name_the_key(item, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(overrides=[item])


def test_malformed_lines():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a.b = 1\nnonsense\n")
    with pytest.raises(ConfigError):
        load_config(overrides=["novalue"])
