import pytest

from most.config import KEY_DOCS, ConfigError, ExperimentConfig, parse_config, parse_config_text, serialize_config


def test_main_setting():
    cfg = parse_config_text("buffer_size=10\nreplay_period=3\nstrategy=most\n")
    assert (cfg.buffer_size, cfg.replay_period, cfg.strategy) == (10, 3, "most")
    assert cfg.task_order == ("seg_A", "seg_B", "cls_A", "cls_B")


def test_empty_text_gives_defaults_and_roundtrips():
    cfg = parse_config_text("")
    assert cfg == ExperimentConfig()
    assert parse_config_text(serialize_config(cfg)) == cfg


def test_roundtrip_non_default():
    cfg = ExperimentConfig(order="order3", strategy="ewc", seeds=(4, 7), replay=False, lambda_ewc=12.5, precision="float64")
    assert parse_config_text(serialize_config(cfg)) == cfg


def test_comments_and_blank_lines():
    cfg = parse_config_text("# header\n\nstrategy = naive  # trailing\n")
    assert cfg.strategy == "naive"


def test_negative_buffer_rejected():
    with pytest.raises(ConfigError, match="buffer_size"):
        parse_config_text("buffer_size=-1")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config_text("bogus=1")


def test_type_error_names_key():
    with pytest.raises(ConfigError, match="replay_period"):
        parse_config_text("replay_period=three")
    with pytest.raises(ConfigError, match="ig"):
        parse_config_text("ig=maybe")


def test_missing_separator():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("strategy most")


@pytest.mark.parametrize(
    "text,key",
    [
        ("replay_period=0", "replay_period"),
        ("order=seg_A,seg_A,cls_A,cls_B", "order"),
        ("order=order9", "order"),
        ("finetune_epochs=6", "finetune_epochs"),
        ("strategy=der\nbuffer_size=0", "buffer_size"),
        ("image_size=48", "image_size"),
        ("precision=float16", "precision"),
        ("lr_finetune=0", "lr_finetune"),
        ("seeds=", "seeds"),
    ],
)
def test_constraint_violations_name_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config_text(text)


def test_naive_allows_zero_buffer():
    assert parse_config_text("strategy=naive\nbuffer_size=0").buffer_size == 0


def test_custom_order():
    cfg = parse_config_text("order=cls_B,seg_A,cls_A,seg_B")
    assert cfg.order_name == "custom"
    assert cfg.task_order == ("cls_B", "seg_A", "cls_A", "seg_B")


def test_replay_and_ig_flags():
    assert not ExperimentConfig(strategy="most", replay=False).uses_replay
    assert ExperimentConfig(strategy="der").uses_replay
    assert not ExperimentConfig(strategy="ewc").uses_ig


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "nope.cfg")


def test_file_with_overrides(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("strategy=ewc\nbuffer_size=4\n")
    cfg = parse_config(p, {"buffer_size": 50})
    assert cfg.strategy == "ewc" and cfg.buffer_size == 50


def test_every_key_documented():
    assert set(KEY_DOCS) == set(ExperimentConfig.__dataclass_fields__)
