import pytest

from sdcil.config import KEYS, ConfigError, RunConfig, load_config, parse_config_text, preset


def test_empty_file_is_defaults():
    assert parse_config_text("") == RunConfig()
    assert parse_config_text("# only a comment\n\n") == RunConfig()


def test_values_and_comments():
    cfg = parse_config_text("lr = 0.5  # fast\nmsc=false\nlr_later = none\nlora_structure = hybrid\n")
    assert cfg.lr == 0.5 and cfg.msc is False and cfg.lr_later is None
    assert cfg.backbone_config().lora_structure.value == "hybrid"


def test_unknown_key_names_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("lr = 0.1\n\nlearning_rate = 3\n", source="run.cfg")
    assert info.value.line == 3 and info.value.key == "learning_rate"
    assert "run.cfg:3" in str(info.value)


def test_bad_value_names_key():
    with pytest.raises(ConfigError, match="batch_size"):
        parse_config_text("batch_size = many\n")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config_text("use_pos_embed = maybe\n")


def test_range_errors_surface_on_validate():
    with pytest.raises(ConfigError):
        parse_config_text("lora_rank = 40\n").validate()
    with pytest.raises(ConfigError):
        parse_config_text("tasks = 3\n").validate()
    with pytest.raises(ConfigError):
        parse_config_text("pretrain_mode = imagenet\n").validate()


def test_every_key_round_trips_through_text():
    cfg = RunConfig()
    assert parse_config_text(cfg.to_text()) == cfg
    assert set(KEYS) == {line.split(" = ")[0] for line in cfg.to_text().splitlines()}


def test_fingerprint_tracks_resolved_values():
    a = RunConfig()
    assert a.fingerprint() == parse_config_text("seed = 0\n").fingerprint()
    assert a.fingerprint() != parse_config_text("seed = 1\n").fingerprint()
    assert len(a.fingerprint()) == 16


def test_layering(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 3\nlr = 0.2\n")
    assert load_config(path, environ={}).seed == 3
    assert load_config(path, environ={"SDC_SEED": "11"}).seed == 11
    assert load_config(path, ["seed=5"], environ={"SDC_SEED": "11"}).seed == 5
    assert load_config(None, ["lr=0.3"], environ={}).lr == 0.3
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg", environ={})
    with pytest.raises(ConfigError):
        load_config(None, environ={"SDC_SEED": "abc"})


def test_presets():
    published = preset("published")
    assert (published.lr, published.batch_size, published.lora_rank, published.lam, published.s) == (0.01, 48, 32, 0.4, 20.0)
    published.validate()
    with pytest.raises(ConfigError):
        preset("huge")


def test_component_configs_match_fields():
    cfg = parse_config_text("dim = 16\nheads = 4\nsamples_per_class = 7\nseparation = 3.5\n")
    assert cfg.backbone_config().dim == 16 and cfg.backbone_config().heads == 4
    assert cfg.train_config().samples_per_class == 7
    assert cfg.synth_spec().separation == 3.5
