import pytest

from biased_qkd.configuration import Configuration, ConfigError, dump_config, load_config, parse_config
from biased_qkd.schemas import Basis


def test_minimal_config_gets_defaults():
    run = parse_config("source: {p_bx: 0.05, p_bz: 0.01}\nalice: {q: 0.9}\nbob: {q: 0.9}\n")
    assert run.cascade.num_passes == 3
    assert run.cascade.s == 40
    assert run.cascade.frame_length == 1000
    assert run.cascade.prior(Basis.Z) == 0.01
    assert run.keyrate.p_eps == 1e-6
    assert run.session.n_rounds == 1_000_000
    assert run.output.format == "csv"


def test_missing_required_keys_are_listed():
    with pytest.raises(ConfigError) as info:
        parse_config("source:\n  p_bx: 0.05\nalice:\n  q: 0.5\n")
    assert "source.p_bz" in str(info.value)
    assert "bob.q" in str(info.value)


def test_unknown_key_reports_its_line():
    text = "source: {p_bx: 0.05, p_bz: 0.01}\nalice: {q: 0.9}\nbob: {q: 0.9}\ncascade:\n  passes: 3\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "cascade.passes"
    assert info.value.line == 5
    assert "line 5" in str(info.value)


def test_out_of_range_value(small_config_text):
    text = small_config_text.replace("q: 0.8\nbob", "q: 1.5\nbob")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "alice.q"
    assert info.value.line == 5


def test_not_a_mapping():
    with pytest.raises(ConfigError):
        parse_config("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        parse_config("source: [1, 2]\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        parse_config("source: {p_bx: 0.05\n")


def test_dump_round_trip(small_run):
    again = parse_config(dump_config(small_run))
    assert again == small_run
    assert again.digest() == small_run.digest()


def test_digest_tracks_content(small_run):
    changed = small_run.model_copy(update={"session": small_run.session.model_copy(update={"source_seed": 8})})
    assert changed.digest() != small_run.digest()
    assert small_run.seeds() == {"source_seed": 7, "protocol_seed": 11, "cascade_seed": 0}


def test_load_config(small_config_file, tmp_path):
    assert load_config(small_config_file).session.session_id == "small"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_runtime_configuration_from_configurable():
    cfg = Configuration.from_runnable_config({"configurable": {"role": "bob", "tag_len": 64, "channel": object()}})
    assert cfg.role == "bob"
    assert cfg.tag_len == 64
    assert cfg.announce_block == 100_000
    assert Configuration.from_runnable_config(None).role == "alice"


def test_runtime_configuration_follows_the_run(small_run):
    cfg = Configuration.from_runnable_config({"configurable": {"role": "bob", "run_config": small_run}})
    assert cfg.announce_block == small_run.session.announce_block == 5000
    assert cfg.tag_len == small_run.session.tag_len
    with pytest.raises(ConfigError, match="announce_block"):
        Configuration.from_runnable_config({"configurable": {"announce_block": 7, "run_config": small_run}})


def test_role_is_not_read_from_the_environment(monkeypatch):
    monkeypatch.setenv("BIASED_QKD_ROLE", "alice")
    assert Configuration.from_runnable_config({"configurable": {"role": "bob"}}).role == "bob"


def test_environment_overrides_enter_the_digest(monkeypatch, small_config_file):
    plain = load_config(small_config_file)
    monkeypatch.setenv("BIASED_QKD_TAG_LEN", "80")
    monkeypatch.setenv("BIASED_QKD_TIMEOUT", "2.5")
    monkeypatch.setenv("BIASED_QKD_ANNOUNCE_BLOCK", "4000")
    run = load_config(small_config_file)
    assert run.session.tag_len == 80
    assert run.session.timeout == 2.5
    assert run.session.announce_block == 4000
    assert run.digest() != plain.digest()
    assert parse_config(dump_config(run)).digest() == run.digest()


def test_bad_environment_override(monkeypatch, small_config_file):
    monkeypatch.setenv("BIASED_QKD_ANNOUNCE_BLOCK", "many")
    with pytest.raises(ConfigError, match="BIASED_QKD_ANNOUNCE_BLOCK"):
        load_config(small_config_file)
    monkeypatch.setenv("BIASED_QKD_ANNOUNCE_BLOCK", "0")
    with pytest.raises(ConfigError):
        load_config(small_config_file)
