import pytest

from phoenixsim.config import (ConfigError, Latencies, SchemeConfig, SchemeKind, SimConfig,
                               build_config, parse_size, read_config_file)


@pytest.mark.parametrize("text,value", [("4K", 4096), ("4KiB", 4096), ("1M", 1 << 20),
                                        ("8T", 8 << 40), ("262144", 262144), ("0x1000", 4096),
                                        ("16MB", 16 << 20), (512, 512)])
def test_parse_size(text, value):
    assert parse_size(text) == value


def test_parse_size_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_size("lots")


def test_defaults():
    cfg = build_config({})
    assert cfg.cache_bytes == 262144 and cfg.associativity == 8
    assert cfg.scheme.persistence_limit == 4 and cfg.scheme.ecc_engines == 4
    assert cfg.latencies == Latencies(60, 150, 40)
    assert cfg.scheme.window == 4


@pytest.mark.parametrize("text", ["writeback", "Phoenix+", "phoenix_plus", "ANUBIS", "strict"])
def test_scheme_names(text):
    assert isinstance(SchemeKind.parse(text), SchemeKind)


@pytest.mark.parametrize("values", [{"memory_size": "3M"}, {"cache_size": "3000"},
                                    {"associativity": 3}, {"persistence_limit": 0},
                                    {"ecc_engines": 0}, {"scheme": "magic"}, {"bogus": 1},
                                    {"associativity": "eight"}])
def test_validation(values):
    with pytest.raises(ConfigError):
        build_config(values)


def test_window_override():
    assert SchemeConfig(osiris_window=2).window == 2


def test_config_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# comment\nmemory-size = 2M\nscheme=anubis  # trailing\n\n")
    vals = read_config_file(p)
    assert vals == {"memory_size": "2M", "scheme": "anubis"}
    cfg = build_config(vals)
    assert cfg.memory_bytes == 2 << 20 and cfg.scheme.kind is SchemeKind.ANUBIS


def test_config_file_syntax_error(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("memory_size 2M\n")
    with pytest.raises(ConfigError, match=":1:"):
        read_config_file(p)


def test_with_scheme_keeps_other_fields():
    cfg = SimConfig(memory_bytes=1 << 16).with_scheme(SchemeKind.STRICT, persistence_limit=2)
    assert cfg.memory_bytes == 1 << 16
    assert cfg.scheme.kind is SchemeKind.STRICT and cfg.scheme.persistence_limit == 2
