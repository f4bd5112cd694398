import csv
import io
import json
from pathlib import Path

import pytest

from phoenixsim.cli import main, resolve_config, build_parser, crypto_vectors as make_vectors
from phoenixsim.harness import Profile, gen_trace, write_trace
from phoenixsim.mem_model import NvmImage

SMALL = ["--memory-size", "64K", "--cache-size", "2K", "--associativity", "4", "--length", "150"]


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_run_writeback_extra_is_zero(capsys):
    assert main(["run", "--scheme", "writeback", "--profile", "mixed"] + SMALL) == 0
    (r,) = rows(capsys.readouterr().out)
    assert r["scheme"] == "writeback" and float(r["extra_pct"]) == 0.0


def test_run_anubis_costs_more(capsys):
    assert main(["run", "--scheme", "anubis"] + SMALL) == 0
    (r,) = rows(capsys.readouterr().out)
    assert float(r["extra_pct"]) > 0


def test_output_is_byte_identical_and_append_safe(tmp_path, capsys):
    out = tmp_path / "o.csv"
    for _ in range(2):
        assert main(["run", "--scheme", "phoenix", "--output", str(out)] + SMALL) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3 and lines[1] == lines[2] and lines[0].startswith("scheme,")


def test_compare_columns(capsys):
    assert main(["compare", "--format", "json"] + SMALL) == 0
    data = json.loads(capsys.readouterr().out)
    assert [d["scheme"] for d in data] == ["writeback", "strict", "anubis", "phoenix", "phoenixplus"]


def test_malformed_trace_exit_2_with_line(tmp_path, capsys):
    p = tmp_path / "bad.trace"
    p.write_text("R 0\nR 1\nW 2 nothex\n")
    assert main(["run", "--trace", str(p)] + SMALL) == 2
    assert "line 3" in capsys.readouterr().err


def test_trace_file_run(tmp_path, capsys):
    p = tmp_path / "t.trace"
    write_trace(p, gen_trace(Profile.MIXED, 40, 1, resolve_config(build_parser().parse_args(
        ["run"] + SMALL), {})))
    assert main(["run", "--trace", str(p)] + SMALL) == 0
    assert rows(capsys.readouterr().out)[0]["trace"] == "t.trace"


@pytest.mark.parametrize("argv", [["run", "--memory-size", "3M"], ["run", "--scheme", "nope"],
                                  ["bogus"], ["run", "--profile", "sideways"] + SMALL,
                                  ["run", "--config", "/nonexistent"]])
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_precedence_flags_env_file_defaults(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("seed = 5\nscheme = anubis\nmemory_size = 128K\n")
    p = build_parser()
    c = resolve_config(p.parse_args(["run", "--config", str(cfg_file)]), {})
    assert (c.seed, c.scheme.kind.value, c.memory_bytes) == (5, "anubis", 128 << 10)
    c = resolve_config(p.parse_args(["run", "--config", str(cfg_file)]), {"PHOENIX_SEED": "9"})
    assert c.seed == 9
    c = resolve_config(p.parse_args(["run", "--config", str(cfg_file), "--seed", "11",
                                     "--scheme", "phoenix"]), {"PHOENIX_SEED": "9"})
    assert (c.seed, c.scheme.kind.value) == (11, "phoenix")
    c = resolve_config(p.parse_args(["run"]), {})
    assert c.cache_bytes == 262144 and c.associativity == 8 and c.scheme.persistence_limit == 4


def test_sweep_recovery(capsys):
    assert main(["sweep-recovery", "--fitted-hash"]) == 0
    data = rows(capsys.readouterr().out)
    assert all(float(r["recovery_s"]) < 1 for r in data)
    pp = {int(r["cache_bytes"]): float(r["recovery_s"]) for r in data if r["scheme"] == "phoenixplus"}
    assert pp[4 << 20] == pytest.approx(0.12, rel=0.01)
    assert pp[512 << 10] / pp[256 << 10] == pytest.approx(2, rel=1e-3)


def test_crash_test_passes(capsys):
    assert main(["crash-test", "--scheme", "phoenixplus", "--points", "40", "--tamper"] + SMALL) == 0
    out = capsys.readouterr().out
    assert "40/40" in out and "0 missed" in out


def test_crash_test_strict_and_writeback(capsys):
    assert main(["crash-test", "--scheme", "strict", "--points", "20"] + SMALL) == 0
    assert main(["crash-test", "--scheme", "writeback"] + SMALL) == 4


def test_crash_test_failure_exit_4(capsys):
    argv = ["crash-test", "--scheme", "phoenix", "--osiris-window", "1", "--points", "0",
            "--profile", "writeheavy"] + SMALL
    assert main(argv) == 4


def test_format_writes_loadable_image(tmp_path, capsys):
    p = tmp_path / "img.bin"
    assert main(["format", str(p), "--memory-size", "64K", "--cache-size", "2K"]) == 0
    img = NvmImage.load(p)
    assert img.capacities[0] == 1024


def test_vectors_match_checked_in_file(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["vectors", "--output", str(out)]) == 0
    checked_in = Path(__file__).parent / "data" / "vectors.json"
    assert json.loads(out.read_text()) == json.loads(checked_in.read_text())
    assert make_vectors(1, 8) == json.loads(checked_in.read_text())


def test_geometry(capsys):
    assert main(["geometry", "8T"]) == 0
    assert "13 tree levels" in capsys.readouterr().out
