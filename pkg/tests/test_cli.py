import json
import subprocess
import sys

import pytest

from vspan.cli import EXIT_DATA, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, run


@pytest.fixture
def uc1_dir(tmp_path):
    d = tmp_path / "uc1"
    assert run(["simulate", "--topology", "uc1", "--requests", "100", "--seed", "7", "--out", str(d),
                "--noise"]) == EXIT_OK
    return d


def test_pipeline(uc1_dir, tmp_path, capsys):
    spans = tmp_path / "spans.json"
    assert run(["analyze", "--experiment", str(uc1_dir), "--out", str(spans),
                "--orphans", str(tmp_path / "o.json"), "--dump-sht", str(tmp_path / "sht.jsonl"),
                "--dump-merged", str(tmp_path / "m.trace")]) == EXIT_OK
    assert json.loads((tmp_path / "o.json").read_text()) == {"orphans": []}
    row = json.loads((tmp_path / "sht.jsonl").read_text().splitlines()[0])
    assert set(row) == {"attr", "start", "end", "value"}
    capsys.readouterr()
    assert run(["verify", "--experiment", str(uc1_dir)]) == EXIT_OK
    assert "100/100 requests matched" in capsys.readouterr().out

    assert run(["stats", "--spans", str(spans)]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert {(e["caller"], e["callee"]) for e in stats["service_graph"]["edges"]} == \
        {("gateway", "user"), ("user", "redis-gateway")}

    for fmt in ("text", "svg", "json"):
        out = tmp_path / f"r.{fmt}"
        assert run(["render", "--spans", str(spans), "--format", fmt, "--out", str(out)]) == EXIT_OK
        assert out.stat().st_size > 0


def test_analyze_idempotent(uc1_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(["analyze", "--experiment", str(uc1_dir), "--out", str(a)])
    run(["analyze", "--experiment", str(uc1_dir), "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_missing_trace_is_mismatch(uc1_dir, capsys):
    (uc1_dir / "user.trace").unlink()
    assert run(["verify", "--experiment", str(uc1_dir)]) == EXIT_MISMATCH
    assert "0/100 requests matched" in capsys.readouterr().out


def test_empty_dir_is_data_error(tmp_path, capsys):
    (tmp_path / "e").mkdir()
    assert run(["analyze", "--experiment", str(tmp_path / "e"), "--out", str(tmp_path / "x")]) == EXIT_DATA
    assert "error" in capsys.readouterr().err


def test_bad_trace_is_data_error(tmp_path):
    (tmp_path / "a.trace").write_text("garbage\n")
    assert run(["analyze", "--experiment", str(tmp_path), "--out", str(tmp_path / "x")]) == EXIT_DATA


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["verify"],
    ["verify", "--experiment", "x", "--nope"],
    ["render", "--spans", "s.json", "--format", "pdf"],
    ["simulate", "--topology", "uc1", "--requests", "many", "--out", "x"],
    ["simulate", "--topology", "uc1", "--requests", "2", "--out", "x", "--skew", "user=3"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == EXIT_USAGE


def test_bad_topology_is_data_error(tmp_path):
    t = tmp_path / "t.json"
    t.write_text(json.dumps({"services": [{"name": "a", "addr": "10.0.0.1", "port": 1,
                                           "handler": {"type": "forward", "downstream": "a"}}]}))
    assert run(["simulate", "--topology", str(t), "--requests", "1", "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert run(["simulate", "--topology", "uc1", "--requests", "0", "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert run(["stats", "--spans", str(t)]) == EXIT_DATA


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vspan.cli", "verify", "--experiment", str(tmp_path)],
                          capture_output=True, text=True, env={"VSPAN_LOG": "debug", "PATH": ""})
    assert proc.returncode == EXIT_DATA
    assert proc.stdout == ""
    assert "ground_truth.json" in proc.stderr
