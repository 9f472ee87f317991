from __future__ import annotations

import io
import json
import os
import subprocess
import sys

import pytest

from mira import cli
from mira.fusion import AttentionTrace
from mira.store import VectorIndex

from .conftest import DATA, QUERY, SESSION


def call(argv, stdin=None):
    out, err = io.StringIO(), io.StringIO()
    if stdin is not None:
        old = sys.stdin
        sys.stdin = io.StringIO(stdin)
    try:
        code = cli.run(argv, out=out, err=err)
    finally:
        if stdin is not None:
            sys.stdin = old
    return code, out.getvalue(), err.getvalue()


def base(session):
    return ["--config", str(session / "session.cfg"), "--index", str(session / "kb.idx")]


def query_args(session, *extra):
    return ["query", *base(session), "--image", str(session / "images" / "user.png"), "--text", QUERY, *extra]


def test_query_matches_golden(session):
    code, out, _ = call(query_args(session))
    assert code == 0
    assert out == (SESSION / "expected.rtra").read_text(encoding="utf-8")


def test_query_out_file(session, tmp_path):
    dest = tmp_path / "rec.rtra"
    code, out, _ = call(query_args(session, "--out", str(dest)))
    assert code == 0 and dest.read_text(encoding="utf-8") == out


def test_query_no_online(session, monkeypatch):
    from mira import websearch

    def boom(*a, **k):
        raise AssertionError("online client constructed")

    monkeypatch.setattr(websearch.OnlineClient, "__init__", boom)
    code, out, _ = call(query_args(session, "--no-online"))
    assert code == 0
    assert "Flags: offline_only, rearrange_backfill:text" in out


def test_query_text_only(session):
    code, out, _ = call(query_args(session, "--text-only", "--no-online"))
    assert code == 0 and "Rearrange: <None>" in out and "mode:text_only" in out


def test_config_from_environment(session, monkeypatch):
    monkeypatch.setenv("MIRA_CONFIG", str(session / "session.cfg"))
    code, out, _ = call(["query", "--index", str(session / "kb.idx"), "--image",
                         str(session / "images" / "user.png"), "--text", QUERY])
    assert code == 0 and out == (SESSION / "expected.rtra").read_text(encoding="utf-8")


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["query", "--text-only", "--vision-only", "--text", "x"],
        ["query", "--k-text", "many", "--text", "x"],
    ],
)
def test_usage_errors_exit_1(argv):
    assert call(argv)[0] == 1


def test_missing_text_exit_1(session):
    assert call(["query", *base(session)])[0] == 1


def test_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("k_text = 0\n")
    code, _, err = call(["query", "--config", str(cfg), "--text", "x"])
    assert code == 2 and "config error" in err


def test_bad_override_exit_2(session):
    assert call(query_args(session, "--alpha", "1.5"))[0] == 2


def test_missing_and_corrupt_index_exit_2(session, tmp_path):
    assert call(["query", "--config", str(session / "session.cfg"), "--index", str(tmp_path / "no.idx"),
                 "--text", "x"])[0] == 2
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"MIRAIDX1garbage")
    assert call(["query", "--config", str(session / "session.cfg"), "--index", str(bad), "--text", "x"])[0] == 2


def test_provider_failure_exit_3(session, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("endpoints.text_encoder = http://127.0.0.1:9/embed\nonline_enabled = false\n")
    code, _, err = call(["query", "--config", str(cfg), "--text", "x"])
    assert code == 3 and "provider failure" in err


def test_unreadable_image_exit_1(session, tmp_path):
    assert call(["query", *base(session), "--image", str(tmp_path / "none.png"), "--text", "x"])[0] == 1


def test_index_add(session):
    idx = session / "kb.idx"
    code, out, _ = call(["index-add", *base(session), "--text", "Pneumonia is an infection of the lung."])
    assert code == 0 and "txt-" in out
    code, _, _ = call(["index-add", *base(session), "--image", str(session / "images" / "5.png")])
    assert code == 0
    loaded = VectorIndex.load(idx)
    assert len(loaded) == 8 and "5" in loaded
    assert call(["index-add", *base(session), "--image", str(session / "images" / "5.png")])[0] == 1
    assert call(["index-add", *base(session)])[0] == 1


def test_eval_report(tmp_path):
    dest = tmp_path / "report.txt"
    code, out, _ = call(["eval", "--corpus", str(DATA / "pairs.tsv"), "--out", str(dest)])
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "Report generation (3 pairs)"
    assert lines[1].split() == ["BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L"]
    assert lines[2].split()[0] == "0.572"
    assert lines[-1].split() == ["0.75(3)", "0.50(1)"]
    assert dest.read_text() == out and (tmp_path / "report.png").stat().st_size > 0


def test_repl(session):
    script = f"@{session / 'images' / 'user.png'} {QUERY}\n\n{QUERY}\n:quit\nnever reached\n"
    code, out, _ = call(["repl", *base(session), "--no-online"], stdin=script)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("Final: ") and lines[1] == "Citations: I1, T1"
    assert lines[2].startswith("Final: ") and len(lines) == 4


def test_trace_export(session, tmp_path):
    dest = tmp_path / "trace.csv"
    code, out, _ = call(["trace-export", *base(session), "--image", str(session / "images" / "user.png"),
                         "--text", QUERY, "--out", str(dest)])
    assert code == 0 and "query_id" in out
    tr = AttentionTrace.from_csv(dest.read_text())
    assert tr.component_labels[:2] == ("input_image", "query")
    assert abs(sum(tr.weights) - 1.0) <= 1e-6
    png = dest.with_suffix(".png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_trace_export_stdout(session):
    code, out, _ = call(["trace-export", *base(session), "--text", QUERY, "--no-online"])
    assert code == 0 and out.startswith("label,weight\nquery,")


def test_promote_cache(session):
    assert call(query_args(session))[0] == 0
    code, out, _ = call(["promote-cache", *base(session)])
    assert code == 0 and "promoted 2 records" in out
    audit = [json.loads(x) for x in (session / "cache" / "promotions.log").read_text().splitlines()]
    assert audit[0]["added"][0] == "online:https://example.org/encephalomalacia"
    assert "online:https://example.org/encephalomalacia" in VectorIndex.load(session / "kb.idx")
    code, out, _ = call(["promote-cache", *base(session)])
    assert "promoted 0 records" in out


def test_console_script_entry_point(session):
    env = dict(os.environ, MIRA_LOG_LEVEL="INFO")
    proc = subprocess.run(
        [sys.executable, "-m", "mira.cli", *query_args(session)],
        capture_output=True, text=True, env=env, timeout=120,
    )
    assert proc.returncode == 0
    assert proc.stdout == (SESSION / "expected.rtra").read_text(encoding="utf-8")
    assert "level=INFO" in proc.stderr and "query_id=" in proc.stderr
