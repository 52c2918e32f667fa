import csv
import json
import math
import subprocess
import sys

import pytest

import scenarios
from ioirs.cli import main
from ioirs.model import fspl_db
from ioirs.sim import METRICS_HEADER
from test_wire import DENIAL_PACKET_HEX


def write(tmp_path, doc, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, scenarios.get("priority")), "--out", str(out)]) == 0
    assert (out / "trace.jsonl").exists()
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert tuple(rows[0]) == METRICS_HEADER
    assert len(rows) - 1 == 2


def test_run_respects_env_out(tmp_path, monkeypatch):
    monkeypatch.setenv("IOIRS_OUT", str(tmp_path / "env"))
    assert main(["run", write(tmp_path, scenarios.get("blocked"))]) == 0
    assert (tmp_path / "env" / "metrics.csv").exists()


def test_missing_entities_exit_2(tmp_path, capsys):
    doc = scenarios.get("blocked")
    del doc["entities"]
    assert main(["run", write(tmp_path, doc), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "InvalidScenario" in err and "entities" in err


def test_unparseable_file_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["run", str(path)]) == 2
    assert "InvalidScenario" in capsys.readouterr().err


def test_same_seed_same_bytes(tmp_path):
    f = write(tmp_path, scenarios.blocked(measurement_noise_db=2.0))
    for d in ("a", "b", "c"):
        seed = "9" if d != "c" else "10"
        assert main(["run", f, "--seed", seed, "--out", str(tmp_path / d)]) == 0
    a, b, c = ((tmp_path / d / "trace.jsonl").read_bytes() for d in "abc")
    assert a == b
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_until_us_override(tmp_path):
    main(["run", write(tmp_path, scenarios.get("blocked")), "--until-us", "2000", "--out", str(tmp_path)])
    times = [json.loads(line)["time_us"] for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert max(times) <= 2000


def test_output_formats(tmp_path):
    main(["run", write(tmp_path, scenarios.get("heartbeat_expiry")), "--out", str(tmp_path)])
    prev = -math.inf
    for line in (tmp_path / "trace.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert set(rec) == {"time_us", "actor", "direction", "kind", "summary"}
        assert rec["time_us"] >= prev
        prev = rec["time_us"]
    rows = list(csv.reader((tmp_path / "metrics.csv").open()))
    assert {len(r) for r in rows} == {len(METRICS_HEADER)}
    for r in rows[1:]:
        for i in (1, 2, 3, 5, 6, 7, 8):
            float(r[i])


def test_decode_denial(capsys):
    assert main(["decode", DENIAL_PACKET_HEX]) == 0
    out = capsys.readouterr().out
    assert "ServiceDenial" in out and "reason=NoImprovement" in out
    assert "hop_limit=64" in out


def test_decode_wrong_next_header(capsys):
    bad = DENIAL_PACKET_HEX[:12] + "11" + DENIAL_PACKET_HEX[14:]
    assert main(["decode", bad]) == 1
    assert "NotIrsProtocol" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["abc", "zz"])
def test_decode_bad_hex(text, capsys):
    assert main(["decode", text]) == 1
    assert "BadHex" in capsys.readouterr().err


def test_graph_export(tmp_path, capsys):
    assert main(["graph", write(tmp_path, scenarios.get("blocked")), "--at-us", "0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    edges = {tuple(line.split()[1:3]): float(line.split()[3]) for line in lines}
    assert all(line.startswith("edge ") for line in lines)
    assert ("rx", "tx") not in edges  # blocked by the sphere
    assert edges[("n1", "tx")] == pytest.approx(fspl_db(math.dist((0, 0), (10, 5)), 28e9), abs=1e-6)


def test_graph_orbital_changes_with_time(tmp_path, capsys):
    f = write(tmp_path, scenarios.get("orbital_predictive"))
    main(["graph", f, "--at-us", "0"])
    first = capsys.readouterr().out
    main(["graph", f, "--at-us", "50000000"])
    assert capsys.readouterr().out != first


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ioirs.cli", "decode", "00"], capture_output=True, text=True)
    assert res.returncode == 1 and "Truncated" in res.stderr
