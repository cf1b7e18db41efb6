import json

import pytest

from modeltrace import acpt, config, media
from modeltrace.cli import run
from modeltrace.phash import image_phash


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    code = run(["--workspace", str(root), "synth", "--n-train", "200", "--n-test", "100",
                "--frames", "40", "--keys", "10"])
    assert code == 0
    return root


def cli(root, *argv):
    return run(["--workspace", str(root), *argv])


def test_usage_errors_exit_2():
    assert run([]) == 2
    assert run(["trace", "--no-such-flag"]) == 2
    assert run(["ledger"]) == 2


def test_synth_layout(workspace):
    assert (workspace / config.MANIFEST_NAME).exists()
    assert (workspace / "data" / "train-images.idx.gz").exists()
    assert (workspace / "videos" / "Alice.y4m").exists()
    assert len(list((workspace / "keys" / "apple").glob("*.ppm"))) == 10


def test_phash_prints_hex(workspace, capsys):
    assert cli(workspace, "phash", str(workspace / "owner_fp.ppm")) == 0
    expected = image_phash(media.load_pnm(workspace / "owner_fp.ppm")).hex()
    assert expected in capsys.readouterr().out


def test_select_claim_and_verify(workspace, capsys):
    assert cli(workspace, "frames", "select", str(workspace / "videos" / "Alice.y4m"),
               "--count", "5", "--d-min", "2", "--user", "Alice") == 0
    ts = media.load_trigger_set(workspace / "triggers" / "Alice")
    assert len(ts) == 5 and ts.label == 10

    assert cli(workspace, "ledger", "claim", "--owner", "Acme", "--owner-fp",
               str(workspace / "owner_fp.ppm"), "--user", "Alice") == 0
    assert cli(workspace, "ledger", "verify") == 0
    assert cli(workspace, "ledger", "owner", "--trigger", str(workspace / "triggers" / "Alice" / "0002.ppm"),
               "--owner-fp", str(workspace / "owner_fp.ppm")) == 0
    out = capsys.readouterr().out
    assert "ok (5 records)" in out and '"owner_id": "Acme"' in out

    path = workspace / "ledger" / "claims.ndjson"
    lines = path.read_bytes().split(b"\n")
    lines[1] = lines[1].replace(b"Acme", b"Acne")
    path.write_bytes(b"\n".join(lines))
    assert cli(workspace, "ledger", "verify") == 1
    assert "first-bad-seq=3" in capsys.readouterr().out
    assert cli(workspace, "ledger", "append", "--owner", "x", "--p", "00000000000000ff") == 1


def test_clean_model_is_untraceable(workspace, capsys):
    assert cli(workspace, "frames", "select", str(workspace / "videos" / "Bob.y4m"),
               "--count", "5", "--d-min", "2", "--user", "Bob", "--out", str(workspace / "bob-triggers")) == 0
    assert cli(workspace, "train-base", "--epochs", "1") == 0
    assert (workspace / "models" / "base.tnn").exists()
    code = cli(workspace, "trace", "--model", str(workspace / "models" / "base.tnn"),
               "--triggers", str(workspace / "bob-triggers"))
    assert code == 1
    out = capsys.readouterr().out
    assert f"verdict={config.TRACE_FAILURE}" in out and "T-Bob=0.0000" in out


def test_credential_command(workspace, capsys):
    assert cli(workspace, "acpt", "credential", "--username", "alice", "--owner-fp", "HN",
               "--k1", "0,1,2,3,4,5,6,7") == 0
    expected = acpt.make_credential("alice", "HN", range(8)).to_text()
    assert expected in capsys.readouterr().out


def test_metrics_mse_of_identical_images(workspace, capsys):
    key = workspace / "keys" / "apple" / "0000.ppm"
    assert cli(workspace, "metrics", "mse", str(key), str(key)) == 0
    assert "mse 0.000000" in capsys.readouterr().out


def test_runs_leave_ndjson_logs(workspace):
    assert cli(workspace, "acpt", "credential", "--username", "bob", "--owner-fp", "HN", "--seed", "4") == 0
    logs = sorted((workspace / "logs").glob("acpt_credential_*.ndjson"))
    assert logs
    events = [json.loads(line) for line in logs[-1].read_text().splitlines()]
    assert events[0]["op"] == "run_start" and events[-1]["op"] == "run_end"
    assert any(e["op"] == "exit" and e["code"] == 0 for e in events)


def test_bad_manifest_is_a_domain_error(tmp_path, capsys):
    (tmp_path / config.MANIFEST_NAME).write_text("theta1: 3\n", encoding="utf-8")
    assert cli(tmp_path, "acpt", "credential", "--username", "a", "--owner-fp", "HN") == 1
    assert "error:" in capsys.readouterr().out
