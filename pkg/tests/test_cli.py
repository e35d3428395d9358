import json
import os

import pytest

from rampwise.cli import main

SMALL = ["--set", "bandit.rounds=3", "--set", "bandit.n_trees=10", "--set", "bandit.target_count=60",
         "--set", "forest.n_trees_detection=20", "--set", "forest.n_trees_type=10",
         "--set", "workflow.horizons=[1, 6]", "--set", "train.epochs=3"]


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--ramps", "20", "--n", "2000", "--seed", "3", "--out", str(d),
                 "--frozen-time", "0"]) == 0
    return d


def test_synth_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        code, out, _ = run(["synth", "--ramps", "100", "--seed", "7", "--out", str(d), "--frozen-time", "0"],
                           capsys)
        assert code == 0
    assert json.loads(out)["planted"] == 100
    for name in ("data.csv", "truth.json", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_evaluate_identity(corpus, tmp_path, capsys):
    truth = str(corpus / "truth.json")
    code, out, _ = run(["evaluate", "--pred", truth, "--actual", truth, "--out", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(out)["metrics"]["f1"] == 1.0
    assert (tmp_path / "event_metrics.csv").exists()


def test_usage_errors(capsys):
    code, _, err = run(["synth", "--no-such-flag"], capsys)
    assert code == 1 and "usage" in err
    assert run(["nonsense"], capsys)[0] == 1
    assert run(["synth", "--set", "rba.nope=1"], capsys)[0] == 1
    assert run(["ingest"], capsys)[0] == 1  # no dataset given


def test_data_errors(tmp_path, capsys):
    assert run(["ingest", "--data", str(tmp_path / "missing.csv"), "--rated-power", "1"], capsys)[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,power\n3600,1\n0,2\n")
    assert run(["ingest", "--data", str(bad), "--rated-power", "1"], capsys)[0] == 2


@pytest.mark.parametrize("argv", [
    ["ingest"], ["decompose"], ["events", "--bands"], ["features"], ["select"],
    ["train", "--workflow", "W2"], ["predict", "--workflow", "W3"], ["reconstruct", "--oracle"],
])
def test_subcommands_reproducible(corpus, tmp_path, capsys, argv):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        flags = ["--data", str(corpus / "data.csv"), "--rated-power", "475", "--out", str(d),
                 "--frozen-time", "0", "--seed", "1"]
        code, out, err = run(argv + flags + SMALL, capsys)
        assert code == 0, err
        outs.append(d)
    names = sorted(os.listdir(outs[0]))
    assert "summary.json" in names and names == sorted(os.listdir(outs[1]))
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes(), n


def test_agent_run_and_inspect(corpus, tmp_path, capsys, monkeypatch):
    base = tmp_path / "exp.jsonl"
    monkeypatch.setenv("RAMPWISE_EXPERIENCE_BASE", str(base))
    code, out, err = run(["agent-run", "--bootstrap", "--data", str(corpus / "data.csv"), "--frozen-time", "1e9",
                          "--out", str(tmp_path / "a")] + SMALL, capsys)
    assert code == 0, err
    res = json.loads(out)
    assert res["records"] == 73 and res["mode"] in ("forced", "explore", "exploit")
    code, out, _ = run(["agent-inspect", "--data", str(corpus / "data.csv"), "--frozen-time", "1e9"], capsys)
    assert code == 0
    state = json.loads(out)
    assert state["records"] == {"synthetic": 72, "real": 1}
    assert set(state["state"]["q"]) == {"W1", "W2", "W3", "W4"}


def test_agent_needs_base(corpus, capsys, monkeypatch):
    monkeypatch.delenv("RAMPWISE_EXPERIENCE_BASE", raising=False)
    assert run(["agent-inspect", "--data", str(corpus / "data.csv")], capsys)[0] == 1
