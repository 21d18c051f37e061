"""Bridge command-line behavior."""

import json

import pytest

from embed_bridge.cli import main

from bridge_testutil import toy_dataset_spec


def test_extract_command(tmp_path, capsys):
    out = str(tmp_path / "store.jsonl")
    code = main(["extract", "--dataset", toy_dataset_spec(tmp_path), "--out", out])
    assert code == 0
    assert json.loads(open(out).readline())["format"] == "icdstore/v1"
    assert "extract: wrote" in capsys.readouterr().out


def test_extract_failures_exit_1(tmp_path):
    missing = str(tmp_path / "missing.json")
    assert main(["extract", "--dataset", missing, "--out", str(tmp_path / "o")]) == 1
    assert main([
        "extract", "--dataset", toy_dataset_spec(tmp_path),
        "--out", str(tmp_path / "o.jsonl"), "--encoder", "nope",
    ]) == 1


def test_fill_pseudo_command(tmp_path, capsys):
    store = str(tmp_path / "store.jsonl")
    main(["extract", "--dataset", toy_dataset_spec(tmp_path), "--out", store])
    answers = tmp_path / "answers.json"
    answers.write_text(json.dumps({"q0": "green", "q1": "three"}))
    out = str(tmp_path / "filled.jsonl")
    code = main(["fill-pseudo", "--store", store, "--out", out,
                 "--answers", str(answers)])
    assert code == 0
    assert "filled 2 queries" in capsys.readouterr().out
    assert main(["fill-pseudo", "--store", store, "--out", out]) == 1  # no source


def test_fill_pseudo_generate_flag(tmp_path):
    store = str(tmp_path / "store.jsonl")
    main(["extract", "--dataset", toy_dataset_spec(tmp_path), "--out", store])
    out = str(tmp_path / "gen.jsonl")
    assert main(["fill-pseudo", "--store", store, "--out", out, "--generate"]) == 0
    rows = [json.loads(l) for l in open(out).read().splitlines()[1:]]
    assert all("pseudo_r" in r for r in rows if r["role"] == "query")


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
