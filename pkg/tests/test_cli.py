"""Run configuration handling and the command-line pipeline stages."""

import json
import os

import pytest

from saber.cli import main
from saber.config import DEFAULTS, ConfigError, load_config

TINY = [
    "--set", "synth.demos=48",
    "--set", "synth.dim=8",
    "--set", "model.n_heads=2",
    "--set", "forge.k=4",
    "--set", "forge.m=2",
    "--set", "forge.N=2",
    "--set", "forge.cand=16",
    "--set", "train.epochs=2",
    "--set", "train.batch=8",
    "--set", "gen.n=2",
    "--set", "eval.gap_trials=2",
]


def _run(*argv: str) -> int:
    return main(list(argv))


# ---- config ----


def test_load_config_defaults():
    cfg = load_config()
    assert cfg == DEFAULTS and cfg is not DEFAULTS
    assert cfg["train"]["lr"] == 0.01
    assert cfg["forge"]["k"] == 8
    assert cfg["scorer"]["backend"] == "oracle"


def test_override_precedence_cli_beats_file_beats_default(tmp_path):
    path = str(tmp_path / "cfg.json")
    json.dump(
        {"train": {"lr": 0.5, "epochs": 7}, "forge": {"k": 3}, "synth": {"demos": 99}},
        open(path, "w"),
    )
    cfg = load_config(path, ["train.lr=0.25", "synth.demos=11"])
    assert cfg["train"]["lr"] == 0.25  # CLI wins over file
    assert cfg["synth"]["demos"] == 11
    assert cfg["train"]["epochs"] == 7  # file wins over default
    assert cfg["forge"]["k"] == 3
    assert cfg["forge"]["m"] == DEFAULTS["forge"]["m"]  # default survives


def test_override_value_parsing():
    cfg = load_config(None, [
        "model.task_layers=[1]",
        "scorer.backend=remote",
        "fusion.elementwise=true",
    ])
    assert cfg["model"]["task_layers"] == [1]
    assert cfg["scorer"]["backend"] == "remote"  # bare string passes through
    assert cfg["fusion"]["elementwise"] is True


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, ["train.momentum=0.9"])
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(None, ["nope.lr=1"])
    with pytest.raises(ConfigError, match="not key=value"):
        load_config(None, ["trainlr"])
    path = str(tmp_path / "cfg.json")
    json.dump({"optimizer": {"lr": 1}}, open(path, "w"))
    with pytest.raises(ConfigError, match="unknown config key 'optimizer'"):
        load_config(path)


def test_seed_flag_and_endpoint_env(monkeypatch):
    assert load_config(None, [], seed=42)["seed"] == 42
    monkeypatch.setenv("SABER_SCORER_ENDPOINT", "10.0.0.5:9000")
    cfg = load_config()
    assert cfg["scorer"]["endpoint"] == "10.0.0.5:9000"
    monkeypatch.delenv("SABER_SCORER_ENDPOINT")
    assert load_config()["scorer"]["endpoint"] == ""


# ---- CLI plumbing ----


def test_unknown_flag_and_missing_command_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        _run("--bogus", "synth")
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        _run()
    assert e.value.code == 2


def test_invalid_config_exits_2(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert _run("--set", "train.momentum=1", "--out", out, "synth") == 2
    assert "invalid config" in capsys.readouterr().err


def test_synth_deterministic_and_manifest(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert _run("--out", out, "--seed", "5", *TINY, "synth") == 0
        outs.append(out)
    blobs = [open(os.path.join(o, "store.jsonl"), "rb").read() for o in outs]
    assert blobs[0] == blobs[1]

    manifest = json.load(open(os.path.join(outs[0], "synth.manifest.json")))
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 5
    assert manifest["config"]["synth"]["demos"] == 48
    store = os.path.join(outs[0], "store.jsonl")
    assert set(manifest["outputs"]) == {store}
    assert len(manifest["outputs"][store]) == 16
    assert len(manifest["config_hash"]) == 16


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One tiny full pipeline run shared by the stage assertions below."""
    out = str(tmp_path_factory.mktemp("pipe"))
    for stage in ("synth", "cluster", "forge", "train", "generate", "compare"):
        assert main(["--out", out, "--seed", "1", *TINY, stage]) == 0, stage
    return out


def test_pipeline_artifacts_exist(pipeline_dir):
    expected = [
        "store.jsonl", "split.jsonl", "dataset.jsonl", "model.ckpt",
        "train_log.jsonl", "generated.jsonl",
        "report.json", "report.txt", "report_mean.png", "report_quality.png",
    ]
    for name in expected:
        path = os.path.join(pipeline_dir, name)
        assert os.path.exists(path), name
        assert os.path.getsize(path) > 0, name
    for stage in ("synth", "cluster", "forge", "train", "generate", "compare"):
        assert os.path.exists(os.path.join(pipeline_dir, f"{stage}.manifest.json"))


def test_pipeline_split_counts(pipeline_dir):
    lines = open(os.path.join(pipeline_dir, "split.jsonl")).read().splitlines()
    header = json.loads(lines[0])
    assert header == {"format": "icdstore/v1", "dim": 8}
    roles = [json.loads(l)["role"] for l in lines[1:]]
    assert roles.count("query") == 4 * 2  # k clusters x m queries each
    assert roles.count("demo") == 48 - 8
    assert roles.count("inst") == 1


def test_pipeline_dataset_shape(pipeline_dir):
    lines = open(os.path.join(pipeline_dir, "dataset.jsonl")).read().splitlines()
    assert json.loads(lines[0]) == {"format": "saber-ds/v1", "N": 2}
    rows = [json.loads(l) for l in lines[1:]]
    assert len(rows) == 8 * 4  # queries x beam (beam defaults to 2N)
    for row in rows:
        assert set(row) == {"query", "icds", "score"}
        assert len(row["icds"]) == 2


def test_pipeline_report_contains_saber(pipeline_dir):
    report = json.load(open(os.path.join(pipeline_dir, "report.json")))
    assert report["format"] == "saber-report/v1"
    names = {m["name"] for m in report["methods"]}
    assert names == {"rs", "i2i", "iq2iq-ams", "iq2iq-jes", "saber"}
    assert all("mean" in m for m in report["methods"])


def test_baseline_subcommand_each_method(pipeline_dir, capsys):
    for method in ("rs", "i2i", "iq2iq-ams", "iq2iq-jes", "iqpr"):
        assert main(["--out", pipeline_dir, "--seed", "1", *TINY, "baseline", method]) == 0
        path = os.path.join(pipeline_dir, f"baseline_{method}.jsonl")
        lines = open(path).read().splitlines()
        assert json.loads(lines[0])["format"] == "saber-ds/v1"
        assert len(lines) == 1 + 8
    assert main(["--out", pipeline_dir, *TINY, "baseline", "nope"]) == 2
    assert "unknown baseline" in capsys.readouterr().err


def test_perturb_subcommand(pipeline_dir):
    assert main(["--out", pipeline_dir, "--seed", "1", *TINY, "perturb", "random-q"]) == 0
    path = os.path.join(pipeline_dir, "perturbed_random-q.jsonl")
    rows = [json.loads(l) for l in open(path)]
    assert len(rows) == 8
    for row in rows:
        assert row["mode"] == "random-q"
        qs = {t["q"] for t in row["triplets"]}
        assert len(qs) == 1  # one member's question copied everywhere


def test_missing_artifact_exits_1(tmp_path):
    out = str(tmp_path / "empty")
    assert _run("--out", out, *TINY, "train") == 1


def test_gradcheck_subcommand(tmp_path, capsys):
    assert _run("--out", str(tmp_path / "g"), "gradcheck") == 0
    assert "gradcheck" in capsys.readouterr().out
