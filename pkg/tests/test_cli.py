import json

import pytest
from click.testing import CliRunner
from filelock import FileLock

from retrosynth.cli import main

TINY = {
    "train-mpc": ["--hidden-dim", "8", "--epochs", "5"],
    "train-nre": ["--hidden-dim", "8", "--layers", "1", "--epochs", "3"],
    "train": ["--hidden-dim", "8", "--epochs", "4", "--lr", "1e-3"],
}


def run(ws, *args, ok=True):
    result = CliRunner().invoke(main, ["--workspace", str(ws), *args])
    if ok:
        assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    res = CliRunner().invoke(main, ["synth", "--out", str(out), "--recipes", "80", "--elements", "6",
                                    "--vocab", "9", "--dft", "60", "--exp", "20"])
    assert res.exit_code == 0, res.output
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    ws = tmp_path_factory.mktemp("ws")
    run(ws, "ingest", "--recipes", str(corpus / "recipes.jsonl"))
    run(ws, "train-mpc", *TINY["train-mpc"])
    run(ws, "train-nre", "--dft", str(corpus / "dft.csv"), "--exp", str(corpus / "exp.csv"), *TINY["train-nre"])
    run(ws, "precompute-refs", "--retriever", "both", "--k", "3")
    run(ws, "train", "--k", "3", "--seed", "0", *TINY["train"])
    return ws


def test_synth_writes_files(corpus):
    assert {p.name for p in corpus.iterdir()} >= {"recipes.jsonl", "dft.csv", "exp.csv"}


def test_missing_ingest_is_named(tmp_path):
    res = run(tmp_path, "train-mpc", ok=False)
    assert res.exit_code != 0 and "retro ingest" in res.output


def test_train_before_refs_names_precompute(tmp_path, corpus):
    run(tmp_path, "ingest", "--recipes", str(corpus / "recipes.jsonl"))
    res = run(tmp_path, "train", ok=False)
    assert res.exit_code != 0 and "precompute-refs" in res.output


def test_pipeline_produces_report(trained, tmp_path):
    out = tmp_path / "report.json"
    res = run(trained, "evaluate", "--split", "year", "--report", str(out))
    report = json.loads(out.read_text())
    assert set(report["top_k_acc"]) == {"1", "3", "5", "10"}
    assert set(report["case_breakdown"]) == {"subset", "new"}
    assert "top5" in res.output
    rel = tmp_path / "rel.json"
    run(trained, "evaluate", "--report", str(rel), "--case-mode", "subset-relation")
    assert json.loads(rel.read_text())["top_k_acc"] == report["top_k_acc"]


def test_rerun_is_noop_and_force_reproduces(trained, tmp_path):
    res = run(trained, "train", "--k", "3", "--seed", "0", *TINY["train"])
    assert "up to date" in res.output
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(trained, "evaluate", "--report", str(a))
    run(trained, "--force", "train", "--k", "3", "--seed", "0", *TINY["train"])
    run(trained, "evaluate", "--report", str(b))
    assert a.read_text() == b.read_text()


def test_manifest_records_config_and_checksums(trained):
    manifest = json.loads((trained / "year" / "model" / "seed0" / "manifest.json").read_text())
    assert manifest["config"]["fusion"]["k"] == 3
    assert {"records", "refs_mpc", "refs_nre", "features"} <= set(manifest["inputs"])
    assert "model.pt" in manifest["outputs"]
    refs = json.loads((trained / "year" / "refs-mpc" / "manifest.json").read_text())
    assert set(refs["inputs"]) == {"records", "checkpoint"}


def test_stale_refs_detected(trained, corpus):
    run(trained, "--force", "train-mpc", "--seed", "1", *TINY["train-mpc"])
    res = run(trained, "train", "--k", "3", "--seed", "5", *TINY["train"], ok=False)
    assert "stale" in res.output and "precompute-refs" in res.output
    run(trained, "--force", "train-mpc", "--seed", "0", *TINY["train-mpc"])


def test_predict_prints_ranked_sets(trained):
    res = run(trained, "predict", "--target", "BaTiO3", "--topk", "4")
    out = json.loads(res.output)
    assert len(out["predictions"]) == 4
    assert [p["rank"] for p in out["predictions"]] == [1, 2, 3, 4]
    scores = [p["score"] for p in out["predictions"]]
    assert scores == sorted(scores, reverse=True)
    bad = run(trained, "predict", "--target", "Xq2", ok=False)
    assert "Xq" in bad.output


def test_logs_are_json_lines(trained):
    lines = (trained / "log.jsonl").read_text().splitlines()
    assert lines
    for line in lines:
        entry = json.loads(line)
        assert {"time", "level", "msg"} <= set(entry)


def test_lock_blocks_second_command(trained):
    with FileLock(str(trained / ".lock")):
        res = run(trained, "evaluate", ok=False)
    assert "in use" in res.output


def test_k_larger_than_table(trained):
    res = run(trained, "train", "--k", "5", *TINY["train"], ok=False)
    assert "precompute-refs --k 5" in res.output
