"""Command-line entry point: dispatch and exit codes."""

import json
from dataclasses import asdict

import pytest
import yaml

from dense_prf.cli import EXIT_CONFIG, EXIT_MISSING, main


@pytest.fixture
def out_dir(tmp_path):
    return tmp_path / "out"


def test_evaluate_prints_metrics(fixtures_dir, out_dir, capsys):
    code = main(["evaluate", "--run", str(fixtures_dir / "fixture_a.trec"),
                 "--qrels", str(fixtures_dir / "fixture.qrels"),
                 "--metrics", "mrr@10,ndcg@10", "--out-dir", str(out_dir)])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["mrr@10\t0.708333", "ndcg@10\t0.625546"]
    payload = json.loads((out_dir / "metrics" / "fixture_a.json").read_text())
    assert set(payload["metrics"]) == {"mrr@10", "ndcg@10"}


def test_significance(fixtures_dir, out_dir, capsys):
    code = main(["significance", "--run-a", str(fixtures_dir / "fixture_b.trec"),
                 "--run-b", str(fixtures_dir / "fixture_a.trec"),
                 "--qrels", str(fixtures_dir / "fixture.qrels"), "--out-dir", str(out_dir)])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["n"] == 4
    assert result["significant"] is False


def test_unknown_metric_is_a_config_error(fixtures_dir, out_dir):
    code = main(["evaluate", "--run", str(fixtures_dir / "fixture_a.trec"),
                 "--qrels", str(fixtures_dir / "fixture.qrels"), "--metrics", "map@10", "--out-dir", str(out_dir)])
    assert code == EXIT_CONFIG


def test_invalid_config(tmp_path, out_dir):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"model": {"bogus": 1}}))
    assert main(["build-vocab", "--config", str(path), "--out-dir", str(out_dir)]) == EXIT_CONFIG


def test_bad_synthetic_spec_file(tmp_path, out_dir):
    missing = tmp_path / "nowhere.yaml"
    assert main(["gen-synthetic", "--spec", str(missing), "--out-dir", str(out_dir)]) == EXIT_CONFIG
    listed = tmp_path / "list.yaml"
    listed.write_text("- 1\n- 2\n")
    assert main(["gen-synthetic", "--spec", str(listed), "--out-dir", str(out_dir)]) == EXIT_CONFIG
    assert not (out_dir / "data" / "corpus.tsv").exists()


def test_missing_inputs(out_dir):
    assert main(["build-vocab", "--out-dir", str(out_dir)]) == EXIT_MISSING
    assert main(["retrieve", "--mode", "baseline", "--out-dir", str(out_dir)]) == EXIT_MISSING


def test_generate_then_grad_check(tmp_path, out_dir, tiny_spec, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump(asdict(tiny_spec)))
    assert main(["gen-synthetic", "--spec", str(spec), "--out-dir", str(out_dir)]) == 0
    assert (out_dir / "data" / "corpus.tsv").read_text().count("\n") == tiny_spec.num_docs
    assert main(["build-vocab", "--out-dir", str(out_dir)]) == 0
    assert (out_dir / "vocab.txt").exists()
    assert main(["train", "--grad-check", "--k", "2", "--out-dir", str(out_dir)]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_unknown_command():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
