"""End-to-end workflow on the tiny synthetic collection."""

import json
from dataclasses import replace

import pandas as pd
import pytest

from dense_prf.config import config_from_dict
from dense_prf.errors import StageError
from dense_prf.manifest import META_DIR, read_registry
from dense_prf.pipeline import Workspace, run_pipeline, train_baseline
from dense_prf.retrieval import read_run

from tests.conftest import fast_config_dict


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    cfg = config_from_dict(fast_config_dict(tmp_path_factory.mktemp("pipeline") / "out"))
    ws = Workspace.from_config(cfg)
    table = run_pipeline(cfg, ws)
    return cfg, ws, table


def _registry_rows(ws):
    path = ws.registry if ws.registry.exists() else ws.registry.with_suffix(".sqlite")
    return read_registry(path)


class TestPipeline:
    def test_summary_rows(self, finished):
        cfg, ws, table = finished
        assert table["system"].tolist() == ["BM25", "baseline*", "PRF k=0", "PRF k=1"]
        assert pd.read_csv(ws.summary)["system"].tolist() == table["system"].tolist()
        for m in cfg.evaluation.metrics:
            assert table[m].between(0.0, 1.0).all()

    def test_runs(self, finished):
        cfg, ws, _ = finished
        for name in ("bm25", "baseline", "prf_k0", "prf_k1"):
            run = read_run(ws.run("test", name))
            assert len(run) == cfg.synthetic.test_queries
            assert run.run_tag.endswith(cfg.config_hash)
        prf = read_run(ws.run("test", "prf_k1"))
        assert all(len(prf.hits(q)) == cfg.prf.final_depth for q in prf.query_ids)

    def test_metric_files(self, finished):
        cfg, ws, _ = finished
        payload = json.loads(ws.metrics("test", "prf_k1").read_text())
        assert set(payload["metrics"]) == set(cfg.evaluation.metrics)
        assert payload["config_hash"] == cfg.config_hash

    def test_checkpoints_and_snapshots(self, finished):
        _, ws, _ = finished
        assert ws.baseline_ckpt.exists()
        assert ws.prf_ckpt(0).exists() and ws.prf_ckpt(1).exists()
        snaps = sorted(p.name for p in ws.prf_snapshots(1).glob("step_*.ckpt"))
        assert snaps == ["step_000000.ckpt", "step_000002.ckpt", "step_000004.ckpt"]

    def test_training_log(self, finished):
        _, ws, _ = finished
        records = [json.loads(line) for line in ws.train_log("prf_k1").read_text().splitlines()]
        evals = [r for r in records if r["kind"] == "eval"]
        assert [r["step"] for r in evals] == [0, 2, 4]
        assert all("geometry" in r and "group_attention" in r for r in evals)

    def test_analysis_outputs(self, finished):
        _, ws, _ = finished
        for name in ("attention_k1.jsonl", "attention_k1.summary.json", "geometry_k1.jsonl", "geometry_k1.svg",
                     "highlight_k1.html", "case_study_k1.json", "win_loss_k1.svg", "ablation.csv"):
            assert (ws.analysis / name).exists(), name
        geometry = [json.loads(line) for line in (ws.analysis / "geometry_k1.jsonl").read_text().splitlines()]
        assert [r["step"] for r in geometry] == [0, 2, 4]
        ablation = pd.read_csv(ws.analysis / "ablation.csv")
        assert ablation["system"].tolist() == ["baseline*", "k=0", "k=1"]

    def test_manifests_and_registry(self, finished):
        cfg, ws, _ = finished
        assert (ws.root / "resolved_config.yaml").read_text().startswith(f"# config_hash: {cfg.config_hash}")
        meta = json.loads((ws.root / META_DIR / "meta_train-prf-k1.json").read_text())
        assert meta["status"] == "ok"
        assert meta["config_hash"] == cfg.config_hash
        stages = {row[1] for row in _registry_rows(ws)}
        assert {"gen-synthetic", "build-vocab", "bm25", "train-baseline", "build-index", "first-pass",
                "train-prf-k0", "train-prf-k1", "retrieve-prf", "evaluate", "significance", "ablate"} <= stages

    def test_prf_retrieval_counters(self, finished):
        _, ws, _ = finished
        meta = json.loads((ws.root / META_DIR / "meta_retrieve-prf.json").read_text())
        # last retrieve-prf stage is k=1: two encoder calls and two searches per query
        assert meta["counts"]["per_query_encoder_calls"] == 2.0
        assert meta["counts"]["per_query_searches"] == 2.0


def test_missing_stage_input(fast_config):
    ws = Workspace.from_config(fast_config)
    ws.root.mkdir(parents=True)
    with pytest.raises(StageError, match="train-baseline"):
        train_baseline(fast_config, ws)
    meta = json.loads((ws.root / META_DIR / "meta_train-baseline.json").read_text())
    assert meta["status"] == "failed"


@pytest.mark.slow
def test_rerun_is_byte_identical(finished, tmp_path):
    cfg, ws, _ = finished
    cfg2 = replace(cfg, paths=replace(cfg.paths, out_dir=str(tmp_path / "again")))
    ws2 = Workspace.from_config(cfg2)
    run_pipeline(cfg2, ws2)
    for name in ("bm25", "baseline", "prf_k0", "prf_k1"):
        assert ws.run("test", name).read_bytes() == ws2.run("test", name).read_bytes()
        assert ws.metrics("test", name).read_bytes() == ws2.metrics("test", name).read_bytes()
    assert ws.index.read_bytes() == ws2.index.read_bytes()
    assert ws.prf_ckpt(1).read_bytes() == ws2.prf_ckpt(1).read_bytes()
    assert ws.summary.read_bytes() == ws2.summary.read_bytes()


def _trend_config(out_dir, seed):
    raw = fast_config_dict(out_dir)
    raw["synthetic"] = {"seed": seed}
    raw["model"] = {"seed": seed}
    train = {"total_steps": 2000, "eval_interval": 250, "log_interval": 100, "seed": seed}
    raw["train_baseline"] = dict(train)
    raw["train_prf"] = dict(train, k=3)
    raw["prf"] = {"k": 3}
    raw["retrieval"] = {}
    raw["analysis"] = {"ablation_ks": [0, 3]}
    return config_from_dict(raw)


@pytest.mark.slow
def test_feedback_trends(tmp_path):
    """Default benchmark, three seeds: k=3 beats the k=0 control and attends more to relevant feedback."""
    better, separated = 0, 0
    for seed in (41, 42, 43):
        cfg = _trend_config(tmp_path / f"seed{seed}", seed)
        ws = Workspace.from_config(cfg)
        table = run_pipeline(cfg, ws).set_index("system")
        better += table.loc["PRF k=3", "mrr@10"] > table.loc["PRF k=0", "mrr@10"]
        summary = json.loads((ws.analysis / "attention_k3.summary.json").read_text())
        separated += (summary["relevant_wins"] or 0.0) > 0.5
    assert better >= 2
    assert separated >= 2
