"""
dense_prf/pipeline.py

Stage functions behind the CLI, in workflow order:

    gen_synthetic -> build_vocab -> bm25 -> train_baseline -> build_index
    -> first_pass -> train_prf (per k) -> retrieve -> evaluate -> analyze -> summary

Every stage checks its inputs up front (StageError names the stage), writes
its outputs under one output directory, and records a manifest.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import pandas as pd

from dense_prf.analysis.ablation import depth_ablation, metrics_table
from dense_prf.analysis.attention import (
    average_group_attention,
    group_attention,
    group_attention_record,
    highlight_terms,
    render_highlight_html,
)
from dense_prf.analysis.geometry import embedding_geometry
from dense_prf.analysis.plots import plot_geometry, plot_group_attention, plot_training_loss, plot_win_loss
from dense_prf.config import RunConfig, write_resolved_config
from dense_prf.encoder import (
    ModelConfig,
    PrfEncoder,
    Vocabulary,
    build_vocab,
    clone_encoder,
    cls_attention,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from dense_prf.errors import ConfigError, DensePrfError, StageError
from dense_prf.etl.loaders import DocumentRecord, QueryRecord, load_corpus, load_qrels, load_queries
from dense_prf.etl.synthetic import SPLITS, data_files, generate_synthetic, write_synthetic
from dense_prf.evaluation import (
    Qrels,
    aligned,
    compute_metric,
    evaluate_run,
    is_metric_name,
    paired_t_test,
    per_query_diff,
    write_metrics_json,
)
from dense_prf.index import FlatIndex, build_index, load_index, save_index
from dense_prf.manifest import REGISTRY_NAME, StageManifest, file_sha256, record_registry, write_manifest
from dense_prf.retrieval import (
    Bm25Index,
    RetrievalContext,
    RetrievalCounters,
    RunList,
    embed_corpus,
    first_pass,
    prf_retrieve,
    prf_run_tag,
    read_run,
    retrieve_all,
    tokenize_corpus,
    write_run,
)
from dense_prf.trainer import (
    GradCheckResult,
    TrainingExample,
    gradient_check,
    make_examples,
    sample_negatives,
    train,
)

log = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
RETRIEVE_MODES = ("baseline", "prf", "bm25")
ANALYSES = ("attention", "geometry", "highlight", "ablate")


# ------------------------------
# Output layout
# ------------------------------
@dataclass(frozen=True)
class Workspace:
    root: Path
    data_dir: Path

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Workspace":
        root = Path(cfg.paths.out_dir)
        data = Path(cfg.paths.data_dir) if cfg.paths.data_dir else root / "data"
        return cls(root=root, data_dir=data)

    @property
    def files(self) -> Dict[str, Path]:
        return data_files(self.data_dir)

    def queries(self, split: str) -> Path:
        return self.files[f"queries_{split}"]

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.txt"

    @property
    def baseline_ckpt(self) -> Path:
        return self.root / "models" / "baseline.ckpt"

    def prf_ckpt(self, k: int) -> Path:
        return self.root / "models" / f"prf_k{k}.ckpt"

    def prf_snapshots(self, k: int) -> Path:
        return self.root / "models" / f"prf_k{k}_snapshots"

    @property
    def index(self) -> Path:
        return self.root / "index" / "docs.idx"

    def run(self, split: str, name: str) -> Path:
        return self.root / "runs" / f"{split}.{name}.trec"

    def metrics(self, split: str, name: str) -> Path:
        return self.root / "metrics" / f"{split}.{name}.json"

    def train_log(self, name: str) -> Path:
        return self.root / "logs" / f"train_{name}.jsonl"

    @property
    def analysis(self) -> Path:
        return self.root / "analysis"

    @property
    def summary(self) -> Path:
        return self.root / "summary.csv"

    @property
    def registry(self) -> Path:
        return self.root / REGISTRY_NAME


def require(stage: str, *paths: Path) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise StageError(stage, f"missing input(s): {', '.join(missing)}")


@contextmanager
def stage(name: str, cfg: RunConfig, ws: Workspace) -> Iterator[StageManifest]:
    """Log the stage boundaries and record its manifest, also on failure."""
    log.info("Stage %s started", name)
    manifest = StageManifest(stage=name, config_hash=cfg.config_hash)
    try:
        yield manifest
    except Exception:
        manifest.finish("failed")
        if ws.root.exists():
            write_manifest(manifest, ws.root)
        raise
    manifest.finish("ok")
    write_resolved_config(cfg, ws.root)
    write_manifest(manifest, ws.root)
    record_registry(manifest, ws.registry)
    log.info("Stage %s completed. Outputs in: %s", name, ws.root)


# ------------------------------
# Loading helpers
# ------------------------------
@dataclass
class Collection:
    corpus: List[DocumentRecord]
    queries: Dict[str, List[QueryRecord]]
    qrels: Qrels


def load_collection(ws: Workspace, stage_name: str) -> Collection:
    files = ws.files
    require(stage_name, *files.values())
    return Collection(
        corpus=load_corpus(files["corpus"]),
        queries={s: load_queries(ws.queries(s)) for s in SPLITS},
        qrels=load_qrels(files["qrels"]),
    )


def _load_vocab(ws: Workspace, stage_name: str) -> Vocabulary:
    require(stage_name, ws.vocab)
    return Vocabulary.load(ws.vocab)


def _load_model(path: Path, stage_name: str) -> Tuple[PrfEncoder, Dict[str, str]]:
    require(stage_name, path)
    return load_checkpoint(path)


def _merge_runs(tag: str, runs: Sequence[RunList]) -> RunList:
    merged = RunList(tag)
    for run in runs:
        for qid, hits in run.results.items():
            if qid not in merged.results:
                merged.add(qid, hits)
    return merged


def run_tag(name: str, cfg: RunConfig) -> str:
    return f"{name}_{cfg.config_hash}"


# ------------------------------
# Stages
# ------------------------------
def gen_synthetic(cfg: RunConfig, ws: Workspace, out_dir: Optional[Path] = None) -> Dict[str, Path]:
    target = Path(out_dir) if out_dir else ws.data_dir
    with stage("gen-synthetic", cfg, ws) as m:
        files = write_synthetic(generate_synthetic(cfg.synthetic), target)
        for p in files.values():
            m.add_output(p)
        m.counts["num_docs"] = cfg.synthetic.num_docs
    return files


def build_vocabulary(cfg: RunConfig, ws: Workspace) -> Vocabulary:
    with stage("build-vocab", cfg, ws) as m:
        require("build-vocab", ws.files["corpus"])
        corpus = load_corpus(ws.files["corpus"])
        vocab = build_vocab((d.text for d in corpus), cfg.vocab.min_count)
        m.add_input(ws.files["corpus"])
        m.add_output(vocab.save(ws.vocab))
        m.counts["vocab_size"] = len(vocab)
    return vocab


def bm25_runs(cfg: RunConfig, ws: Workspace, splits: Sequence[str] = SPLITS,
              depth: Optional[int] = None) -> Dict[str, RunList]:
    depth = depth or cfg.retrieval.bm25_depth
    out = {}
    with stage("bm25", cfg, ws) as m:
        col = load_collection(ws, "bm25")
        bm25 = Bm25Index(col.corpus, cfg.retrieval.bm25_k1, cfg.retrieval.bm25_b)
        for split in splits:
            run = retrieve_all(col.queries[split], lambda text: bm25.search(text, depth),
                               run_tag(f"bm25_d{depth}", cfg), cfg.runtime.threads)
            m.add_output(write_run(run, ws.run(split, "bm25")))
            out[split] = run
        m.counts["depth"] = depth
    return out


def train_baseline(cfg: RunConfig, ws: Workspace) -> PrfEncoder:
    tcfg = cfg.train_baseline
    with stage("train-baseline", cfg, ws) as m:
        vocab = _load_vocab(ws, "train-baseline")
        require("train-baseline", ws.run("train", "bm25"))
        col = load_collection(ws, "train-baseline")
        mcfg = replace(cfg.model, vocab_size=len(vocab))
        model = init_encoder(mcfg, mcfg.seed)
        ctx = RetrievalContext(vocab=vocab, doc_tokens=tokenize_corpus(col.corpus, vocab))
        bm25_train = read_run(ws.run("train", "bm25"))
        negatives = sample_negatives(bm25_train, col.qrels, tcfg.negatives, tcfg.seed,
                                     [d.doc_id for d in col.corpus], tcfg.negative_depth)
        examples = make_examples(col.queries["train"], col.qrels, ctx, negatives, 0)
        result = train("baseline", model, tcfg, examples, ctx, col.queries["dev"], col.qrels,
                       log_path=ws.train_log("baseline"), threads=cfg.runtime.threads,
                       checkpoint_meta={"config_hash": cfg.config_hash})
        save_checkpoint(result.model, ws.baseline_ckpt, {
            "config_hash": cfg.config_hash, "phase": "baseline", "k": 0,
            "best_step": result.best_step, "best_dev_mrr": f"{result.best_mrr:.6f}",
        })
        m.add_input(ws.run("train", "bm25"))
        m.add_output(ws.baseline_ckpt)
        m.add_output(ws.train_log("baseline"))
        m.counts.update({"examples": len(examples), "best_step": result.best_step,
                         "best_dev_mrr": round(result.best_mrr, 6)})
    return result.model


def build_doc_index(cfg: RunConfig, ws: Workspace, corpus_path: Optional[Path] = None,
                    encoder_path: Optional[Path] = None, out: Optional[Path] = None) -> FlatIndex:
    corpus_path = Path(corpus_path) if corpus_path else ws.files["corpus"]
    encoder_path = Path(encoder_path) if encoder_path else ws.baseline_ckpt
    out = Path(out) if out else ws.index
    with stage("build-index", cfg, ws) as m:
        require("build-index", corpus_path, encoder_path, ws.vocab)
        vocab = Vocabulary.load(ws.vocab)
        model, _ = load_checkpoint(encoder_path)
        doc_tokens = tokenize_corpus(load_corpus(corpus_path), vocab)
        index = build_index(embed_corpus(model, doc_tokens, cfg.retrieval.encode_batch_size))
        save_index(index, out)
        m.add_input(corpus_path)
        m.add_input(encoder_path)
        m.add_output(out)
        m.counts.update({"num_docs": len(index), "dim": index.dim, "sha256": file_sha256(out)})
    return index


def _dense_context(cfg: RunConfig, ws: Workspace, stage_name: str,
                   first_pass_run: Optional[RunList] = None) -> Tuple[Collection, RetrievalContext]:
    vocab = _load_vocab(ws, stage_name)
    require(stage_name, ws.baseline_ckpt, ws.index)
    col = load_collection(ws, stage_name)
    baseline, _ = load_checkpoint(ws.baseline_ckpt)
    ctx = RetrievalContext(vocab=vocab, doc_tokens=tokenize_corpus(col.corpus, vocab),
                           index=load_index(ws.index), baseline=baseline, first_pass=first_pass_run)
    return col, ctx


def first_pass_runs(cfg: RunConfig, ws: Workspace, splits: Sequence[str] = SPLITS) -> Dict[str, RunList]:
    depth = cfg.prf.first_pass_depth
    out = {}
    with stage("first-pass", cfg, ws) as m:
        col, ctx = _dense_context(cfg, ws, "first-pass")
        for split in splits:
            run = retrieve_all(col.queries[split],
                               lambda text: first_pass(text, ctx.baseline, ctx.index, depth, ctx.vocab),
                               run_tag("baseline", cfg), cfg.runtime.threads)
            m.add_output(write_run(run, ws.run(split, "baseline")))
            out[split] = run
        m.counts["depth"] = depth
    return out


def train_prf(cfg: RunConfig, ws: Workspace, k: int) -> PrfEncoder:
    """
    Train the PRF query encoder for depth k, starting from the baseline
    weights. The document index file must be byte-identical afterwards.
    """
    name = f"train-prf-k{k}"
    tcfg = replace(cfg.train_prf, k=k)
    with stage(name, cfg, ws) as m:
        require(name, ws.run("train", "baseline"), ws.run("dev", "baseline"))
        before = file_sha256(ws.index) if ws.index.exists() else None
        fp = _merge_runs("first_pass", [read_run(ws.run(s, "baseline")) for s in ("train", "dev")])
        col, ctx = _dense_context(cfg, ws, name, fp)
        negatives = sample_negatives(read_run(ws.run("train", "baseline")), col.qrels, tcfg.negatives, tcfg.seed,
                                     [d.doc_id for d in col.corpus], tcfg.negative_depth)
        examples = make_examples(col.queries["train"], col.qrels, ctx, negatives, k)
        model = clone_encoder(ctx.baseline)
        result = train("prf", model, tcfg, examples, ctx, col.queries["dev"], col.qrels,
                       log_path=ws.train_log(f"prf_k{k}"), snapshot_dir=ws.prf_snapshots(k),
                       threads=cfg.runtime.threads, relevance_threshold=cfg.analysis.relevance_threshold,
                       attention_normalize=cfg.analysis.attention_normalize,
                       irrelevant_depth=cfg.analysis.irrelevant_depth,
                       checkpoint_meta={"config_hash": cfg.config_hash})
        save_checkpoint(result.model, ws.prf_ckpt(k), {
            "config_hash": cfg.config_hash, "phase": "prf", "k": k,
            "best_step": result.best_step, "best_dev_mrr": f"{result.best_mrr:.6f}",
        })
        after = file_sha256(ws.index)
        if after != before:
            raise DensePrfError(f"document index changed during PRF training ({before} -> {after})")
        m.add_input(ws.index)
        m.add_output(ws.prf_ckpt(k))
        m.add_output(ws.train_log(f"prf_k{k}"))
        m.counts.update({"k": k, "examples": len(examples), "best_step": result.best_step,
                         "best_dev_mrr": round(result.best_mrr, 6), "index_sha256": after})
    return result.model


def grad_check(cfg: RunConfig, ws: Workspace, k: int = 2, num_queries: int = 2) -> GradCheckResult:
    """
    Finite-difference check of the PRF loss on a tiny encoder (1 layer,
    2 heads, D=8, at most 16 positions) over real training queries.
    """
    with stage("grad-check", cfg, ws) as m:
        vocab = _load_vocab(ws, "grad-check")
        col = load_collection(ws, "grad-check")
        tiny = ModelConfig(vocab_size=len(vocab), num_layers=1, num_heads=2, model_dim=8, ff_dim=16,
                           max_len=16, query_budget=4, seed=cfg.model.seed)
        model = init_encoder(tiny, tiny.seed)
        corpus_ids = [d.doc_id for d in col.corpus]
        doc_tokens = {d.doc_id: tokenize(d.text, vocab)[:3] for d in col.corpus}
        k = min(k, 2)
        batch: List[TrainingExample] = []
        for q in col.queries["train"]:
            relevant = col.qrels.relevant(q.query_id, 1)
            q_ids = tuple(tokenize(q.text, vocab))
            if not relevant or not q_ids:
                continue
            negs = tuple([d for d in corpus_ids if col.qrels.grade(q.query_id, d) < 1][:2])
            batch.append(TrainingExample(q.query_id, q_ids, relevant[0], negs, tuple(corpus_ids[:k])))
            if len(batch) == num_queries:
                break
        if not batch:
            raise StageError("grad-check", "no training query with a relevant document")
        needed = {d for ex in batch for d in (ex.positive_doc_id,) + ex.negative_doc_ids}
        index = build_index(embed_corpus(model, {d: doc_tokens[d] for d in corpus_ids if d in needed}))
        result = gradient_check(model, batch, index, doc_tokens, col.qrels)
        m.counts.update({"entries": result.checked, "max_rel_error": result.max_rel_error, "worst": result.worst})
    if result.max_rel_error > GRAD_TOLERANCE:
        log.error("Gradient check failed: max relative error %.3e > %.0e (%s)",
                  result.max_rel_error, GRAD_TOLERANCE, result.worst)
    return result


def retrieve(cfg: RunConfig, ws: Workspace, mode: str, k: Optional[int] = None, depth: Optional[int] = None,
             split: Optional[str] = None, out: Optional[Path] = None,
             encoder_path: Optional[Path] = None) -> Tuple[RunList, Path]:
    """
    One run over a query split. For mode "prf", encoder_path defaults to the
    encoder trained at k; an encoder trained at another depth is allowed and
    the run tag says so.
    """
    if mode not in RETRIEVE_MODES:
        raise ValueError(f"mode must be one of {RETRIEVE_MODES}, got {mode!r}")
    split = split or cfg.evaluation.split
    k = cfg.prf.k if k is None else k
    depth = depth or cfg.prf.final_depth
    name = f"retrieve-{mode}"
    with stage(name, cfg, ws) as m:
        if mode == "bm25":
            col = load_collection(ws, name)
            bm25 = Bm25Index(col.corpus, cfg.retrieval.bm25_k1, cfg.retrieval.bm25_b)
            run = retrieve_all(col.queries[split], lambda text: bm25.search(text, depth),
                               run_tag(f"bm25_d{depth}", cfg), cfg.runtime.threads)
            path = Path(out) if out else ws.run(split, "bm25")
        else:
            col, ctx = _dense_context(cfg, ws, name)
            counters = RetrievalCounters()
            queries = col.queries[split]
            if mode == "baseline":
                run = retrieve_all(queries,
                                   lambda text: first_pass(text, ctx.baseline, ctx.index, depth, ctx.vocab, counters),
                                   run_tag("baseline", cfg), cfg.runtime.threads)
                path = Path(out) if out else ws.run(split, "baseline")
            else:
                enc_path = Path(encoder_path) if encoder_path else ws.prf_ckpt(k)
                prf_model, meta = _load_model(enc_path, name)
                pcfg = replace(cfg.prf, k=k, final_depth=depth, trained_k=int(meta.get("k", k)))
                tag = prf_run_tag("prf", pcfg)
                before = file_sha256(ws.index)
                run = retrieve_all(
                    queries,
                    lambda text: prf_retrieve(text, prf_model, ctx.baseline, ctx.index, pcfg, ctx.vocab,
                                              ctx.doc_tokens, counters),
                    run_tag(tag, cfg), cfg.runtime.threads)
                if file_sha256(ws.index) != before:
                    raise DensePrfError("document index changed during PRF retrieval")
                path = Path(out) if out else ws.run(split, tag)
                m.add_input(enc_path)
            m.counts.update({"encoder_calls": counters.encoder_calls, "searches": counters.searches,
                             "per_query_encoder_calls": counters.encoder_calls / max(1, len(queries)),
                             "per_query_searches": counters.searches / max(1, len(queries))})
            log.info("%s: %d encoder calls, %d index searches over %d queries",
                     name, counters.encoder_calls, counters.searches, len(queries))
        m.add_output(write_run(run, path))
        m.counts.update({"split": split, "queries": len(run), "depth": depth})
    return run, path


def evaluate(cfg: RunConfig, ws: Workspace, run_path: Path, qrels_path: Optional[Path] = None,
             metrics: Optional[Sequence[str]] = None, out: Optional[Path] = None) -> Dict[str, object]:
    qrels_path = Path(qrels_path) if qrels_path else ws.files["qrels"]
    metrics = list(metrics or cfg.evaluation.metrics)
    unknown = [name for name in metrics if not is_metric_name(name)]
    if unknown:
        raise ConfigError([f"unknown metric {name!r}; expected mrr@N, ndcg@N, recall@N or hole@N" for name in unknown])
    with stage("evaluate", cfg, ws) as m:
        require("evaluate", Path(run_path), qrels_path)
        run = read_run(run_path)
        reports = evaluate_run(run, load_qrels(qrels_path), metrics,
                               rel_threshold=cfg.evaluation.rel_threshold,
                               recall_binarize_at=cfg.evaluation.recall_binarize_at)
        out = Path(out) if out else ws.root / "metrics" / f"{Path(run_path).stem}.json"
        write_metrics_json(reports, out, {"run": run.run_tag, "config_hash": cfg.config_hash})
        m.add_input(run_path)
        m.add_output(out)
        m.counts.update({name: round(r.mean, 6) for name, r in reports.items()})
    return {name: r.mean for name, r in reports.items()}


def significance_test(cfg: RunConfig, ws: Workspace, run_a: Path, run_b: Path, metric: Optional[str] = None,
                      qrels_path: Optional[Path] = None, out: Optional[Path] = None) -> dict:
    metric = metric or cfg.evaluation.significance_metric
    qrels_path = Path(qrels_path) if qrels_path else ws.files["qrels"]
    with stage("significance", cfg, ws) as m:
        require("significance", Path(run_a), Path(run_b), qrels_path)
        qrels = load_qrels(qrels_path)
        a, b = read_run(run_a), read_run(run_b)
        kw = {"rel_threshold": cfg.evaluation.rel_threshold, "recall_binarize_at": cfg.evaluation.recall_binarize_at}
        qids, xs, ys = aligned(compute_metric(metric, a, qrels, **kw), compute_metric(metric, b, qrels, **kw))
        t = paired_t_test(xs, ys)
        result = {"metric": metric, "run_a": a.run_tag, "run_b": b.run_tag, "n": t.n, "df": t.df,
                  "t": round(t.t, 6), "p": round(t.p, 6), "significant": t.significant,
                  "mean_a": round(float(xs.mean()), 6), "mean_b": round(float(ys.mean()), 6),
                  "config_hash": cfg.config_hash}
        out = Path(out) if out else ws.root / "metrics" / f"significance.{Path(run_a).stem}.vs.{Path(run_b).stem}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        m.add_output(out)
        m.counts.update({"t": result["t"], "p": result["p"], "queries": len(qids)})
    return result


# ------------------------------
# Analysis
# ------------------------------
def _write_jsonl(records: Sequence[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    log.info("Wrote records: %s (%d)", path, len(records))
    return path


def _read_jsonl(path: Path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _analysis_context(cfg: RunConfig, ws: Workspace, name: str, split: str) -> Tuple[Collection, RetrievalContext]:
    require(name, ws.run(split, "baseline"))
    return _dense_context(cfg, ws, name, read_run(ws.run(split, "baseline")))


def analyze_attention(cfg: RunConfig, ws: Workspace, k: int, split: str) -> dict:
    name = "analyze-attention"
    with stage(name, cfg, ws) as m:
        col, ctx = _analysis_context(cfg, ws, name, split)
        model, _ = _load_model(ws.prf_ckpt(k), name)
        threshold = cfg.analysis.relevance_threshold
        groups = []
        for q in col.queries[split]:
            inp = ctx.prf_input(q, k, model.cfg)
            groups.append(group_attention(cls_attention(model, inp), inp, col.qrels, q.query_id,
                                          ctx.feedback_ids(q.query_id, k), threshold,
                                          cfg.analysis.attention_normalize))
        summary = average_group_attention(groups, cfg.analysis.positions)
        records = _write_jsonl([group_attention_record(g) for g in groups], ws.analysis / f"attention_k{k}.jsonl")
        rows = [{"query_id": g.query_id, "query": g.query, "all_docs": g.all_docs,
                 "relevant_docs": g.relevant_docs, "irrelevant_docs": g.irrelevant_docs,
                 "num_unjudged": g.num_unjudged} for g in groups]
        csv_path = ws.analysis / f"attention_k{k}.csv"
        pd.DataFrame(rows).to_csv(csv_path, index=False, lineterminator="\n")
        summary_path = ws.analysis / f"attention_k{k}.summary.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for p in (records, csv_path, summary_path):
            m.add_output(p)
        if ws.train_log(f"prf_k{k}").exists():
            evals = [r for r in _read_jsonl(ws.train_log(f"prf_k{k}")) if r.get("kind") == "eval"]
            m.add_output(plot_group_attention(evals, ws.analysis / f"group_attention_k{k}.svg", cfg.analysis.positions))
        if summary["num_unjudged_docs"]:
            log.warning("%d feedback documents are unjudged and counted as irrelevant", summary["num_unjudged_docs"])
        m.counts.update({"queries": len(groups), "relevant_wins": summary["relevant_wins"]})
    return summary


def analyze_geometry(cfg: RunConfig, ws: Workspace, k: int, split: str) -> List[dict]:
    """Geometry over the training snapshots of the PRF encoder for k."""
    name = "analyze-geometry"
    with stage(name, cfg, ws) as m:
        col, ctx = _analysis_context(cfg, ws, name, split)
        snaps = sorted(ws.prf_snapshots(k).glob("step_*.ckpt"))
        if not snaps:
            raise StageError(name, f"no training snapshots in {ws.prf_snapshots(k)}")
        checkpoints = []
        for path in snaps:
            model, meta = load_checkpoint(path)
            checkpoints.append((int(meta["step"]), model))
        records = [r.to_dict() for r in embedding_geometry(checkpoints, ctx, col.queries[split], col.qrels, k,
                                                           cfg.analysis.relevance_threshold,
                                                           cfg.analysis.irrelevant_depth)]
        m.add_output(_write_jsonl(records, ws.analysis / f"geometry_k{k}.jsonl"))
        csv_path = ws.analysis / f"geometry_k{k}.csv"
        pd.DataFrame(records).to_csv(csv_path, index=False, lineterminator="\n")
        m.add_output(csv_path)
        m.add_output(plot_geometry(records, ws.analysis / f"geometry_k{k}.svg"))
        if ws.train_log(f"prf_k{k}").exists():
            m.add_output(plot_training_loss(_read_jsonl(ws.train_log(f"prf_k{k}")),
                                            ws.analysis / f"training_loss_k{k}.svg"))
        m.counts["snapshots"] = len(records)
    return records


def _first_difference(a: RunList, b: RunList, qid: str) -> Tuple[Optional[int], Optional[str], Optional[str]]:
    for rank, (x, y) in enumerate(zip(a.doc_ids(qid), b.doc_ids(qid)), start=1):
        if x != y:
            return rank, x, y
    return None, None, None


def analyze_highlight(cfg: RunConfig, ws: Workspace, k: int, split: str) -> dict:
    """
    Case study: the query the PRF run gains most on and the one it loses most
    on, each with its highlighted PRF input and the first rank where the two
    runs disagree.
    """
    name = "analyze-highlight"
    prf_run_path = ws.run(split, f"prf_k{k}")
    with stage(name, cfg, ws) as m:
        require(name, prf_run_path)
        col, ctx = _analysis_context(cfg, ws, name, split)
        model, _ = _load_model(ws.prf_ckpt(k), name)
        prf_run, base_run = read_run(prf_run_path), ctx.first_pass
        metric = cfg.evaluation.significance_metric
        diff = per_query_diff(prf_run, base_run, col.qrels, metric,
                              rel_threshold=cfg.evaluation.rel_threshold,
                              recall_binarize_at=cfg.evaluation.recall_binarize_at)
        by_id = {q.query_id: q for q in col.queries[split]}
        cases, html_cases = [], []
        if diff.deltas:
            ordered = sorted(diff.deltas, key=lambda x: (-x[1], x[0]))
            for label, (qid, delta) in (("win", ordered[0]), ("loss", ordered[-1])):
                inp = ctx.prf_input(by_id[qid], k, model.cfg)
                tokens = highlight_terms(inp, cls_attention(model, inp), ctx.vocab)
                rank, prf_doc, base_doc = _first_difference(prf_run, base_run, qid)
                cases.append({"case": label, "query_id": qid, "query": by_id[qid].text, "delta": round(delta, 6),
                              "first_difference_rank": rank,
                              "prf_doc": prf_doc, "prf_doc_grade": col.qrels.grade(qid, prf_doc) if prf_doc else None,
                              "baseline_doc": base_doc,
                              "baseline_doc_grade": col.qrels.grade(qid, base_doc) if base_doc else None,
                              "feedback": ctx.feedback_ids(qid, k)})
                html_cases.append((f"{label}: {qid} ({metric} {delta:+.4f})", tokens))
        html_path = ws.analysis / f"highlight_k{k}.html"
        html_path.parent.mkdir(parents=True, exist_ok=True)
        html_path.write_text(render_highlight_html(html_cases), encoding="utf-8")
        case_path = ws.analysis / f"case_study_k{k}.json"
        case_path.write_text(json.dumps({"diff": diff.to_dict(), "cases": cases}, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
        m.add_output(html_path)
        m.add_output(case_path)
        m.add_output(plot_win_loss(diff, ws.analysis / f"win_loss_k{k}.svg"))
        m.counts.update({"wins": diff.wins, "losses": diff.losses, "ties": diff.ties})
    return {"diff": diff.to_dict(), "cases": cases}


def ablate(cfg: RunConfig, ws: Workspace, split: Optional[str] = None,
           k_values: Optional[Sequence[int]] = None) -> pd.DataFrame:
    split = split or cfg.evaluation.split
    k_values = list(k_values if k_values is not None else cfg.analysis.ablation_ks)
    name = "ablate"
    with stage(name, cfg, ws) as m:
        col, ctx = _analysis_context(cfg, ws, name, split)
        models = {k: _load_model(ws.prf_ckpt(k), name)[0] for k in k_values}
        table, runs = depth_ablation(k_values, models, ctx, col.queries[split], col.qrels, cfg.evaluation.metrics,
                                     cfg.prf.final_depth, cfg.prf.first_pass_depth, cfg.runtime.threads,
                                     cfg.evaluation.recall_binarize_at)
        for k, run in runs.items():
            run.run_tag = run_tag(run.run_tag, cfg)
            m.add_output(write_run(run, ws.run(split, f"prf_k{k}")))
        path = ws.analysis / "ablation.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, lineterminator="\n")
        m.add_output(path)
        m.counts["rows"] = len(table)
    return table


def analyze(cfg: RunConfig, ws: Workspace, what: str, k: Optional[int] = None, split: Optional[str] = None):
    if what not in ANALYSES:
        raise ValueError(f"analysis must be one of {ANALYSES}, got {what!r}")
    split = split or cfg.evaluation.split
    k = cfg.prf.k if k is None else k
    if what == "attention":
        return analyze_attention(cfg, ws, k, split)
    if what == "geometry":
        return analyze_geometry(cfg, ws, k, split)
    if what == "highlight":
        return analyze_highlight(cfg, ws, k, split)
    return ablate(cfg, ws, split)


# ------------------------------
# Full workflow
# ------------------------------
def summary_table(cfg: RunConfig, ws: Workspace, split: str) -> pd.DataFrame:
    """BM25, the baseline encoder and every trained PRF depth on one split."""
    qrels = load_qrels(ws.files["qrels"])
    runs = [("BM25", read_run(ws.run(split, "bm25"))), ("baseline", read_run(ws.run(split, "baseline")))]
    runs += [(f"PRF k={k}", read_run(ws.run(split, f"prf_k{k}"))) for k in cfg.prf_depths
             if ws.run(split, f"prf_k{k}").exists()]
    control = "PRF k=0" if any(label == "PRF k=0" for label, _ in runs) else None
    table = metrics_table(runs, qrels, cfg.evaluation.metrics, "baseline", control,
                          recall_binarize_at=cfg.evaluation.recall_binarize_at)
    table.to_csv(ws.summary, index=False, lineterminator="\n")
    log.info("Wrote summary table: %s", ws.summary)
    return table


def run_pipeline(cfg: RunConfig, ws: Workspace) -> pd.DataFrame:
    """
    generate -> vocab -> BM25 -> train baseline -> index -> first pass ->
    train PRF per k -> retrieve -> evaluate -> analyze -> summary.
    """
    ws.root.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, ws.root)
    split = cfg.evaluation.split
    if cfg.paths.data_dir is None:
        gen_synthetic(cfg, ws)
    build_vocabulary(cfg, ws)
    bm25_runs(cfg, ws)
    train_baseline(cfg, ws)
    build_doc_index(cfg, ws)
    first_pass_runs(cfg, ws)
    for k in cfg.prf_depths:
        train_prf(cfg, ws, k)
    for k in cfg.prf_depths:
        retrieve(cfg, ws, "prf", k=k, split=split, out=ws.run(split, f"prf_k{k}"))
    for name in ["bm25", "baseline"] + [f"prf_k{k}" for k in cfg.prf_depths]:
        evaluate(cfg, ws, ws.run(split, name), out=ws.metrics(split, name))
    significance_test(cfg, ws, ws.run(split, f"prf_k{cfg.prf.k}"), ws.run(split, "baseline"))
    if cfg.prf.k > 0:
        analyze_attention(cfg, ws, cfg.prf.k, split)
    analyze_geometry(cfg, ws, cfg.prf.k, split)
    analyze_highlight(cfg, ws, cfg.prf.k, split)
    ablate(cfg, ws, split)
    return summary_table(cfg, ws, split)
