"""
dense_prf/trainer.py

Training for both encoders with the negative log-likelihood loss

    L = -log( exp(q.d+) / (exp(q.d+) + sum_{d-} exp(q.d-)) )

Phase "baseline": one shared encoder embeds queries and documents; negatives
are static BM25 hard negatives plus in-batch sharing.

Phase "prf": a copy of the trained baseline becomes the PRF query encoder.
Document embeddings are read from the frozen FlatIndex and never recomputed,
so gradients reach only the PRF encoder. Feedback documents come from the
first-pass run computed once before training; negatives are fixed for the
whole run.

Dev MRR@10 is measured at step 0 and every eval_interval steps; the best
checkpoint (earliest on ties) is returned.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from joblib import Parallel, delayed

from dense_prf.analysis.attention import average_group_attention, group_attention
from dense_prf.analysis.geometry import geometry_at
from dense_prf.encoder import (
    PrfEncoder,
    PrfInput,
    TokenSequence,
    batch_tensors,
    build_doc_input,
    build_prf_input,
    build_query_input,
    cls_attention,
    encode,
    save_checkpoint,
    tokenize,
)
from dense_prf.errors import DimensionMismatchError, MissingEmbeddingError, TrainingDivergedError
from dense_prf.etl.loaders import QueryRecord
from dense_prf.evaluation import Qrels, mrr_at
from dense_prf.index import FlatIndex, build_index, search
from dense_prf.retrieval import RetrievalContext, RunList, embed_corpus, query_input

log = logging.getLogger(__name__)

PHASES = ("baseline", "prf")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    k: int = 3
    negatives: int = 8
    batch_size: int = 32
    accumulation_steps: int = 1
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.05
    total_steps: int = 2000
    eval_interval: int = 200
    log_interval: int = 50
    negative_depth: int = 200
    in_batch: bool = True
    seed: int = 42

    def validate(self, section: str = "train") -> List[str]:
        problems = []
        for name in ("negatives", "batch_size", "accumulation_steps", "total_steps",
                     "eval_interval", "log_interval", "negative_depth"):
            if getattr(self, name) < 1:
                problems.append(f"{section}.{name} must be >= 1 (got {getattr(self, name)})")
        if self.k < 0:
            problems.append(f"{section}.k must be >= 0 (got {self.k})")
        if self.learning_rate <= 0:
            problems.append(f"{section}.learning_rate must be positive (got {self.learning_rate})")
        if not 0.0 <= self.warmup_fraction < 1.0:
            problems.append(f"{section}.warmup_fraction must be in [0, 1) (got {self.warmup_fraction})")
        return problems


@dataclass(frozen=True)
class TrainingExample:
    query_id: str
    query_ids: Tuple[int, ...]
    positive_doc_id: str
    negative_doc_ids: Tuple[str, ...]
    prf_doc_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.positive_doc_id in self.negative_doc_ids:
            raise ValueError(f"{self.query_id}: positive {self.positive_doc_id!r} is also a negative")


# ------------------------------
# Loss
# ------------------------------
def nll_loss(q_prf, d_plus, d_minus) -> float:
    """Scalar NLL of one positive against a list of negatives, with max-subtraction."""
    q = np.asarray(q_prf, dtype=np.float64)
    dp = np.asarray(d_plus, dtype=np.float64)
    dm = np.asarray(d_minus, dtype=np.float64).reshape(-1, q.shape[0]) if len(d_minus) else np.zeros((0, q.shape[0]))
    if dp.shape != q.shape or (dm.size and dm.shape[1] != q.shape[0]):
        raise DimensionMismatchError(f"query dim {q.shape[0]} does not match document dims {dp.shape}, {dm.shape}")
    scores = np.concatenate([[q @ dp], dm @ q])
    m = scores.max()
    return max(0.0, float(m + np.log(np.exp(scores - m).sum()) - scores[0]))


def batch_nll(q: torch.Tensor, docs: torch.Tensor, target: torch.Tensor, exclude: torch.Tensor) -> torch.Tensor:
    """Mean NLL over a batch: q (B, D), docs (M, D), target (B,), exclude (B, M) masks columns out."""
    logits = (q @ docs.T).masked_fill(exclude, float("-inf"))
    picked = logits.gather(1, target[:, None]).squeeze(1)
    return (torch.logsumexp(logits, dim=1) - picked).mean()


def batch_layout(batch: Sequence[TrainingExample], qrels: Optional[Qrels], in_batch: bool) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """
    Columns are the distinct documents of the batch (positives and negatives in
    example order). With in_batch sharing every column is a candidate except
    other documents judged relevant to the query; without it only the
    example's own positive and negatives are.
    """
    columns: List[str] = []
    col_of: Dict[str, int] = {}
    for ex in batch:
        for d in (ex.positive_doc_id,) + ex.negative_doc_ids:
            if d not in col_of:
                col_of[d] = len(columns)
                columns.append(d)
    target = np.array([col_of[ex.positive_doc_id] for ex in batch], dtype=np.int64)
    exclude = np.zeros((len(batch), len(columns)), dtype=bool)
    for i, ex in enumerate(batch):
        if in_batch:
            if qrels is not None:
                for d in qrels.relevant(ex.query_id, 1):
                    if d in col_of and d != ex.positive_doc_id:
                        exclude[i, col_of[d]] = True
        else:
            exclude[i, :] = True
            for d in (ex.positive_doc_id,) + ex.negative_doc_ids:
                exclude[i, col_of[d]] = False
    return columns, target, exclude


def _frozen_rows(index: FlatIndex, doc_ids: Sequence[str]) -> torch.Tensor:
    try:
        rows = index.rows_of(doc_ids)
    except KeyError as exc:
        raise MissingEmbeddingError(f"no embedding in the index for document {exc.args[0]!r}") from None
    return torch.tensor(index.matrix64[rows])


def _encode_train(model: PrfEncoder, seqs: Sequence[TokenSequence]) -> torch.Tensor:
    ids, mask = batch_tensors(seqs)
    return model(ids, mask)


def prf_inputs(model: PrfEncoder, batch: Sequence[TrainingExample], doc_tokens: Mapping[str, Sequence[int]]) -> List[PrfInput]:
    cfg = model.cfg
    return [build_prf_input(ex.query_ids, [doc_tokens.get(d, []) for d in ex.prf_doc_ids], cfg.max_len, cfg.query_budget)
            for ex in batch]


def prf_batch_loss(model: PrfEncoder, batch: Sequence[TrainingExample], index: FlatIndex,
                   doc_tokens: Mapping[str, Sequence[int]], qrels: Optional[Qrels] = None,
                   in_batch: bool = True) -> torch.Tensor:
    columns, target, exclude = batch_layout(batch, qrels, in_batch)
    docs = _frozen_rows(index, columns)
    q = _encode_train(model, [p.seq for p in prf_inputs(model, batch, doc_tokens)])
    return batch_nll(q, docs, torch.from_numpy(target), torch.from_numpy(exclude))


def baseline_batch_loss(model: PrfEncoder, batch: Sequence[TrainingExample],
                        doc_tokens: Mapping[str, Sequence[int]], qrels: Optional[Qrels] = None,
                        in_batch: bool = True) -> torch.Tensor:
    cfg = model.cfg
    columns, target, exclude = batch_layout(batch, qrels, in_batch)
    missing = [d for d in columns if d not in doc_tokens]
    if missing:
        raise MissingEmbeddingError(f"document {missing[0]!r} is not in the corpus")
    q = _encode_train(model, [build_query_input(ex.query_ids, cfg.max_len, cfg.query_budget) for ex in batch])
    docs = _encode_train(model, [build_doc_input(doc_tokens[d], cfg.max_len) for d in columns])
    return batch_nll(q, docs, torch.from_numpy(target), torch.from_numpy(exclude))


def loss_gradient(model: PrfEncoder, batch: Sequence[TrainingExample], index: FlatIndex,
                  doc_tokens: Mapping[str, Sequence[int]], qrels: Optional[Qrels] = None,
                  in_batch: bool = True) -> Dict[str, np.ndarray]:
    """Gradient of the PRF batch loss w.r.t. every PRF-encoder parameter (index rows are constants)."""
    model.zero_grad(set_to_none=True)
    loss = prf_batch_loss(model, batch, index, doc_tokens, qrels, in_batch)
    loss.backward()
    grads = {name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
             for name, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)
    return grads


# ------------------------------
# Gradient check
# ------------------------------
@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: Dict[str, float]
    checked: int

    @property
    def worst(self) -> str:
        return max(self.per_param, key=self.per_param.get) if self.per_param else ""


def gradient_check(model: PrfEncoder, batch: Sequence[TrainingExample], index: FlatIndex,
                   doc_tokens: Mapping[str, Sequence[int]], qrels: Optional[Qrels] = None,
                   h: float = 1e-4, in_batch: bool = True, floor: float = 1e-6) -> GradCheckResult:
    """
    Compare autograd gradients with central differences (f(w+h) - f(w-h)) / 2h
    for every parameter entry. Relative error is |a - n| / max(|a| + |n|, floor).
    """
    analytic = loss_gradient(model, batch, index, doc_tokens, qrels, in_batch)

    def loss_value() -> float:
        with torch.no_grad():
            return float(prf_batch_loss(model, batch, index, doc_tokens, qrels, in_batch))

    per_param: Dict[str, float] = {}
    checked = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            a = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = loss_value()
                flat[i] = orig - h
                down = loss_value()
                flat[i] = orig
                num = (up - down) / (2.0 * h)
                worst = max(worst, abs(a[i] - num) / max(abs(a[i]) + abs(num), floor))
                checked += 1
            per_param[name] = worst
    result = GradCheckResult(max_rel_error=max(per_param.values(), default=0.0), per_param=per_param, checked=checked)
    log.info("Gradient check: %d entries, max relative error %.3e (%s)", checked, result.max_rel_error, result.worst)
    return result


# ------------------------------
# Negatives / examples
# ------------------------------
def _query_rng(seed: int, query_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(query_id.encode("utf-8"))])


def sample_negatives(run: RunList, qrels: Qrels, n: int, seed: int,
                     corpus_ids: Optional[Sequence[str]] = None, depth: int = 200) -> Dict[str, List[str]]:
    """
    Fixed negatives per query: n docs drawn without replacement from the run's
    top-`depth` docs with grade < 1, in the order of a seeded permutation.
    A query with too few candidates is padded with seeded uniform draws from
    corpus_ids (never a relevant or already chosen doc).
    """
    out: Dict[str, List[str]] = {}
    for qid in run.query_ids:
        rng = _query_rng(seed, qid)
        cand = [d for d in run.doc_ids(qid, depth) if qrels.grade(qid, d) < 1]
        picked = [cand[i] for i in rng.permutation(len(cand))[:n]]
        if len(picked) < n:
            if not corpus_ids:
                raise ValueError(f"{qid}: only {len(picked)} negative candidates for n={n} and no corpus to pad from")
            taken = set(picked)
            pool = [d for d in corpus_ids if d not in taken and qrels.grade(qid, d) < 1]
            if len(pool) < n - len(picked):
                raise ValueError(f"{qid}: corpus too small to supply {n} negatives")
            extra = [pool[i] for i in rng.choice(len(pool), size=n - len(picked), replace=False)]
            log.warning("%s: %d negatives from the run, %d padded from the corpus", qid, len(picked), len(extra))
            picked += extra
        out[qid] = picked
    return out


def make_examples(queries: Sequence[QueryRecord], qrels: Qrels, ctx: RetrievalContext,
                  negatives: Mapping[str, Sequence[str]], k: int) -> List[TrainingExample]:
    """
    One example per (query, positive), positives being the query's docs with
    its highest grade. Feedback docs are the query's first-pass top-k.
    """
    examples = []
    for q in queries:
        judged = qrels.judgments(q.query_id)
        top = max(judged.values(), default=0)
        if top < 1:
            log.debug("%s: no relevant documents; skipped", q.query_id)
            continue
        q_ids = tuple(tokenize(q.text, ctx.vocab))
        if not q_ids:
            log.warning("%s: empty after tokenization; skipped", q.query_id)
            continue
        feedback = tuple(ctx.feedback_ids(q.query_id, k))
        negs = tuple(negatives.get(q.query_id, ()))
        for d, g in judged.items():
            if g == top and d in ctx.doc_tokens:
                examples.append(TrainingExample(q.query_id, q_ids, d, negs, feedback))
    log.info("Built %d training examples from %d queries (k=%d)", len(examples), len(queries), k)
    return examples


def select_best_checkpoint(evals: Sequence[Tuple[int, float]]) -> Tuple[int, float]:
    """(step, value) with the highest value; the earliest step wins ties."""
    if not evals:
        raise ValueError("no evaluations to select from")
    best = evals[0]
    for step, value in evals[1:]:
        if value > best[1]:
            best = (step, value)
    return best


# ------------------------------
# Dev evaluation
# ------------------------------
def evaluate_dev(model: PrfEncoder, phase: str, ctx: RetrievalContext, queries: Sequence[QueryRecord],
                 qrels: Qrels, k: int = 0, threads: int = 1, cutoff: int = 10) -> float:
    """Dev MRR@cutoff of the model in its phase role."""
    if phase == "baseline":
        index = build_index(embed_corpus(model, ctx.doc_tokens))
        inputs = [query_input(q.text, ctx.vocab, model.cfg) for q in queries]
    else:
        index = ctx.index
        inputs = [ctx.prf_input(q, k, model.cfg) for q in queries]

    def one(inp):
        return search(index, encode(model, inp), cutoff)

    if threads > 1:
        hits = Parallel(n_jobs=threads, prefer="threads")(delayed(one)(i) for i in inputs)
    else:
        hits = [one(i) for i in inputs]
    run = RunList("dev", {q.query_id: h for q, h in zip(queries, hits)})
    return mrr_at(run, qrels, cutoff).mean


def _prf_diagnostics(model: PrfEncoder, step: int, ctx: RetrievalContext, queries: Sequence[QueryRecord],
                     qrels: Qrels, k: int, threshold: int, normalize: str, irrelevant_depth: int) -> dict:
    geo = geometry_at(step, model, ctx, queries, qrels, k, threshold, irrelevant_depth)
    groups = []
    if k > 0:
        for q in queries:
            inp = ctx.prf_input(q, k, model.cfg)
            groups.append(group_attention(cls_attention(model, inp), inp, qrels, q.query_id,
                                          ctx.feedback_ids(q.query_id, k), threshold, normalize))
    return {"geometry": geo.to_dict(), "group_attention": average_group_attention(groups) if groups else None}


# ------------------------------
# Training loop
# ------------------------------
@dataclass
class TrainResult:
    model: PrfEncoder
    best_step: int
    best_mrr: float
    evals: List[Tuple[int, float]] = field(default_factory=list)
    final_loss: float = float("nan")


class _BatchStream:
    """Endless seeded shuffles of the example list."""

    def __init__(self, examples: Sequence[TrainingExample], batch_size: int, seed: int):
        self.examples = list(examples)
        self.batch_size = min(batch_size, len(self.examples))
        self.rng = np.random.default_rng(seed)
        self.order: List[int] = []

    def next(self) -> List[TrainingExample]:
        batch = []
        while len(batch) < self.batch_size:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.examples)))
            batch.append(self.examples[self.order.pop(0)])
        return batch


def _write_log(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def train(
    phase: str,
    model: PrfEncoder,
    cfg: TrainConfig,
    examples: Sequence[TrainingExample],
    ctx: RetrievalContext,
    dev_queries: Sequence[QueryRecord],
    qrels: Qrels,
    log_path: Optional[Union[str, Path]] = None,
    snapshot_dir: Optional[Union[str, Path]] = None,
    threads: int = 1,
    relevance_threshold: int = 1,
    attention_normalize: str = "mean",
    irrelevant_depth: int = 20,
    checkpoint_meta: Optional[Mapping[str, object]] = None,
) -> TrainResult:
    """
    Train `model` in place and return the best checkpoint by dev MRR@10.

    The log (JSON lines) holds one record per log_interval steps with the mean
    loss, and one per evaluation with dev MRR@10; PRF evaluations also carry
    embedding geometry and group attention. snapshot_dir, if given, receives
    a checkpoint at every evaluation step.
    """
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    if not examples:
        raise ValueError("no training examples")
    if phase == "prf" and ctx.index is None:
        raise ValueError("PRF training needs the frozen document index")

    torch.manual_seed(cfg.seed)
    k = cfg.k if phase == "prf" else 0
    stream = _BatchStream(examples, cfg.batch_size, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    warmup = max(1, int(math.ceil(cfg.warmup_fraction * cfg.total_steps)))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warmup))

    def batch_loss(batch):
        if phase == "prf":
            return prf_batch_loss(model, batch, ctx.index, ctx.doc_tokens, qrels, cfg.in_batch)
        return baseline_batch_loss(model, batch, ctx.doc_tokens, qrels, cfg.in_batch)

    meta = dict(checkpoint_meta or {})
    meta.update({"phase": phase, "k": k, "optimizer": f"adam(lr={cfg.learning_rate},betas={ADAM_BETAS},eps={ADAM_EPS})",
                 "warmup_steps": warmup})
    snap = Path(snapshot_dir) if snapshot_dir else None
    fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", encoding="utf-8")

    def evaluate(step: int, loss: Optional[float]) -> float:
        model.eval()
        mrr = evaluate_dev(model, phase, ctx, dev_queries, qrels, k, threads)
        record = {"kind": "eval", "step": step, "dev_mrr@10": round(mrr, 9),
                  "loss": None if loss is None else round(loss, 9)}
        if phase == "prf":
            record.update(_prf_diagnostics(model, step, ctx, dev_queries, qrels, k,
                                           relevance_threshold, attention_normalize, irrelevant_depth))
        if fh:
            _write_log(fh, record)
        if snap is not None:
            save_checkpoint(model, snap / f"step_{step:06d}.ckpt", dict(meta, step=step))
        model.train()
        log.info("[%s] step %d dev MRR@10 = %.4f", phase, step, mrr)
        return mrr

    try:
        evals = [(0, evaluate(0, None))]
        best_state = copy.deepcopy(model.state_dict())
        window: List[float] = []
        last = float("nan")
        model.train()
        for step in range(1, cfg.total_steps + 1):
            opt.zero_grad(set_to_none=True)
            step_loss = 0.0
            for _ in range(cfg.accumulation_steps):
                loss = batch_loss(stream.next()) / cfg.accumulation_steps
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"{phase} loss became {float(loss)} at step {step}; last finite loss {last:.6f}")
                loss.backward()
                step_loss += float(loss)
            opt.step()
            sched.step()
            last = step_loss
            window.append(step_loss)

            if step % cfg.log_interval == 0:
                mean_loss = float(np.mean(window))
                window = []
                log.info("[%s] step %d/%d loss %.5f lr %.2e", phase, step, cfg.total_steps, mean_loss,
                         sched.get_last_lr()[0])
                if fh:
                    _write_log(fh, {"kind": "loss", "step": step, "loss": round(mean_loss, 9)})
            if step % cfg.eval_interval == 0 or step == cfg.total_steps:
                mrr = evaluate(step, last)
                if mrr > select_best_checkpoint(evals)[1]:
                    best_state = copy.deepcopy(model.state_dict())
                evals.append((step, mrr))
    finally:
        if fh:
            fh.close()

    best_step, best_mrr = select_best_checkpoint(evals)
    model.load_state_dict(best_state)
    model.eval()
    log.info("[%s] best dev MRR@10 %.4f at step %d", phase, best_mrr, best_step)
    return TrainResult(model=model, best_step=best_step, best_mrr=best_mrr, evals=evals, final_loss=last)
