"""
dense_prf/retrieval.py

Two-pass retrieval with pseudo-relevance feedback, a BM25 baseline and TREC
run I/O.

    first pass   q -> baseline encoder -> search(index, depth)
    PRF pass     [CLS] q [SEP] d1 [SEP] ... dk [SEP] -> PRF encoder -> search(index, final_depth)

The document index is never touched by the PRF pass: both passes search the
same frozen FlatIndex.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import sparse
from sklearn.feature_extraction.text import CountVectorizer

from dense_prf.encoder import (
    ModelConfig,
    PrfEncoder,
    PrfInput,
    Vocabulary,
    build_doc_input,
    build_prf_input,
    build_query_input,
    encode,
    encode_batch,
    tokenize,
    words,
)
from dense_prf.errors import DataFormatError
from dense_prf.etl.loaders import DocumentRecord, QueryRecord, read_table
from dense_prf.index import FlatIndex, ScoredHit, search

log = logging.getLogger(__name__)

DocTokens = Mapping[str, Sequence[int]]


# ------------------------------
# Runs
# ------------------------------
@dataclass
class RunList:
    """Ranked hits per query, in query insertion order."""

    run_tag: str
    results: Dict[str, List[ScoredHit]] = field(default_factory=dict)

    @property
    def query_ids(self) -> List[str]:
        return list(self.results)

    def hits(self, query_id: str) -> List[ScoredHit]:
        return self.results.get(query_id, [])

    def add(self, query_id: str, hits: List[ScoredHit]) -> None:
        if query_id in self.results:
            raise ValueError(f"query {query_id!r} already in run {self.run_tag!r}")
        self.results[query_id] = hits

    def __len__(self) -> int:
        return len(self.results)

    def subset(self, query_ids: Iterable[str]) -> "RunList":
        return RunList(self.run_tag, {q: self.results[q] for q in query_ids if q in self.results})

    def doc_ids(self, query_id: str, depth: Optional[int] = None) -> List[str]:
        hits = self.hits(query_id)
        return [h.doc_id for h in (hits if depth is None else hits[:depth])]


def write_run(run: RunList, path: Union[str, Path]) -> Path:
    """TREC 6-column run: "qid Q0 docid rank score tag", scores with 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [(qid, "Q0", h.doc_id, h.rank, f"{h.score:.6f}", run.run_tag)
            for qid, hits in run.results.items() for h in hits]
    df = pd.DataFrame(rows, columns=["qid", "q0", "docid", "rank", "score", "tag"])
    df.to_csv(path, sep=" ", header=False, index=False, lineterminator="\n")
    log.info("Wrote run: %s (%d queries, %d lines)", path, len(run), len(df))
    return path


def read_run(path: Union[str, Path]) -> RunList:
    df = read_table(path, ["qid", "q0", "docid", "rank", "score", "tag"], sep=r"\s+", kind="run")
    results: Dict[str, List[ScoredHit]] = {}
    for qid, docid, rank, score, line_no in zip(df["qid"], df["docid"], df["rank"], df["score"], df["line_no"]):
        try:
            hit = ScoredHit(doc_id=docid, score=float(score), rank=int(rank))
        except ValueError:
            raise DataFormatError(f"bad rank {rank!r} or score {score!r}", path=path, line_no=int(line_no)) from None
        results.setdefault(qid, []).append(hit)
    for qid, hits in results.items():
        hits.sort(key=lambda h: h.rank)
    tag = str(df["tag"].iloc[0]) if len(df) else Path(path).stem
    run = RunList(run_tag=tag, results=results)
    log.info("Loaded run: %s (%d queries)", path, len(run))
    return run


# ------------------------------
# Instrumentation
# ------------------------------
@dataclass
class RetrievalCounters:
    """Encoder forward passes and index searches, shared across worker threads."""

    encoder_calls: int = 0
    searches: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def count(self, encoder_calls: int = 0, searches: int = 0) -> None:
        with self._lock:
            self.encoder_calls += encoder_calls
            self.searches += searches


@dataclass(frozen=True)
class PrfConfig:
    k: int = 3
    first_pass_depth: int = 1000
    final_depth: int = 1000
    # depth the PRF encoder was trained with; None means "same as k"
    trained_k: Optional[int] = None

    def validate(self) -> List[str]:
        problems = []
        if self.k < 0:
            problems.append(f"prf.k must be >= 0 (got {self.k})")
        if self.first_pass_depth < 1 or self.final_depth < 1:
            problems.append("prf.first_pass_depth and prf.final_depth must be >= 1")
        if self.k > self.first_pass_depth:
            problems.append(f"prf.k={self.k} exceeds prf.first_pass_depth={self.first_pass_depth}")
        return problems


# ------------------------------
# Dense retrieval
# ------------------------------
def tokenize_corpus(docs: Iterable[DocumentRecord], vocab: Vocabulary) -> Dict[str, List[int]]:
    return {d.doc_id: tokenize(d.text, vocab) for d in docs}


def embed_corpus(model: PrfEncoder, doc_tokens: DocTokens, batch_size: int = 64) -> List[Tuple[str, np.ndarray]]:
    """Document embeddings in corpus order, encoded in fixed-size batches."""
    ids = list(doc_tokens)
    out: List[Tuple[str, np.ndarray]] = []
    max_len = model.cfg.max_len
    for start in range(0, len(ids), batch_size):
        chunk = ids[start: start + batch_size]
        vecs = encode_batch(model, [build_doc_input(doc_tokens[d], max_len) for d in chunk])
        out.extend(zip(chunk, vecs))
    log.debug("Embedded %d documents", len(out))
    return out


def query_input(query_text: str, vocab: Vocabulary, cfg: ModelConfig):
    q = tokenize(query_text, vocab)
    if not q:
        raise ValueError(f"query {query_text!r} is empty after tokenization")
    return build_query_input(q, cfg.max_len, cfg.query_budget)


def feedback_input(query_text: str, feedback_ids: Sequence[str], vocab: Vocabulary,
                   doc_tokens: DocTokens, cfg: ModelConfig) -> PrfInput:
    """PRF input for a query and its feedback documents (in rank order)."""
    q = tokenize(query_text, vocab)
    if not q:
        raise ValueError(f"query {query_text!r} is empty after tokenization")
    return build_prf_input(q, [doc_tokens.get(d, []) for d in feedback_ids], cfg.max_len, cfg.query_budget)


def first_pass(query_text: str, encoder: PrfEncoder, index: FlatIndex, depth: int, vocab: Vocabulary,
               counters: Optional[RetrievalCounters] = None) -> List[ScoredHit]:
    q = encode(encoder, query_input(query_text, vocab, encoder.cfg))
    if counters is not None:
        counters.count(encoder_calls=1)
    hits = search(index, q, depth)
    if counters is not None:
        counters.count(searches=1)
    return hits


def prf_retrieve(query_text: str, prf_encoder: PrfEncoder, baseline_encoder: PrfEncoder, index: FlatIndex,
                 cfg: PrfConfig, vocab: Vocabulary, doc_tokens: DocTokens,
                 counters: Optional[RetrievalCounters] = None) -> List[ScoredHit]:
    """
    First pass with the baseline encoder, re-encode the query with its top-k
    documents, then search again at final_depth. k=0 skips the first pass and
    encodes the query alone with the PRF encoder.
    """
    if cfg.k == 0:
        return first_pass(query_text, prf_encoder, index, cfg.final_depth, vocab, counters)
    feedback = first_pass(query_text, baseline_encoder, index, min(cfg.k, cfg.first_pass_depth), vocab, counters)
    inp = feedback_input(query_text, [h.doc_id for h in feedback], vocab, doc_tokens, prf_encoder.cfg)
    q_prf = encode(prf_encoder, inp)
    if counters is not None:
        counters.count(encoder_calls=1)
    hits = search(index, q_prf, cfg.final_depth)
    if counters is not None:
        counters.count(searches=1)
    return hits


def prf_run_tag(name: str, cfg: PrfConfig) -> str:
    tag = f"{name}_k{cfg.k}"
    if cfg.trained_k is not None and cfg.trained_k != cfg.k:
        log.warning("PRF encoder trained with k=%d is evaluated at k=%d", cfg.trained_k, cfg.k)
        tag += f"_from_k{cfg.trained_k}"
    return tag


def retrieve_all(queries: Sequence[QueryRecord], fn: Callable[[str], List[ScoredHit]], run_tag: str,
                 threads: int = 1) -> RunList:
    """Apply fn to every query text, fanning out over threads; output keeps query order."""
    if threads > 1:
        results = Parallel(n_jobs=threads, prefer="threads")(delayed(fn)(q.text) for q in queries)
    else:
        results = [fn(q.text) for q in queries]
    run = RunList(run_tag=run_tag)
    for q, hits in zip(queries, results):
        run.add(q.query_id, hits)
    return run


# ------------------------------
# BM25
# ------------------------------
@dataclass(frozen=True)
class CorpusStats:
    num_docs: int
    avgdl: float
    df: Mapping[str, int]


def bm25_idf(num_docs: int, df: int) -> float:
    return math.log((num_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_score(query_tokens: Sequence[str], doc_tokens: Sequence[str], stats: CorpusStats,
               k1: float = 0.9, b: float = 0.4) -> float:
    """Okapi BM25 of one document; a repeated query term contributes once per occurrence."""
    tf = Counter(doc_tokens)
    norm = k1 * (1.0 - b + b * len(doc_tokens) / stats.avgdl)
    score = 0.0
    for term in query_tokens:
        f = tf.get(term, 0)
        if f:
            score += bm25_idf(stats.num_docs, stats.df.get(term, 0)) * f * (k1 + 1.0) / (f + norm)
    return score


class Bm25Index:
    """Sparse term-frequency matrix over the corpus with precomputed statistics."""

    def __init__(self, docs: Sequence[DocumentRecord], k1: float = 0.9, b: float = 0.4):
        if not docs:
            raise ValueError("cannot build BM25 over an empty corpus")
        self.k1, self.b = k1, b
        self.doc_ids = np.asarray([d.doc_id for d in docs])
        self.vectorizer = CountVectorizer(analyzer=words)
        tf = self.vectorizer.fit_transform(d.text for d in docs)
        self.tf = sparse.csc_matrix(tf, dtype=np.float64)
        self.doc_len = np.asarray(tf.sum(axis=1), dtype=np.float64).ravel()
        df = np.asarray((tf > 0).sum(axis=0)).ravel()
        vocab = self.vectorizer.vocabulary_
        self.stats = CorpusStats(
            num_docs=len(docs),
            avgdl=float(self.doc_len.mean()) if self.doc_len.mean() > 0 else 1.0,
            df={t: int(df[j]) for t, j in vocab.items()},
        )
        log.info("BM25 index: %d docs, %d terms, avgdl=%.2f", len(docs), len(vocab), self.stats.avgdl)

    def scores(self, query_text: str) -> np.ndarray:
        out = np.zeros(self.stats.num_docs)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.stats.avgdl)
        vocab = self.vectorizer.vocabulary_
        for term, qtf in Counter(words(query_text)).items():
            j = vocab.get(term)
            if j is None:
                continue
            lo, hi = self.tf.indptr[j], self.tf.indptr[j + 1]
            rows, f = self.tf.indices[lo:hi], self.tf.data[lo:hi]
            idf = bm25_idf(self.stats.num_docs, self.stats.df[term])
            out[rows] += qtf * idf * f * (self.k1 + 1.0) / (f + norm[rows])
        return out

    def search(self, query_text: str, depth: int) -> List[ScoredHit]:
        """Documents with a positive score, ordered by (score desc, doc_id asc)."""
        scores = self.scores(query_text)
        cand = np.flatnonzero(scores > 0)
        order = cand[np.lexsort((self.doc_ids[cand], -scores[cand]))][:depth]
        return [ScoredHit(doc_id=str(self.doc_ids[i]), score=float(scores[i]), rank=r)
                for r, i in enumerate(order, start=1)]


# ------------------------------
# Shared retrieval state
# ------------------------------
@dataclass
class RetrievalContext:
    """
    Everything a feedback pass needs besides the PRF encoder: the vocabulary,
    tokenized corpus, frozen index, baseline encoder and the first-pass run
    the feedback documents are taken from.
    """

    vocab: Vocabulary
    doc_tokens: Dict[str, List[int]]
    index: Optional[FlatIndex] = None
    baseline: Optional[PrfEncoder] = None
    first_pass: Optional[RunList] = None

    def feedback_ids(self, query_id: str, k: int) -> List[str]:
        if k == 0:
            return []
        if self.first_pass is None:
            raise ValueError("feedback requested but no first-pass run is loaded")
        return self.first_pass.doc_ids(query_id, k)

    def prf_input(self, query: QueryRecord, k: int, cfg: ModelConfig) -> PrfInput:
        return feedback_input(query.text, self.feedback_ids(query.query_id, k), self.vocab, self.doc_tokens, cfg)
