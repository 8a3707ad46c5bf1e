"""
dense_prf/etl/synthetic.py

Seeded synthetic topic benchmark.

Each topic owns a pool of words ("t07_w013"); a shared noise pool
("noise_w211") is common to all topics. Documents are assigned to topics
round-robin. A "core" document draws each word from its topic pool with
probability p_topic, a "fringe" document with p_topic / 2; every other word
comes from the noise pool. Queries are query_length distinct topic words, a
fraction query_ambiguity of them taken from a sibling topic (t+1 mod T), so
the query alone is ambiguous and feedback documents can resolve it.

Qrels list every same-topic document: grade 2 for core, 1 for fringe.

All randomness comes from one numpy Generator, consumed in a fixed order:
documents first, then queries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from dense_prf.etl.loaders import DocumentRecord, QueryRecord, write_corpus, write_qrels, write_queries
from dense_prf.evaluation import Qrels

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    num_topics: int = 32
    num_docs: int = 2000
    topic_vocab: int = 40
    noise_vocab: int = 400
    doc_length_min: int = 16
    doc_length_max: int = 32
    query_length: int = 4
    p_topic: float = 0.5
    fringe_fraction: float = 0.5
    query_ambiguity: float = 0.25
    train_queries: int = 64
    dev_queries: int = 32
    test_queries: int = 32
    seed: int = 42

    def validate(self) -> List[str]:
        problems = []
        for name in ("num_topics", "num_docs", "topic_vocab", "noise_vocab", "doc_length_min",
                     "doc_length_max", "query_length", "train_queries", "dev_queries", "test_queries"):
            if getattr(self, name) < 1:
                problems.append(f"synthetic.{name} must be >= 1 (got {getattr(self, name)})")
        for name in ("p_topic", "fringe_fraction", "query_ambiguity"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                problems.append(f"synthetic.{name} must be in [0, 1] (got {value})")
        if self.doc_length_min > self.doc_length_max:
            problems.append("synthetic.doc_length_min exceeds synthetic.doc_length_max")
        if self.num_docs < self.num_topics:
            problems.append(f"synthetic.num_docs={self.num_docs} leaves some of the {self.num_topics} topics without documents")
        return problems


@dataclass
class SyntheticBenchmark:
    corpus: List[DocumentRecord]
    queries: Dict[str, List[QueryRecord]]
    qrels: Qrels


def topic_word(topic: int, j: int) -> str:
    return f"t{topic:02d}_w{j:03d}"


def noise_word(j: int) -> str:
    return f"noise_w{j:03d}"


def _core_count(n_docs: int, fringe_fraction: float) -> int:
    # at least one core document per topic so every query has a grade-2 target
    return max(1, n_docs - int(math.floor(n_docs * fringe_fraction)))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticBenchmark:
    problems = spec.validate()
    if problems:
        raise ValueError("invalid synthetic spec: " + "; ".join(problems))
    n_sibling = int(round(spec.query_length * spec.query_ambiguity)) if spec.num_topics > 1 else 0
    n_own = spec.query_length - n_sibling
    if max(n_own, n_sibling) > spec.topic_vocab:
        raise ValueError(f"topic pool of {spec.topic_vocab} words is too small for "
                         f"{spec.query_length}-word queries without repeats")

    rng = np.random.default_rng(spec.seed)
    T = spec.num_topics

    docs_by_topic: Dict[int, List[str]] = {t: [] for t in range(T)}
    grades: Dict[str, int] = {}
    corpus: List[DocumentRecord] = []
    width = len(str(spec.num_docs))
    for i in range(spec.num_docs):
        topic = i % T
        doc_id = f"d{i:0{width}d}"
        docs_by_topic[topic].append(doc_id)
        n_topic_docs = len(range(topic, spec.num_docs, T))
        core = (i // T) < _core_count(n_topic_docs, spec.fringe_fraction)
        p = spec.p_topic if core else spec.p_topic / 2.0
        length = int(rng.integers(spec.doc_length_min, spec.doc_length_max + 1))
        from_topic = rng.random(length) < p
        topic_ids = rng.integers(0, spec.topic_vocab, size=length)
        noise_ids = rng.integers(0, spec.noise_vocab, size=length)
        tokens = [topic_word(topic, int(t)) if use else noise_word(int(n))
                  for use, t, n in zip(from_topic, topic_ids, noise_ids)]
        corpus.append(DocumentRecord(doc_id=doc_id, text=" ".join(tokens)))
        grades[doc_id] = 2 if core else 1

    queries: Dict[str, List[QueryRecord]] = {s: [] for s in SPLITS}
    qrels: Dict[str, Dict[str, int]] = {}
    counts = {"train": spec.train_queries, "dev": spec.dev_queries, "test": spec.test_queries}
    total = sum(counts.values())
    qwidth = len(str(total))
    n = 0
    for split in SPLITS:
        for _ in range(counts[split]):
            topic = n % T
            qid = f"q{n:0{qwidth}d}"
            own = rng.choice(spec.topic_vocab, size=n_own, replace=False)
            sibling = rng.choice(spec.topic_vocab, size=n_sibling, replace=False)
            terms = [topic_word(topic, int(j)) for j in own] + [topic_word((topic + 1) % T, int(j)) for j in sibling]
            order = rng.permutation(len(terms))
            queries[split].append(QueryRecord(query_id=qid, text=" ".join(terms[o] for o in order)))
            qrels[qid] = {d: grades[d] for d in docs_by_topic[topic]}
            n += 1

    log.info("Synthetic benchmark: %d topics, %d docs, queries %s (seed=%d)",
             T, len(corpus), {s: len(v) for s, v in queries.items()}, spec.seed)
    return SyntheticBenchmark(corpus=corpus, queries=queries, qrels=Qrels(qrels))


def data_files(data_dir: Union[str, Path]) -> Dict[str, Path]:
    """File names every stage expects inside a data directory."""
    data_dir = Path(data_dir)
    files = {"corpus": data_dir / "corpus.tsv", "qrels": data_dir / "qrels.txt"}
    files.update({f"queries_{s}": data_dir / f"queries.{s}.tsv" for s in SPLITS})
    return files


def write_synthetic(bench: SyntheticBenchmark, data_dir: Union[str, Path]) -> Dict[str, Path]:
    files = data_files(data_dir)
    write_corpus(bench.corpus, files["corpus"])
    for split in SPLITS:
        write_queries(bench.queries[split], files[f"queries_{split}"])
    write_qrels(bench.qrels, files["qrels"])
    log.info("Wrote synthetic benchmark to %s", data_dir)
    return files
