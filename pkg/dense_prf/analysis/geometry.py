"""
dense_prf/analysis/geometry.py

Embedding-space tracking of the PRF query embedding: its mean dot product with
the original (baseline) query embedding, with relevant documents and with
irrelevant documents, at each sampled training step.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dense_prf.encoder import PrfEncoder, encode
from dense_prf.errors import MissingEmbeddingError
from dense_prf.etl.loaders import QueryRecord
from dense_prf.evaluation import Qrels
from dense_prf.retrieval import RetrievalContext, query_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeometryRecord:
    step: int
    query_dot: Optional[float]
    relevant_dot: Optional[float]
    irrelevant_dot: Optional[float]
    num_queries: int

    def to_dict(self) -> dict:
        return {k: (round(v, 9) if isinstance(v, float) else v) for k, v in asdict(self).items()}


def _mean_dot(q: np.ndarray, ctx: RetrievalContext, doc_ids: Sequence[str]) -> float:
    try:
        rows = ctx.index.rows_of(doc_ids)
    except KeyError as exc:
        raise MissingEmbeddingError(f"no embedding for document {exc.args[0]!r}") from None
    return float((ctx.index.matrix64[rows] @ q).mean())


def geometry_at(
    step: int,
    prf_model: PrfEncoder,
    ctx: RetrievalContext,
    queries: Sequence[QueryRecord],
    qrels: Qrels,
    k: int,
    threshold: int = 1,
    irrelevant_depth: int = 20,
) -> GeometryRecord:
    """
    Relevant documents are every judged doc with grade >= threshold that is in
    the index; irrelevant ones are first-pass top-`irrelevant_depth` docs below
    the threshold. Queries lacking either group are skipped; with none left the
    dot products are None (null in the JSON log).
    """
    q_dots, rel_dots, irr_dots = [], [], []
    for query in queries:
        relevant = [d for d in qrels.relevant(query.query_id, threshold) if ctx.index.has(d)]
        irrelevant = [d for d in ctx.first_pass.doc_ids(query.query_id, irrelevant_depth)
                      if qrels.grade(query.query_id, d) < threshold]
        if not relevant or not irrelevant:
            continue
        q_prf = encode(prf_model, ctx.prf_input(query, k, prf_model.cfg))
        q_orig = encode(ctx.baseline, query_input(query.text, ctx.vocab, ctx.baseline.cfg))
        q_dots.append(float(q_prf @ q_orig))
        rel_dots.append(_mean_dot(q_prf, ctx, relevant))
        irr_dots.append(_mean_dot(q_prf, ctx, irrelevant))
    if not q_dots:
        log.warning("Geometry at step %d: no query has both relevant and irrelevant documents", step)
        return GeometryRecord(step, None, None, None, 0)
    return GeometryRecord(
        step=step,
        query_dot=float(np.mean(q_dots)),
        relevant_dot=float(np.mean(rel_dots)),
        irrelevant_dot=float(np.mean(irr_dots)),
        num_queries=len(q_dots),
    )


def embedding_geometry(
    checkpoints: Sequence[Tuple[int, PrfEncoder]],
    ctx: RetrievalContext,
    queries: Sequence[QueryRecord],
    qrels: Qrels,
    k: int,
    threshold: int = 1,
    irrelevant_depth: int = 20,
) -> List[GeometryRecord]:
    records = [geometry_at(step, model, ctx, queries, qrels, k, threshold, irrelevant_depth)
               for step, model in checkpoints]
    log.info("Embedding geometry over %d checkpoints", len(records))
    return records
