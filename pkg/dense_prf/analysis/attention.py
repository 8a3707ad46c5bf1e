"""
dense_prf/analysis/attention.py

Attention studies over PRF inputs:
 - group_attention: [CLS] attention mass per group (query, relevant feedback
   docs, irrelevant feedback docs) with a per-position breakdown
 - highlight_terms: per-token weights for term highlighting, plus a static
   HTML rendering with red opacity proportional to the weight
"""

from __future__ import annotations

import html
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dense_prf.encoder import CLS_ID, PAD_ID, SEP_ID, AttentionRecord, PrfInput, Vocabulary
from dense_prf.evaluation import Qrels

log = logging.getLogger(__name__)

NORMALIZATIONS = ("mean", "sum")
TRACKED_POSITIONS = (1, 2, 3)


@dataclass(frozen=True)
class SpanAttention:
    position: int
    doc_id: str
    grade: int
    judged: bool
    relevant: bool
    length: int
    mass: float

    @property
    def per_token(self) -> float:
        return self.mass / self.length if self.length else 0.0


@dataclass(frozen=True)
class GroupAttention:
    """
    Group values follow `normalize`: "mean" is attention mass per token of the
    group, "sum" the raw mass. The *_mass fields are always raw sums, and
    query_mass + sum of span masses + special_mass == total.
    """

    query_id: str
    normalize: str
    query: float
    all_docs: float
    relevant_docs: float
    irrelevant_docs: float
    query_mass: float
    special_mass: float
    total: float
    spans: Tuple[SpanAttention, ...]

    @property
    def num_relevant(self) -> int:
        return sum(s.relevant for s in self.spans)

    @property
    def num_irrelevant(self) -> int:
        return sum(not s.relevant for s in self.spans)

    @property
    def num_unjudged(self) -> int:
        return sum(not s.judged for s in self.spans)


def _group_value(spans: Sequence[SpanAttention], normalize: str) -> float:
    mass = sum(s.mass for s in spans)
    if normalize == "sum":
        return float(mass)
    length = sum(s.length for s in spans)
    return float(mass / length) if length else 0.0


def group_attention(
    attn: AttentionRecord,
    inp: PrfInput,
    qrels: Qrels,
    query_id: str,
    feedback_ids: Sequence[str],
    threshold: int = 1,
    normalize: str = "mean",
) -> GroupAttention:
    """
    Split cls_attention over the query span and each feedback document span.
    A document is relevant iff its grade >= threshold; unjudged documents are
    irrelevant and flagged as unjudged.
    """
    if normalize not in NORMALIZATIONS:
        raise ValueError(f"normalize must be one of {NORMALIZATIONS}, got {normalize!r}")
    values = np.asarray(attn.values, dtype=np.float64)
    if len(feedback_ids) != inp.k:
        raise ValueError(f"{len(feedback_ids)} feedback ids for an input with {inp.k} document spans")
    if values.shape[0] != len(inp.seq.ids):
        raise ValueError(f"attention has {values.shape[0]} positions, input has {len(inp.seq.ids)}")
    for start, stop in (inp.query_span,) + inp.doc_spans:
        if not 0 < start <= stop <= inp.seq.length:
            raise ValueError(f"span ({start}, {stop}) falls outside the {inp.seq.length} real positions")

    spans = []
    for pos, ((start, stop), doc_id) in enumerate(zip(inp.doc_spans, feedback_ids), start=1):
        grade = qrels.grade(query_id, doc_id)
        spans.append(SpanAttention(
            position=pos,
            doc_id=doc_id,
            grade=grade,
            judged=qrels.is_judged(query_id, doc_id),
            relevant=grade >= threshold,
            length=stop - start,
            mass=float(values[start:stop].sum()),
        ))
    q0, q1 = inp.query_span
    query_span = SpanAttention(0, "", 0, True, False, q1 - q0, float(values[q0:q1].sum()))
    ids = np.asarray(inp.seq.ids[: inp.seq.length])
    special = float(values[: inp.seq.length][(ids == CLS_ID) | (ids == SEP_ID)].sum())

    result = GroupAttention(
        query_id=query_id,
        normalize=normalize,
        query=_group_value([query_span], normalize),
        all_docs=_group_value(spans, normalize),
        relevant_docs=_group_value([s for s in spans if s.relevant], normalize),
        irrelevant_docs=_group_value([s for s in spans if not s.relevant], normalize),
        query_mass=query_span.mass,
        special_mass=special,
        total=float(values.sum()),
        spans=tuple(spans),
    )
    if result.num_unjudged:
        log.debug("%s: %d unjudged feedback docs counted as irrelevant", query_id, result.num_unjudged)
    return result


def average_group_attention(records: Sequence[GroupAttention], positions: Sequence[int] = TRACKED_POSITIONS) -> Dict[str, object]:
    """
    Means over queries. Relevant/irrelevant averages only use queries that
    have such documents; relevant_wins is the share of queries having both
    where the relevant group gets more attention.
    """
    def mean(xs: List[float]) -> Optional[float]:
        return round(float(np.mean(xs)), 9) if xs else None

    with_rel = [r for r in records if r.num_relevant]
    with_irr = [r for r in records if r.num_irrelevant]
    both = [r for r in records if r.num_relevant and r.num_irrelevant]
    by_position: Dict[str, Dict[str, Optional[float]]] = {}
    for p in positions:
        at_p = [s for r in records for s in r.spans if s.position == p]
        norm = records[0].normalize if records else "mean"
        by_position[str(p)] = {
            "all": mean([_group_value([s], norm) for s in at_p]),
            "relevant": mean([_group_value([s], norm) for s in at_p if s.relevant]),
            "irrelevant": mean([_group_value([s], norm) for s in at_p if not s.relevant]),
        }
    unjudged = sum(r.num_unjudged for r in records)
    return {
        "num_queries": len(records),
        "query": mean([r.query for r in records]),
        "all_docs": mean([r.all_docs for r in records]),
        "relevant_docs": mean([r.relevant_docs for r in with_rel]),
        "irrelevant_docs": mean([r.irrelevant_docs for r in with_irr]),
        "relevant_wins": round(sum(r.relevant_docs > r.irrelevant_docs for r in both) / len(both), 9) if both else None,
        "num_compared": len(both),
        "num_unjudged_docs": unjudged,
        "by_position": by_position,
    }


def group_attention_record(ga: GroupAttention) -> dict:
    """Flat JSON-ready view of one query's group attention."""
    out = {k: v for k, v in asdict(ga).items() if k != "spans"}
    out["spans"] = [dict(asdict(s), per_token=s.per_token) for s in ga.spans]
    return out


# ------------------------------
# Term highlighting
# ------------------------------
@dataclass(frozen=True)
class HighlightedToken:
    position: int
    token: str
    weight: float
    role: str


def _role_of(pos: int, token_id: int, inp: PrfInput) -> str:
    if token_id in (CLS_ID, SEP_ID, PAD_ID):
        return "special"
    if inp.query_span[0] <= pos < inp.query_span[1]:
        return "query"
    for i, (start, stop) in enumerate(inp.doc_spans, start=1):
        if start <= pos < stop:
            return f"doc{i}"
    return "special"


def highlight_terms(inp: PrfInput, attn: AttentionRecord, vocab: Vocabulary) -> List[HighlightedToken]:
    """
    One record per real position. Non-special weights are divided by the
    largest non-special cls_attention value; specials get weight 0.
    """
    values = np.asarray(attn.values, dtype=np.float64)
    n = inp.seq.length
    roles = [_role_of(p, inp.seq.ids[p], inp) for p in range(n)]
    content = [values[p] for p in range(n) if roles[p] != "special"]
    top = max(content) if content else 0.0
    out = []
    for p in range(n):
        w = 0.0 if roles[p] == "special" or top <= 0 else float(values[p] / top)
        out.append(HighlightedToken(position=p, token=vocab.token_of(inp.seq.ids[p]), weight=w, role=roles[p]))
    return out


def render_highlight_html(cases: Sequence[Tuple[str, Sequence[HighlightedToken]]], title: str = "PRF term highlighting") -> str:
    """Static page: one block per case, each token shaded red with opacity = weight."""
    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset=\"utf-8\">",
        f"<title>{html.escape(title)}</title>",
        "<style>body{font-family:monospace;max-width:60em}"
        ".tok{padding:0 2px;margin:1px;display:inline-block}"
        ".special{color:#888}.role{font-weight:bold;margin-top:.6em}</style>",
        "</head><body>",
        f"<h1>{html.escape(title)}</h1>",
    ]
    for heading, tokens in cases:
        parts.append(f"<h2>{html.escape(heading)}</h2><div>")
        current = None
        for t in tokens:
            if t.role != current and t.role != "special":
                current = t.role
                parts.append(f"<div class=\"role\">{html.escape(current)}</div>")
            if t.role == "special":
                parts.append(f"<span class=\"tok special\">{html.escape(t.token)}</span>")
            else:
                parts.append(
                    f"<span class=\"tok\" style=\"background-color:rgba(220,0,0,{t.weight:.3f})\" "
                    f"title=\"{t.weight:.4f}\">{html.escape(t.token)}</span>"
                )
        parts.append("</div>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"
