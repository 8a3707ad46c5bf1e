"""
dense_prf/evaluation.py

Ranking metrics and significance testing over TREC-style runs and qrels.

 - MRR@10, NDCG@10 (linear gain, log2(r+1) discount), Recall@1K binarized at
   grade 2, HOLE@10 (unjudged fraction), Avg_Rel at a rank position
 - two-tailed paired t-test, per-query differences with win/loss/tie counts

Unjudged documents count as grade 0 everywhere except HOLE. Queries that are
absent from the qrels, or have no positive at the metric's threshold, are left
out of the mean and listed in MetricReport.excluded. MRR, NDCG and Recall are
scored by ir_measures (trec_eval semantics); HOLE and Avg_Rel are computed here.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import ir_measures
import numpy as np
from scipy import special

if TYPE_CHECKING:  # pragma: no cover
    from dense_prf.retrieval import RunList

log = logging.getLogger(__name__)

TIE_EPS = 1e-9
ALPHA = 0.05


# ------------------------------
# Qrels
# ------------------------------
class Qrels:
    """Graded judgments: query_id -> doc_id -> grade (>= 0)."""

    def __init__(self, grades: Mapping[str, Mapping[str, int]]):
        self._grades: Dict[str, Dict[str, int]] = {q: dict(d) for q, d in grades.items()}

    def __len__(self) -> int:
        return len(self._grades)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._grades

    @property
    def query_ids(self) -> List[str]:
        return list(self._grades)

    @property
    def num_judgments(self) -> int:
        return sum(len(d) for d in self._grades.values())

    @property
    def max_grade(self) -> int:
        return max((g for d in self._grades.values() for g in d.values()), default=0)

    def judgments(self, query_id: str) -> Dict[str, int]:
        return dict(self._grades.get(query_id, {}))

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._grades.get(query_id, {}).get(doc_id, 0)

    def is_judged(self, query_id: str, doc_id: str) -> bool:
        return doc_id in self._grades.get(query_id, {})

    def relevant(self, query_id: str, threshold: int = 1) -> List[str]:
        return [d for d, g in self._grades.get(query_id, {}).items() if g >= threshold]

    def subset(self, query_ids: Sequence[str]) -> "Qrels":
        return Qrels({q: self._grades[q] for q in query_ids if q in self._grades})


# ------------------------------
# Reports
# ------------------------------
@dataclass
class MetricReport:
    metric: str
    per_query: Dict[str, float]
    excluded: List[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_query.values()))) if self.per_query else 0.0

    @property
    def num_queries(self) -> int:
        return len(self.per_query)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mean": round(self.mean, 6),
            "num_queries": self.num_queries,
            "num_excluded": len(self.excluded),
            "per_query": {q: round(v, 6) for q, v in self.per_query.items()},
        }


def _ranked(run: "RunList", query_id: str) -> List[str]:
    return [h.doc_id for h in run.hits(query_id)]


def _per_query(run: "RunList", qrels: Qrels, metric: str, score: Callable[[str, List[str]], Optional[float]]) -> MetricReport:
    per_query: Dict[str, float] = {}
    excluded: List[str] = []
    for qid in run.query_ids:
        if qid not in qrels:
            excluded.append(qid)
            continue
        value = score(qid, _ranked(run, qid))
        if value is None:
            excluded.append(qid)
        else:
            per_query[qid] = float(value)
    if excluded:
        log.debug("%s: %d queries excluded (unjudged or no positives)", metric, len(excluded))
    return MetricReport(metric=metric, per_query=per_query, excluded=excluded)


# ------------------------------
# Metrics
# ------------------------------
def _trec_run(run: "RunList", query_ids: Sequence[str]) -> Dict[str, Dict[str, float]]:
    # rank-derived scores keep our doc-id tie order; trec_eval would re-break ties by docno
    return {qid: {h.doc_id: float(-h.rank) for h in run.hits(qid)} for qid in query_ids if run.hits(qid)}


def _library_metric(run: "RunList", qrels: Qrels, measure, metric: str, keep: Callable[[str], bool]) -> MetricReport:
    """Score `measure` with ir_measures over the queries that `keep` admits; the rest are excluded."""
    included = [q for q in run.query_ids if q in qrels and keep(q)]
    admitted = set(included)
    excluded = [q for q in run.query_ids if q not in admitted]
    per_query = {q: 0.0 for q in included}
    trec_qrels = {q: qrels.judgments(q) for q in included}
    trec_run = _trec_run(run, included)
    if trec_run:
        for m in ir_measures.iter_calc([measure], trec_qrels, trec_run):
            per_query[m.query_id] = float(m.value)
    if excluded:
        log.debug("%s: %d queries excluded (unjudged or no positives)", metric, len(excluded))
    return MetricReport(metric=metric, per_query=per_query, excluded=excluded)


def mrr_at(run: "RunList", qrels: Qrels, cutoff: int = 10, rel_threshold: int = 1) -> MetricReport:
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    return _library_metric(run, qrels, ir_measures.RR(rel=rel_threshold) @ cutoff, f"mrr@{cutoff}",
                           lambda q: bool(qrels.relevant(q, rel_threshold)))


def ndcg_at(run: "RunList", qrels: Qrels, cutoff: int = 10) -> MetricReport:
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    return _library_metric(run, qrels, ir_measures.nDCG @ cutoff, f"ndcg@{cutoff}",
                           lambda q: bool(qrels.relevant(q, 1)))


def recall_at(run: "RunList", qrels: Qrels, cutoff: int = 1000, binarize_at: int = 2) -> MetricReport:
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    return _library_metric(run, qrels, ir_measures.R(rel=binarize_at) @ cutoff, f"recall@{cutoff}",
                           lambda q: bool(qrels.relevant(q, binarize_at)))


# HOLE and Avg_Rel have no trec_eval counterpart
def hole_at(run: "RunList", qrels: Qrels, cutoff: int = 10) -> MetricReport:
    def score(qid: str, ranked: List[str]) -> Optional[float]:
        top = ranked[:cutoff]
        if not top:
            return None
        return sum(not qrels.is_judged(qid, d) for d in top) / len(top)

    return _per_query(run, qrels, f"hole@{cutoff}", score)


def avg_rel(first_pass_run: "RunList", qrels: Qrels, position: int) -> float:
    """
    Mean grade of the document at rank `position` over the run's queries.
    Unjudged documents count as 0; queries with fewer than `position` hits are skipped.
    """
    if position < 1:
        raise ValueError(f"position must be >= 1, got {position}")
    grades = []
    for qid in first_pass_run.query_ids:
        ranked = _ranked(first_pass_run, qid)
        if len(ranked) >= position:
            grades.append(qrels.grade(qid, ranked[position - 1]))
    return float(np.mean(grades)) if grades else 0.0


_METRIC_RE = re.compile(r"^(mrr|ndcg|recall|hole)@(\d+)$")


def is_metric_name(name: str) -> bool:
    return bool(_METRIC_RE.match(name.strip().lower()))


def compute_metric(name: str, run: "RunList", qrels: Qrels, rel_threshold: int = 1, recall_binarize_at: int = 2) -> MetricReport:
    """Dispatch on a metric name such as "ndcg@10" or "recall@1000"."""
    m = _METRIC_RE.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {name!r}; expected mrr@N, ndcg@N, recall@N or hole@N")
    kind, cutoff = m.group(1), int(m.group(2))
    if kind == "mrr":
        return mrr_at(run, qrels, cutoff, rel_threshold)
    if kind == "ndcg":
        return ndcg_at(run, qrels, cutoff)
    if kind == "recall":
        return recall_at(run, qrels, cutoff, recall_binarize_at)
    return hole_at(run, qrels, cutoff)


def evaluate_run(run: "RunList", qrels: Qrels, metrics: Sequence[str], **kwargs) -> Dict[str, MetricReport]:
    return {name: compute_metric(name, run, qrels, **kwargs) for name in metrics}


# ------------------------------
# Significance
# ------------------------------
@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    n: int

    @property
    def df(self) -> int:
        return self.n - 1


def paired_t_test(per_query_a: Sequence[float], per_query_b: Sequence[float], alpha: float = ALPHA) -> TTestResult:
    """
    Two-tailed paired t-test with n-1 degrees of freedom.

    p = I_{df/(df+t^2)}(df/2, 1/2). When the differences have zero variance,
    p is 1.0 if their mean is zero and 0.0 otherwise (t is then 0 or +/-inf).
    """
    a = np.asarray(per_query_a, dtype=np.float64)
    b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors (got {a.shape} and {b.shape})")
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {n}")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, significant=False, n=n)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, significant=True, n=n)
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(t=t, p=p, significant=p <= alpha, n=n)


def aligned(report_a: MetricReport, report_b: MetricReport) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """Per-query values of two reports over their common queries, in report_a order."""
    qids = [q for q in report_a.per_query if q in report_b.per_query]
    a = np.array([report_a.per_query[q] for q in qids], dtype=np.float64)
    b = np.array([report_b.per_query[q] for q in qids], dtype=np.float64)
    return qids, a, b


def significance(run_a: "RunList", run_b: "RunList", qrels: Qrels, metric: str = "ndcg@10", **kwargs) -> TTestResult:
    _, a, b = aligned(compute_metric(metric, run_a, qrels, **kwargs), compute_metric(metric, run_b, qrels, **kwargs))
    return paired_t_test(a, b)


@dataclass
class QueryDiff:
    metric: str
    deltas: List[Tuple[str, float]]
    wins: int
    losses: int
    ties: int

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "wins": self.wins,
            "losses": self.losses,
            "ties": self.ties,
            "deltas": [{"query_id": q, "delta": round(d, 6)} for q, d in self.deltas],
        }


def per_query_diff(run_a: "RunList", run_b: "RunList", qrels: Qrels, metric: str = "ndcg@10", **kwargs) -> QueryDiff:
    """delta = metric(a) - metric(b) per query; |delta| < 1e-9 is a tie."""
    qids, a, b = aligned(compute_metric(metric, run_a, qrels, **kwargs), compute_metric(metric, run_b, qrels, **kwargs))
    deltas = [(q, float(x - y)) for q, x, y in zip(qids, a, b)]
    wins = sum(d >= TIE_EPS for _, d in deltas)
    losses = sum(d <= -TIE_EPS for _, d in deltas)
    return QueryDiff(metric=metric, deltas=deltas, wins=wins, losses=losses, ties=len(deltas) - wins - losses)


def write_metrics_json(reports: Mapping[str, MetricReport], path: Union[str, Path], extra: Optional[Mapping] = None) -> Path:
    """Metric JSON with sorted keys and fixed rounding, so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(extra or {})
    payload["metrics"] = {name: r.to_dict() for name, r in reports.items()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("Wrote metrics: %s", path)
    return path
