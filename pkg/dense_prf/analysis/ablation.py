"""
dense_prf/analysis/ablation.py

Comparison tables:
 - metrics_table: systems x metrics with relative change against the baseline
   row and significance markers (paired t-test, p <= 0.05)
 - depth_ablation: PRF depth sweep k = 0..5, baseline row first
"""

from __future__ import annotations

import logging
from typing import Dict, Mapping, Optional, Sequence, Tuple

import pandas as pd

from dense_prf.encoder import PrfEncoder
from dense_prf.etl.loaders import QueryRecord
from dense_prf.evaluation import ALPHA, Qrels, aligned, avg_rel, compute_metric, paired_t_test
from dense_prf.retrieval import PrfConfig, RetrievalContext, RunList, prf_retrieve, retrieve_all

log = logging.getLogger(__name__)

BASELINE_MARK = "*"
BETTER_THAN_BASELINE = "†"
BETTER_THAN_CONTROL = "‡"


def relative_change(value: float, base: float) -> str:
    if base == 0:
        return "n/a"
    return f"{(value - base) / base * 100.0:+.1f}%"


def metrics_table(
    runs: Sequence[Tuple[str, RunList]],
    qrels: Qrels,
    metrics: Sequence[str],
    baseline_label: str,
    control_label: Optional[str] = None,
    extra: Optional[Mapping[str, Mapping[str, object]]] = None,
    recall_binarize_at: int = 2,
    alpha: float = ALPHA,
) -> pd.DataFrame:
    """
    One row per (label, run). For every metric: the mean, its change relative
    to the baseline row, and markers for a significant improvement over the
    baseline (dagger) and over the control row (double dagger). The baseline
    label is suffixed with "*".
    """
    labels = [label for label, _ in runs]
    if baseline_label not in labels:
        raise ValueError(f"baseline {baseline_label!r} not among {labels}")
    reports = {label: {m: compute_metric(m, run, qrels, recall_binarize_at=recall_binarize_at) for m in metrics}
               for label, run in runs}
    rows = []
    for label in labels:
        row: Dict[str, object] = {"system": label + (BASELINE_MARK if label == baseline_label else "")}
        for m in metrics:
            rep = reports[label][m]
            row[m] = round(rep.mean, 6)
            row[f"{m} rel"] = relative_change(rep.mean, reports[baseline_label][m].mean)
            marks = ""
            for ref, mark in ((baseline_label, BETTER_THAN_BASELINE), (control_label, BETTER_THAN_CONTROL)):
                if ref is None or ref == label:
                    continue
                _, a, b = aligned(rep, reports[ref][m])
                if len(a) >= 2:
                    t = paired_t_test(a, b, alpha)
                    if t.significant and t.t > 0:
                        marks += mark
            row[f"{m} sig"] = marks
        for key, value in (extra or {}).get(label, {}).items():
            row[key] = value
        rows.append(row)
    return pd.DataFrame(rows)


def ablation_table(
    baseline_run: RunList,
    runs_by_k: Mapping[int, RunList],
    first_pass_run: RunList,
    qrels: Qrels,
    metrics: Sequence[str],
    recall_binarize_at: int = 2,
) -> pd.DataFrame:
    """Baseline row, then one row per k with Avg_Rel of the first-pass doc at rank k."""
    runs = [("baseline", baseline_run)] + [(f"k={k}", runs_by_k[k]) for k in sorted(runs_by_k)]
    feedback_run = first_pass_run.subset(baseline_run.query_ids)
    extra = {f"k={k}": {"avg_rel": round(avg_rel(feedback_run, qrels, k), 6) if k > 0 else None}
             for k in runs_by_k}
    extra["baseline"] = {"avg_rel": None}
    control = "k=0" if 0 in runs_by_k else None
    return metrics_table(runs, qrels, metrics, "baseline", control, extra, recall_binarize_at)


def depth_ablation(
    k_values: Sequence[int],
    prf_models: Mapping[int, PrfEncoder],
    ctx: RetrievalContext,
    queries: Sequence[QueryRecord],
    qrels: Qrels,
    metrics: Sequence[str],
    final_depth: int = 1000,
    first_pass_depth: int = 1000,
    threads: int = 1,
    recall_binarize_at: int = 2,
) -> Tuple[pd.DataFrame, Dict[int, RunList]]:
    """
    Retrieve with the PRF encoder trained for each k and tabulate. The baseline
    row is the first-pass run itself.
    """
    missing = [k for k in k_values if k not in prf_models]
    if missing:
        raise ValueError(f"no trained PRF encoder for k={missing}")
    qids = [q.query_id for q in queries]
    baseline_run = ctx.first_pass.subset(qids)
    runs: Dict[int, RunList] = {}
    for k in k_values:
        cfg = PrfConfig(k=k, first_pass_depth=first_pass_depth, final_depth=final_depth)
        model = prf_models[k]
        runs[k] = retrieve_all(
            queries,
            lambda text, m=model, c=cfg: prf_retrieve(text, m, ctx.baseline, ctx.index, c, ctx.vocab, ctx.doc_tokens),
            run_tag=f"prf_k{k}",
            threads=threads,
        )
        log.info("Ablation: retrieved k=%d for %d queries", k, len(queries))
    table = ablation_table(baseline_run, runs, ctx.first_pass, qrels, metrics, recall_binarize_at)
    return table, runs
