"""
dense_prf/etl/loaders.py

Readers and writers for the plain-text collection formats:
 - corpus / queries TSV: "id<TAB>text"
 - TREC qrels:           "qid 0 docid grade"

All readers go through read_table(), which loads the file with pandas and
reports malformed rows by 1-based line number.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import pandas as pd

from dense_prf.errors import DataFormatError
from dense_prf.evaluation import Qrels

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    text: str


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str


# ------------------------------
# Generic table reader
# ------------------------------
def read_table(path: PathLike, columns: Sequence[str], sep: str, kind: str) -> pd.DataFrame:
    """
    Read a headerless delimited file into a string DataFrame with `columns`.

    Blank lines are skipped. A row with a missing or an extra field raises
    DataFormatError naming the file and line. The returned frame carries a
    `line_no` column for downstream messages.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{kind} file not found: {path}")
    ncols = len(columns)
    try:
        df = pd.read_csv(
            path,
            sep=sep,
            header=None,
            names=list(range(ncols + 1)),
            dtype=str,
            quoting=csv.QUOTE_NONE,
            keep_default_na=False,
            na_values=[],
            skip_blank_lines=False,
            engine="python",
        )
    except pd.errors.ParserError as exc:
        raise DataFormatError(f"malformed {kind} file: {exc}", path=path) from exc
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(columns) + ["line_no"])

    df["line_no"] = range(1, len(df) + 1)
    filled = df[list(range(ncols + 1))].notna()
    blank = ~filled.any(axis=1) | ((df[0].fillna("") == "") & ~filled[list(range(1, ncols + 1))].any(axis=1))
    df = df[~blank]

    missing = ~filled.loc[df.index, list(range(ncols))].all(axis=1)
    # a trailing separator yields an empty extra field; only a non-empty one is an error
    extra = filled.loc[df.index, ncols] & (df[ncols].fillna("") != "")
    bad = df[missing | extra]
    if len(bad):
        row = bad.iloc[0]
        got = int(filled.loc[bad.index[0]].sum())
        raise DataFormatError(f"expected {ncols} fields in {kind} line, got {got}", path=path, line_no=int(row["line_no"]))

    df = df[list(range(ncols)) + ["line_no"]]
    df.columns = list(columns) + ["line_no"]
    return df.reset_index(drop=True)


# ------------------------------
# Corpus / queries
# ------------------------------
def _load_id_text(path: PathLike, kind: str) -> pd.DataFrame:
    df = read_table(path, ["id", "text"], sep="\t", kind=kind)
    empty_ids = df[df["id"].str.strip() == ""]
    if len(empty_ids):
        raise DataFormatError(f"empty {kind} id", path=path, line_no=int(empty_ids.iloc[0]["line_no"]))
    dupes = df[df["id"].duplicated()]
    if len(dupes):
        row = dupes.iloc[0]
        raise DataFormatError(f"duplicate {kind} id {row['id']!r}", path=path, line_no=int(row["line_no"]))
    return df


def load_corpus(path: PathLike) -> List[DocumentRecord]:
    df = _load_id_text(path, "corpus")
    docs = [DocumentRecord(doc_id=i, text=t) for i, t in zip(df["id"], df["text"])]
    log.info("Loaded corpus: %s (%d docs)", path, len(docs))
    return docs


def load_queries(path: PathLike) -> List[QueryRecord]:
    df = _load_id_text(path, "queries")
    queries = [QueryRecord(query_id=i, text=t) for i, t in zip(df["id"], df["text"])]
    log.info("Loaded queries: %s (%d queries)", path, len(queries))
    return queries


def _write_id_text(rows: Iterable[tuple], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rid, text in rows:
            if "\t" in rid or "\n" in rid or "\t" in text or "\n" in text:
                raise ValueError(f"record {rid!r} contains a tab or newline")
            fh.write(f"{rid}\t{text}\n")
    return path


def write_corpus(docs: Iterable[DocumentRecord], path: PathLike) -> Path:
    return _write_id_text(((d.doc_id, d.text) for d in docs), path)


def write_queries(queries: Iterable[QueryRecord], path: PathLike) -> Path:
    return _write_id_text(((q.query_id, q.text) for q in queries), path)


# ------------------------------
# Qrels
# ------------------------------
def load_qrels(path: PathLike) -> Qrels:
    """
    TREC qrels. Grades must be non-negative integers. A repeated (qid, docid)
    keeps the highest grade and logs a warning.
    """
    df = read_table(path, ["qid", "iter", "docid", "grade"], sep=r"\s+", kind="qrels")
    grades: Dict[str, Dict[str, int]] = {}
    for qid, docid, raw, line_no in zip(df["qid"], df["docid"], df["grade"], df["line_no"]):
        try:
            grade = int(raw)
        except ValueError:
            raise DataFormatError(f"relevance grade {raw!r} is not an integer", path=path, line_no=int(line_no)) from None
        if grade < 0:
            raise DataFormatError(f"negative relevance grade {grade}", path=path, line_no=int(line_no))
        per_query = grades.setdefault(qid, {})
        if docid in per_query:
            kept = max(per_query[docid], grade)
            log.warning("%s:%d: duplicate qrels entry (%s, %s) grades %d and %d; keeping %d",
                        path, line_no, qid, docid, per_query[docid], grade, kept)
            grade = kept
        per_query[docid] = grade
    qrels = Qrels(grades)
    log.info("Loaded qrels: %s (%d queries, %d judgments)", path, len(qrels), qrels.num_judgments)
    return qrels


def write_qrels(qrels: Qrels, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in qrels.query_ids:
            for docid, grade in qrels.judgments(qid).items():
                fh.write(f"{qid} 0 {docid} {grade}\n")
    return path
