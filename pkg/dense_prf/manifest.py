"""
dense_prf/manifest.py

Per-stage run manifests:
 - a JSON file per stage under <out>/_metadata/meta_<stage>.json
 - a compact summary row in <out>/run_registry.duckdb (sqlite3 if duckdb is unavailable)

Timestamps and run ids live only here, never in runs or metric files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sqlite3
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union

# try duckdb if present (optional)
try:
    import duckdb  # type: ignore
    HAVE_DUCKDB = True
except Exception:
    HAVE_DUCKDB = False

log = logging.getLogger(__name__)

REGISTRY_NAME = "run_registry.duckdb"
META_DIR = "_metadata"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageManifest:
    stage: str
    config_hash: str
    run_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    counts: Dict[str, object] = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = "running"

    def add_input(self, path: Union[str, Path]) -> None:
        self.inputs.append(str(path))

    def add_output(self, path: Union[str, Path]) -> None:
        self.outputs.append(str(path))

    def finish(self, status: str = "ok") -> "StageManifest":
        self.status = status
        self.finished = _now()
        return self


def write_manifest(manifest: StageManifest, out_root: Union[str, Path]) -> Path:
    meta_dir = Path(out_root) / META_DIR
    meta_dir.mkdir(parents=True, exist_ok=True)
    meta_path = meta_dir / f"meta_{manifest.stage}.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2, default=str)
    log.info("Metadata recorded: %s", meta_path)
    return meta_path


def _registry_row(m: StageManifest) -> tuple:
    return (m.run_id, m.stage, m.config_hash, m.status, len(m.outputs),
            json.dumps(m.counts, sort_keys=True, default=str), m.started, m.finished)


def record_registry(manifest: StageManifest, db_path: Union[str, Path]) -> Path:
    """
    Record a compact summary row for quick lookups later. duckdb when present,
    otherwise sqlite3.
    """
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    row = _registry_row(manifest)
    if HAVE_DUCKDB:
        try:
            conn = duckdb.connect(database=str(db_path), read_only=False)
            conn.execute("""
                CREATE TABLE IF NOT EXISTS stage_runs (
                    run_id VARCHAR,
                    stage VARCHAR,
                    config_hash VARCHAR,
                    status VARCHAR,
                    num_outputs INTEGER,
                    counts VARCHAR,
                    started VARCHAR,
                    finished VARCHAR
                )
            """)
            conn.execute("INSERT INTO stage_runs VALUES (?, ?, ?, ?, ?, ?, ?, ?)", list(row))
            conn.close()
            log.debug("Stage %s recorded into DuckDB: %s", manifest.stage, db_path)
            return db_path
        except Exception as e:
            log.warning("DuckDB write failed, falling back to sqlite3: %s", e)
            db_path = db_path.with_suffix(".sqlite")

    conn = sqlite3.connect(str(db_path))
    cur = conn.cursor()
    cur.execute("""
        CREATE TABLE IF NOT EXISTS stage_runs (
            run_id TEXT,
            stage TEXT,
            config_hash TEXT,
            status TEXT,
            num_outputs INTEGER,
            counts TEXT,
            started TEXT,
            finished TEXT
        )
    """)
    cur.execute("INSERT INTO stage_runs VALUES (?, ?, ?, ?, ?, ?, ?, ?)", row)
    conn.commit()
    conn.close()
    log.debug("Stage %s recorded into sqlite DB: %s", manifest.stage, db_path)
    return db_path


def read_registry(db_path: Union[str, Path]) -> List[tuple]:
    """All rows in insertion order; reads whichever backend wrote the file."""
    db_path = Path(db_path)
    if HAVE_DUCKDB and db_path.suffix == ".duckdb":
        conn = duckdb.connect(database=str(db_path), read_only=True)
        rows = conn.execute("SELECT * FROM stage_runs").fetchall()
        conn.close()
        return rows
    conn = sqlite3.connect(str(db_path))
    rows = conn.execute("SELECT * FROM stage_runs").fetchall()
    conn.close()
    return rows
