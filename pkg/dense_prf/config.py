"""
dense_prf/config.py

RunConfig: one YAML file with a section per module, each mapped onto a frozen
dataclass. Unknown sections and keys are rejected; every problem found is
reported together in a single ConfigError.

The only environment override is the output directory (DENSE_PRF_OUT).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from dense_prf.encoder import ModelConfig
from dense_prf.errors import ConfigError
from dense_prf.etl.synthetic import SyntheticSpec
from dense_prf.evaluation import is_metric_name
from dense_prf.retrieval import PrfConfig
from dense_prf.trainer import TrainConfig

log = logging.getLogger(__name__)

ENV_OUT = "DENSE_PRF_OUT"
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "config" / "default.yaml"
RESOLVED_NAME = "resolved_config.yaml"


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "outputs"
    # None: the synthetic benchmark is generated into <out_dir>/data
    data_dir: Optional[str] = None


@dataclass(frozen=True)
class VocabConfig:
    min_count: int = 1


@dataclass(frozen=True)
class RetrievalConfig:
    bm25_k1: float = 0.9
    bm25_b: float = 0.4
    bm25_depth: int = 1000
    encode_batch_size: int = 64


@dataclass(frozen=True)
class EvaluationConfig:
    metrics: List[str] = field(default_factory=lambda: ["mrr@10", "ndcg@10", "recall@1000", "hole@10"])
    rel_threshold: int = 1
    recall_binarize_at: int = 2
    significance_metric: str = "ndcg@10"
    split: str = "test"


@dataclass(frozen=True)
class AnalysisConfig:
    ablation_ks: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    relevance_threshold: int = 2
    attention_normalize: str = "mean"
    irrelevant_depth: int = 20
    positions: List[int] = field(default_factory=lambda: [1, 2, 3])


@dataclass(frozen=True)
class RuntimeConfig:
    threads: int = 1
    log_level: str = "INFO"


# section name -> (dataclass, keys not settable from YAML)
SECTIONS: Dict[str, Tuple[type, Tuple[str, ...]]] = {
    "paths": (PathsConfig, ()),
    "synthetic": (SyntheticSpec, ()),
    "vocab": (VocabConfig, ()),
    "model": (ModelConfig, ("vocab_size",)),
    "train_baseline": (TrainConfig, ("k",)),
    "train_prf": (TrainConfig, ()),
    "prf": (PrfConfig, ("trained_k",)),
    "retrieval": (RetrievalConfig, ()),
    "evaluation": (EvaluationConfig, ()),
    "analysis": (AnalysisConfig, ()),
    "runtime": (RuntimeConfig, ()),
}


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_baseline: TrainConfig = field(default_factory=lambda: TrainConfig(k=0, total_steps=1500))
    train_prf: TrainConfig = field(default_factory=TrainConfig)
    prf: PrfConfig = field(default_factory=PrfConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for name, (_, hidden) in SECTIONS.items():
            section = asdict(getattr(self, name))
            out[name] = {k: v for k, v in section.items() if k not in hidden}
        return out

    @property
    def config_hash(self) -> str:
        """First 12 hex chars of SHA-256 over the canonical JSON; output directory and runtime excluded."""
        data = self.to_dict()
        data.pop("runtime")
        data["paths"] = {k: v for k, v in data["paths"].items() if k != "out_dir"}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    @property
    def prf_depths(self) -> List[int]:
        """Every k a PRF encoder is trained for."""
        return sorted(set(self.analysis.ablation_ks) | {self.prf.k, self.train_prf.k})


# ------------------------------
# Parsing / validation
# ------------------------------
def _type_problem(section: str, key: str, value: Any, default: Any) -> Optional[str]:
    where = f"{section}.{key}"
    if default is None:
        if value is not None and not isinstance(value, str):
            return f"{where} must be a string or null (got {value!r})"
        return None
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        item = type(default[0]) if default else object
        ok = isinstance(value, list) and all(isinstance(v, item) and not isinstance(v, bool) for v in value)
    else:
        ok = True
    if ok:
        return None
    return f"{where} must be of type {type(default).__name__} (got {value!r})"


def _build_section(name: str, raw: Any, base: Any, problems: List[str]) -> Any:
    cls, hidden = SECTIONS[name]
    if raw is None:
        return base
    if not isinstance(raw, dict):
        problems.append(f"section {name!r} must be a mapping")
        return base
    allowed = {f.name for f in fields(cls)} - set(hidden)
    updates = {}
    for key, value in raw.items():
        if key not in allowed:
            problems.append(f"unknown key {name}.{key}")
            continue
        problem = _type_problem(name, key, value, getattr(base, key))
        if problem:
            problems.append(problem)
            continue
        updates[key] = float(value) if isinstance(getattr(base, key), float) else value
    return replace(base, **updates)


def _cross_checks(cfg: RunConfig) -> List[str]:
    problems: List[str] = []
    problems += cfg.synthetic.validate()
    problems += cfg.model.validate()
    problems += cfg.train_baseline.validate("train_baseline")
    problems += cfg.train_prf.validate("train_prf")
    problems += cfg.prf.validate()
    if cfg.vocab.min_count < 1:
        problems.append(f"vocab.min_count must be >= 1 (got {cfg.vocab.min_count})")
    if cfg.runtime.threads < 1:
        problems.append(f"runtime.threads must be >= 1 (got {cfg.runtime.threads})")
    if cfg.analysis.attention_normalize not in ("mean", "sum"):
        problems.append(f"analysis.attention_normalize must be 'mean' or 'sum' (got {cfg.analysis.attention_normalize!r})")
    if cfg.evaluation.split not in ("train", "dev", "test"):
        problems.append(f"evaluation.split must be train, dev or test (got {cfg.evaluation.split!r})")
    problems += [f"evaluation.metrics: unknown metric {m!r}" for m in cfg.evaluation.metrics if not is_metric_name(m)]
    if not is_metric_name(cfg.evaluation.significance_metric):
        problems.append(f"evaluation.significance_metric: unknown metric {cfg.evaluation.significance_metric!r}")
    if any(k < 0 for k in cfg.analysis.ablation_ks):
        problems.append("analysis.ablation_ks must be non-negative")
    max_k = max(cfg.prf_depths)
    need = cfg.model.query_budget + max_k + 2
    if cfg.model.max_len < need:
        problems.append(f"model.max_len={cfg.model.max_len} cannot hold query_budget={cfg.model.query_budget} "
                        f"plus {max_k} feedback docs (needs >= {need})")
    if cfg.retrieval.bm25_depth < cfg.train_baseline.negative_depth:
        problems.append(f"retrieval.bm25_depth={cfg.retrieval.bm25_depth} is below "
                        f"train_baseline.negative_depth={cfg.train_baseline.negative_depth}")
    if cfg.prf.first_pass_depth < cfg.train_prf.negative_depth:
        problems.append(f"prf.first_pass_depth={cfg.prf.first_pass_depth} is below "
                        f"train_prf.negative_depth={cfg.train_prf.negative_depth}")
    return problems


def config_from_dict(raw: Optional[Dict[str, Any]]) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping of sections"])
    problems = [f"unknown section {name!r}" for name in raw if name not in SECTIONS]
    base = RunConfig()
    sections = {name: _build_section(name, raw.get(name), getattr(base, name), problems) for name in SECTIONS}
    cfg = RunConfig(**sections)
    if not problems:
        problems = _cross_checks(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def resolve_config_path(source: Union[str, Path, None]) -> Path:
    if source is None or str(source) == "default":
        return DEFAULT_CONFIG
    return Path(source)


def load_config(source: Union[str, Path, None] = "default", out_dir: Optional[str] = None) -> RunConfig:
    """
    Load and validate a RunConfig. Output directory precedence: the out_dir
    argument, then $DENSE_PRF_OUT, then paths.out_dir from the file.
    """
    path = resolve_config_path(source)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    cfg = config_from_dict(raw)
    override = out_dir or os.environ.get(ENV_OUT)
    if override:
        cfg = replace(cfg, paths=replace(cfg.paths, out_dir=override))
    log.info("Config: %s (hash %s, out_dir=%s)", path, cfg.config_hash, cfg.paths.out_dir)
    return cfg


def write_resolved_config(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    body = yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)
    path.write_text(f"# config_hash: {cfg.config_hash}\n{body}", encoding="utf-8")
    return path
