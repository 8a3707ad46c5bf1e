#!/usr/bin/env python3
"""
dense_prf/cli.py

Single entry point for the dense retrieval + PRF workflow.

Usage examples:
    python -m dense_prf pipeline --config default --out-dir outputs
    python -m dense_prf gen-synthetic --out data/
    python -m dense_prf train --phase prf --k 3
    python -m dense_prf retrieve --mode prf --k 3 --depth 1000 --out run.trec
    python -m dense_prf evaluate --run run.trec --qrels qrels.txt --metrics mrr@10,ndcg@10,recall@1000,hole@10
    python -m dense_prf significance --run-a a.trec --run-b b.trec --metric ndcg@10
    python -m dense_prf analyze attention --k 3

Exit codes: 0 success, 1 stage failure, 2 invalid config, 3 missing inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import torch
import yaml

from dense_prf import pipeline
from dense_prf.config import config_from_dict, load_config
from dense_prf.errors import ConfigError, DensePrfError, StageError
from dense_prf.etl.synthetic import SPLITS

log = logging.getLogger("dense_prf")

EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )


def _csv_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


# ------------------------------
# CLI
# ------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="YAML RunConfig, or 'default' for config/default.yaml")
    common.add_argument("--out-dir", default=None, help="Output directory (overrides $DENSE_PRF_OUT and paths.out_dir)")
    common.add_argument("--threads", type=int, default=None, help="Cap on per-query parallelism (runtime.threads)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (runtime.log_level)")
    common.add_argument("-v", "--verbose", action="store_true", help="Shorthand for --log-level DEBUG")

    p = argparse.ArgumentParser(prog="dense_prf", description="Dense retrieval with a pseudo-relevance-feedback query encoder")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synthetic", parents=[common], help="Write the seeded synthetic benchmark")
    s.add_argument("--spec", default=None, help="YAML file with synthetic spec keys (overrides the config section)")
    s.add_argument("--out", default=None, help="Data directory (default: <out-dir>/data)")

    sub.add_parser("build-vocab", parents=[common], help="Build the vocabulary from the corpus")

    s = sub.add_parser("train", parents=[common], help="Train the baseline or a PRF query encoder")
    s.add_argument("--phase", choices=("baseline", "prf"), default="prf")
    s.add_argument("--k", type=int, default=None, help="PRF depth (default: prf.k)")
    s.add_argument("--grad-check", action="store_true", help="Only run the finite-difference gradient check")

    s = sub.add_parser("build-index", parents=[common], help="Embed the corpus into a flat index")
    s.add_argument("--corpus", default=None, help="Corpus TSV (default: data dir corpus.tsv)")
    s.add_argument("--encoder", default=None, help="Encoder checkpoint (default: models/baseline.ckpt)")
    s.add_argument("--out", default=None, help="Index file (default: index/docs.idx)")

    s = sub.add_parser("retrieve", parents=[common], help="Produce a TREC run")
    s.add_argument("--mode", choices=pipeline.RETRIEVE_MODES, required=True)
    s.add_argument("--k", type=int, default=None, help="PRF depth at retrieval time (default: prf.k)")
    s.add_argument("--depth", type=int, default=None, help="Hits per query (default: prf.final_depth)")
    s.add_argument("--split", choices=SPLITS, default=None, help="Query split (default: evaluation.split)")
    s.add_argument("--encoder", default=None, help="PRF checkpoint (default: models/prf_k<k>.ckpt)")
    s.add_argument("--out", default=None, help="Run file (default: runs/<split>.<name>.trec)")

    s = sub.add_parser("evaluate", parents=[common], help="Score a run against qrels")
    s.add_argument("--run", required=True)
    s.add_argument("--qrels", default=None)
    s.add_argument("--metrics", type=_csv_list, default=None, help="Comma-separated, e.g. mrr@10,ndcg@10")
    s.add_argument("--out", default=None, help="Metric JSON (default: metrics/<run>.json)")

    s = sub.add_parser("significance", parents=[common], help="Paired two-tailed t-test between two runs")
    s.add_argument("--run-a", required=True)
    s.add_argument("--run-b", required=True)
    s.add_argument("--metric", default=None)
    s.add_argument("--qrels", default=None)
    s.add_argument("--out", default=None)

    s = sub.add_parser("analyze", parents=[common], help="Attention, geometry, highlighting or depth ablation")
    s.add_argument("what", choices=pipeline.ANALYSES)
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--split", choices=SPLITS, default=None)

    s = sub.add_parser("ablate", parents=[common], help="PRF depth ablation table")
    s.add_argument("--split", choices=SPLITS, default=None)
    s.add_argument("--ks", type=lambda v: [int(x) for x in _csv_list(v)], default=None, help="e.g. 0,1,2,3")

    sub.add_parser("pipeline", parents=[common], help="Run the full workflow and print the summary table")
    return p


def _spec_override(cfg, spec_path: Optional[str]):
    if not spec_path:
        return cfg
    path = Path(spec_path)
    if not path.is_file():
        raise ConfigError([f"synthetic spec not found: {path}"])
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: synthetic spec must be a mapping"])
    merged = cfg.to_dict()
    merged["synthetic"] = {**merged["synthetic"], **raw}
    base = config_from_dict(merged)
    return replace(cfg, synthetic=base.synthetic)


def dispatch(args: argparse.Namespace, cfg) -> int:
    ws = pipeline.Workspace.from_config(cfg)
    cmd = args.command
    if cmd == "gen-synthetic":
        cfg = _spec_override(cfg, args.spec)
        pipeline.gen_synthetic(cfg, ws, Path(args.out) if args.out else None)
    elif cmd == "build-vocab":
        pipeline.build_vocabulary(cfg, ws)
    elif cmd == "train":
        k = cfg.prf.k if args.k is None else args.k
        if args.grad_check:
            result = pipeline.grad_check(cfg, ws, k=k)
            print(f"max relative error {result.max_rel_error:.3e} over {result.checked} entries ({result.worst})")
            return 0 if result.max_rel_error <= pipeline.GRAD_TOLERANCE else EXIT_FAILED
        if args.phase == "baseline":
            pipeline.train_baseline(cfg, ws)
        else:
            pipeline.train_prf(cfg, ws, k)
    elif cmd == "build-index":
        pipeline.build_doc_index(cfg, ws, args.corpus, args.encoder, args.out)
    elif cmd == "retrieve":
        _, path = pipeline.retrieve(cfg, ws, args.mode, args.k, args.depth, args.split, args.out, args.encoder)
        print(path)
    elif cmd == "evaluate":
        means = pipeline.evaluate(cfg, ws, Path(args.run), args.qrels, args.metrics, args.out)
        for name, value in means.items():
            print(f"{name}\t{value:.6f}")
    elif cmd == "significance":
        result = pipeline.significance_test(cfg, ws, Path(args.run_a), Path(args.run_b), args.metric,
                                            args.qrels, args.out)
        print(json.dumps(result, indent=2, sort_keys=True))
    elif cmd == "analyze":
        result = pipeline.analyze(cfg, ws, args.what, args.k, args.split)
        if hasattr(result, "to_string"):
            print(result.to_string(index=False))
    elif cmd == "ablate":
        print(pipeline.ablate(cfg, ws, args.split, args.ks).to_string(index=False))
    elif cmd == "pipeline":
        print(pipeline.run_pipeline(cfg, ws).to_string(index=False))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("DEBUG" if args.verbose else (args.log_level or "INFO"))
    # single intra-op thread keeps float reductions bitwise reproducible
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.out_dir)
    except ConfigError as e:
        log.error("%s failed: %s", args.command, e)
        return EXIT_CONFIG
    runtime = cfg.runtime
    if args.threads is not None:
        runtime = replace(runtime, threads=max(1, args.threads))
    if args.log_level is None and not args.verbose:
        setup_logging(runtime.log_level)
    cfg = replace(cfg, runtime=runtime)

    try:
        return dispatch(args, cfg)
    except StageError as e:
        log.error("%s failed: %s", args.command, e)
        return EXIT_MISSING
    except ConfigError as e:
        log.error("%s failed: %s", args.command, e)
        return EXIT_CONFIG
    except DensePrfError as e:
        log.error("%s failed: %s", args.command, e)
        return EXIT_FAILED
    except Exception:
        log.exception("%s failed unexpectedly", args.command)
        raise


if __name__ == "__main__":
    sys.exit(main())
