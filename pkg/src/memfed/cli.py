"""``memfed`` command line: run, score, verify.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import embio
from .config import ConfigError, load_config
from .ledger import (LOG_FORMAT_VERSION, ContentStore, LedgerError, check_event_log, fold_events, log_digest,
                     read_event_log)
from .metrics import SCORE_FIELDS
from .provenance import LineageError, Manifest, ProvenanceError, validate_lineage
from .scoring import DimensionMismatch, ScoreOptions, score_sets
from .simnet.scheduler import ScenarioError, Trace, final_means, run_schedule

OUT_ENV = "MEMFED_OUT_DIR"
SUMMARY_FORMAT_VERSION = 1
SCORES_FORMAT_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"memfed: {msg}", file=sys.stderr)


# -- run -------------------------------------------------------------------

def _digest_doc(events_digest: str, n: int) -> dict:
    return {"format_version": LOG_FORMAT_VERSION, "events": n, "sha256": events_digest}


def summarize(trace: Trace, name: str, seed: int, config_sha: str, last: int = 10) -> dict:
    rows = trace.global_rows()
    scope = "global"
    if not rows:
        rows = [r for r in trace.scores if r.scope == "local"]
        scope = "local"
    means = final_means(rows, last)
    if means:
        means["qn_e3"] = means["qn"] * 1e-3
    local = {}
    for nid in trace.addresses:
        mine = [r for r in trace.scores if r.scope == "local" and r.node_id == nid]
        if mine:
            local[nid] = final_means(mine, last)
    models = trace.ledger.state.models
    return {
        "format_version": SUMMARY_FORMAT_VERSION,
        "name": name,
        "seed": seed,
        "config_sha256": config_sha,
        "ledger_digest": trace.ledger.digest(),
        "trace_digest": trace.digest(),
        "submissions": len(models),
        "final_means_scope": scope,
        "final_means": means,
        "final_means_local": local,
        "excluded_fraction_mean": {nid: float(np.mean(v)) for nid, v in trace.excluded_fractions.items() if v},
        "final_exclusions": trace.final_exclusions,
        "rewards": [{"wallet": w, "amount": a} for w, a in trace.rewards],
        "addresses": trace.addresses,
    }


def write_outputs(trace: Trace, out: Path, summary: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    digest = trace.ledger.write_jsonl(out / "ledger.jsonl")
    (out / "ledger.digest").write_text(json.dumps(_digest_doc(digest, trace.ledger.head)) + "\n")
    (out / "scores.csv").write_text(f"# memfed-scores format_version={SCORES_FORMAT_VERSION}\n"
                                    + trace.scores_csv())
    trace.store.save(out / "manifests")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except ConfigError as exc:
        for line in exc.lines():
            print(line, file=sys.stderr)
        return EXIT_INVALID
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out or os.environ.get(OUT_ENV) or cfg.output.dir or f"memfed-out/{cfg.name}-s{seed}"
    out = Path(out)
    try:
        trace = run_schedule(cfg.scenario(), seed)
    except ScenarioError as exc:
        _err(str(exc))
        return EXIT_INVALID
    config_sha = hashlib.sha256(Path(args.config).read_bytes()).hexdigest()
    summary = summarize(trace, cfg.name, seed, config_sha)
    write_outputs(trace, out, summary)
    m = summary["final_means"]
    print(f"wrote {out} ({summary['submissions']} submissions, ledger {summary['ledger_digest'][:16]})")
    if m:
        print(f"final-{m['n']} means ({summary['final_means_scope']}): R_C={m['r_c']:.4f} "
              f"Q-N={m['qn']:.3f} (x1e-3: {m['qn_e3']:.6f}) FID={m['fid']:.3f} FLD={m['fld']:.2f}")
    return EXIT_OK


# -- score -----------------------------------------------------------------

def _load_set(path: str, label: str) -> embio.EmbeddingSet:
    if not Path(path).is_file():
        raise UsageError(f"{label} file not found: {path}")
    return embio.load(path, expect_dim=None)


def cmd_score(args) -> int:
    try:
        train = _load_set(args.train, "train")
        test = _load_set(args.test, "test")
        gen = _load_set(args.generated, "generated")
    except embio.EmbeddingFileError as exc:
        _err(str(exc))
        return EXIT_INVALID
    opts = ScoreOptions(args.knn_k, args.confirm_threshold, args.k_cells, args.bandwidth,
                        not args.no_baselines, args.seed)
    try:
        bundle, report = score_sets(train, test, gen, opts)
    except DimensionMismatch as exc:
        _err(str(exc))
        return EXIT_INVALID
    doc = {"format_version": SCORES_FORMAT_VERSION, **bundle.to_dict(),
           "novelty": bundle.novelty, "qn_e3": bundle.qn * 1e-3,
           "n_generated": report.n_generated, "n_confirmed": report.n_confirmed}
    print(json.dumps(doc, indent=2))
    if args.pairs_out:
        Path(args.pairs_out).write_text(report.pairs_csv())
    return EXIT_OK


# -- verify ----------------------------------------------------------------

def verify_outputs(ledger_path: Path, store: ContentStore, lineage: str | None = None,
                   expected_digest: str | None = None) -> list[str]:
    """Every problem found, each naming the offending event or CID."""
    try:
        events = read_event_log(ledger_path)
    except LedgerError as exc:
        return [f"ledger: {exc}"]
    problems = check_event_log(events)
    digest = log_digest(events)
    if expected_digest is not None and digest != expected_digest:
        problems.append(f"ledger digest mismatch: recorded {expected_digest}, recomputed {digest}")
    state = fold_events(events)
    if lineage is None:
        heads = list(state.models)
    else:
        heads = [c for c, m in state.models.items() if lineage in (c, m["manifest_cid"])]
        if not heads:
            problems.append(f"lineage: {lineage} is not a submitted model or manifest")
    for cid in heads:
        info = state.models[cid]
        try:
            chain = validate_lineage(store, info["manifest_cid"])
        except LineageError as exc:
            problems.append(f"model {cid}: {exc}")
            continue
        head, _ = chain.entries[-1]
        if head.asset_cid != cid:
            problems.append(f"model {cid}: manifest {info['manifest_cid']} describes {head.asset_cid}")
        if head.wallet_address != info["submitter"]:
            problems.append(f"model {cid}: manifest {info['manifest_cid']} signed by {head.wallet_address}, "
                            f"submitted by {info['submitter']}")
        parent = head.parent
        if (parent.asset_cid if parent else None) != info["parent_cid"]:
            problems.append(f"model {cid}: manifest {info['manifest_cid']} parent disagrees with ledger")
    return problems


def cmd_verify(args) -> int:
    ledger_path = Path(args.ledger)
    if not ledger_path.is_file():
        raise UsageError(f"ledger file not found: {ledger_path}")
    if not Path(args.store).is_dir():
        raise UsageError(f"store directory not found: {args.store}")
    expected = args.digest
    sidecar = ledger_path.with_suffix(".digest")
    if expected is None and sidecar.is_file():
        expected = json.loads(sidecar.read_text())["sha256"]
    problems = verify_outputs(ledger_path, ContentStore(args.store), args.lineage, expected)
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        return EXIT_INVALID
    print(f"OK {ledger_path}: replay, digest and lineage checks passed")
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memfed", description="Memorization-aware federated training simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    r.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or the config)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("score", help="score a generated embedding set against train/test sets")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--knn-k", type=int, default=5)
    s.add_argument("--confirm-threshold", type=float, default=0.8)
    s.add_argument("--k-cells", type=int, default=None)
    s.add_argument("--bandwidth", type=float, default=None)
    s.add_argument("--no-baselines", action="store_true", help="skip AuthPct and C_T")
    s.add_argument("--seed", type=int, default=0, help="k-means seed for C_T")
    s.add_argument("--pairs-out", default=None, help="CSV of confirmed memorized pairs")
    s.set_defaults(func=cmd_score)

    v = sub.add_parser("verify", help="replay a ledger and validate model lineages")
    v.add_argument("--ledger", required=True)
    v.add_argument("--store", required=True)
    v.add_argument("--lineage", default=None, help="check only this model or manifest CID")
    v.add_argument("--digest", default=None, help="expected ledger digest (default: ledger.digest sidecar)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "score":
        if args.knn_k < 1 or not 0 < args.confirm_threshold < 1:
            parser.error("--knn-k must be >= 1 and --confirm-threshold in (0, 1)")
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
