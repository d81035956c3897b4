"""Command-line entry point.

Exit codes: 0 success, 1 partial failures, 2 protocol violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import harness
from .anonymization import anonymize, build_profile, verify_no_leakage
from .backends import load_backend
from .bibliometrics import benchmark_tier_for_rank, build_benchmarks, compute_features, load_benchmarks, \
    save_benchmarks
from .ingestion import GroundTruthTable, OpenAlexClient, SemanticScholarClient, SnapshotSource, enrich, \
    load_rankings, snapshot_write
from .pipeline import run_pipeline
from .ranking_store import RankingStore
from .testset import ExcludedFromUniverse, TestSetSpec, UniverseMember, build_testset, consensus_rank, \
    read_testset, region_for, write_testset

EXIT_OK, EXIT_PARTIAL, EXIT_VIOLATION = 0, 1, 2


def _rankings(specs: Sequence[str]) -> Dict[str, GroundTruthTable]:
    """Parse ``SYSTEM=path.csv`` arguments."""
    out = {}
    for spec in specs or ():
        system, _, path = spec.partition("=")
        if not path:
            raise SystemExit(f"--rankings expects SYSTEM=path, got {spec!r}")
        out[system] = load_rankings(path, system)
    return out


def load_store(snapshot: Optional[str], rankings: Sequence[str], benchmarks: Optional[str] = None) -> RankingStore:
    raw = SnapshotSource(snapshot).by_name() if snapshot else {}
    bench = load_benchmarks(benchmarks) if benchmarks else None
    return RankingStore(_rankings(rankings), raw=raw, benchmarks=bench)


def cmd_ingest(args) -> int:
    ids = list(args.id or [])
    if args.ids_file:
        ids += [line.strip() for line in Path(args.ids_file).read_text().splitlines() if line.strip()]
    oa = OpenAlexClient()
    s2 = SemanticScholarClient() if args.enrich else None
    records, failed = [], 0
    for inst in ids:
        try:
            raw = oa.fetch_institution(inst)
            if s2 is not None:
                raw = enrich(raw, s2)
            records.append(raw)
        except Exception as exc:  # keep going, report at the end
            logging.error("%s: %s", inst, exc)
            failed += 1
    snapshot_write(args.out, records, snapshot_date=args.date)
    print(f"wrote {len(records)} institutions to {args.out} ({failed} failed)")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_benchmarks_build(args) -> int:
    store = load_store(args.snapshot, [f"{args.system}={args.rankings}"])
    by_tier: Dict[str, list] = {}
    for e in store.entries(args.system):
        if store.raw_data(e.name) is None:
            continue
        fv = compute_features(store.raw_data(e.name), load_benchmarks())
        by_tier.setdefault(benchmark_tier_for_rank(e.representative), []).append(fv)
    save_benchmarks(build_benchmarks(by_tier), args.out, notes=f"built from {args.system} snapshot")
    print(f"wrote benchmarks for {sorted(by_tier)} to {args.out}")
    return EXIT_OK


def cmd_testset_build(args) -> int:
    tables = _rankings(args.rankings)
    raw = SnapshotSource(args.snapshot).by_name() if args.snapshot else {}
    names = sorted({e.name for t in tables.values() for e in t.entries})
    universe = []
    for n in names:
        ranks = {s: next((e.rank for e in t.entries if e.name == n), None) for s, t in tables.items()}
        try:
            cons = consensus_rank(ranks, n)
        except ExcludedFromUniverse:
            continue
        r = raw.get(n)
        if r is None:
            continue
        universe.append(UniverseMember(n, r.institution_id, cons.rank, region_for(r.country_code)))
    members = build_testset(universe, TestSetSpec(size=args.size, seed=args.seed))
    write_testset(members, args.out)
    print(f"wrote {len(members)} members to {args.out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    store = load_store(args.snapshot, args.rankings, args.benchmarks)
    raw = store.raw_data(args.name)
    if raw is None:
        print(f"no data for {args.name!r} in the snapshot", file=sys.stderr)
        return EXIT_PARTIAL
    published = {s: r.label() for s, r in store.ranks_of(args.name).items()}
    result = run_pipeline(raw, store, load_backend(args.backend), args.seed, evaluation=False,
                          published_ranks=published)
    print(result.to_json())
    return EXIT_OK if result.ok else EXIT_PARTIAL


def cmd_evaluate(args) -> int:
    store = load_store(args.snapshot, args.rankings, args.benchmarks)
    testset = read_testset(args.testset)
    run = harness.evaluate_batch(testset, store, load_backend(args.backend), args.run_dir,
                                 concurrency=args.concurrency, delay_ms=args.delay_ms, seed=args.seed,
                                 system=args.system, with_report=args.with_report)
    s = run.summary_line()
    print(json.dumps(s))
    if run.violations:
        return EXIT_VIOLATION
    if run.failures or run.halted:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args) -> int:
    run = harness.load_run(args.run_dir)
    summary = harness.summarize_run(run, system_size=args.system_size)
    records = harness.tag_failures(summary.records)
    summary.records = records
    out = args.out or str(Path(args.run_dir) / f"report_{args.format}")
    paths = harness.emit_report(summary, out, args.format)
    if args.format == "table":
        for p in paths:
            print(p.read_text())
    else:
        for p in paths:
            print(p)
    return EXIT_VIOLATION if run.violations else EXIT_OK


def cmd_verify_anonymization(args) -> int:
    bad = 0
    source = SnapshotSource(args.fixture_dir)
    for i, inst in enumerate(source.ids()):
        raw = source.fetch_institution(inst)
        profile = build_profile(raw)
        report = verify_no_leakage(profile, anonymize(profile, i))
        status = "ok" if report.passed else "LEAK"
        print(f"{status}  {inst}  {report.summary() if not report.passed else ''}".rstrip())
        bad += not report.passed
    print(f"{bad} of {len(source.ids())} profiles leaked")
    return EXIT_VIOLATION if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blindrank", description="Blind rank estimation and evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def store_args(sp, rankings_required=False):
        sp.add_argument("--snapshot", help="snapshot directory written by `ingest`")
        sp.add_argument("--rankings", action="append", default=[], required=rankings_required,
                        metavar="SYSTEM=CSV", help="ranking table, repeatable")
        sp.add_argument("--benchmarks", help="tier benchmark JSON (default: bundled)")

    sp = sub.add_parser("ingest", help="fetch institutions into a snapshot")
    sp.add_argument("--id", action="append", help="OpenAlex institution id, repeatable")
    sp.add_argument("--ids-file")
    sp.add_argument("--enrich", action="store_true", help="add Semantic Scholar citation data")
    sp.add_argument("--date", help="snapshot date to record (default today)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    bp = sub.add_parser("benchmarks", help="tier benchmarks")
    bsub = bp.add_subparsers(dest="action", required=True)
    sp = bsub.add_parser("build")
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--rankings", required=True, help="ranking CSV")
    sp.add_argument("--system", default="THE")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_benchmarks_build)

    tp = sub.add_parser("testset", help="stratified test sets")
    tsub = tp.add_subparsers(dest="action", required=True)
    sp = tsub.add_parser("build")
    store_args(sp, rankings_required=True)
    sp.add_argument("--size", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_testset_build)

    sp = sub.add_parser("estimate", help="estimation-only run for one institution")
    sp.add_argument("name")
    store_args(sp)
    sp.add_argument("--backend", default="knn", help="backend config JSON, or `knn`")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("evaluate", help="blind evaluation over a test set")
    store_args(sp, rankings_required=True)
    sp.add_argument("--testset", required=True)
    sp.add_argument("--backend", default="knn")
    sp.add_argument("--system", default="THE")
    sp.add_argument("--concurrency", type=int, default=3)
    sp.add_argument("--delay-ms", type=float, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--run-dir", required=True, help="run directory; reusing it resumes the run")
    sp.add_argument("--with-report", action="store_true", help="also produce final reports")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="tables and figure data for a run")
    sp.add_argument("run_dir")
    sp.add_argument("--format", choices=("table", "csv"), default="table")
    sp.add_argument("--system-size", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    vp = sub.add_parser("verify", help="checks")
    vsub = vp.add_subparsers(dest="action", required=True)
    sp = vsub.add_parser("anonymization")
    sp.add_argument("fixture_dir")
    sp.set_defaults(func=cmd_verify_anonymization)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
