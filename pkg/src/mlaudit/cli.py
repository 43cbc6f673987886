"""Command line entry point: ``mlaudit <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ml_detector as det
from . import pipeline_recon as pr
from .audit import report
from .audit.dataset import ConceptCatalog, JoinError, MissingField, SchemaError, load_dataset, read_samples
from .audit.scorer import ScorerAdapter, run_scorer, write_scores_csv
from .audit.suite import SpecError, Suite
from .trace_core import TraceError, read_trace
from .trace_synth import DisparityPlan, SyntheticAppPlan, generate_scores, write_trace_bundle

log = logging.getLogger("mlaudit")

EXIT_SCHEMA = 2
EXIT_SCORER = 3


def _catalog(path):
    if path is None:
        return None
    return ConceptCatalog.default() if path == "default" else ConceptCatalog.load(path)


def cmd_detect(args) -> int:
    tlog = read_trace(args.trace, max_reject_ratio=args.max_reject_ratio)
    kw = det.KeywordSet.load(args.keywords, args.match_mode) if args.keywords \
        else det.KeywordSet.default(args.match_mode)
    evidence = det.detect(tlog, kw, args.min_len, not args.allow_boundary)
    cands = det.rank_candidates(evidence)
    if args.out:
        Path(args.out).write_text(det.evidence_report(evidence) + "\n")
    if args.candidates_out:
        Path(args.candidates_out).write_text(json.dumps([c.to_dict() for c in cands], indent=1) + "\n")
    c = tlog.counters
    print(f"records: read={c.read} accepted={c.accepted} rejected={c.rejected}")
    print(f"evidence: {len(evidence)}  candidates: {len(cands)}")
    for rank, cand in enumerate(cands[:args.top], start=1):
        print(f"{rank:3d}. {pr.NodeId(cand.function_name, cand.library)}  "
              f"evidence={cand.evidence_count} rules={','.join(sorted(cand.rule_kinds))}")
    return 0


def cmd_reconstruct(args) -> int:
    tlog = read_trace(args.trace, max_reject_ratio=args.max_reject_ratio)
    static = pr.load_static_edges(args.static_edges) if args.static_edges else []
    jumps = pr.load_jumps(args.jumps) if args.jumps else []
    g = pr.build_call_graph(tlog, static, jumps)
    evidence = det.detect(tlog)
    g.mark_evidence(evidence)
    roles = pr.load_roles(args.roles) if args.roles else {}
    g.assign_roles(roles)
    if args.anchor == "auto":
        cands = det.rank_candidates(evidence)
        if not cands:
            print("no ML evidence found; pass --anchor explicitly", file=sys.stderr)
            return 1
        anchor = pr.anchor_from_candidate(cands[0])
    else:
        anchor = pr.NodeId.parse(args.anchor)
    try:
        sl = pr.slice_pipeline(g, anchor)
    except pr.AnchorNotFound:
        print(f"anchor {anchor} not in call graph", file=sys.stderr)
        return 1
    declared = args.declared_inputs or [ref for ref, r in roles.items()
                                        if pr.Role.INPUT_SOURCE.value in ([r] if isinstance(r, str) else r)]
    flows = pr.completeness_check(sl, declared, g)
    doc = sl.to_dict()
    doc["extra_inflows"] = [f.to_dict() for f in flows]
    doc["unresolved_jumps"] = [dict(u.jump.to_dict(), reason=u.reason) for u in g.unresolved]
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if args.graph_out:
        Path(args.graph_out).write_text(json.dumps(g.to_dict(), indent=1) + "\n")
    return 0


def _load_plan(path, cls):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_synth_trace(args) -> int:
    d = _load_plan(args.plan, SyntheticAppPlan)
    if args.seed is not None:
        d["seed"] = args.seed
    truth = write_trace_bundle(SyntheticAppPlan.from_dict(d), args.out_dir)
    print(f"wrote trace bundle to {args.out_dir} ({len(truth.pipeline_nodes)} pipeline nodes)")
    return 0


def cmd_synth_scores(args) -> int:
    d = _load_plan(args.plan, DisparityPlan)
    if args.seed is not None:
        d["seed"] = args.seed
    generate_scores(DisparityPlan.from_dict(d), args.out_dir)
    print(f"wrote samples.csv, scores.csv and truth.json to {args.out_dir}")
    return 0


def cmd_score(args) -> int:
    samples = read_samples(args.samples)
    adapter = ScorerAdapter("internal", command=args.command, timeout=args.timeout,
                            retries=args.retries, concurrency=args.concurrency)
    rows, failures = run_scorer(adapter, samples.values(), _catalog(args.catalog))
    write_scores_csv(rows, args.out)
    for f in failures:
        log.warning("sample %s failed: %s %s", f.sample_id, f.error, f.message)
    ratio = len(failures) / max(1, len(samples))
    print(f"scored {len(samples) - len(failures)}/{len(samples)} samples, {len(rows)} rows")
    return EXIT_SCORER if ratio > args.max_failure_ratio else 0


def cmd_assess(args) -> int:
    ds = load_dataset(args.samples, args.scores, _catalog(args.catalog), args.max_orphan_ratio)
    suite = Suite.load(args.suite)
    doc = report.assess(ds, suite, args.out_dir, args.seed)
    n_rej = sum(1 for h in doc["hypotheses"] if h["reject"])
    print(f"{len(doc['hypotheses'])} tests, {n_rej} rejected; reports in {args.out_dir}")
    for h in doc["hypotheses"]:
        print(f"  {h['hypothesis']:<20} {h['stratum']:<8} p={h['p']:.4g} "
              f"alpha={h['alpha_corrected']:.6g} reject={h['reject']}")
    return 0


def cmd_mine(args) -> int:
    ds = load_dataset(args.samples, args.scores, _catalog(args.catalog), args.max_orphan_ratio)
    findings = report.mine(ds, args.out_dir, args.threshold, args.alpha, args.family_size, args.exclude)
    for f in findings:
        if f.reject:
            print(f"{f.top_group:<6} {f.concept:<24} mean={f.top_mean:.3f} p={f.p_value:.3g}")
    print(f"{sum(f.reject for f in findings)} of {len(findings)} tested concepts significant")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlaudit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def trace_opts(sp):
        sp.add_argument("--trace", required=True)
        sp.add_argument("--max-reject-ratio", type=float, default=0.5)

    sp = sub.add_parser("detect", help="find ML evidence in a trace log")
    trace_opts(sp)
    sp.add_argument("--keywords")
    sp.add_argument("--match-mode", choices=("substring", "token"), default="substring")
    sp.add_argument("--min-len", type=int, default=2)
    sp.add_argument("--allow-boundary", action="store_true",
                    help="accept arrays made only of 0 and 1")
    sp.add_argument("--out")
    sp.add_argument("--candidates-out")
    sp.add_argument("--top", type=int, default=10)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("reconstruct", help="rebuild the pipeline slice around an anchor")
    trace_opts(sp)
    sp.add_argument("--static-edges")
    sp.add_argument("--jumps")
    sp.add_argument("--anchor", default="auto", help="node reference or 'auto' (top candidate)")
    sp.add_argument("--roles")
    sp.add_argument("--declared-inputs", nargs="*")
    sp.add_argument("--out")
    sp.add_argument("--graph-out")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("synth", help="generate synthetic fixtures")
    ssub = sp.add_subparsers(dest="what", required=True)
    for name, fn in (("trace", cmd_synth_trace), ("scores", cmd_synth_scores)):
        s = ssub.add_parser(name)
        s.add_argument("--plan")
        s.add_argument("--seed", type=int)
        s.add_argument("--out-dir", required=True)
        s.set_defaults(func=fn)

    sp = sub.add_parser("score", help="score samples with an external command")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--command", required=True, help="template, e.g. 'scorer {sample_id}'")
    sp.add_argument("--catalog")
    sp.add_argument("--out", required=True)
    sp.add_argument("--timeout", type=float, default=30.0)
    sp.add_argument("--retries", type=int, default=0)
    sp.add_argument("--concurrency", type=int, default=1)
    sp.add_argument("--max-failure-ratio", type=float, default=0.1)
    sp.set_defaults(func=cmd_score)

    def data_opts(sp):
        sp.add_argument("--samples", required=True)
        sp.add_argument("--scores", required=True)
        sp.add_argument("--catalog", help="catalog file, or 'default' for the bundled list")
        sp.add_argument("--max-orphan-ratio", type=float, default=0.5)
        sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("assess", help="run a hypothesis suite and write reports")
    data_opts(sp)
    sp.add_argument("--suite", required=True, help="suite JSON or bundled name (nh1..nh7, tiktok, instagram)")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_assess)

    sp = sub.add_parser("mine", help="search for spuriously correlated concepts")
    data_opts(sp)
    sp.add_argument("--threshold", type=float, default=0.15)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--family-size", type=int)
    sp.add_argument("--exclude", nargs="*", default=[])
    sp.set_defaults(func=cmd_mine)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, JoinError, SpecError, MissingField, TraceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
