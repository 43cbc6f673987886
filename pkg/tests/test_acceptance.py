"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import json
import math
import random
import resource
import struct
import subprocess
import sys
import textwrap
import time
from bisect import bisect_left, bisect_right

import numpy as np
import pytest
from scipy import stats as sps

from mlaudit import ml_detector as det
from mlaudit import pipeline_recon as pr
from mlaudit.audit import report
from mlaudit.cli import main
from mlaudit.stats_engine import estimate_power, kruskal_wallis, mine_spurious, roc_auc
from mlaudit.trace_core import BLOB_CAP, TypedValue, TypeKind, decode_args, encode_args, parse_shorty, parse_trace
from mlaudit.trace_synth import (DisparityPlan, SyntheticAppPlan, draw_scores, generate_scores,
                                 generate_trace, group_label, noise_lines)


@pytest.fixture
def verdict(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} {detail}".rstrip())
        return ok
    return emit


# 1 ---------------------------------------------------------------------------

def _random_value(kind, rnd, trailing):
    if kind is TypeKind.POINTER:
        return rnd.randbytes(rnd.randint(0, BLOB_CAP) if trailing else 4)
    if kind is TypeKind.BOOL:
        return rnd.random() < 0.5
    if kind is TypeKind.FLOAT:
        return struct.unpack("<f", struct.pack("<f", rnd.uniform(-1e30, 1e30)))[0]
    if kind is TypeKind.DOUBLE:
        return rnd.uniform(-1e300, 1e300)
    bits = {TypeKind.BYTE: 8, TypeKind.SHORT: 16, TypeKind.INT: 32, TypeKind.LONG: 64}.get(kind)
    if bits is None:  # CHAR
        return rnd.randrange(0, 2**16)
    return rnd.randrange(-2**(bits - 1), 2**(bits - 1))


def test_codec_round_trip(verdict):
    t0 = time.perf_counter()
    rnd = random.Random(0)
    arg_kinds = [k for k in TypeKind if k is not TypeKind.VOID]
    bad = 0
    for _ in range(1000):
        n = rnd.randint(0, 7)
        kinds = [rnd.choice(arg_kinds) for _ in range(n)]
        shorty = rnd.choice(list(TypeKind)).char + "".join(k.char for k in kinds)
        static = rnd.random() < 0.5
        vals = [TypedValue(k, _random_value(k, rnd, i == n - 1)) for i, k in enumerate(kinds)]
        bad += decode_args(parse_shorty(shorty), encode_args(vals, static), static) != vals
    sig = parse_shorty("IIJ")
    iij = decode_args(sig, bytes.fromhex("2a000000" "ffffffffffffffff"), True)
    iij_ok = sig.return_kind is TypeKind.INT and iij == [TypedValue(TypeKind.INT, 42), TypedValue(TypeKind.LONG, -1)]
    dt = time.perf_counter() - t0
    ok = bad == 0 and iij_ok and dt < 5
    assert verdict(1, "codec round trip", ok, f"(mismatches={bad}, IIJ={iij_ok}, {dt:.2f}s)")


# 2 ---------------------------------------------------------------------------

def _kw_rank_oracle(groups):
    pooled = sorted(v for g in groups for v in g)
    n = len(pooled)

    def rank(x):
        lo, hi = bisect_left(pooled, x), bisect_right(pooled, x)
        return lo + (hi - lo + 1) / 2

    h = 12.0 / (n * (n + 1)) * sum(sum(rank(x) for x in g) ** 2 / len(g) for g in groups) - 3 * (n + 1)
    ties = sum(t ** 3 - t for t in (bisect_right(pooled, v) - bisect_left(pooled, v) for v in set(pooled)))
    c = 1 - ties / (n ** 3 - n)
    if c == 0:
        return 0.0, 1.0
    h /= c
    return h, float(sps.chi2.sf(h, len(groups) - 1))


def test_kw_oracle(verdict):
    t0 = time.perf_counter()
    rnd = np.random.default_rng(0)
    worst_h = worst_p = 0.0
    done = 0
    while done < 500:
        k = int(rnd.integers(2, 6))
        groups = []
        for _ in range(k):
            size = int(rnd.integers(1, 31))
            # small integer support injects ties; half the cases add a continuous part
            v = rnd.integers(0, 8, size).astype(float)
            if rnd.random() < 0.5:
                v = v + rnd.normal(0, 1, size).round(1)
            groups.append(list(v))
        if sum(map(len, groups)) < 3:
            continue
        h, p = _kw_rank_oracle(groups)
        r = kruskal_wallis(groups)
        worst_h = max(worst_h, abs(r.h_statistic - h))
        worst_p = max(worst_p, abs(r.p_value - p))
        done += 1
    same = kruskal_wallis([[0.1, 0.5, 0.5, 0.9]] * 4)
    dt = time.perf_counter() - t0
    ok = worst_h <= 1e-10 and worst_p <= 1e-10 and same.p_value == 1.0 and dt < 10
    assert verdict(2, "KW oracle equivalence", ok,
                   f"(max|dH|={worst_h:.1e}, max|dp|={worst_p:.1e}, identical p={same.p_value}, {dt:.2f}s)")


# 3 ---------------------------------------------------------------------------

def test_auc_exact(verdict, tmp_path):
    t0 = time.perf_counter()
    rnd = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        pos = list(rnd.integers(0, 20, int(rnd.integers(1, 40))) / 20)
        neg = list(rnd.integers(0, 20, int(rnd.integers(1, 40))) / 20)
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))
        worst = max(worst, abs(roc_auc(pos, neg) - pairs))
    nan_ok = all(math.isnan(roc_auc(p, q)) for p, q in [([], [0.1]), ([0.1], []), ([], [])])
    serialized = json.dumps(report.jsonable({"auc": roc_auc([0.3], [])}))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and nan_ok and serialized == '{"auc": "NaN"}' and dt < 5
    assert verdict(3, "AUC exactness", ok, f"(max err={worst:.1e}, empty->{serialized}, {dt:.2f}s)")


# 4 ---------------------------------------------------------------------------

def test_power_calibration(verdict):
    t0 = time.perf_counter()
    rnd = np.random.default_rng(0)
    pooled = rnd.uniform(size=600)
    null = [estimate_power([pooled, pooled, pooled], 100, 1000, 0.05, seed) for seed in (0, 1)]
    disjoint = estimate_power([rnd.uniform(0, 0.1, 300), rnd.uniform(0.9, 1, 300)], 100, 1000, 0.05, 0)
    shifted = [rnd.normal(0, 1, 2000), rnd.normal(0.1, 1, 2000)]
    curve = [estimate_power(shifted, n, 1000, 0.05, 0) for n in (100, 500, 1000)]
    dt = time.perf_counter() - t0
    ok = (all(0.02 <= p <= 0.08 for p in null) and disjoint >= 0.99
          and curve == sorted(curve) and dt < 60)
    assert verdict(4, "power calibration", ok, f"(null={null}, disjoint={disjoint}, curve={curve}, {dt:.1f}s)")


# 5 ---------------------------------------------------------------------------

def test_detection_and_reconstruction(verdict):
    t0 = time.perf_counter()
    flagged = exact = feeds = planted = 0
    for seed in range(20):
        plan = SyntheticAppPlan.acceptance(seed)
        assert plan.n_background_functions == 10_000 and plan.obfuscate_names
        assert any(len(j.targets) > 1 for j in plan.jump_branches)
        lines, truth = generate_trace(plan)
        log = parse_trace(lines)
        evidence = det.scan_keywords(log, det.KeywordSet.default()) + det.scan_probability_vectors(log)
        hit = {e.record_index for e in evidence}
        flagged += all(i in hit for i in truth.evidence_indices)
        g = pr.build_call_graph(log, (), truth.jump_records)
        g.mark_evidence(evidence)
        g.assign_roles(truth.roles)
        sl = pr.slice_pipeline(g, pr.anchor_from_candidate(det.rank_candidates(evidence)[0]))
        exact += {str(n) for n in sl.nodes} == set(truth.pipeline_nodes)
        if truth.second_input:
            planted += 1
            feeds += truth.second_input in [str(f.src) for f in pr.completeness_check(sl, truth.inputs, g)]
    dt = time.perf_counter() - t0
    ok = flagged == 20 and exact >= 19 and feeds == planted and dt < 120
    assert verdict(5, "detection + reconstruction", ok,
                   f"(flagged {flagged}/20, exact slice {exact}/20, second input {feeds}/{planted}, {dt:.1f}s)")


# 6 ---------------------------------------------------------------------------

CONCEPTS = tuple(f"c{i:02d}" for i in range(50))


def test_spurious_miner(verdict):
    t0 = time.perf_counter()
    plan = DisparityPlan(concepts=CONCEPTS, n_per_group=300, shifts={("c17", "IF"): 0.3}, seed=0)
    found = mine_spurious(draw_scores(plan).table(plan.group_labels, CONCEPTS))
    hits = [(f.concept, f.top_group) for f in found if f.reject]
    null_hits = []
    for seed in range(100):
        p = DisparityPlan(concepts=CONCEPTS, n_per_group=300, seed=seed)
        if any(f.reject for f in mine_spurious(draw_scores(p).table(p.group_labels, CONCEPTS))):
            null_hits.append(seed)
    rate = len(null_hits) / 100
    dt = time.perf_counter() - t0
    ok = hits == [("c17", "IF")] and rate <= 0.05 and dt < 180
    assert verdict(6, "spurious miner", ok,
                   f"(planted={hits}, null any-finding rate={rate:.2f} seeds={null_hits}, {dt:.1f}s)")


# 7 ---------------------------------------------------------------------------

IG_CONCEPTS = ("beard", "blond", "blonde", "braiding", "eyeglasses", "eyewear", "hair", "hair_long",
               "jewelry", "sunglass")


def test_report_shape(verdict, tmp_path, capsys):
    groups = [group_label(e, s) for e in ("Asian", "Black", "Indian", "White") for s in ("Male", "Female")]
    ann = {(c, g): (6, 6) for c in IG_CONCEPTS for g in groups}
    empty = {("beard", "AF"): (0, 8), ("beard", "BF"): (0, 8), ("blond", "BM"): (5, 0), ("jewelry", "IM"): (0, 3)}
    ann.update(empty)
    plan = DisparityPlan(concepts=IG_CONCEPTS, n_per_group=30, annotations=ann,
                         shifts={("beard", "WM"): 0.2}, seed=0)
    generate_scores(plan, tmp_path / "fx")
    outs = []
    for run in ("a", "b"):
        rc = main(["assess", "--samples", str(tmp_path / "fx" / "samples.csv"),
                   "--scores", str(tmp_path / "fx" / "scores.csv"), "--catalog", "default",
                   "--suite", "instagram", "--out-dir", str(tmp_path / run)])
        assert rc == 0
        outs.append(capsys.readouterr().out)
    printed = [line for line in outs[0].splitlines() if line.strip().startswith("NH7")]
    alpha_ok = bool(printed) and all("alpha=0.00625 " in line for line in printed)

    rows = (tmp_path / "a" / "tables" / "auc.csv").read_text().splitlines()
    header = rows[0].split(",")
    shape_ok = header == ["concept", *groups, "NH5", "NH6", "NH7"] and len(rows) == 1 + len(IG_CONCEPTS)
    nan_cells, scale_ok = set(), True
    for row in rows[1:]:
        cells = row.split(",")
        for g, v in zip(groups, cells[1:9]):
            if v == "NaN":
                nan_cells.add((cells[0], g))
            else:
                scale_ok &= 0.0 <= float(v) <= 100.0
        scale_ok &= all(m in ("", report.MARK_YES, report.MARK_NO) for m in cells[9:])
    nan_ok = nan_cells == set(empty)

    files = ("results.json", "tables/auc.csv", "tables/counts.csv", "tables/hypotheses.csv")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    same &= outs[0].replace(str(tmp_path / "a"), "") == outs[1].replace(str(tmp_path / "b"), "")
    ok = alpha_ok and shape_ok and nan_ok and scale_ok and same
    assert verdict(7, "report shape", ok,
                   f"(alpha 0.00625={alpha_ok}, columns={shape_ok}, NaN cells={sorted(nan_cells)}, "
                   f"byte-identical={same})")


# 8 ---------------------------------------------------------------------------

INGEST = textwrap.dedent("""
    import sys, time
    from mlaudit.trace_core import TraceCounters, iter_trace
    t = time.perf_counter()
    c = TraceCounters()
    n = 0
    with open(sys.argv[1], encoding="utf-8") as fh:
        for rec in iter_trace(fh, c):
            rec.decoded_args()
            rec.decoded_return()
            n += 1
    print(n, c.rejected, time.perf_counter() - t)
""")


def test_ingest_throughput(verdict, tmp_path):
    path = tmp_path / "big.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for line in noise_lines(1_000_000, seed=0):
            fh.write(line + "\n")
    before = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss
    proc = subprocess.run([sys.executable, "-c", INGEST, str(path)], capture_output=True, text=True, check=True)
    peak_mb = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 1024
    n, rejected, dt = proc.stdout.split()
    n, rejected, dt = int(n), int(rejected), float(dt)
    # ru_maxrss is the max over all waited children; a larger earlier child would mask this one
    assert before / 1024 < 2048
    ok = n == 1_000_000 and rejected == 0 and dt < 30 and peak_mb < 2048
    assert verdict(8, "ingest throughput", ok, f"({n} records in {dt:.1f}s, peak {peak_mb:.0f} MB)")
