import json
import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlaudit.audit import report
from mlaudit.audit.dataset import (ConceptCatalog, JoinError, MissingField, SchemaError, ScoreDataset,
                                   ScoreRow, SampleRow, age_bin_range, filter_single_face, in_age_bin,
                                   load_dataset, parse_annotations, read_samples, top_k)
from mlaudit.audit.scorer import (ScorerAdapter, ScorerParseError, parse_scorer_output, run_scorer,
                                  write_scores_csv)
from mlaudit.audit.suite import (HypothesisSpec, SpecError, Suite, auc_table, bin_width, group_order,
                                 median_in_bin, run_hypothesis, run_suite)
from mlaudit.stats_engine import kruskal_wallis, roc_auc
from mlaudit.trace_synth import AGE_BINS, DisparityPlan, generate_scores, group_label

SAMPLES = """sample_id,sex,ethnicity,age_bin,variant,annotations
a,Male,Asian,20-29,,beard:pos;hair:neg
b,Female,Black,0-2,grey_background,
c,Female,White,70-100,,beard:neg
"""
SCORES = """sample_id,concept,score,face_count,predicted_age,predicted_sex_score
a,beard,0.9,1,25.5,0.8
a,hair,0.1,1,25.5,0.8
b,beard,0.2,0,,
b,hair,0.3,0,,
c,beard,0.4,2,100,0.1
c,hair,0.5,2,100,0.1
"""


def test_load_small_dataset():
    ds = load_dataset(SAMPLES, SCORES)
    assert ds.n_cells == 6 and ds.orphans == 0
    assert ds.samples["a"].annotations == {"beard": "pos", "hair": "neg"}
    assert ds.samples["a"].demographic == "AM"
    assert ds.samples["b"].variant == "grey_background"
    assert ds.scores["c"]["hair"] == 0.5
    assert ds.extras["a"].predicted_age == 25.5


def test_orphans_counted_and_excluded():
    ds = load_dataset(SAMPLES, SCORES + "zz,beard,0.5,,,\n")
    assert ds.orphans == 1 and "zz" not in ds.scores
    with pytest.raises(JoinError):
        load_dataset(SAMPLES, SCORES + "zz,beard,0.5,,,\n", max_orphan_ratio=0.1)


@pytest.mark.parametrize("samples,scores", [
    ("sample_id,sex,ethnicity\na,Male,Asian\n", SCORES),
    (SAMPLES, "sample_id,concept\na,beard\n"),
    (SAMPLES.replace("Male,Asian", "M,Asian"), SCORES),
    (SAMPLES.replace("20-29", "20-30"), SCORES),
    (SAMPLES, SCORES.replace("0.9", "1.5")),
    (SAMPLES, SCORES.replace("a,hair,0.1", "a,beard,0.1")),
    (SAMPLES + "a,Male,Asian,3-9,,\n", SCORES),
    (SAMPLES.replace("beard:pos", "beard:maybe"), SCORES),
])
def test_schema_errors(samples, scores):
    with pytest.raises(SchemaError):
        load_dataset(samples, scores)


def test_catalog():
    cat = ConceptCatalog.default()
    assert len(cat) == len(set(cat))
    assert "great_wall_of_china" in cat and "beard" in cat
    with pytest.raises(SchemaError):
        ConceptCatalog(["a", "b", "a"])
    with pytest.raises(SchemaError):
        load_dataset(SAMPLES, SCORES.replace("hair", "not_a_concept"), catalog=cat)


def test_group_annotation_counts():
    concepts = ("beard", "hair", "jewelry")
    groups = [group_label(e, s) for e in ("Asian", "Black", "Indian", "White") for s in ("Male", "Female")]
    ann = {(c, g): (3 + i, 5 + j) for i, c in enumerate(concepts) for j, g in enumerate(groups)}
    plan = DisparityPlan(concepts=concepts, n_per_group=20, annotations=ann, seed=1)
    samples, scores, truth = generate_scores(plan)
    ds = load_dataset(samples, scores)
    assert ds.annotation_counts() == ann
    assert truth["annotation_counts"] == {f"{c}|{g}": list(v) for (c, g), v in sorted(ann.items())}


def test_filter_single_face():
    rows = [ScoreRow(str(i), "x", 0.1, fc) for i, fc in enumerate([0, 1, 2, 1])]
    kept, dropped = filter_single_face(rows)
    assert [r.sample_id for r in kept] == ["1", "3"]
    assert dropped == {"zero": 1, "multi": 1}
    ones = [ScoreRow(str(i), "x", 0.1, 1) for i in range(4)]
    assert filter_single_face(ones)[0] == ones
    with pytest.raises(MissingField):
        filter_single_face([ScoreRow("a", "x", 0.1)])


@given(st.lists(st.integers(0, 4), max_size=40))
def test_filter_accounting(counts):
    rows = [ScoreRow(str(i), "x", 0.5, c) for i, c in enumerate(counts)]
    kept, dropped = filter_single_face(rows)
    assert len(kept) + sum(dropped.values()) == len(rows)
    assert all(r.face_count == 1 for r in kept)


def test_planted_single_face_count():
    plan = DisparityPlan(n_per_group=200, sex_scores=True, face_count_probs=(0.3, 0.4, 0.3), seed=9)
    samples, scores, truth = generate_scores(plan)
    ds = load_dataset(samples, scores)
    kept, dropped = filter_single_face(ds.rows)
    assert len(kept) == truth["face_count"]["single"]
    assert dropped["zero"] == truth["face_count"]["zero"]


def test_top_k():
    cat = ConceptCatalog([f"c{i}" for i in range(512)])
    scores = {f"c{i}": i / 512 for i in range(512)}
    assert top_k(scores, catalog=cat) == [f"c{i}" for i in range(511, 501, -1)]
    scores["c7"] = 2.0
    assert top_k(scores, 1, cat) == ["c7"]
    small = {"b": 0.5, "a": 0.5, "c": 0.9}
    assert top_k(small, 10, ConceptCatalog(["b", "a", "c"])) == ["c", "b", "a"]
    with pytest.raises(ValueError):
        top_k(small, 0)


def test_age_bins():
    assert age_bin_range("0-2") == (0.0, 3.0, False)
    assert age_bin_range("70-100") == (70.0, 100.0, True)
    assert in_age_bin(100.0, "70-100") and not in_age_bin(3.0, "0-2") and in_age_bin(2.9, "0-2")
    assert group_order("age_bin", set(AGE_BINS)) == list(AGE_BINS)


def _age_dataset(preds):
    samples = {str(i): SampleRow(str(i), "Male", "Asian", b) for i, (b, _) in enumerate(preds)}
    rows = [ScoreRow(str(i), "boy_prob", 0.5, 1, a, 0.5) for i, (_, a) in enumerate(preds)]
    return ScoreDataset(samples, rows)


def test_median_in_bin_examples():
    ds = _age_dataset([("0-2", 12), ("0-2", 13), ("0-2", 14), ("30-39", 35), ("30-39", 35)])
    rep = {b.age_bin: b for b in median_in_bin(ds)}
    assert rep["0-2"].median == 13 and not rep["0-2"].median_inside
    assert rep["30-39"].median == 35 and rep["30-39"].fraction_inside == 1.0 and rep["30-39"].median_inside
    with pytest.raises(MissingField):
        median_in_bin(ScoreDataset({"a": SampleRow("a", "Male", "Asian", "0-2")}, [ScoreRow("a", "x", 0.1)]))


def test_median_in_bin_uniform():
    rng = np.random.default_rng(0)
    ages = rng.uniform(0, 100, 20000)
    ds = _age_dataset([("30-39", a) for a in ages])
    (rep,) = median_in_bin(ds)
    assert rep.fraction_inside == pytest.approx(bin_width("30-39") / 100, abs=0.01)


def _null_tiktok(seed=0, **kw):
    plan = DisparityPlan(n_per_group=60, sex_scores=True, seed=seed, **kw)
    return load_dataset(*generate_scores(plan)[:2])


def test_nh1_identical_bins_never_reject():
    # every age bin gets the exact same multiset of scores
    samples, rows = {}, []
    vals = [0.1, 0.4, 0.4, 0.9]
    for b in AGE_BINS:
        for sex in ("Male", "Female"):
            for j, v in enumerate(vals):
                sid = f"{b}-{sex}-{j}"
                samples[sid] = SampleRow(sid, sex, "Asian", b)
                rows.append(ScoreRow(sid, "boy_prob", v, 1, 30.0, v))
    ds = ScoreDataset(samples, rows)
    spec = HypothesisSpec("NH1", "predicted_sex_score", "age_bin", "sex")
    results, skipped = run_hypothesis(ds, spec)
    assert len(results) == 2 and not skipped
    assert all(r.result.p_value == 1.0 and not r.result.reject for r in results)


def test_nh4_null_old_strata():
    bias = {b: 8.0 for b in AGE_BINS[:7]}
    ds = _null_tiktok(seed=3, age_bias=bias)
    spec = HypothesisSpec("NH4", "predicted_age", "ethnicity", "age_bin")
    results, _ = run_hypothesis(ds, spec)
    by = {r.stratum: r.result for r in results}
    # ethnicity has no effect anywhere in this fixture; the old bins must not reject
    assert not by["60-69"].reject and not by["70-100"].reject


def test_nh7_alpha():
    concepts = ("beard",)
    groups = [group_label(e, s) for e in ("Asian", "Black", "Indian", "White") for s in ("Male", "Female")]
    plan = DisparityPlan(concepts=concepts, n_per_group=30, seed=2,
                         annotations={("beard", g): (10, 10) for g in groups})
    ds = load_dataset(*generate_scores(plan)[:2])
    (spec,) = HypothesisSpec.from_dict({"id": "NH7", "value_field": "concept:beard",
                                        "group_field": "demographic"})
    results, _ = run_hypothesis(ds, spec)
    assert [r.result.alpha_corrected for r in results] == [0.00625]
    assert results[0].groups == ["AM", "AF", "BM", "BF", "IM", "IF", "WM", "WF"]


def test_family_size_modes():
    ds = _null_tiktok()
    base = {"id": "X", "value_field": "predicted_sex_score", "group_field": "ethnicity", "stratify_by": "sex"}
    (auto,) = HypothesisSpec.from_dict(base)
    (fixed,) = HypothesisSpec.from_dict(dict(base, family_size=10))
    (suite,) = HypothesisSpec.from_dict(dict(base, family_size="suite"))
    assert {r.result.alpha_corrected for r in run_hypothesis(ds, auto)[0]} == {0.05 / 4}
    assert {r.result.alpha_corrected for r in run_hypothesis(ds, fixed)[0]} == {0.005}
    assert {r.result.alpha_corrected for r in run_hypothesis(ds, suite, suite_size=6)[0]} == {0.05 / 6}


def test_sex_accuracy_mode():
    ds = load_dataset(SAMPLES, SCORES)
    spec = HypothesisSpec("acc", "sex_accuracy", "sex")
    from mlaudit.audit.suite import _value
    assert _value(ds, spec, "a") == 1.0   # Male predicted 0.8
    assert _value(ds, spec, "c") == 1.0   # Female predicted 0.1
    assert _value(ds, spec, "b") is None


def test_spec_errors():
    with pytest.raises(SpecError):
        HypothesisSpec("x", "height", "sex")
    with pytest.raises(SpecError):
        HypothesisSpec("x", "predicted_age", "planet")
    with pytest.raises(SpecError):
        HypothesisSpec("x", "predicted_age", "sex", family_size="some")
    with pytest.raises(SpecError):
        HypothesisSpec.from_dict({"id": "x", "value_field": "concept:*", "group_field": "sex"})
    with pytest.raises(MissingField):
        no_age = SCORES.replace("25.5", "").replace(",100,", ",,")
        run_hypothesis(load_dataset(SAMPLES, no_age), HypothesisSpec("x", "predicted_age", "sex"))


def test_bundled_suites_load():
    for name in ("nh1", "nh2", "nh3", "nh4", "nh5", "nh6", "nh7", "tiktok", "instagram"):
        s = Suite.load(name)
        assert s.name
    ig = Suite.load("instagram")
    assert ig.auc_marks == ["NH5", "NH6", "NH7"]
    assert "NH7[beard]" in [h.id for h in ig.hypotheses]
    assert Suite.load("tiktok").single_face


def _auc_fixture(seed=0):
    concepts = ("beard", "hair")
    groups = [group_label(e, s) for e in ("Asian", "Black", "Indian", "White") for s in ("Male", "Female")]
    ann = {(c, g): (5, 5) for c in concepts for g in groups}
    ann[("beard", "AF")] = (0, 6)
    ann[("hair", "WM")] = (4, 0)
    plan = DisparityPlan(concepts=concepts, n_per_group=15, annotations=ann, seed=seed)
    return load_dataset(*generate_scores(plan)[:2]), groups


def test_auc_table_nan_cells_and_oracle():
    ds, groups = _auc_fixture()
    rows = auc_table(ds, ["beard", "hair"], groups)
    for row in rows:
        for cell in row.cells:
            empty = (row.concept, cell.group) in {("beard", "AF"), ("hair", "WM")}
            assert math.isnan(cell.auc) == empty
            if not empty:
                pos = [ds.scores[s][row.concept] for s, smp in ds.samples.items()
                       if smp.demographic == cell.group and smp.annotations.get(row.concept) == "pos"]
                neg = [ds.scores[s][row.concept] for s, smp in ds.samples.items()
                       if smp.demographic == cell.group and smp.annotations.get(row.concept) == "neg"]
                pairs = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))
                assert abs(cell.scaled - 100 * pairs) <= 0.005


def test_auc_perfect_separation():
    samples, rows = {}, []
    for i in range(10):
        sid = f"s{i}"
        samples[sid] = SampleRow(sid, "Male", "Asian", "20-29", annotations={"beard": "pos" if i < 5 else "neg"})
        rows.append(ScoreRow(sid, "beard", 0.9 if i < 5 else 0.1))
    (row,) = auc_table(ScoreDataset(samples, rows), ["beard"])
    assert [c.scaled for c in row.cells] == [100.0]


def test_auc_table_row_order_invariant():
    ds, groups = _auc_fixture(1)
    shuffled = ScoreDataset(dict(reversed(list(ds.samples.items()))), list(reversed(ds.rows)))
    a = auc_table(ds, ["beard", "hair"], groups)
    b = auc_table(shuffled, ["beard", "hair"], groups)
    flat = lambda t: [c.scaled for r in t for c in r.cells]
    assert flat(a) == pytest.approx(flat(b), nan_ok=True)


def test_assess_writes_reports(tmp_path):
    ds, _ = _auc_fixture(2)
    suite = Suite.load("instagram")
    suite = Suite(suite.name, [h for h in suite.hypotheses if h.concept in ("beard", "hair")],
                  ["beard", "hair"], suite.auc_marks)
    doc = report.assess(ds, suite, tmp_path / "a", seed=1)
    report.assess(ds, suite, tmp_path / "b", seed=1)
    for f in ("results.json", "tables/auc.csv", "tables/counts.csv", "tables/hypotheses.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    auc = (tmp_path / "a" / "tables" / "auc.csv").read_text().splitlines()
    assert auc[0] == "concept,AM,AF,BM,BF,IM,IF,WM,WF,NH5,NH6,NH7"
    assert auc[1].split(",")[2] == "NaN"
    assert json.loads((tmp_path / "a" / "results.json").read_text())["auc_table"][0]["cells"][1]["auc"] == "NaN"
    counts = (tmp_path / "a" / "tables" / "counts.csv").read_text().splitlines()
    assert counts[-1].startswith("Total,")
    assert doc["hypotheses"]


def test_assess_single_face_and_median(tmp_path):
    plan = DisparityPlan(n_per_group=40, sex_scores=True, face_count_probs=(0.1, 0.8, 0.1), seed=4)
    ds = load_dataset(*generate_scores(plan)[:2])
    suite = Suite.from_dict({"name": "t", "single_face": True, "median_in_bin": True, "hypotheses": [
        {"id": "NH1", "value_field": "predicted_sex_score", "group_field": "age_bin", "stratify_by": "sex",
         "power_n_per_group": 20, "power_sims": 20}]})
    doc = report.assess(ds, suite, tmp_path, seed=0)
    f = doc["single_face_filter"]
    assert f["kept"] + f["discarded_zero"] + f["discarded_multi"] == f["input"]
    assert all(h["power"] is not None for h in doc["hypotheses"])
    assert (tmp_path / "tables" / "median_in_bin.csv").exists()


def test_mine_report(tmp_path):
    concepts = tuple(f"k{i}" for i in range(6))
    plan = DisparityPlan(concepts=concepts, n_per_group=80, shifts={("k3", "BF"): 0.3}, seed=5)
    ds = load_dataset(*generate_scores(plan)[:2])
    findings = report.mine(ds, tmp_path)
    assert [(f.concept, f.top_group) for f in findings if f.reject] == [("k3", "BF")]
    by_group = (tmp_path / "tables" / "spurious_by_group.csv").read_text().splitlines()
    assert by_group == ["demographic_group,concepts", "BF,k3"]


def test_jsonable_nan():
    assert report.jsonable({"a": [math.nan, 1.0]}) == {"a": ["NaN", 1.0]}
    assert report.fmt_round(math.nan, 2) == "NaN"
    assert report.fmt_round(0.125, 2) == "0.12"    # half-to-even


def test_parse_annotations():
    assert parse_annotations("a:pos; b:neg") == {"a": "pos", "b": "neg"}
    assert parse_annotations("") == {}
    with pytest.raises(SchemaError):
        parse_annotations("a")


def _stub(tmp_path, body):
    script = tmp_path / "scorer.py"
    script.write_text(body)
    return f"{sys.executable} {script} {{sample_id}}"


def test_scorer_stub(tmp_path):
    cat = ConceptCatalog(["beard", "hair"])
    cmd = _stub(tmp_path, "import sys\nprint('beard\\t0.25')\nprint('hair\\t0.75')\n")
    samples = read_samples(SAMPLES).values()
    rows, failures = run_scorer(ScorerAdapter("internal", command=cmd), samples, cat)
    assert len(rows) == 3 * len(cat) and failures == []
    assert [r.sample_id for r in rows] == ["a", "a", "b", "b", "c", "c"]


def test_scorer_failure_recorded(tmp_path):
    cmd = _stub(tmp_path, "import sys\nif sys.argv[1] == 'b': sys.exit(4)\nprint('beard\\t0.5')\n")
    rows, failures = run_scorer(ScorerAdapter("internal", command=cmd, concurrency=2), read_samples(SAMPLES).values())
    assert {r.sample_id for r in rows} == {"a", "c"}
    assert [(f.sample_id, f.error) for f in failures] == [("b", "ScorerExit")]


def test_scorer_timeout(tmp_path):
    cmd = _stub(tmp_path, "import time\ntime.sleep(5)\n")
    one = [read_samples(SAMPLES)["a"]]
    _, failures = run_scorer(ScorerAdapter("internal", command=cmd, timeout=0.2), one)
    assert failures[0].error == "ScorerTimeout"


def test_scorer_linear_rule_end_to_end(tmp_path):
    # score = 0.1 * (sample index); KW on the harness output equals KW on the rule
    plan = DisparityPlan(n_per_group=5, seed=0)
    samples_csv, _, _ = generate_scores(plan)
    samples = read_samples(samples_csv)
    cmd = _stub(tmp_path, "import sys\nprint('x\\t%r' % (int(sys.argv[1][1:]) / 100))\n")
    rows, failures = run_scorer(ScorerAdapter("internal", command=cmd), samples.values())
    assert not failures
    path = tmp_path / "scores.csv"
    write_scores_csv(rows, path)
    ds = load_dataset(samples_csv, path)
    spec = HypothesisSpec("L", "concept:x", "ethnicity", subset="all")
    (res,), _ = run_hypothesis(ds, spec)
    direct = {}
    for sid, s in samples.items():
        direct.setdefault(s.ethnicity, []).append(int(sid[1:]) / 100)
    ref = kruskal_wallis([direct[e] for e in sorted(direct)])
    assert res.result.h_statistic == ref.h_statistic and res.result.p_value == ref.p_value


def test_scorer_output_parsing():
    cat = ConceptCatalog(["a", "b"])
    assert len(parse_scorer_output("a\t0.1\nb\t0.2\n", "s", cat)) == 2
    for bad in ("a 0.1\n", "a\tx\n", "a\t1.2\n", "a\t0.1\na\t0.2\n", "a\t0.1\n", "z\t0.1\nb\t0.1\n"):
        with pytest.raises(ScorerParseError):
            parse_scorer_output(bad, "s", cat)


def test_external_adapter(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(SCORES)
    rows, failures = run_scorer(ScorerAdapter("external", scores_path=str(p)), read_samples(SAMPLES).values())
    assert len(rows) == 6 and not failures


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16))
def test_suite_determinism(seed):
    ds = _null_tiktok(seed % 7)
    suite = Suite.from_dict({"name": "d", "hypotheses": [
        {"id": "NH2", "value_field": "predicted_sex_score", "group_field": "ethnicity", "stratify_by": "sex",
         "power_n_per_group": 10, "power_sims": 5}]})
    a = [r.to_dict() for r in run_suite(ds, suite, seed)[0]]
    b = [r.to_dict() for r in run_suite(ds, suite, seed)[0]]
    assert a == b


def test_identical_multisets_never_reject():
    samples, rows = {}, []
    for eth in ("Asian", "Black", "White"):
        for j, v in enumerate([0.2, 0.2, 0.5, 0.7, 0.9]):
            sid = f"{eth}{j}"
            samples[sid] = SampleRow(sid, "Male", eth, "20-29")
            rows.append(ScoreRow(sid, "q", v, 1, 25.0, v))
    (res,), _ = run_hypothesis(ScoreDataset(samples, rows), HypothesisSpec("x", "predicted_sex_score", "ethnicity"))
    assert not res.result.reject and res.result.p_value == 1.0


def test_roc_consistency_with_table():
    assert roc_auc([0.8], [0.2]) == 1.0
