"""Report files for the assess and mine commands.

``results.json`` keeps full precision; ``tables/*.csv`` are rounded for
reading. NaN is written as the string "NaN" in both.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from ..stats_engine import mine_spurious
from .dataset import ScoreDataset, filter_single_face
from .suite import Suite, auc_table, group_order, median_in_bin, run_suite

MARK_YES = "✓"
MARK_NO = "✗"


def jsonable(x):
    if isinstance(x, float):
        return "NaN" if math.isnan(x) else x
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    return x


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(jsonable(obj), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def fmt_round(x: float | None, digits: int) -> str:
    if x is None:
        return ""
    if math.isnan(x):
        return "NaN"
    return repr(round(x, digits))


def fmt_sig(x: float | None, sig: int = 6) -> str:
    if x is None:
        return ""
    if math.isnan(x):
        return "NaN"
    return format(x, f".{sig}g")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def assess(ds: ScoreDataset, suite: Suite, out_dir, seed: int = 0) -> dict:
    """Run a suite and write results.json plus tables/*.csv; returns the results document."""
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    doc: dict = {"suite": suite.name, "seed": seed}

    if suite.single_face:
        kept, discarded = filter_single_face(ds.rows)
        doc["single_face_filter"] = {"input": len(ds.rows), "kept": len(kept),
                                     "discarded_zero": discarded["zero"],
                                     "discarded_multi": discarded["multi"]}
        ds = ds.with_rows(kept)
    doc["dataset"] = {"samples": len(ds.samples), "score_cells": ds.n_cells, "orphans": ds.orphans}

    results, skipped = run_suite(ds, suite, seed)
    doc["hypotheses"] = [r.to_dict() for r in results]
    doc["skipped"] = [{"hypothesis": s.spec_id, "stratum": s.stratum, "reason": s.reason}
                      for s in skipped]
    _write_csv(out / "tables" / "hypotheses.csv",
               ["hypothesis", "stratum", "groups", "n", "h", "df", "p", "alpha_corrected",
                "reject", "power"],
               [[r.spec_id, r.stratum, "|".join(r.groups), r.result.n, fmt_sig(r.result.h_statistic),
                 r.result.degrees_freedom, fmt_sig(r.result.p_value),
                 fmt_sig(r.result.alpha_corrected), str(r.result.reject).lower(),
                 fmt_sig(r.result.power, 3)] for r in results])

    if suite.auc_concepts:
        groups = group_order("demographic", {s.demographic for s in ds.samples.values()})
        rows = auc_table(ds, suite.auc_concepts, groups, "demographic", results, suite.auc_marks)
        doc["auc_table"] = [
            {"concept": row.concept,
             "cells": [{"group": c.group, "auc": c.auc, "n_pos": c.n_pos, "n_neg": c.n_neg}
                       for c in row.cells],
             "marks": row.marks} for row in rows]
        _write_csv(out / "tables" / "auc.csv", ["concept", *groups, *suite.auc_marks],
                   [[row.concept, *(fmt_round(c.scaled, 2) for c in row.cells),
                     *("" if row.marks[m] is None else (MARK_YES if row.marks[m] else MARK_NO)
                       for m in suite.auc_marks)] for row in rows])
        counts = ds.annotation_counts(suite.auc_concepts)
        count_rows = []
        for c in suite.auc_concepts:
            per = [sum(counts.get((c, g), (0, 0))) for g in groups]
            count_rows.append([c, *per, sum(per)])
        totals = [sum(r[i + 1] for r in count_rows) for i in range(len(groups) + 1)]
        _write_csv(out / "tables" / "counts.csv", ["concept", *groups, "Sum"],
                   count_rows + [["Total", *totals]])
        doc["annotation_counts"] = {f"{c}|{g}": list(v) for (c, g), v in sorted(counts.items())}

    if suite.median_in_bin:
        bins = median_in_bin(ds)
        doc["median_in_bin"] = [b.to_dict() for b in bins]
        _write_csv(out / "tables" / "median_in_bin.csv",
                   ["age_bin", "n", "median", "q1", "q3", "iqr", "fraction_inside", "median_inside"],
                   [[b.age_bin, b.n, fmt_round(b.median, 2), fmt_round(b.q1, 2), fmt_round(b.q3, 2),
                     fmt_round(b.iqr, 2), fmt_round(b.fraction_inside, 4), str(b.median_inside).lower()]
                    for b in bins])

    dump_json(doc, out / "results.json")
    return doc


def concept_table(ds: ScoreDataset, group_field: str = "demographic", concepts=None) -> dict:
    """concept -> group -> scores, over every scored sample."""
    wanted = set(concepts) if concepts is not None else None
    table: dict[str, dict[str, list[float]]] = {}
    for sid in ds.sample_ids():
        g = ds.group_of(ds.samples[sid], group_field)
        for c, v in ds.scores.get(sid, {}).items():
            if wanted is None or c in wanted:
                table.setdefault(c, {}).setdefault(g, []).append(v)
    order = ds.concepts()
    return {c: table[c] for c in order if c in table}


def mine(ds: ScoreDataset, out_dir, threshold: float = 0.15, alpha: float = 0.05,
         family_size: int | None = None, exclude=()) -> list:
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    table = concept_table(ds)
    for c in exclude:
        table.pop(c, None)
    findings = mine_spurious(table, threshold, alpha, family_size)
    dump_json({"threshold": threshold, "alpha": alpha,
               "findings": [f.to_dict() for f in findings]}, out / "spurious.json")
    _write_csv(out / "tables" / "spurious.csv",
               ["top_group", "concept", "top_mean", "p", "alpha_corrected", "reject"],
               [[f.top_group, f.concept, fmt_sig(f.top_mean, 4), fmt_sig(f.p_value),
                 fmt_sig(f.alpha_corrected), str(f.reject).lower()] for f in findings])
    by_group: dict[str, list[str]] = {}
    for f in findings:
        if f.reject:
            by_group.setdefault(f.top_group, []).append(f.concept)
    _write_csv(out / "tables" / "spurious_by_group.csv", ["demographic_group", "concepts"],
               [[g, "; ".join(cs)] for g, cs in sorted(by_group.items())])
    return findings
