"""Hypothesis specs, stratified Kruskal-Wallis runs, age-bin medians and AUC tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ..stats_engine import (AucCell, DegenerateInput, TestResult, auc_cell, bonferroni,
                            estimate_power, kruskal_wallis)
from ..trace_synth import AGE_BINS
from .dataset import MissingField, ScoreDataset, SEXES, age_bin_range, in_age_bin

VALUE_FIELDS = ("predicted_sex_score", "sex_accuracy", "predicted_age")
GROUP_FIELDS = ("sex", "ethnicity", "age_bin", "demographic")
SUBSETS = ("annotated", "all", "pos", "neg")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class HypothesisSpec:
    id: str
    value_field: str            # one of VALUE_FIELDS or "concept:<name>"
    group_field: str
    stratify_by: str | None = None
    alpha: float = 0.05
    family_size: object = "auto"    # int, "auto" (groups per test) or "suite" (tests per run)
    subset: str = "annotated"       # which samples count for concept scores
    power_n_per_group: int | None = None
    power_sims: int = 1000
    sex_threshold: float = 0.5

    def __post_init__(self):
        if self.group_field not in GROUP_FIELDS:
            raise SpecError(f"{self.id}: unknown group_field {self.group_field!r}")
        if self.stratify_by is not None and self.stratify_by not in GROUP_FIELDS:
            raise SpecError(f"{self.id}: unknown stratify_by {self.stratify_by!r}")
        if self.value_field not in VALUE_FIELDS and not self.value_field.startswith("concept:"):
            raise SpecError(f"{self.id}: unknown value_field {self.value_field!r}")
        if not (isinstance(self.family_size, int) and self.family_size >= 1) \
                and self.family_size not in ("auto", "suite"):
            raise SpecError(f"{self.id}: bad family_size {self.family_size!r}")
        if self.subset not in SUBSETS:
            raise SpecError(f"{self.id}: bad subset {self.subset!r}")
        if not 0.0 < self.alpha < 1.0:
            raise SpecError(f"{self.id}: alpha must lie in (0, 1)")

    @property
    def concept(self) -> str | None:
        return self.value_field.split(":", 1)[1] if self.value_field.startswith("concept:") else None

    @property
    def base_id(self) -> str:
        return self.id.split("[", 1)[0]

    @classmethod
    def from_dict(cls, d: dict) -> list["HypothesisSpec"]:
        """One spec, or one per concept when ``value_field`` is ``concept:*``."""
        d = dict(d)
        concepts = d.pop("concepts", None)
        try:
            if d.get("value_field") == "concept:*":
                if not concepts:
                    raise SpecError(f"{d.get('id')}: concept:* needs a concepts list")
                return [cls(**dict(d, id=f"{d['id']}[{c}]", value_field=f"concept:{c}")) for c in concepts]
            return [cls(**d)]
        except TypeError as e:
            raise SpecError(str(e)) from None


@dataclass
class Suite:
    name: str
    hypotheses: list[HypothesisSpec]
    auc_concepts: list[str] = field(default_factory=list)
    auc_marks: list[str] = field(default_factory=list)
    median_in_bin: bool = False
    single_face: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "Suite":
        specs = []
        for h in d.get("hypotheses", []):
            specs += HypothesisSpec.from_dict(h)
        auc = d.get("auc_table") or {}
        return cls(d.get("name", "suite"), specs, list(auc.get("concepts", [])),
                   list(auc.get("marks", [])), bool(d.get("median_in_bin", False)),
                   bool(d.get("single_face", False)))

    @classmethod
    def load(cls, path) -> "Suite":
        p = Path(path)
        if not p.exists():
            bundled = resources.files("mlaudit.data").joinpath("suites", f"{path}.json")
            if bundled.is_file():
                return cls.from_dict(json.loads(bundled.read_text("utf-8")))
        with open(p, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class HypothesisResult:
    spec_id: str
    stratum: str
    groups: list[str]
    sizes: list[int]
    result: TestResult

    def to_dict(self) -> dict:
        return {"hypothesis": self.spec_id, "stratum": self.stratum, "groups": self.groups,
                "sizes": self.sizes, **self.result.to_dict()}


@dataclass
class Skipped:
    spec_id: str
    stratum: str
    reason: str


def group_order(field_name: str, labels) -> list[str]:
    labels = set(labels)
    if field_name == "sex":
        return [s for s in SEXES if s in labels]
    if field_name == "age_bin":
        return [b for b in AGE_BINS if b in labels]
    if field_name == "demographic":
        # ethnicity initials then sex, Male first
        return sorted(labels, key=lambda g: (g[:-1], 0 if g[-1] == "M" else 1))
    return sorted(labels)


def _value(ds: ScoreDataset, spec: HypothesisSpec, sid: str) -> float | None:
    c = spec.concept
    if c is not None:
        sample = ds.samples[sid]
        lab = sample.annotations.get(c)
        if spec.subset == "annotated" and lab is None:
            return None
        if spec.subset in ("pos", "neg") and lab != spec.subset:
            return None
        return ds.scores.get(sid, {}).get(c)
    extra = ds.extras.get(sid)
    if extra is None:
        return None
    if spec.value_field == "predicted_age":
        return extra.predicted_age
    s = extra.predicted_sex_score
    if spec.value_field == "predicted_sex_score" or s is None:
        return s
    predicted_male = s >= spec.sex_threshold
    return 1.0 if predicted_male == (ds.samples[sid].sex == "Male") else 0.0


def _partition(ds: ScoreDataset, spec: HypothesisSpec) -> dict[str, dict[str, list[float]]]:
    """stratum -> group -> values."""
    if spec.concept is None and not any(_value(ds, spec, s) is not None for s in ds.samples):
        raise MissingField(f"{spec.id}: no sample carries {spec.value_field}")
    out: dict[str, dict[str, list[float]]] = {}
    for sid in ds.sample_ids():
        v = _value(ds, spec, sid)
        if v is None:
            continue
        s = ds.samples[sid]
        stratum = ds.group_of(s, spec.stratify_by) if spec.stratify_by else "all"
        out.setdefault(stratum, {}).setdefault(ds.group_of(s, spec.group_field), []).append(v)
    return out


def plan_tests(ds: ScoreDataset, spec: HypothesisSpec):
    """(stratum, ordered groups, value lists) units plus skipped strata."""
    parts = _partition(ds, spec)
    strata = group_order(spec.stratify_by, parts) if spec.stratify_by else sorted(parts)
    units, skipped = [], []
    for st in strata:
        groups = {g: v for g, v in parts[st].items() if v}
        if len(groups) < 2:
            skipped.append(Skipped(spec.id, st, "fewer than two non-empty groups"))
            continue
        if sum(len(v) for v in groups.values()) < 3:
            skipped.append(Skipped(spec.id, st, "fewer than three observations"))
            continue
        order = group_order(spec.group_field, groups)
        units.append((st, order, [groups[g] for g in order]))
    return units, skipped


def run_hypothesis(ds: ScoreDataset, spec: HypothesisSpec, suite_size: int | None = None,
                   seed: int = 0) -> tuple[list[HypothesisResult], list[Skipped]]:
    units, skipped = plan_tests(ds, spec)
    results = []
    for i, (stratum, order, values) in enumerate(units):
        if spec.family_size == "auto":
            m = len(order)
        elif spec.family_size == "suite":
            m = suite_size or len(units)
        else:
            m = int(spec.family_size)
        a = bonferroni(spec.alpha, m)
        try:
            r = kruskal_wallis(values, alpha_corrected=a)
        except DegenerateInput as e:
            skipped.append(Skipped(spec.id, stratum, str(e)))
            continue
        if spec.power_n_per_group:
            power = estimate_power(values, spec.power_n_per_group, spec.power_sims, a, seed + i)
            r = replace(r, power=power)
        results.append(HypothesisResult(spec.id, stratum, order, [len(v) for v in values], r))
    return results, skipped


def run_suite(ds: ScoreDataset, suite: Suite, seed: int = 0):
    suite_size = sum(len(plan_tests(ds, s)[0]) for s in suite.hypotheses)
    results, skipped = [], []
    for k, spec in enumerate(suite.hypotheses):
        r, s = run_hypothesis(ds, spec, suite_size, seed + 1000 * k)
        results += r
        skipped += s
    return results, skipped


@dataclass
class BinReport:
    age_bin: str
    n: int
    median: float
    q1: float
    q3: float
    fraction_inside: float
    median_inside: bool

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def to_dict(self) -> dict:
        return {"age_bin": self.age_bin, "n": self.n, "median": self.median, "q1": self.q1,
                "q3": self.q3, "iqr": self.iqr, "fraction_inside": self.fraction_inside,
                "median_inside": self.median_inside}


def median_in_bin(ds: ScoreDataset) -> list[BinReport]:
    per: dict[str, list[float]] = {}
    for sid in ds.sample_ids():
        extra = ds.extras.get(sid)
        if extra is None or extra.predicted_age is None:
            continue
        per.setdefault(ds.samples[sid].age_bin, []).append(extra.predicted_age)
    if not per:
        raise MissingField("predicted_age is absent from every sample")
    out = []
    for b in group_order("age_bin", per):
        v = np.asarray(per[b])
        med = float(np.median(v))
        q1, q3 = (float(x) for x in np.percentile(v, [25, 75]))
        inside = float(np.mean([in_age_bin(x, b) for x in v]))
        out.append(BinReport(b, v.size, med, q1, q3, inside, in_age_bin(med, b)))
    return out


def bin_width(label: str) -> float:
    lo, hi, _ = age_bin_range(label)
    return hi - lo


@dataclass
class AucRow:
    concept: str
    cells: list[AucCell]
    marks: dict[str, bool | None]


def auc_table(ds: ScoreDataset, concepts, groups=None, group_field: str = "demographic",
              results: list[HypothesisResult] = (), marks=()) -> list[AucRow]:
    """Per (concept, group) ROC-AUC from annotated positives vs negatives.

    ``marks`` names hypothesis ids (e.g. NH5); a concept is marked significant
    for a hypothesis if any of its ``<id>[<concept>]`` strata rejected.
    """
    if groups is None:
        groups = group_order(group_field, {ds.group_of(s, group_field) for s in ds.samples.values()})
    rows = []
    for c in concepts:
        pos: dict[str, list[float]] = {g: [] for g in groups}
        neg: dict[str, list[float]] = {g: [] for g in groups}
        for sid in ds.sample_ids():
            s = ds.samples[sid]
            lab = s.annotations.get(c)
            score = ds.scores.get(sid, {}).get(c)
            if lab is None or score is None:
                continue
            g = ds.group_of(s, group_field)
            if g in pos:
                (pos if lab == "pos" else neg)[g].append(score)
        cells = [auc_cell(c, g, pos[g], neg[g]) for g in groups]
        row_marks: dict[str, bool | None] = {}
        for m in marks:
            hits = [r.result.reject for r in results if r.spec_id == f"{m}[{c}]"]
            row_marks[m] = any(hits) if hits else None
        rows.append(AucRow(c, cells, row_marks))
    return rows


def is_nan(x) -> bool:
    return isinstance(x, float) and math.isnan(x)
