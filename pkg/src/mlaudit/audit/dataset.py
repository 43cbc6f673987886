"""Sample/score CSV schemas, the concept catalog and dataset joins."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..trace_synth import AGE_BINS, group_label

SEXES = ("Male", "Female")
SAMPLE_COLUMNS = ("sample_id", "sex", "ethnicity", "age_bin")
SCORE_COLUMNS = ("sample_id", "concept", "score")


class SchemaError(ValueError):
    pass


class JoinError(ValueError):
    pass


class MissingField(ValueError):
    pass


def age_bin_range(label: str) -> tuple[float, float, bool]:
    """(low, high, closed_high) for an age bin label.

    Integer bins cover [low, high + 1) so fractional predictions have a home;
    the last bin is closed at its upper bound.
    """
    if label not in AGE_BINS:
        raise SchemaError(f"unknown age bin {label!r}")
    lo, hi = (int(x) for x in label.split("-"))
    if label == AGE_BINS[-1]:
        return float(lo), float(hi), True
    return float(lo), float(hi + 1), False


def in_age_bin(value: float, label: str) -> bool:
    lo, hi, closed = age_bin_range(label)
    return lo <= value <= hi if closed else lo <= value < hi


@dataclass(frozen=True)
class SampleRow:
    sample_id: str
    sex: str
    ethnicity: str
    age_bin: str
    variant: str | None = None
    annotations: dict = field(default_factory=dict, hash=False, compare=True)

    @property
    def demographic(self) -> str:
        return group_label(self.ethnicity, self.sex)


@dataclass(frozen=True)
class ScoreRow:
    sample_id: str
    concept: str
    score: float
    face_count: int | None = None
    predicted_age: float | None = None
    predicted_sex_score: float | None = None


class ConceptCatalog:
    def __init__(self, concepts):
        self.concepts = list(concepts)
        if len(set(self.concepts)) != len(self.concepts):
            dup = [c for c, n in Counter(self.concepts).items() if n > 1]
            raise SchemaError(f"duplicate catalog entries: {dup}")
        self.index = {c: i for i, c in enumerate(self.concepts)}

    def __len__(self):
        return len(self.concepts)

    def __contains__(self, c):
        return c in self.index

    def __iter__(self):
        return iter(self.concepts)

    @classmethod
    def load(cls, path) -> "ConceptCatalog":
        with open(path, encoding="utf-8") as fh:
            return cls(line.strip() for line in fh if line.strip() and not line.startswith("#"))

    @classmethod
    def default(cls) -> "ConceptCatalog":
        text = resources.files("mlaudit.data").joinpath("concepts.txt").read_text("utf-8")
        return cls(line.strip() for line in text.splitlines() if line.strip())


def parse_annotations(text: str) -> dict[str, str]:
    out = {}
    for part in (text or "").split(";"):
        part = part.strip()
        if not part:
            continue
        concept, sep, label = part.rpartition(":")
        if not sep or label not in ("pos", "neg") or not concept:
            raise SchemaError(f"bad annotation {part!r}")
        out[concept] = label
    return out


def _reader(src) -> csv.DictReader:
    if isinstance(src, (str, Path)) and "\n" not in str(src):
        text = Path(src).read_text(encoding="utf-8")
    elif hasattr(src, "read"):
        text = src.read()
    else:
        text = str(src)
    return csv.DictReader(io.StringIO(text))


def _require(reader: csv.DictReader, cols, what: str) -> None:
    have = reader.fieldnames or []
    missing = [c for c in cols if c not in have]
    if missing:
        raise SchemaError(f"{what}: missing column(s) {', '.join(missing)}")


def _opt_float(v: str | None, what: str) -> float | None:
    if v is None or v.strip() == "":
        return None
    try:
        x = float(v)
    except ValueError:
        raise SchemaError(f"{what}: not a number: {v!r}") from None
    if not math.isfinite(x):
        raise SchemaError(f"{what}: non-finite value")
    return x


def read_samples(src) -> dict[str, SampleRow]:
    reader = _reader(src)
    _require(reader, SAMPLE_COLUMNS, "samples.csv")
    samples: dict[str, SampleRow] = {}
    for line, row in enumerate(reader, start=2):
        sid = row["sample_id"].strip()
        if not sid:
            raise SchemaError(f"samples.csv line {line}: empty sample_id")
        if sid in samples:
            raise SchemaError(f"samples.csv line {line}: duplicate sample_id {sid}")
        if row["sex"] not in SEXES:
            raise SchemaError(f"samples.csv line {line}: sex must be Male or Female")
        if row["age_bin"] not in AGE_BINS:
            raise SchemaError(f"samples.csv line {line}: unknown age bin {row['age_bin']!r}")
        samples[sid] = SampleRow(sid, row["sex"], row["ethnicity"].strip(), row["age_bin"],
                                 (row.get("variant") or "").strip() or None,
                                 parse_annotations(row.get("annotations") or ""))
    return samples


def read_scores(src, catalog: ConceptCatalog | None = None) -> list[ScoreRow]:
    reader = _reader(src)
    _require(reader, SCORE_COLUMNS, "scores.csv")
    rows = []
    for line, row in enumerate(reader, start=2):
        where = f"scores.csv line {line}"
        score = _opt_float(row["score"], where)
        if score is None or not 0.0 <= score <= 1.0:
            raise SchemaError(f"{where}: score must lie in [0, 1]")
        concept = row["concept"].strip()
        if catalog is not None and concept not in catalog:
            raise SchemaError(f"{where}: concept {concept!r} not in catalog")
        fc = _opt_float(row.get("face_count"), where)
        if fc is not None and (fc < 0 or fc != int(fc)):
            raise SchemaError(f"{where}: face_count must be a non-negative integer")
        sex_score = _opt_float(row.get("predicted_sex_score"), where)
        if sex_score is not None and not 0.0 <= sex_score <= 1.0:
            raise SchemaError(f"{where}: predicted_sex_score must lie in [0, 1]")
        rows.append(ScoreRow(row["sample_id"].strip(), concept, score,
                             None if fc is None else int(fc),
                             _opt_float(row.get("predicted_age"), where), sex_score))
    return rows


@dataclass
class ScoreDataset:
    samples: dict[str, SampleRow]
    rows: list[ScoreRow]
    orphans: int = 0
    catalog: ConceptCatalog | None = None

    def __post_init__(self):
        self.scores: dict[str, dict[str, float]] = {}
        self.extras: dict[str, ScoreRow] = {}
        for r in self.rows:
            per = self.scores.setdefault(r.sample_id, {})
            if r.concept in per:
                raise SchemaError(f"duplicate score for ({r.sample_id}, {r.concept})")
            per[r.concept] = r.score
            prev = self.extras.get(r.sample_id)
            if prev is None:
                self.extras[r.sample_id] = r
            elif _has_extras(r) and not _has_extras(prev):
                self.extras[r.sample_id] = r

    @property
    def n_cells(self) -> int:
        return len(self.rows)

    def sample_ids(self) -> list[str]:
        return sorted(self.samples)

    def concepts(self) -> list[str]:
        seen = {r.concept for r in self.rows}
        if self.catalog is not None:
            return [c for c in self.catalog if c in seen]
        return sorted(seen)

    def group_of(self, sample: SampleRow, field_name: str) -> str:
        if field_name == "demographic":
            return sample.demographic
        if field_name in ("sex", "ethnicity", "age_bin"):
            return getattr(sample, field_name)
        raise KeyError(field_name)

    def annotation_counts(self, concepts=None, group_field: str = "demographic") -> dict:
        """(concept, group) -> (n_pos, n_neg) over annotated samples."""
        out: dict[tuple[str, str], list[int]] = {}
        wanted = set(concepts) if concepts is not None else None
        for s in self.samples.values():
            g = self.group_of(s, group_field)
            for c, lab in s.annotations.items():
                if wanted is not None and c not in wanted:
                    continue
                cell = out.setdefault((c, g), [0, 0])
                cell[0 if lab == "pos" else 1] += 1
        return {k: tuple(v) for k, v in out.items()}

    def with_rows(self, rows: list[ScoreRow]) -> "ScoreDataset":
        keep = {r.sample_id for r in rows}
        samples = {k: v for k, v in self.samples.items() if k in keep}
        return ScoreDataset(samples, rows, self.orphans, self.catalog)


def _has_extras(r: ScoreRow) -> bool:
    return r.face_count is not None or r.predicted_age is not None or r.predicted_sex_score is not None


def load_dataset(samples_csv, scores_csv, catalog: ConceptCatalog | None = None,
                 max_orphan_ratio: float = 0.5) -> ScoreDataset:
    """Join samples and scores on sample_id; score rows for unknown samples are orphans."""
    samples = read_samples(samples_csv)
    rows = read_scores(scores_csv, catalog)
    joined = [r for r in rows if r.sample_id in samples]
    orphans = len(rows) - len(joined)
    if rows and orphans / len(rows) > max_orphan_ratio:
        raise JoinError(f"{orphans}/{len(rows)} score rows reference unknown samples")
    # samples without any score are kept out of every analysis
    scored = {r.sample_id for r in joined}
    samples = {k: v for k, v in sorted(samples.items()) if k in scored}
    joined.sort(key=lambda r: (r.sample_id, r.concept))
    return ScoreDataset(samples, joined, orphans, catalog)


def filter_single_face(rows: list[ScoreRow]) -> tuple[list[ScoreRow], Counter]:
    """Keep rows whose image shows exactly one detected face."""
    kept, discarded = [], Counter()
    for r in rows:
        if r.face_count is None:
            raise MissingField(f"face_count missing for sample {r.sample_id}")
        if r.face_count == 1:
            kept.append(r)
        else:
            discarded["zero" if r.face_count == 0 else "multi"] += 1
    return kept, discarded


def top_k(scores: dict[str, float], k: int = 10, catalog: ConceptCatalog | None = None) -> list[str]:
    """The ``k`` highest-scoring concepts; ties go to the earlier catalog entry."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if catalog is not None:
        order = catalog.index
        fallback = len(order)
        key = lambda c: (-scores[c], order.get(c, fallback), c)  # noqa: E731
    else:
        key = lambda c: (-scores[c], c)  # noqa: E731
    return sorted(scores, key=key)[:k]
