"""Score acquisition: run an external command per sample (internal injection)
or load precomputed scores (external injection)."""

from __future__ import annotations

import math
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .dataset import ConceptCatalog, SampleRow, ScoreRow, read_scores


class ScorerTimeout(RuntimeError):
    pass


class ScorerParseError(ValueError):
    pass


@dataclass(frozen=True)
class ScorerAdapter:
    mode: str                       # "internal" or "external"
    command: str | None = None      # template; fields like {sample_id}, {variant}
    scores_path: str | None = None
    timeout: float = 30.0
    retries: int = 0
    concurrency: int = 1

    def __post_init__(self):
        if self.mode == "internal" and not self.command:
            raise ValueError("internal scorer needs a command template")
        if self.mode == "external" and not self.scores_path:
            raise ValueError("external scorer needs a scores path")
        if self.mode not in ("internal", "external"):
            raise ValueError(f"unknown scorer mode {self.mode!r}")


@dataclass(frozen=True)
class ScorerFailure:
    sample_id: str
    error: str
    message: str


def parse_scorer_output(text: str, sample_id: str, catalog: ConceptCatalog | None = None) -> list[ScoreRow]:
    rows, seen = [], set()
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        concept, sep, value = line.partition("\t")
        if not sep:
            raise ScorerParseError(f"line {n}: expected concept<TAB>score")
        concept = concept.strip()
        try:
            score = float(value)
        except ValueError:
            raise ScorerParseError(f"line {n}: bad score {value!r}") from None
        if not (math.isfinite(score) and 0.0 <= score <= 1.0):
            raise ScorerParseError(f"line {n}: score {score} outside [0, 1]")
        if concept in seen:
            raise ScorerParseError(f"line {n}: duplicate concept {concept!r}")
        if catalog is not None and concept not in catalog:
            raise ScorerParseError(f"line {n}: concept {concept!r} not in catalog")
        seen.add(concept)
        rows.append(ScoreRow(sample_id, concept, score))
    if catalog is not None and len(seen) != len(catalog):
        raise ScorerParseError(f"expected {len(catalog)} concepts, got {len(seen)}")
    if not rows:
        raise ScorerParseError("no score lines")
    return rows


def _fields(s: SampleRow) -> dict:
    return {"sample_id": s.sample_id, "sex": s.sex, "ethnicity": s.ethnicity,
            "age_bin": s.age_bin, "variant": s.variant or ""}


def _score_one(adapter: ScorerAdapter, s: SampleRow, catalog):
    argv = [tok.format(**_fields(s)) for tok in shlex.split(adapter.command)]
    last: ScorerFailure | None = None
    for _ in range(adapter.retries + 1):
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=adapter.timeout)
        except subprocess.TimeoutExpired:
            last = ScorerFailure(s.sample_id, ScorerTimeout.__name__, f"timed out after {adapter.timeout}s")
            continue
        except OSError as e:
            last = ScorerFailure(s.sample_id, type(e).__name__, str(e))
            continue
        if proc.returncode != 0:
            last = ScorerFailure(s.sample_id, "ScorerExit",
                                 f"exit {proc.returncode}: {proc.stderr.strip()[:200]}")
            continue
        try:
            return parse_scorer_output(proc.stdout, s.sample_id, catalog), None
        except ScorerParseError as e:
            last = ScorerFailure(s.sample_id, ScorerParseError.__name__, str(e))
    return [], last


def run_scorer(adapter: ScorerAdapter, samples, catalog: ConceptCatalog | None = None):
    """Return (rows, failures); per-sample failures never abort the run."""
    samples = sorted(samples, key=lambda s: s.sample_id)
    if adapter.mode == "external":
        wanted = {s.sample_id for s in samples}
        rows = [r for r in read_scores(adapter.scores_path, catalog) if r.sample_id in wanted]
        rows.sort(key=lambda r: r.sample_id)
        return rows, []
    with ThreadPoolExecutor(max_workers=max(1, adapter.concurrency)) as pool:
        outcomes = list(pool.map(lambda s: _score_one(adapter, s, catalog), samples))
    rows, failures = [], []
    for got, fail in outcomes:
        rows += got
        if fail is not None:
            failures.append(fail)
    return rows, failures


def write_scores_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id,concept,score,face_count,predicted_age,predicted_sex_score\n")
        for r in rows:
            extra = ["" if v is None else repr(v) for v in (r.face_count, r.predicted_age,
                                                              r.predicted_sex_score)]
            fh.write(",".join([r.sample_id, r.concept, repr(r.score), *extra]) + "\n")
