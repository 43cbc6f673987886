"""Keyword and probability-vector evidence search over a parsed trace log."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from typing import Iterator, Union

from .trace_core import TraceError, TraceLog, TraceRecord, TypeKind

FIELD_NAME = "function_name"
FIELD_PAYLOAD = "payload"
FIELD_RETURN = "return"

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")
_BRACKETED = re.compile(r"\[[^\[\]]*\]")


def arg_field(i: int) -> str:
    return f"arg[{i}]"


def _field_rank(name: str) -> tuple[int, int]:
    if name == FIELD_NAME:
        return (0, 0)
    if name == FIELD_PAYLOAD:
        return (1, 0)
    if name == FIELD_RETURN:
        return (3, 0)
    return (2, int(name[4:-1]))


@dataclass(frozen=True)
class KeywordSet:
    keywords: frozenset[str]
    match_mode: str = "substring"

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("keyword set is empty")
        if any(k != k.lower() or not k for k in self.keywords):
            raise ValueError("keywords must be non-empty lowercase strings")
        if self.match_mode not in ("substring", "token"):
            raise ValueError(f"unknown match mode {self.match_mode!r}")

    @classmethod
    def parse(cls, text: str, match_mode: str = "substring") -> "KeywordSet":
        words = set()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip().lower()
            if line:
                words.add(line)
        return cls(frozenset(words), match_mode)

    @classmethod
    def load(cls, path, match_mode: str = "substring") -> "KeywordSet":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), match_mode)

    @classmethod
    def default(cls, match_mode: str = "substring") -> "KeywordSet":
        text = resources.files("mlaudit.data").joinpath("keywords.txt").read_text("utf-8")
        return cls.parse(text, match_mode)

    def matches(self, text: str) -> list[str]:
        low = text.lower()
        if self.match_mode == "token":
            tokens = set(_TOKEN_SPLIT.split(low))
            return sorted(k for k in self.keywords if k in tokens)
        return sorted(k for k in self.keywords if k in low)


@dataclass(frozen=True)
class KeywordHit:
    keyword: str
    field: str

    kind = "keyword"


@dataclass(frozen=True)
class ProbabilityVector:
    length: int
    min: float
    max: float
    field: str

    kind = "probability_vector"


Rule = Union[KeywordHit, ProbabilityVector]


@dataclass(frozen=True)
class Evidence:
    record_index: int
    function_name: str
    rule: Rule
    library: str | None = None
    timestamp_ns: int = 0

    @property
    def field(self) -> str:
        return self.rule.field

    def to_dict(self) -> dict:
        rule = {"type": self.rule.kind, "field": self.rule.field}
        if isinstance(self.rule, KeywordHit):
            rule["keyword"] = self.rule.keyword
        else:
            rule.update(length=self.rule.length, min=self.rule.min, max=self.rule.max)
        return {
            "record_index": self.record_index,
            "function_name": self.function_name,
            "library": self.library,
            "ts": self.timestamp_ns,
            "rule": rule,
        }


@dataclass(frozen=True)
class CandidateFunction:
    function_name: str
    library: str | None
    evidence_count: int
    rule_kinds: frozenset[str]
    first_seen_ts: int
    score: Fraction

    def to_dict(self) -> dict:
        return {
            "function_name": self.function_name,
            "library": self.library,
            "evidence_count": self.evidence_count,
            "rule_kinds": sorted(self.rule_kinds),
            "first_seen_ts": self.first_seen_ts,
            "score": str(self.score),
        }


def _blob_text(blob: bytes) -> str | None:
    blob = blob.rstrip(b"\x00")
    if not blob:
        return None
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError:
        return None
    return text if text.isprintable() else None


def text_fields(rec: TraceRecord) -> Iterator[tuple[str, str]]:
    """Yield (field, text) for every text-bearing part of a record.

    Only Pointer blobs that decode as printable UTF-8 count as text; numeric
    arguments are never reinterpreted.
    """
    if rec.payload is not None:
        yield FIELD_PAYLOAD, rec.payload
    if not rec.shorty:
        return
    try:
        args = rec.decoded_args()
    except TraceError:
        args = []
    for i, tv in enumerate(args):
        if tv.kind is TypeKind.POINTER:
            text = _blob_text(tv.value)
            if text is not None:
                yield arg_field(i), text
    try:
        ret = rec.decoded_return()
    except TraceError:
        ret = None
    if ret is not None and ret.kind is TypeKind.POINTER:
        text = _blob_text(ret.value)
        if text is not None:
            yield FIELD_RETURN, text


def scan_keywords(log: TraceLog, kw: KeywordSet) -> list[Evidence]:
    out = []
    for idx, rec in enumerate(log.records):
        fields = [(FIELD_NAME, rec.function_name), *text_fields(rec)]
        fields.sort(key=lambda f: _field_rank(f[0]))
        for fname, text in fields:
            for k in kw.matches(text):
                out.append(Evidence(idx, rec.function_name, KeywordHit(k, fname),
                                    rec.library, rec.timestamp_ns))
    return out


def _is_number(v) -> bool:
    return type(v) in (int, float) and math.isfinite(v)


def numeric_arrays(text: str) -> list[list[float]]:
    """All maximal numeric arrays in a JSON document or in bracketed JSON fragments."""
    found: list[list[float]] = []
    try:
        _walk(json.loads(text), found)
        return found
    except ValueError:
        pass
    for m in _BRACKETED.finditer(text):
        try:
            _walk(json.loads(m.group(0)), found)
        except ValueError:
            continue
    return found


def _walk(node, found: list) -> None:
    if isinstance(node, dict):
        for v in node.values():
            _walk(v, found)
    elif isinstance(node, list):
        if node and all(_is_number(v) for v in node):
            found.append([float(v) for v in node])
        else:
            for v in node:
                _walk(v, found)


def qualifies(arr: list[float], min_len: int, require_interior: bool) -> bool:
    if len(arr) < min_len:
        return False
    if any(v < 0.0 or v > 1.0 for v in arr):
        return False
    if require_interior and not any(0.0 < v < 1.0 for v in arr):
        return False
    return True


def scan_probability_vectors(
    log: TraceLog, min_len: int = 2, require_interior: bool = True
) -> list[Evidence]:
    if min_len < 2:
        raise ValueError("min_len must be >= 2")
    out = []
    for idx, rec in enumerate(log.records):
        fields = sorted(text_fields(rec), key=lambda f: _field_rank(f[0]))
        for fname, text in fields:
            if "[" not in text:
                continue
            for arr in numeric_arrays(text):
                if qualifies(arr, min_len, require_interior):
                    rule = ProbabilityVector(len(arr), min(arr), max(arr), fname)
                    out.append(Evidence(idx, rec.function_name, rule, rec.library, rec.timestamp_ns))
    return out


def detect(log: TraceLog, kw: KeywordSet | None = None, min_len: int = 2,
           require_interior: bool = True) -> list[Evidence]:
    """Keyword and probability-vector evidence merged in (record, field) order."""
    kw = kw or KeywordSet.default()
    ev = scan_keywords(log, kw) + scan_probability_vectors(log, min_len, require_interior)
    ev.sort(key=lambda e: (e.record_index, _field_rank(e.field), e.rule.kind))
    return ev


def rank_candidates(evidence: list[Evidence]) -> list[CandidateFunction]:
    groups: dict[tuple[str, str | None], list[Evidence]] = {}
    for e in evidence:
        groups.setdefault((e.function_name, e.library), []).append(e)
    out = []
    for (name, lib), evs in groups.items():
        kinds = frozenset(e.rule.kind for e in evs)
        n = len(evs)
        out.append(CandidateFunction(
            name, lib, n, kinds, min(e.timestamp_ns for e in evs),
            Fraction(len(kinds)) + Fraction(n, n + 1),
        ))
    out.sort(key=lambda c: (-len(c.rule_kinds), -c.evidence_count, c.function_name, c.library or ""))
    return out


def evidence_report(evidence: list[Evidence]) -> str:
    return json.dumps([e.to_dict() for e in evidence], indent=1)
