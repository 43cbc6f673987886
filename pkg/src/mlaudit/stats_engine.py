"""Rank statistics used by the audits: Kruskal-Wallis with tie correction,
chi-square tail, Bonferroni, resampling power, ROC-AUC, spurious-correlation
mining and concept validation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

_EPS = 1e-16
_TINY = 1e-300


class DegenerateInput(ValueError):
    pass


@dataclass(frozen=True)
class SampleGroups:
    groups: tuple[tuple[str, tuple[float, ...]], ...]

    @classmethod
    def from_mapping(cls, m: Mapping[str, Sequence[float]]) -> "SampleGroups":
        return cls(tuple((str(k), tuple(float(x) for x in v)) for k, v in m.items()))

    @property
    def labels(self) -> list[str]:
        return [g[0] for g in self.groups]

    def arrays(self) -> list[np.ndarray]:
        return [np.asarray(v, dtype=float) for _, v in self.groups]


@dataclass(frozen=True)
class TestResult:
    h_statistic: float
    degrees_freedom: int
    p_value: float
    alpha_corrected: float
    reject: bool
    power: float | None = None
    n: int = 0

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {
            "h": self.h_statistic, "df": self.degrees_freedom, "p": self.p_value,
            "alpha_corrected": self.alpha_corrected, "reject": self.reject,
            "power": self.power, "n": self.n,
        }


def _regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x)."""
    if x <= 0.0:
        return 1.0
    log_front = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        ap, term = a, 1.0 / a
        total = term
        for _ in range(10_000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return max(0.0, 1.0 - total * math.exp(log_front))
    # modified Lentz continued fraction
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return min(1.0, math.exp(log_front) * h)


def chi_square_sf(x: float, df: int) -> float:
    if df < 1:
        raise ValueError("df must be >= 1")
    if x <= 0.0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return _regularized_gamma_q(df / 2.0, x / 2.0)


def bonferroni(alpha: float, m: int) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if m < 1:
        raise ValueError("family size must be >= 1")
    return alpha / m


def midranks(x: np.ndarray) -> tuple[np.ndarray, float]:
    """1-based mid-ranks of ``x`` and the tie term sum(t^3 - t)."""
    n = x.size
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    cuts = np.flatnonzero(xs[1:] != xs[:-1]) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [n]))
    t = ends - starts
    ranks = np.empty(n, dtype=float)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, t)
    tf = t.astype(float)
    return ranks, float(np.sum(tf ** 3 - tf))


def _kw_stat(arrays: list[np.ndarray]) -> tuple[float, int]:
    sizes = [a.size for a in arrays]
    n = sum(sizes)
    ranks, ties = midranks(np.concatenate(arrays))
    denom = 1.0 - ties / (float(n) ** 3 - n)
    if denom <= 0.0:
        return 0.0, n
    centre = (n + 1) / 2.0
    h = 0.0
    pos = 0
    for ni in sizes:
        rbar = ranks[pos:pos + ni].mean()
        h += ni * (rbar - centre) ** 2
        pos += ni
    h *= 12.0 / (n * (n + 1.0))
    return float(h / denom), n


def _as_arrays(g) -> list[np.ndarray]:
    if isinstance(g, SampleGroups):
        arrays = g.arrays()
    elif isinstance(g, Mapping):
        arrays = [np.asarray(v, dtype=float) for v in g.values()]
    else:
        arrays = [np.asarray(v, dtype=float) for v in g]
    if len(arrays) < 2:
        raise DegenerateInput("need at least two groups")
    if any(a.size == 0 for a in arrays):
        raise DegenerateInput("empty group")
    if sum(a.size for a in arrays) < 3:
        raise DegenerateInput("need at least three observations")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise DegenerateInput("non-finite value")
    return arrays


def kruskal_wallis(g, alpha: float = 0.05, alpha_corrected: float | None = None) -> TestResult:
    """Tie-corrected Kruskal-Wallis H test; all-tied input gives H = 0, p = 1."""
    arrays = _as_arrays(g)
    h, n = _kw_stat(arrays)
    df = len(arrays) - 1
    p = chi_square_sf(h, df) if h > 0.0 else 1.0
    a = alpha if alpha_corrected is None else alpha_corrected
    return TestResult(h, df, float(p), a, bool(p < a), None, n)


def estimate_power(g, n_per_group: int, n_sims: int, alpha: float, seed: int) -> float:
    """Fraction of ``n_sims`` bootstrap replicates rejected at ``alpha``.

    Each replicate draws ``n_per_group`` values with replacement from every
    observed group and reruns the Kruskal-Wallis test.
    """
    if n_per_group < 2 or n_sims < 1:
        raise DegenerateInput("n_per_group must be >= 2 and n_sims >= 1")
    arrays = _as_arrays(g)
    df = len(arrays) - 1
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_sims):
        draw = [a[rng.integers(0, a.size, n_per_group)] for a in arrays]
        h, _ = _kw_stat(draw)
        if h > 0.0 and chi_square_sf(h, df) < alpha:
            hits += 1
    return hits / n_sims


def roc_auc(pos: Sequence[float], neg: Sequence[float]) -> float:
    """P(score_pos > score_neg) with half credit for ties; NaN if a class is empty."""
    p = np.asarray(pos, dtype=float)
    q = np.asarray(neg, dtype=float)
    if p.size == 0 or q.size == 0:
        return math.nan
    ranks, _ = midranks(np.concatenate((p, q)))
    u = ranks[:p.size].sum() - p.size * (p.size + 1) / 2.0
    return float(u / (p.size * q.size))


@dataclass(frozen=True)
class AucCell:
    concept: str
    group: str
    auc: float
    n_pos: int
    n_neg: int

    @property
    def scaled(self) -> float:
        return math.nan if math.isnan(self.auc) else round(100.0 * self.auc, 2)


def auc_cell(concept: str, group: str, pos: Sequence[float], neg: Sequence[float]) -> AucCell:
    return AucCell(concept, group, roc_auc(pos, neg), len(pos), len(neg))


@dataclass(frozen=True)
class SpuriousFinding:
    concept: str
    top_group: str
    top_mean: float
    p_value: float
    reject: bool
    h_statistic: float = 0.0
    alpha_corrected: float = 0.0

    def to_dict(self) -> dict:
        return {"concept": self.concept, "top_group": self.top_group, "top_mean": self.top_mean,
                "h": self.h_statistic, "p": self.p_value, "alpha_corrected": self.alpha_corrected,
                "reject": self.reject}


def mine_spurious(
    table: Mapping[str, Mapping[str, Sequence[float]]],
    threshold: float = 0.15,
    alpha: float = 0.05,
    family_size: int | None = None,
) -> list[SpuriousFinding]:
    """Concepts whose mean exceeds ``threshold`` in some group, tested across groups.

    ``table`` maps concept -> group -> scores. The Bonferroni family defaults
    to the number of concepts that pass the threshold filter.
    """
    tested = []
    for concept in table:
        groups = {k: np.asarray(v, dtype=float) for k, v in table[concept].items() if len(v)}
        if len(groups) < 2:
            continue
        means = {k: float(v.mean()) for k, v in groups.items()}
        top = max(means, key=lambda k: (means[k], -list(groups).index(k)))
        if means[top] > threshold:
            tested.append((concept, top, means[top], list(groups.values())))
    if not tested:
        return []
    a = bonferroni(alpha, family_size or len(tested))
    out = []
    for concept, top, mean, arrays in tested:
        try:
            r = kruskal_wallis(arrays, alpha_corrected=a)
        except DegenerateInput:
            continue
        out.append(SpuriousFinding(concept, top, mean, r.p_value, r.reject, r.h_statistic, a))
    out.sort(key=lambda f: (f.top_group, f.concept))
    return out


def concept_validation(matched: Sequence[float], unmatched: Sequence[float]) -> tuple[float, float, float]:
    if len(matched) == 0 or len(unmatched) == 0:
        raise DegenerateInput("both score lists must be non-empty")
    m_in = math.fsum(matched) / len(matched)
    m_out = math.fsum(unmatched) / len(unmatched)
    return m_in, m_out, m_in - m_out
