"""Overlap metrics, readability scores and representation analyses.

Texts are compared as token lists; :func:`metric_tokens` gives the reference
tokenization (lowercase, split on whitespace and punctuation) so that scores
are reproducible bit-for-bit.
"""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import PairedSample, tokenize_words
from .errors import ConfigurationError, ContractError, DegenerateSubspaceError

log = logging.getLogger(__name__)

Tokens = Sequence[str]


def metric_tokens(text: str | Tokens) -> list[str]:
    if isinstance(text, str):
        return tokenize_words(text)
    return list(text)


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class MetricScore:
    precision: float
    recall: float
    f1: float
    empty: bool = False

    @classmethod
    def from_pr(cls, p: float, r: float) -> "MetricScore":
        return cls(p, r, 0.0 if p + r == 0 else 2 * p * r / (p + r))


_EMPTY = MetricScore(0.0, 0.0, 0.0, empty=True)


def rouge_n(candidate, reference, n: int = 1) -> MetricScore:
    if n < 1:
        raise ConfigurationError(f"ROUGE order must be >= 1, got {n}")
    c, r = metric_tokens(candidate), metric_tokens(reference)
    if not c or not r:
        return _EMPTY
    cg, rg = ngrams(c, n), ngrams(r, n)
    nc, nr = sum(cg.values()), sum(rg.values())
    if nc == 0 or nr == 0:
        return MetricScore(0.0, 0.0, 0.0)
    overlap = sum((cg & rg).values())
    return MetricScore.from_pr(overlap / nc, overlap / nr)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> MetricScore:
    c, r = metric_tokens(candidate), metric_tokens(reference)
    if not c or not r:
        return _EMPTY
    lcs = lcs_length(c, r)
    return MetricScore.from_pr(lcs / len(c), lcs / len(r))


@dataclass(frozen=True)
class BleuDetail:
    score: float
    brevity_penalty: float
    precisions: tuple[float, ...]
    orders_used: int
    empty: bool = False


def bleu_detail(candidate, reference, max_n: int = 4, weights: Sequence[float] | None = None,
                smoothing: str = "half") -> BleuDetail:
    """Sentence BLEU = BP * exp(sum_n w_n ln p_n) with clipped precisions.

    ``smoothing="half"`` replaces a zero clipped count by 1/(2 * #candidate
    n-grams); ``"strict"`` scores 0 instead. Orders longer than the candidate
    have no n-grams at all; they are dropped and the remaining weights
    renormalised, so a short text compared to itself scores exactly 1.
    """
    w = [1.0 / max_n] * max_n if weights is None else [float(x) for x in weights]
    if len(w) != max_n or abs(sum(w) - 1.0) > 1e-9 or min(w) < 0:
        raise ConfigurationError(f"BLEU weights must be {max_n} nonnegative values summing to 1")
    if smoothing not in ("half", "strict"):
        raise ConfigurationError(f"unknown BLEU smoothing {smoothing!r}")
    c, r = metric_tokens(candidate), metric_tokens(reference)
    if not c:
        return BleuDetail(0.0, 0.0, (), 0, empty=True)
    if not r:
        return BleuDetail(0.0, 1.0, (), 0, empty=True)
    bp = 1.0 if len(c) > len(r) else math.exp(1.0 - len(r) / len(c))
    precisions, used = [], []
    for n in range(1, max_n + 1):
        cg = ngrams(c, n)
        total = sum(cg.values())
        if total == 0:
            break
        clipped = sum((cg & ngrams(r, n)).values())
        if clipped == 0:
            if smoothing == "strict":
                return BleuDetail(0.0, bp, tuple(precisions + [0.0]), n)
            p = 1.0 / (2.0 * total)
        else:
            p = clipped / total
        precisions.append(p)
        used.append(w[n - 1])
    wsum = sum(used)
    if wsum == 0:
        return BleuDetail(0.0, bp, tuple(precisions), len(precisions))
    log_mean = sum(wi / wsum * math.log(p) for wi, p in zip(used, precisions))
    return BleuDetail(bp * math.exp(log_mean), bp, tuple(precisions), len(precisions))


def bleu(candidate, reference, max_n: int = 4, weights: Sequence[float] | None = None,
         smoothing: str = "half") -> float:
    return bleu_detail(candidate, reference, max_n, weights, smoothing).score


def score_pair(candidate, reference) -> dict[str, float]:
    """R-1/R-2/R-L F1 and BLEU of one candidate."""
    c, r = metric_tokens(candidate), metric_tokens(reference)
    return {"rouge1": rouge_n(c, r, 1).f1, "rouge2": rouge_n(c, r, 2).f1,
            "rougeL": rouge_l(c, r).f1, "bleu": bleu(c, r)}


METRIC_NAMES = ("rouge1", "rouge2", "rougeL", "bleu")


def aggregate(scores: Sequence[Mapping[str, float]]) -> dict[str, float]:
    if not scores:
        return {k: float("nan") for k in METRIC_NAMES}
    return {k: float(np.mean([s[k] for s in scores])) for k in METRIC_NAMES}


# ---------------------------------------------------------------- readability

_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:['-][A-Za-z0-9]+)*")
_SENT_END_RE = re.compile(r"[.!?](?=\s|$)")


@dataclass(frozen=True)
class WordCountStats:
    words: int
    sentences: int
    undefined_ratio: bool

    @property
    def average(self) -> float:
        return self.words / max(self.sentences, 1)


def word_count_stats(text: str) -> WordCountStats:
    words = len(_WORD_RE.findall(text))
    sentences = len(_SENT_END_RE.findall(text))
    return WordCountStats(words, sentences, sentences == 0)


def avg_word_count(text: str) -> float:
    """Words per sentence; text without a sentence terminator counts as one sentence."""
    return word_count_stats(text).average


@dataclass(frozen=True)
class DcrsWeights:
    alpha: float = 0.25
    beta: float = 0.25
    gamma: float = 0.25
    delta: float = 0.25

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.delta)
        if min(vals) < 0 or abs(sum(vals) - 1.0) > 1e-9:
            raise ConfigurationError(f"DCRS weights must be nonnegative and sum to 1, got {vals}")


# A short list of everyday words; anything else counts as "rare" for L.
EASY_WORDS = frozenset("""
a about after all also an and any are as at be because been before being but by can could day did do
does done down each even every few for from get good had has have he her here him his how i if in into
is it its just know less like little long made make many may me more most much must my new no not now
of on one only or other our out over people per same see she should so some such than that the their
them then there these they this those through to too two under up us use used very was way we well
were what when where which while who why will with would year years you your
three four five six seven eight nine ten first last lower higher high low better worse help helped
study studies trial trials group groups drug drugs diet exercise surgery therapy vaccine children adults
women men patients smokers fever headache itching swelling tumor pressure vomiting breathlessness
means common rare unchanged reduced increased prevented worsened treated cohorts
""".split())
PRONOUNS_CONNECTIVES = frozenset("""
i you he she it we they me him her us them this that these those however therefore because so but and
also then thus although while since which who
""".split())


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def lexical_component(text: str) -> float:
    """Share of distinct words that are not on the easy-word list."""
    words = {w.lower() for w in _WORD_RE.findall(text)}
    if not words:
        return 0.0
    return _clamp(len(words - EASY_WORDS) / len(words))


def syntactic_component(text: str, max_len: float = 40.0) -> float:
    """Mean sentence length, normalised by ``max_len`` words."""
    return _clamp(avg_word_count(text) / max_len)


def conceptual_component(text: str) -> float:
    """Distinct content words per word."""
    words = [w.lower() for w in _WORD_RE.findall(text)]
    content = [w for w in words if w not in PRONOUNS_CONNECTIVES and len(w) > 3]
    return _clamp(len(set(content)) / len(words)) if words else 0.0


def discourse_component(text: str) -> float:
    """Share of words that are pronouns or connectives."""
    words = [w.lower() for w in _WORD_RE.findall(text)]
    return _clamp(sum(w in PRONOUNS_CONNECTIVES for w in words) / len(words)) if words else 0.0


DEFAULT_SCORERS: tuple[Callable[[str], float], ...] = (
    lexical_component, syntactic_component, conceptual_component, discourse_component)


def dcrs(text: str, weights: DcrsWeights | None = None,
         scorers: Sequence[Callable[[str], float]] | None = None) -> float:
    """Weighted readability composite alpha*L + beta*S + gamma*C + delta*D.

    The default component scorers are stand-ins (see their docstrings), not a
    calibrated readability model.
    """
    w = weights or DcrsWeights()
    fns = DEFAULT_SCORERS if scorers is None else tuple(scorers)
    if len(fns) != 4:
        raise ConfigurationError("dcrs needs exactly four component scorers (L, S, C, D)")
    comps = [float(f(text)) for f in fns]
    for c in comps:
        if not 0.0 <= c <= 1.0:
            raise ContractError(f"DCRS component {c} outside [0, 1]")
    return w.alpha * comps[0] + w.beta * comps[1] + w.gamma * comps[2] + w.delta * comps[3]


@dataclass
class JudgeStub:
    """Stand-in for an LLM readability judge: records prompts, returns a constant."""

    score: float = 3.0
    queries: list[str] = field(default_factory=list)

    def __call__(self, text: str) -> float:
        self.queries.append(text)
        return self.score


QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)
QUANTILE_NAMES = ("min", "q25", "median", "q75", "max")


def quantiles(values: Sequence[float]) -> tuple[float, ...]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return tuple(float(x) for x in np.quantile(v, QUANTILES))


def heterogeneity_report(corpus: Iterable[PairedSample], source: Callable[[PairedSample], str] | None = None,
                         sources: Sequence[str] | None = None) -> list[dict]:
    """Word-count and DCRS quantiles per source and side (expert / lay)."""
    source = source or (lambda s: s.style)
    groups: dict[str, list[PairedSample]] = {}
    for s in corpus:
        groups.setdefault(source(s), []).append(s)
    rows = []
    for name in (sources if sources is not None else sorted(groups)):
        items = groups.get(name, [])
        if not items:
            log.warning("heterogeneity_report: source %r has no samples; omitted", name)
            continue
        for side in ("expert", "lay"):
            texts = [getattr(s, side) for s in items]
            for metric, fn in (("word_count", avg_word_count), ("dcrs", dcrs)):
                q = quantiles([fn(t) for t in texts])
                rows.append({"source": name, "side": side, "metric": metric, "n": len(texts),
                             **dict(zip(QUANTILE_NAMES, q))})
    return rows


def rows_to_tsv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return "" if columns is None else "\t".join(columns) + "\n"
    cols = list(columns or rows[0].keys())
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


# ------------------------------------------------------------------ analysis


@dataclass
class SubspaceProjection:
    directions: np.ndarray  # [2, d], orthonormal rows
    singular_values: np.ndarray  # [2]
    center: np.ndarray  # [d]
    expert_points: np.ndarray  # [M, 2]
    lay_points: np.ndarray  # [M, 2]

    def project(self, reps: np.ndarray) -> np.ndarray:
        return (np.asarray(reps, dtype=np.float64) - self.center) @ self.directions.T


def top_singular_vectors(X: np.ndarray, k: int = 2, tol: float = 1e-10, max_iter: int = 10000,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-k right singular vectors by power iteration on X^T X with deflation."""
    G = X.T @ X
    d = G.shape[0]
    rng = np.random.default_rng(seed)
    vecs, vals = [], []
    for _ in range(k):
        v = rng.standard_normal(d)
        for u in vecs:
            v -= (v @ u) * u
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = G @ v
            for u, s in zip(vecs, vals):
                w -= s * (u @ v) * u
            for u in vecs:  # keep numerically orthogonal to found directions
                w -= (w @ u) * u
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            delta = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
            v, lam = w, norm
            if delta < tol:
                break
        vecs.append(v)
        vals.append(lam)
    return np.array(vecs), np.sqrt(np.maximum(vals, 0.0))


def semantic_subspace(expert_reps, lay_reps, rank_tol: float = 1e-10) -> SubspaceProjection:
    """Project paired representations onto the top-2 directions of their joint, centred stack."""
    E = np.asarray(expert_reps, dtype=np.float64)
    L = np.asarray(lay_reps, dtype=np.float64)
    if E.shape != L.shape or E.ndim != 2:
        raise ContractError(f"paired representation sets must share shape [M, d], got {E.shape} and {L.shape}")
    if E.shape[0] < 2:
        raise ContractError("semantic_subspace needs at least two pairs")
    X = np.concatenate([E, L])
    center = X.mean(axis=0)
    Xc = X - center
    dirs, svals = top_singular_vectors(Xc)
    if svals[0] <= 0 or svals[1] <= rank_tol * max(svals[0], 1.0):
        raise DegenerateSubspaceError(f"centred representations have rank < 2 (singular values {svals})")
    return SubspaceProjection(dirs, svals, center, (E - center) @ dirs.T, (L - center) @ dirs.T)


def cross_correlation(expert_reps, lay_reps) -> np.ndarray:
    """C[a, b] = Pearson correlation of expert dimension a and lay dimension b.

    Zero-variance dimensions yield a row (or column) of zeros and a warning.
    """
    E = np.asarray(expert_reps, dtype=np.float64)
    L = np.asarray(lay_reps, dtype=np.float64)
    if E.shape != L.shape or E.ndim != 2:
        raise ContractError(f"paired representation sets must share shape [M, r], got {E.shape} and {L.shape}")
    Ec, Lc = E - E.mean(0), L - L.mean(0)
    se, sl = np.sqrt((Ec**2).sum(0)), np.sqrt((Lc**2).sum(0))
    dead_e, dead_l = se == 0, sl == 0
    if dead_e.any() or dead_l.any():
        log.warning("cross_correlation: zero-variance dims expert=%s lay=%s",
                    np.flatnonzero(dead_e).tolist(), np.flatnonzero(dead_l).tolist())
    C = (Ec / np.where(dead_e, 1.0, se)).T @ (Lc / np.where(dead_l, 1.0, sl))
    C[dead_e, :] = 0.0
    C[:, dead_l] = 0.0
    return C
