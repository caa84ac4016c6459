"""Brute-force reference implementations the metric tests compare against.

Deliberately naive: explicit loops, no Counter arithmetic, exhaustive search.
"""
from __future__ import annotations

import itertools
import math


def all_ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def clipped_overlap(cand, ref, n):
    cg, rg = all_ngrams(cand, n), all_ngrams(ref, n)
    total = 0
    for g in set(cg):
        in_c = sum(1 for x in cg if x == g)
        in_r = sum(1 for x in rg if x == g)
        total += min(in_c, in_r)
    return total, len(cg), len(rg)


def f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n_oracle(cand, ref, n):
    overlap, nc, nr = clipped_overlap(cand, ref, n)
    if nc == 0 or nr == 0:
        return 0.0
    return f1(overlap / nc, overlap / nr)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_exhaustive(a, b):
    """Longest common subsequence by trying every subsequence of the shorter text."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subsequence([short[i] for i in idx], long_):
                return size
    return 0


def rouge_l_oracle(cand, ref):
    lcs = lcs_exhaustive(cand, ref)
    return f1(lcs / len(cand), lcs / len(ref))


def bleu_oracle(cand, ref, max_n=4):
    """Direct BLEU formula with uniform weights over the orders the candidate has,
    and a zero clipped count replaced by 1 / (2 * candidate n-grams)."""
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    logs = []
    for n in range(1, max_n + 1):
        overlap, nc, _ = clipped_overlap(cand, ref, n)
        if nc == 0:
            break
        p = overlap / nc if overlap else 1 / (2 * nc)
        logs.append(math.log(p))
    return bp * math.exp(sum(logs) / len(logs))


def random_pairs(rng, count=100, max_len=12, vocab=("a", "b", "c", "d", "e", "f")):
    pairs = []
    for _ in range(count):
        lc, lr = rng.integers(1, max_len + 1, size=2)
        pairs.append(([vocab[i] for i in rng.integers(len(vocab), size=lc)],
                      [vocab[i] for i in rng.integers(len(vocab), size=lr)]))
    return pairs
