"""Layer probing: which hidden layers linearly encode expert/lay semantic match?

A probe dataset pairs expert text i with lay text j (label 1 iff i == j). Each
pair is run through the backbone as ``[expert] <sep> [lay]``; the layer-l
feature is the mean over positions of ``acts[l]`` (the input of block l).
A logistic-regression probe is fit per layer on a 4:1 split and the layers
with the highest held-out accuracy are kept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .data import SEP_ID, PairedSample, Tokenizer
from .errors import ConfigurationError, DegenerateSplitError, SamplingError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbePair:
    expert_index: int
    lay_index: int
    label: int

    def __post_init__(self):
        if self.label != int(self.expert_index == self.lay_index):
            raise ValueError(f"label {self.label} inconsistent with ({self.expert_index}, {self.lay_index})")


def build_probe_dataset(corpus: Sequence[PairedSample], negatives_per_positive: int = 1, seed: int = 0) -> list[ProbePair]:
    n = len(corpus)
    if n < 2:
        raise SamplingError("probing needs at least two samples")
    if negatives_per_positive >= n:
        raise SamplingError(f"{negatives_per_positive} negatives per positive from a corpus of {n}")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        pairs.append(ProbePair(i, i, 1))
        others = rng.choice(n - 1, size=negatives_per_positive, replace=False)
        for o in others:
            j = int(o) if o < i else int(o) + 1
            pairs.append(ProbePair(i, j, 0))
    return pairs


# -------------------------------------------------------------------- features


@dataclass
class PairSequence:
    tokens: list[int]
    truncated: bool


def pair_sequence(tok: Tokenizer, expert: str, lay: str, max_seq: int) -> PairSequence:
    """``[expert] <sep> [lay]``, trimming both halves evenly when too long."""
    e, s = tok.encode(expert), tok.encode(lay)
    budget = max_seq - 1
    truncated = len(e) + len(s) > budget
    while len(e) + len(s) > budget:
        if len(e) >= len(s):
            e = e[:-1]
        else:
            s = s[:-1]
    return PairSequence(e + [SEP_ID] + s, truncated)


def _pooled_acts(model, seqs: Sequence[list[int]], layers: Sequence[int], batch_size: int = 256) -> np.ndarray:
    """Mean-pooled activations, shape [len(layers), n, d_model]."""
    d = model.config.d_model
    out = np.zeros((len(layers), len(seqs), d))
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    for _, idx in sorted(by_len.items()):
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            _, acts = model.forward(np.array([seqs[i] for i in chunk]))
            for li, layer in enumerate(layers):
                out[li, chunk] = acts[layer].data.mean(axis=1)
    return out


def layer_feature(model, tok: Tokenizer, corpus: Sequence[PairedSample], pair: ProbePair, layer: int):
    """Pooled layer-``layer`` feature of one probe pair; returns (feature, truncated)."""
    if not 0 <= layer <= model.config.n_layers:
        raise ConfigurationError(f"layer {layer} outside [0, {model.config.n_layers}]")
    seq = pair_sequence(tok, corpus[pair.expert_index].expert, corpus[pair.lay_index].lay, model.config.max_seq)
    _, acts = model.forward(seq.tokens)
    return acts[layer].data.mean(axis=0), seq.truncated


def layer_features(model, tok: Tokenizer, corpus: Sequence[PairedSample], pairs: Sequence[ProbePair],
                   layers: Sequence[int]) -> np.ndarray:
    """Batched :func:`layer_feature` for many pairs, shape [len(layers), n, d]."""
    seqs = []
    n_trunc = 0
    for p in pairs:
        s = pair_sequence(tok, corpus[p.expert_index].expert, corpus[p.lay_index].lay, model.config.max_seq)
        n_trunc += s.truncated
        seqs.append(s.tokens)
    if n_trunc:
        log.warning("%d probe pairs truncated to max_seq=%d", n_trunc, model.config.max_seq)
    return _pooled_acts(model, seqs, layers)


# ----------------------------------------------------------------------- probe


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Binary logistic regression fit by full-batch gradient descent.

    Features are z-scored with training statistics (constant columns are
    left centred). The step size is ``min(learning_rate, 1.9/L)`` with ``L``
    the smoothness constant of the mean log-loss, so the training loss never
    increases. Points with probability exactly 0.5 go to class 0.
    """

    def __init__(self, learning_rate: float = 0.1, n_steps: int = 200, standardize: bool = True):
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.standardize = standardize

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        y = y.astype(np.float64)
        if not set(np.unique(y)) <= {0.0, 1.0}:
            raise ValueError("LinearProbe expects 0/1 labels")
        n, d = X.shape
        self.mean_ = X.mean(axis=0) if self.standardize else np.zeros(d)
        sd = X.std(axis=0) if self.standardize else np.ones(d)
        self.scale_ = np.where(sd > 1e-12, sd, 1.0)
        Xa = np.hstack([(X - self.mean_) / self.scale_, np.ones((n, 1))])
        smooth = np.linalg.norm(Xa, 2) ** 2 / (4.0 * n)
        step = min(self.learning_rate, 1.9 / smooth) if smooth > 0 else self.learning_rate
        w = np.zeros(d + 1)
        losses = []
        for _ in range(self.n_steps):
            z = Xa @ w
            losses.append(float(np.mean(np.logaddexp(0.0, z) - y * z)))
            p = 0.5 * (1.0 + np.tanh(0.5 * z))
            w -= step * Xa.T @ (p - y) / n
        z = Xa @ w
        losses.append(float(np.mean(np.logaddexp(0.0, z) - y * z)))
        self.coef_ = w[:-1]
        self.intercept_ = float(w[-1])
        self.loss_curve_ = losses
        self.step_size_ = step
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)


def split_indices(labels, seed: int, train_fraction: float = 0.8, groups=None) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled 4:1 split.

    Without ``groups`` the split is stratified by label. With ``groups``
    whole groups move together, so pairs sharing an expert text never
    straddle the split (otherwise the probe can memorise the expert half).
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    if groups is not None:
        groups = np.asarray(groups)
        uniq = rng.permutation(np.unique(groups))
        n_train = int(round(train_fraction * len(uniq)))
        in_train = np.isin(groups, uniq[:n_train])
        return np.flatnonzero(in_train), np.flatnonzero(~in_train)
    tr, va = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(train_fraction * len(idx)))
        tr.append(idx[:n_train])
        va.append(idx[n_train:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))


def fit_probe(features, labels, split_seed: int = 0, learning_rate: float = 0.1, n_steps: int = 200,
              groups=None):
    """Fit on a 4/5 split and return ``(probe, held-out accuracy)``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) < 5:
        raise DegenerateSplitError(f"probing needs at least 5 samples, got {len(y)}")
    tr, va = split_indices(y, split_seed, groups=groups)
    if len(np.unique(y[tr])) < 2:
        raise DegenerateSplitError("training split contains a single class")
    probe = LinearProbe(learning_rate, n_steps).fit(X[tr], y[tr])
    return probe, float(np.mean(probe.predict(X[va]) == y[va]))


# ---------------------------------------------------------------- selection


def select_semantic_layers(accuracies: Mapping[int, float] | Sequence[float], k: int) -> list[int]:
    """Indices of the k best layers (ties -> lower index), sorted ascending."""
    acc = dict(accuracies) if isinstance(accuracies, Mapping) else dict(enumerate(accuracies))
    if not 0 < k <= len(acc):
        raise ConfigurationError(f"K={k} must lie in [1, {len(acc)}]")
    ranked = sorted(acc, key=lambda layer: (-acc[layer], layer))
    return sorted(ranked[:k])


@dataclass
class ProbeReport:
    accuracies: dict[int, float]
    selected: list[int]
    truncated: int = 0
    meta: dict = field(default_factory=dict)

    def to_tsv(self) -> str:
        lines = ["layer\taccuracy\tselected"]
        for layer in sorted(self.accuracies):
            lines.append(f"{layer}\t{self.accuracies[layer]:.6f}\t{int(layer in self.selected)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ProbeReport":
        rows = Path(path).read_text(encoding="utf-8").strip().splitlines()[1:]
        acc, sel = {}, []
        for row in rows:
            layer, a, s = row.split("\t")
            acc[int(layer)] = float(a)
            if int(s):
                sel.append(int(layer))
        return cls(acc, sorted(sel))


def default_k(n_layers: int) -> int:
    """Half the layers (16 of 32 in the reference backbones), at least one."""
    return max(1, n_layers // 2)


class SemanticLayerSelector(BaseEstimator):
    """Estimator wrapper: ``fit(corpus)`` probes every layer and keeps the top K.

    Layer l (0 <= l < n_layers) is represented by ``acts[l]``, the residual
    stream entering transformer block l.
    """

    def __init__(self, model=None, tokenizer=None, k: int | None = None, negatives_per_positive: int = 1,
                 seed: int = 0, learning_rate: float = 0.1, n_steps: int = 200):
        self.model = model
        self.tokenizer = tokenizer
        self.k = k
        self.negatives_per_positive = negatives_per_positive
        self.seed = seed
        self.learning_rate = learning_rate
        self.n_steps = n_steps

    def fit(self, corpus: Sequence[PairedSample], y=None):
        if self.model is None or self.tokenizer is None:
            raise ConfigurationError("SemanticLayerSelector needs a model and a tokenizer")
        n_layers = self.model.config.n_layers
        k = default_k(n_layers) if self.k is None else self.k
        if not 0 < k <= n_layers:
            raise ConfigurationError(f"K={k} must lie in [1, {n_layers}]")
        pairs = build_probe_dataset(corpus, self.negatives_per_positive, self.seed)
        layers = list(range(n_layers))
        feats = layer_features(self.model, self.tokenizer, corpus, pairs, layers)
        labels = np.array([p.label for p in pairs])
        groups = np.array([p.expert_index for p in pairs])
        self.probes_ = {}
        acc = {}
        for li, layer in enumerate(layers):
            self.probes_[layer], acc[layer] = fit_probe(feats[li], labels, self.seed, self.learning_rate,
                                                            self.n_steps, groups)
        self.report_ = ProbeReport(acc, select_semantic_layers(acc, k), meta={"pairs": len(pairs), "k": k})
        self.selected_layers_ = self.report_.selected
        return self

    def transform(self, features_by_layer):
        """Keep only the selected layers of a [n_layers, ...] feature stack."""
        check_is_fitted(self, "selected_layers_")
        return np.asarray(features_by_layer)[self.selected_layers_]
