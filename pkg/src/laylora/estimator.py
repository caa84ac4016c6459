"""scikit-learn style front end: ``LayStyleAdapter().fit(corpus).predict(corpus)``."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapter import AttachSpec, attach
from .contrastive import Trainer, TrainConfig, pooled_layers
from .data import PairedSample, Tokenizer
from .errors import ConfigurationError
from .experiments import evaluate
from .model import Transformer
from .probing import SemanticLayerSelector
from .switch import Recommender


class LayStyleAdapter(BaseEstimator):
    """Attach a multi-branch adapter to a frozen backbone and train it on paired samples.

    ``X`` is always a sequence of :class:`~laylora.data.PairedSample`; the lay
    side is the target, the style label picks the branch. When
    ``semantic_layers`` is None and ``lam > 0`` the layers are chosen by
    probing the backbone on the training corpus.
    """

    def __init__(self, backbone: Transformer | None = None, tokenizer: Tokenizer | None = None, rank: int = 4,
                 scheme: str = "magical", mode: str = "switch", styles: Sequence[str] | None = None,
                 patterns: Sequence[str] = ("q", "v", "up", "down"), lam: float = 0.5, tau: float = 0.5,
                 learning_rate: float = 1e-2, epochs: int = 5, batch_size: int = 16,
                 semantic_layers: Sequence[int] | None = None, probe_k: int | None = None, seed: int = 0,
                 max_new: int = 32):
        self.backbone = backbone
        self.tokenizer = tokenizer
        self.rank = rank
        self.scheme = scheme
        self.mode = mode
        self.styles = styles
        self.patterns = patterns
        self.lam = lam
        self.tau = tau
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.semantic_layers = semantic_layers
        self.probe_k = probe_k
        self.seed = seed
        self.max_new = max_new

    def _check_inputs(self, X) -> list[PairedSample]:
        if self.backbone is None or self.tokenizer is None:
            raise ConfigurationError("LayStyleAdapter needs a backbone and a tokenizer")
        X = list(X)
        if not X or not all(isinstance(s, PairedSample) for s in X):
            raise ConfigurationError("X must be a non-empty sequence of PairedSample")
        return X

    def fit(self, X, y=None):
        X = self._check_inputs(X)
        styles = list(self.styles) if self.styles is not None else sorted({s.style for s in X})
        n = 1 if self.scheme == "lora" else len(styles)
        spec = AttachSpec(rank=self.rank, n_branches=n, scheme=self.scheme, mode=self.mode,
                          patterns=tuple(self.patterns), styles=None if self.scheme == "lora" else styles,
                          seed=self.seed)
        layers = None if self.semantic_layers is None else list(self.semantic_layers)
        self.probe_report_ = None
        if layers is None and self.lam > 0:
            sel = SemanticLayerSelector(self.backbone, self.tokenizer, k=self.probe_k, seed=self.seed).fit(X)
            self.probe_report_ = sel.report_
            layers = sel.selected_layers_
        self.semantic_layers_ = layers or []
        self.model_ = attach(self.backbone.copy(), spec)
        config = TrainConfig(batch_size=self.batch_size, lr=self.learning_rate, epochs=self.epochs, lam=self.lam,
                             tau=self.tau, semantic_layers=layers, seed=self.seed)
        self.log_ = Trainer(self.model_, self.tokenizer, X, config).run()
        self.styles_ = styles
        return self

    def predict(self, X, recommender: Recommender | None = None) -> list[str]:
        """Greedy lay generations; the branch comes from ``recommender`` (oracle by default)."""
        check_is_fitted(self, "model_")
        X = self._check_inputs(X)
        return [r["generation"] for r in evaluate(self.model_, self.tokenizer, X, recommender, self.max_new).rows]

    def transform(self, X) -> np.ndarray:
        """Layer-averaged A projections of the expert texts, shape [n, rank]."""
        check_is_fitted(self, "model_")
        X = self._check_inputs(X)
        layers = self.semantic_layers_ or [0]
        branches = None
        if self.model_.mode == "switch":
            branches = [self.model_.branch_of(s.style) for s in X]
        pooled = pooled_layers(self.model_, [self.tokenizer.encode(s.expert) for s in X], layers, branches,
                               semantic_input=True)
        return np.mean([pooled[i] @ self.model_.semantic_a(l).data.T for i, l in enumerate(layers)], axis=0)

    def score(self, X, y=None) -> float:
        """Mean sentence BLEU of oracle-switched generations against the lay references."""
        check_is_fitted(self, "model_")
        X = self._check_inputs(X)
        return evaluate(self.model_, self.tokenizer, X, None, self.max_new).overall["bleu"]
