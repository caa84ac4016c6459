"""Branch selection policies: one-hot switches, softmax routers, recommenders.

A recommender answers "which lay-style should this expert text be rewritten
into?" through a synchronous query/answer boundary, so a simulated agent, an
oracle and an external process are interchangeable.
"""
from __future__ import annotations

import hashlib
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, RoutingError


def switch_alpha(style_index: int, n: int) -> np.ndarray:
    if not 0 <= style_index < n:
        raise RoutingError(f"style index {style_index} out of range for {n} branches")
    a = np.zeros(n)
    a[style_index] = 1.0
    return a


def router_alpha(gate, pooled_hidden) -> Tensor:
    """softmax(W h + b) for a :class:`~laylora.adapter.RouterGate`."""
    h = ad.as_tensor(pooled_hidden)
    if h.shape[-1] != gate.weight.shape[1]:
        raise ContractError(f"hidden size {h.shape[-1]} does not match gate {gate.weight.shape}")
    return gate(h)


# ---------------------------------------------------------------- recommenders


@dataclass(frozen=True)
class RecommendationQuery:
    expert: str
    candidates: tuple[str, ...]
    # Simulators and oracles read the ground truth; external agents never see it.
    true_style: str | None = None

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.expert.encode("utf-8")).hexdigest()


class Recommender(Protocol):
    def recommend(self, query: RecommendationQuery) -> str: ...


def _checked(answer: str, query: RecommendationQuery) -> str:
    if answer not in query.candidates:
        raise RoutingError(f"recommender answered {answer!r}, not one of {list(query.candidates)}")
    return answer


class OracleRecommender:
    """Always names the true style (the 100%-accurate manual setting)."""

    def recommend(self, query: RecommendationQuery) -> str:
        if query.true_style is None:
            raise RoutingError("oracle recommender needs the true style")
        return _checked(query.true_style, query)


@dataclass
class SimulatedAgent:
    """Names the true style with probability ``accuracy``, else a uniform wrong one.

    Every call consumes exactly two draws from the generator, so for a fixed
    seed the set of correctly answered queries at a lower accuracy is a
    subset of the set at a higher accuracy.
    """

    accuracy: float
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ConfigurationError(f"accuracy must lie in [0, 1], got {self.accuracy}")
        self.rng = np.random.default_rng(self.seed)

    def recommend_index(self, true_style: int, n: int) -> int:
        if self.accuracy < 1.0 and n < 2:
            raise ConfigurationError("a fallible agent needs at least two styles")
        if not 0 <= true_style < n:
            raise RoutingError(f"true style {true_style} out of range for {n} styles")
        u = self.rng.random()
        w = int(self.rng.integers(max(n - 1, 1)))
        if u < self.accuracy:
            return true_style
        return w if w < true_style else w + 1

    def recommend(self, query: RecommendationQuery) -> str:
        if query.true_style is None:
            raise RoutingError("simulated agent needs the true style")
        cands = list(query.candidates)
        idx = self.recommend_index(cands.index(query.true_style), len(cands))
        return cands[idx]


def recommend(agent: SimulatedAgent, true_style: int, n: int) -> int:
    return agent.recommend_index(true_style, n)


class ExecRecommender:
    """Line protocol over a child process's stdin/stdout.

    Each query is one line ``<sha256 of expert text>\\t<label>\\t<label>...``;
    the process answers with one label per line.
    """

    def __init__(self, command: str):
        self.command = command
        self._proc = subprocess.Popen(shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)

    def recommend(self, query: RecommendationQuery) -> str:
        line = "\t".join((query.digest,) + tuple(query.candidates))
        assert self._proc.stdin is not None and self._proc.stdout is not None
        self._proc.stdin.write(line + "\n")
        self._proc.stdin.flush()
        answer = self._proc.stdout.readline()
        if not answer:
            raise RoutingError(f"recommender process {self.command!r} closed its output")
        return _checked(answer.strip(), query)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()  # type: ignore[union-attr]
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_recommender(spec: str, seed: int = 0) -> Recommender:
    """Parse ``oracle``, ``sim:<p>`` or ``exec:<command>``."""
    if spec == "oracle":
        return OracleRecommender()
    if spec.startswith("sim:"):
        return SimulatedAgent(float(spec[4:]), seed=seed)
    if spec.startswith("exec:"):
        return ExecRecommender(spec[5:])
    raise ConfigurationError(f"unknown recommender {spec!r}; use oracle, sim:<p> or exec:<command>")


# ------------------------------------------------------------------- analysis


def confusion_matrix(predicted: Sequence[int], truth: Sequence[int], n: int) -> np.ndarray:
    """Counts with rows indexed by true style and columns by prediction."""
    p = np.asarray(predicted, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape:
        raise ContractError(f"{p.size} predictions for {t.size} labels")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n):
        raise ContractError(f"labels must lie in [0, {n})")
    out = np.zeros((n, n), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out
