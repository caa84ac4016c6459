"""Desk-scale experiment harnesses: backbone pretraining, evaluation, sweeps, analyses."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapter import AdaptedModel, AttachSpec, attach, count_sites, param_count
from .contrastive import TrainConfig, Trainer, pooled_layers, semantic_similarity
from .data import (AGENTS, DEFAULT_STYLES, EOS_ID, NUMBERS, OUTCOMES, POPULATIONS, RARE_TERMS, RESERVED, UNITS,
                   VERBS, PairedSample, SynthSpec, Tokenizer, copy_corpus, encode_pair, pad_batch, split,
                   synth_corpus)
from .errors import ParityError, RoutingError
from .metrics import METRIC_NAMES, aggregate, cross_correlation, score_pair, semantic_subspace
from .model import ModelConfig, Transformer, generate_batch, train_full
from .probing import ProbeReport, SemanticLayerSelector
from .switch import OracleRecommender, RecommendationQuery, Recommender, SimulatedAgent, confusion_matrix

log = logging.getLogger(__name__)

STYLE_NAMES = tuple(s.name for s in DEFAULT_STYLES)


def synthetic_tokenizer() -> Tokenizer:
    """Fixed vocabulary covering every word the synthetic generators can emit."""
    words = set(RARE_TERMS) | set(RARE_TERMS.values()) | set(AGENTS) | set(VERBS) | set(POPULATIONS)
    words |= set(OUTCOMES) | set(NUMBERS) | set(UNITS) | {"the", "in", "was", "means", "."}
    return Tokenizer.from_tokens(list(RESERVED) + sorted(words))


# ------------------------------------------------------------------- setup


@dataclass
class PretrainConfig:
    copy_samples: int = 400
    steps: int = 300
    lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0


DESK_MODEL = dict(n_layers=4, d_model=32, n_heads=2, d_ff=64, max_seq=48)


def identity_pairs(corpus: Sequence[PairedSample]) -> list[PairedSample]:
    """Copy-task pairs built from both sides of a paired corpus."""
    out = []
    for s in corpus:
        for side in ("expert", "lay"):
            text = getattr(s, side)
            out.append(PairedSample(f"{s.id}-{side}", text, text, "copy"))
    return out


def pretrain_backbone(tok: Tokenizer, model_cfg: ModelConfig, cfg: PretrainConfig,
                      corpus: Sequence[PairedSample] | None = None) -> Transformer:
    """Teach a fresh transformer to reproduce its input after ``<sep>`` (frozen on return).

    ``corpus`` holds copy pairs; by default they come from the synthetic generator.
    """
    corpus = list(corpus) if corpus is not None else copy_corpus(cfg.copy_samples, cfg.seed)
    enc = [encode_pair(tok, s.expert, s.lay, model_cfg.max_seq) for s in corpus]
    rng = np.random.default_rng(cfg.seed)

    def batches():
        while True:
            idx = rng.choice(len(enc), size=min(cfg.batch_size, len(enc)), replace=False)
            tokens, weights, _ = pad_batch([enc[i] for i in idx])
            yield tokens, weights

    model = Transformer(model_cfg)
    train_full(model, batches(), cfg.steps, lr=cfg.lr)
    return model


@dataclass
class DeskSetup:
    """Everything a harness needs besides the seed."""

    samples_per_style: int = 60
    split_ratio: float = 0.8
    rank: int = 4
    styles: tuple[str, ...] = STYLE_NAMES
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=1e-2))
    max_new: int = 32
    probe_steps: int = 200

    @property
    def n_branches(self) -> int:
        return len(self.styles)

    def corpus(self, seed: int) -> tuple[list[PairedSample], list[PairedSample]]:
        return split(synth_corpus(SynthSpec(samples_per_style=self.samples_per_style, seed=seed)),
                     self.split_ratio, seed)


# -------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    rows: list[dict]
    overall: dict[str, float]
    per_style: dict[str, dict[str, float]]
    confusion: np.ndarray | None

    def table(self) -> list[dict]:
        out = [{"style": s, "n": sum(r["style"] == s for r in self.rows), **m} for s, m in self.per_style.items()]
        out.append({"style": "all", "n": len(self.rows), **self.overall})
        return out


def choose_branches(model: AdaptedModel, samples: Sequence[PairedSample],
                    recommender: Recommender | None) -> tuple[np.ndarray | None, list[str]]:
    """Branch per sample (None under router control) and the chosen style labels."""
    if model.mode == "router":
        return None, ["<router>"] * len(samples)
    if model.n_branches == 1 and model.spec.styles is None:
        return np.zeros(len(samples), dtype=np.int64), ["<shared>"] * len(samples)
    missing = [s.id for s in samples if s.style not in model.styles]
    if missing:
        raise RoutingError(f"samples whose style has no branch: {missing[:10]}")
    rec = recommender or OracleRecommender()
    chosen = [rec.recommend(RecommendationQuery(s.expert, tuple(model.styles), s.style)) for s in samples]
    return np.array([model.branch_of(c) for c in chosen], dtype=np.int64), chosen


def generate(model: AdaptedModel, tok: Tokenizer, samples: Sequence[PairedSample], branches, max_new: int) -> list[str]:
    prompts = [encode_pair(tok, s.expert, None, model.config.max_seq - 1).prompt for s in samples]
    outs = generate_batch(model, prompts, max_new, EOS_ID, branch=branches)
    return [tok.decode(o[len(p):]) for o, p in zip(outs, prompts)]


def evaluate(model: AdaptedModel, tok: Tokenizer, samples: Sequence[PairedSample],
             recommender: Recommender | None = None, max_new: int = 32) -> EvalResult:
    """Greedy generation with recommender-driven switching, scored per style and overall."""
    branches, chosen = choose_branches(model, samples, recommender)
    gens = generate(model, tok, samples, branches, max_new)
    rows = []
    for s, c, g in zip(samples, chosen, gens):
        rows.append({"id": s.id, "style": s.style, "chosen": c, "generation": g, "reference": s.lay,
                     **score_pair(g, s.lay)})
    styles = sorted({s.style for s in samples})
    per_style = {st: aggregate([r for r in rows if r["style"] == st]) for st in styles}
    conf = None
    if branches is not None and model.n_branches > 1:
        conf = confusion_matrix(branches, [model.branch_of(s.style) for s in samples], model.n_branches)
    elif model.mode == "router" and "global" in model.gates:
        prompts = [encode_pair(tok, s.expert, None, model.config.max_seq - 1) for s in samples]
        tokens, _, lens = pad_batch(prompts)
        pred = model.router_alpha(tokens, pool_len=lens).argmax(axis=1)
        truth = [model.branch_of(s.style) if s.style in model.styles else 0 for s in samples]
        conf = confusion_matrix(pred, truth, model.n_branches)
    return EvalResult(rows, aggregate(rows), per_style, conf)


# ---------------------------------------------------------------- training


def train_adapter(backbone: Transformer, tok: Tokenizer, train_set: Sequence[PairedSample], spec: AttachSpec,
                  config: TrainConfig) -> tuple[AdaptedModel, Trainer]:
    model = attach(backbone.copy(), spec)
    trainer = Trainer(model, tok, train_set, config)
    trainer.run()
    return model, trainer


def multi_spec(setup: DeskSetup, seed: int, scheme: str = "multi_lora", mode: str = "switch") -> AttachSpec:
    return AttachSpec(rank=setup.rank, n_branches=setup.n_branches, scheme=scheme, mode=mode,
                      styles=tuple(setup.styles), seed=seed)


def single_spec(setup: DeskSetup, seed: int) -> AttachSpec:
    """One LoRA whose rank equals the multi-branch configuration's total rank."""
    return AttachSpec(rank=setup.rank * setup.n_branches, n_branches=1, scheme="lora", seed=seed)


def check_parity(config: ModelConfig, a: AttachSpec, b: AttachSpec) -> tuple[int, int]:
    """Trainable parameter counts of two attachments; raises if they differ."""
    def total(spec):
        return sum(param_count(row.d, row.k, spec.rank, spec.n_branches, 1, spec.scheme)
                   for row in count_sites(config, spec))

    na, nb = total(a), total(b)
    if na != nb:
        raise ParityError(f"parameter budgets differ: {a.scheme} r={a.rank} has {na}, {b.scheme} r={b.rank} has {nb}")
    return na, nb


@dataclass
class SchemeResult:
    seed: int
    params: int
    multi: EvalResult
    single: EvalResult
    multi_model: AdaptedModel
    single_model: AdaptedModel
    test: list[PairedSample]


def scheme_comparison(backbone: Transformer, tok: Tokenizer, setup: DeskSetup, seed: int,
                      corpus: tuple[list[PairedSample], list[PairedSample]] | None = None) -> SchemeResult:
    """Oracle-switched multi-branch adapter vs. one LoRA with the same parameter budget."""
    train_set, test = corpus or setup.corpus(seed)
    ms, ss = multi_spec(setup, seed), single_spec(setup, seed)
    n, _ = check_parity(backbone.config, ms, ss)
    cfg = replace(setup.train, lam=0.0, seed=seed, semantic_layers=None)
    multi, _ = train_adapter(backbone, tok, train_set, ms, cfg)
    single, _ = train_adapter(backbone, tok, train_set, ss, cfg)
    return SchemeResult(seed, n, evaluate(multi, tok, test, OracleRecommender(), setup.max_new),
                        evaluate(single, tok, test, None, setup.max_new), multi, single, test)


def probe_layers(backbone: Transformer, tok: Tokenizer, corpus: Sequence[PairedSample], seed: int,
                 k: int | None = None, n_steps: int = 200) -> ProbeReport:
    return SemanticLayerSelector(backbone, tok, k=k, seed=seed, n_steps=n_steps).fit(corpus).report_


@dataclass
class ConstraintResult:
    seed: int
    layers: list[int]
    with_constraint: float
    without_constraint: float


def constraint_comparison(backbone: Transformer, tok: Tokenizer, setup: DeskSetup, seed: int,
                          lam: float = 0.5, layers: Sequence[int] | None = None) -> ConstraintResult:
    """Held-out A-projected expert/lay cosine with and without the contrastive term."""
    train_set, test = setup.corpus(seed)
    if layers is None:
        layers = probe_layers(backbone, tok, train_set, seed, n_steps=setup.probe_steps).selected
    spec = multi_spec(setup, seed, scheme="magical")
    sims = {}
    for weight in (lam, 0.0):
        cfg = replace(setup.train, lam=weight, seed=seed, semantic_layers=list(layers))
        model, _ = train_adapter(backbone, tok, train_set, spec, cfg)
        sims[weight] = float(semantic_similarity(model, tok, test, layers).mean())
    return ConstraintResult(seed, list(layers), sims[lam], sims[0.0])


def recommender_sweep(model: AdaptedModel, tok: Tokenizer, test: Sequence[PairedSample],
                      accuracies: Sequence[float], seed: int, max_new: int = 32) -> list[dict]:
    """One row per accuracy; every row uses the same agent seed."""
    rows = []
    for p in accuracies:
        res = evaluate(model, tok, test, SimulatedAgent(p, seed=seed), max_new)
        rows.append({"accuracy": p, "seed": seed, **res.overall})
    return rows


def rank_sweep(backbone: Transformer, tok: Tokenizer, setup: DeskSetup, ranks: Sequence[int], seed: int,
               corpus: tuple[list[PairedSample], list[PairedSample]] | None = None) -> list[dict]:
    """Final training loss and test metrics per branch rank (trend reported, not asserted)."""
    train_set, test = corpus or setup.corpus(seed)
    rows = []
    for r in ranks:
        s = replace(setup, rank=r)
        model, trainer = train_adapter(backbone, tok, train_set, multi_spec(s, seed),
                                       replace(setup.train, lam=0.0, seed=seed, semantic_layers=None))
        res = evaluate(model, tok, test, OracleRecommender(), setup.max_new)
        tail = trainer.log.lm()[-max(1, len(trainer.log.rows) // 10):]
        rows.append({"rank": r, "seed": seed, "params": model.n_trainable(), "final_lm_loss": float(tail.mean()),
                     **res.overall})
    return rows


# ----------------------------------------------------------------- analysis


@dataclass
class AnalysisBundle:
    layer: int
    points: list[tuple[float, float, str]]
    cross_correlation: np.ndarray
    confusion: np.ndarray | None
    mean_cosine: float
    comparison_cosine: float | None = None


def kde_points(model: AdaptedModel, tok: Tokenizer, experts: Sequence[str], lays: Sequence[str], layer: int,
               branches=None, tag: str = "") -> list[tuple[float, float, str]]:
    e = pooled_layers(model, [tok.encode(t) or [RESERVED.index("<unk>")] for t in experts], [layer], branches)[0]
    l = pooled_layers(model, [tok.encode(t) or [RESERVED.index("<unk>")] for t in lays], [layer], branches)[0]
    proj = semantic_subspace(e, l)
    pts = [(float(x), float(y), f"{tag}expert") for x, y in proj.expert_points]
    pts += [(float(x), float(y), f"{tag}lay") for x, y in proj.lay_points]
    return pts


def analyze(model: AdaptedModel, tok: Tokenizer, samples: Sequence[PairedSample], layers: Sequence[int],
            recommender: Recommender | None = None, comparison: AdaptedModel | None = None,
            max_new: int = 32) -> AnalysisBundle:
    """Subspace point clouds, A-projected cross-correlation and the branch confusion matrix."""
    res = evaluate(model, tok, samples, recommender, max_new)
    branches = None
    if model.mode == "switch":
        branches = [model.branch_of(s.style) for s in samples]
    layer = layers[0]
    gens = [r["generation"] for r in res.rows]
    points = kde_points(model, tok, [s.expert for s in samples], gens, layer, branches)
    e = pooled_layers(model, [tok.encode(s.expert) for s in samples], [layer], branches)[0]
    l = pooled_layers(model, [tok.encode(s.lay) for s in samples], [layer], branches)[0]
    A = model.semantic_a(layer).data
    cc = cross_correlation(e @ A.T, l @ A.T)
    cos = float(semantic_similarity(model, tok, samples, layers, branches).mean())
    comp = None
    if comparison is not None:
        cgens = [r["generation"] for r in evaluate(comparison, tok, samples, recommender, max_new).rows]
        points += kde_points(comparison, tok, [s.expert for s in samples], cgens, layer, branches, "baseline_")
        comp = float(semantic_similarity(comparison, tok, samples, layers, branches).mean())
    else:
        log.warning("analyze: no comparison checkpoint; emitting the single-sided analysis")
    return AnalysisBundle(layer, points, cc, res.confusion, cos, comp)


def setup_dict(setup: DeskSetup) -> dict:
    return asdict(setup)
