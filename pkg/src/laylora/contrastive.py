"""Contrastive alignment of the shared down-projection and the training loop.

For every semantic layer l the anchor of a sample is ``A_l @ mean(acts[l])``
over its expert tokens, computed with the live (trainable) ``A_l``. The
targets are keys ``A_l' @ mean(acts[l])`` over its lay tokens, where ``A_l'``
is a value snapshot taken after the previous optimizer step, so keys never
carry gradient. Negatives are the keys of the other samples in the batch.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapter import AdaptedModel
from .autodiff import Tape, Tensor
from .checkpoint import load_arrays, save_arrays
from .data import EncodedPair, PairedSample, Tokenizer, encode_pair, pad_batch
from .errors import ConfigurationError, ContractError, RoutingError
from .model import sequence_loss
from .optim import AdamW, cosine_lr

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- losses


def contrastive_loss(anchor, positives, negatives, tau: float) -> Tensor:
    """``-log( sum_pos exp(sim/tau) / sum_all exp(sim/tau) )`` with cosine sim."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    pos = np.atleast_2d(positives.data if isinstance(positives, Tensor) else np.asarray(positives, dtype=float))
    if pos.size == 0:
        raise ContractError("contrastive_loss needs at least one positive")
    neg = negatives.data if isinstance(negatives, Tensor) else np.asarray(negatives, dtype=float)
    cands_list = [positives if isinstance(positives, Tensor) else Tensor(pos)]
    if neg.size:
        cands_list.append(negatives if isinstance(negatives, Tensor) else Tensor(np.atleast_2d(neg)))
    cands = ad.concat([ad.reshape(c, (-1, pos.shape[-1])) for c in cands_list], axis=0)
    sims = ad.cosine_similarity(ad.reshape(ad.as_tensor(anchor), (1, -1)), cands)
    logp = ad.log_softmax(ad.scale(sims, 1.0 / tau), axis=-1)
    n_pos = pos.shape[0]
    if n_pos == 1:
        return ad.scale(ad.take(logp, 0), -1.0)
    pos_mass = ad.sum_(ad.exp(ad.take(logp, slice(0, n_pos))))
    return ad.scale(ad.log(pos_mass), -1.0)


def batch_contrastive_loss(anchors: Tensor, keys: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE where key i is the positive of anchor i and the rest are negatives."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    keys = np.asarray(keys, dtype=np.float64)
    kn = np.linalg.norm(keys, axis=-1, keepdims=True)
    if np.any(kn == 0):
        raise ContractError("zero-norm contrastive key")
    an = ad.sqrt(ad.sum_(ad.mul(anchors, anchors), axis=-1, keepdims=True))
    unit = ad.mul(anchors, ad.reciprocal(an))
    sims = ad.matmul(unit, Tensor((keys / kn).T))
    logp = ad.log_softmax(ad.scale(sims, 1.0 / tau), axis=-1)
    B = keys.shape[0]
    diag = ad.take(logp, (np.arange(B), np.arange(B)))
    return ad.scale(ad.mean(diag), -1.0)


def composite_loss(lm: Tensor, contrastive_terms: Sequence[Tensor], lam: float) -> Tensor:
    """``lm + lam * mean(contrastive_terms)``."""
    if lam < 0:
        raise ConfigurationError(f"contrastive weight must be >= 0, got {lam}")
    if lam == 0 or not contrastive_terms:
        return lm
    total = contrastive_terms[0]
    for t in contrastive_terms[1:]:
        total = ad.add(total, t)
    return ad.add(lm, ad.scale(total, lam / len(contrastive_terms)))


# --------------------------------------------------------------------- keys


@dataclass
class CachedKeyDictionary:
    """sample id -> per-layer keys ([len(layers), r]) encoded by a stale A."""

    layers: list[int]
    keys: dict[str, np.ndarray]
    snapshot_step: int

    def key(self, sample_id: str) -> np.ndarray:
        """The layer-averaged r-vector of one sample."""
        return self.keys[sample_id].mean(axis=0)

    def layer_keys(self, sample_ids: Sequence[str], layer: int) -> np.ndarray:
        li = self.layers.index(layer)
        return np.stack([self.keys[s][li] for s in sample_ids])


def pooled_layers(model, token_lists: Sequence[Sequence[int]], layers: Sequence[int], branch=None,
                  semantic_input: bool = False) -> np.ndarray:
    """Mean-pooled ``acts[l]`` for each token list, shape [len(layers), n, d]. No tape.

    With ``semantic_input`` the hidden states first pass through the layer norm
    that precedes the semantic A (see :meth:`AdaptedModel.semantic_input`).
    """
    n = len(token_lists)
    out = np.zeros((len(layers), n, model.config.d_model))
    lens = np.array([len(t) for t in token_lists])
    T = int(lens.max())
    ids = np.zeros((n, T), dtype=np.int64)
    for i, t in enumerate(token_lists):
        ids[i, : len(t)] = t
    kw = {} if branch is None else {"branch": np.asarray(branch)}
    if isinstance(model, AdaptedModel):
        kw["pool_len"] = lens
    _, acts = model.forward(ids, **kw)
    mask = (np.arange(T)[None, :] < lens[:, None]).astype(np.float64)
    for li, layer in enumerate(layers):
        h = model.semantic_input(layer, acts[layer]).data if semantic_input else acts[layer].data
        out[li] = (h * mask[..., None]).sum(axis=1) / lens[:, None]
    return out


def refresh_keys(A_snapshot: Mapping[int, np.ndarray], lay_texts: Mapping[str, Sequence[int]], model,
                 layers: Sequence[int], branches: Mapping[str, int] | None = None,
                 snapshot_step: int = -1) -> CachedKeyDictionary:
    """Encode lay token sequences into keys with a frozen copy of A.

    ``A_snapshot[l]`` must be a value copy, never the live trainable array.
    """
    if not layers:
        raise ConfigurationError("the semantic layer set is empty")
    if isinstance(model, AdaptedModel):
        for layer in layers:
            live = model.semantic_a(layer).data
            if np.shares_memory(live, A_snapshot[layer]):
                raise ContractError(f"A snapshot for layer {layer} aliases the live parameter")
    ids = list(lay_texts)
    br = None if branches is None else [branches[i] for i in ids]
    pooled = pooled_layers(model, [lay_texts[i] for i in ids], layers, br, semantic_input=True)
    keys = np.stack([pooled[li] @ np.asarray(A_snapshot[layer]).T for li, layer in enumerate(layers)], axis=1)
    return CachedKeyDictionary(list(layers), dict(zip(ids, keys)), snapshot_step)


# ------------------------------------------------------------------ training


def composite_objective(model: AdaptedModel, tokens, weights, expert_lens, branch, keys: Mapping[int, np.ndarray] | None,
                        lam: float, tau: float) -> tuple[Tensor, Tensor, dict[int, Tensor]]:
    """One batch's ``(composite, lm, {layer: contrastive})`` on the active tape.

    Anchors pool the expert positions of the training forward at each layer in
    ``keys``; ``keys[l]`` holds the stale lay keys of the same samples.
    """
    logits, acts = model.forward(tokens, branch=branch, pool_len=expert_lens)
    lm = sequence_loss(logits, tokens, weights)
    terms: dict[int, Tensor] = {}
    if lam > 0 and keys:
        T = tokens.shape[1]
        mask = (np.arange(T)[None, :] < np.asarray(expert_lens)[:, None]).astype(np.float64)
        for layer, layer_keys in keys.items():
            pooled = ad.mean_pool(model.semantic_input(layer, acts[layer]), mask)
            anchors = ad.linear(pooled, model.semantic_a(layer))
            terms[layer] = batch_contrastive_loss(anchors, layer_keys, tau)
    return composite_loss(lm, list(terms.values()), lam), lm, terms



@dataclass
class TrainConfig:
    """Training hyper-parameters.

    ``lam`` (contrastive weight) and ``tau`` default to 0.5 as in the reference
    3B setting; ``lr`` and ``batch_size`` are desk-scale values.
    """

    batch_size: int = 16
    lr: float = 1e-2
    epochs: int = 5
    steps: int | None = None
    lam: float = 0.5
    tau: float = 0.5
    semantic_layers: list[int] | None = None
    seed: int = 0
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    layers: list[int]
    n_branches: int
    rows: list[dict] = field(default_factory=list)

    def lm(self) -> np.ndarray:
        return np.array([r["lm_loss"] for r in self.rows])

    def composite(self) -> np.ndarray:
        return np.array([r["composite"] for r in self.rows])

    def to_tsv(self) -> str:
        head = ["step", "lm_loss"] + [f"contrastive_l{l}" for l in self.layers] + ["composite", "branch_hist", "fresh_keys"]
        lines = ["\t".join(head)]
        for r in self.rows:
            vals = [str(r["step"]), f"{r['lm_loss']:.10f}"]
            vals += [f"{r['contrastive'].get(l, float('nan')):.10f}" for l in self.layers]
            vals += [f"{r['composite']:.10f}", "|".join(str(c) for c in r["branch_hist"]), str(int(r["fresh_keys"]))]
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


class Trainer:
    """Adapter-only training with the composite LM + contrastive objective.

    The batch schedule is fixed by ``config.seed`` up front, so resuming from
    :meth:`save_state` at step k replays exactly the remaining batches.
    """

    def __init__(self, model: AdaptedModel, tokenizer: Tokenizer, corpus: Sequence[PairedSample],
                 config: TrainConfig):
        if not corpus:
            raise ConfigurationError("cannot train on an empty corpus")
        self.model = model
        self.tok = tokenizer
        self.corpus = list(corpus)
        self.config = config
        self.layers = list(config.semantic_layers or [])
        if config.lam > 0 and not self.layers:
            raise ConfigurationError("contrastive weight > 0 needs a semantic layer set (run probing first)")
        if config.lam > 0 and model.spec.scheme == "multi_lora":
            raise ConfigurationError("the contrastive constraint needs a shared A (scheme lora or magical)")
        for layer in self.layers:
            model.semantic_a(layer)
        max_seq = model.config.max_seq
        self.encoded = [encode_pair(tokenizer, s.expert, s.lay, max_seq) for s in self.corpus]
        self.lay_ids = {s.id: tokenizer.encode(s.lay) or [tokenizer.vocab["<unk>"]] for s in self.corpus}
        if model.mode == "switch":
            bad = sorted({s.id for s in self.corpus if not _has_branch(model, s.style)})
            if bad:
                raise RoutingError(f"samples whose style has no branch: {bad[:5]}")
        self.branch = np.array([model.branch_of(s.style) if model.mode == "switch" else 0 for s in self.corpus])
        self.schedule = self._schedule()
        self.params = model.trainable_parameters()
        self.opt = AdamW(self.params, lr=config.lr, weight_decay=config.weight_decay)
        self.step_index = 0
        self.keys: CachedKeyDictionary | None = None
        self.log = TrainLog(self.layers, model.n_branches)

    def _schedule(self) -> list[np.ndarray]:
        c = self.config
        rng = np.random.default_rng(c.seed)
        n = len(self.corpus)
        per_epoch = math.ceil(n / c.batch_size)
        total = c.steps if c.steps is not None else c.epochs * per_epoch
        out: list[np.ndarray] = []
        while len(out) < total:
            perm = rng.permutation(n)
            out += [perm[i : i + c.batch_size] for i in range(0, n, c.batch_size)]
        return out[:total]

    @property
    def total_steps(self) -> int:
        return len(self.schedule)

    def _snapshot(self) -> dict[int, np.ndarray]:
        return {layer: self.model.semantic_a(layer).data.copy() for layer in self.layers}

    def _keys_for(self, batch: np.ndarray, snapshot_step: int) -> CachedKeyDictionary:
        ids = [self.corpus[i].id for i in batch]
        return refresh_keys(self._snapshot(), {i: self.lay_ids[i] for i in ids}, self.model, self.layers,
                            {self.corpus[i].id: int(self.branch[i]) for i in batch}, snapshot_step)

    def step(self) -> dict:
        c = self.config
        t = self.step_index
        batch = self.schedule[t]
        use_contrast = c.lam > 0
        fresh = False
        if use_contrast and (self.keys is None or self.keys.snapshot_step != t - 1):
            # First step (or resumed without cached keys): encode with the current A.
            self.keys = self._keys_for(batch, t - 1)
            fresh = t == 0
        tokens, weights, expert_lens = pad_batch([self.encoded[i] for i in batch])
        branch = self.branch[batch]
        keys = None
        if use_contrast:
            ids = [self.corpus[i].id for i in batch]
            keys = {layer: self.keys.layer_keys(ids, layer) for layer in self.layers}
        with Tape() as tape:
            loss, lm, terms = composite_objective(self.model, tokens, weights, expert_lens, branch, keys,
                                                  c.lam, c.tau)
            grads = tape.backward(loss)
        self.opt.step(grads, lr=cosine_lr(t, self.total_steps, c.lr, c.warmup_ratio))
        self.step_index += 1
        if use_contrast and self.step_index < self.total_steps:
            # Keys for the next batch are encoded with the A this step produced.
            self.keys = self._keys_for(self.schedule[self.step_index], t)
        if self.model.mode == "switch":
            hist = np.bincount(branch, minlength=self.model.n_branches)
        else:
            alpha = self.model.router_alpha(tokens, pool_len=expert_lens)
            hist = np.bincount(alpha.argmax(axis=1), minlength=self.model.n_branches)
        row = {"step": t, "lm_loss": lm.item(), "contrastive": {k: v.item() for k, v in terms.items()},
               "composite": loss.item(), "branch_hist": hist.tolist(), "fresh_keys": fresh,
               "grads": grads}
        self.log.rows.append({k: v for k, v in row.items() if k != "grads"})
        return row

    def run(self, until: int | None = None) -> TrainLog:
        stop = self.total_steps if until is None else min(until, self.total_steps)
        while self.step_index < stop:
            self.step()
        return self.log

    # ---------------------------------------------------------------- resume

    def save_state(self, path) -> None:
        """Exact (float64) snapshot of adapter weights, optimizer moments and step."""
        arrays = dict(self.model.state_arrays())
        for k in self.params:
            arrays[f"opt.m.{k}"] = self.opt.m[k]
            arrays[f"opt.v.{k}"] = self.opt.v[k]
        meta = {"kind": "train_state", "step": self.step_index, "opt_t": self.opt.t,
                "config": self.config.to_dict(), "attach": self.model.spec.to_dict()}
        save_arrays(path, arrays, meta, dtype="float64")
        (Path(path) / "log.json").write_text(json.dumps(self.log.rows) + "\n")

    def load_state(self, path) -> None:
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "train_state":
            raise ConfigurationError(f"{path} is not a training-state checkpoint")
        self.model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
        self.opt.load_state({"t": meta["opt_t"],
                             "m": {k: arrays[f"opt.m.{k}"] for k in self.params},
                             "v": {k: arrays[f"opt.v.{k}"] for k in self.params}})
        self.step_index = int(meta["step"])
        self.log.rows = json.loads((Path(path) / "log.json").read_text())
        for r in self.log.rows:
            r["contrastive"] = {int(k): v for k, v in r["contrastive"].items()}
        self.keys = None
        if self.config.lam > 0 and self.step_index < self.total_steps:
            self.keys = self._keys_for(self.schedule[self.step_index], self.step_index - 1)


def _has_branch(model: AdaptedModel, style: str) -> bool:
    try:
        model.branch_of(style)
    except RoutingError:
        return False
    return True


def train(model: AdaptedModel, tokenizer: Tokenizer, corpus: Sequence[PairedSample], config: TrainConfig) -> TrainLog:
    return Trainer(model, tokenizer, corpus, config).run()


# ----------------------------------------------------------------- analysis


def semantic_similarity(model: AdaptedModel, tokenizer: Tokenizer, corpus: Sequence[PairedSample],
                        layers: Sequence[int], branches: Sequence[int] | None = None) -> np.ndarray:
    """Cosine(A_l expert, A_l lay) per sample, averaged over ``layers``."""
    ex = [tokenizer.encode(s.expert) for s in corpus]
    lay = [tokenizer.encode(s.lay) for s in corpus]
    if branches is None and model.mode == "switch":
        branches = [model.branch_of(s.style) for s in corpus]
    pe = pooled_layers(model, ex, layers, branches, semantic_input=True)
    pl = pooled_layers(model, lay, layers, branches, semantic_input=True)
    sims = np.zeros(len(corpus))
    for li, layer in enumerate(layers):
        A = model.semantic_a(layer).data
        za, zb = pe[li] @ A.T, pl[li] @ A.T
        sims += (za * zb).sum(1) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1))
    return sims / len(layers)
