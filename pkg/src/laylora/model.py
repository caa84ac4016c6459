"""Small pre-norm decoder-only transformer with per-layer activation taps.

Weights are stored as ``[out, in]`` matrices so that a linear site computes
``y = W0 x``. Every linear layer inside a block is a named *site*
(``blocks.{i}.attn.{q,k,v,o}``, ``blocks.{i}.ff.{up,down}``) that an adapter
can wrap.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_arrays, save_arrays
from .errors import ConfigurationError, ContractError
from .optim import AdamW, cosine_lr

SITE_KINDS = ("q", "k", "v", "o", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 64
    seed: int = 0

    def __post_init__(self):
        for field_name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_seq"):
            if getattr(self, field_name) < 1:
                raise ConfigurationError(f"{field_name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def site_name(layer: int, kind: str) -> str:
    group = "attn" if kind in ("q", "k", "v", "o") else "ff"
    return f"blocks.{layer}.{group}.{kind}"


def site_shape(config: ModelConfig, kind: str) -> tuple[int, int]:
    """(d_out, d_in) of a site."""
    if kind == "up":
        return config.d_ff, config.d_model
    if kind == "down":
        return config.d_model, config.d_ff
    return config.d_model, config.d_model


class Transformer:
    """Decoder-only language model.

    ``forward`` accepts a 1-D id sequence or a right-padded ``[batch, seq]``
    array. Padding on the right never influences earlier positions because
    attention is causal.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        c = self.config
        rng = np.random.default_rng(c.seed)

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        p = {
            "tok_emb": normal(c.vocab_size, c.d_model),
            "pos_emb": normal(c.max_seq, c.d_model),
        }
        for i in range(c.n_layers):
            p[f"blocks.{i}.ln1.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
            p[f"blocks.{i}.ln1.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
            for kind in ("q", "k", "v", "o"):
                p[site_name(i, kind)] = normal(c.d_model, c.d_model)
            p[f"blocks.{i}.ln2.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
            p[f"blocks.{i}.ln2.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
            p[site_name(i, "up")] = normal(c.d_ff, c.d_model)
            p[f"blocks.{i}.ff.up_b"] = Tensor(np.zeros(c.d_ff), requires_grad=True)
            p[site_name(i, "down")] = normal(c.d_model, c.d_ff)
            p[f"blocks.{i}.ff.down_b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
        p["ln_f.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
        p["ln_f.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
        p["unembed"] = normal(c.vocab_size, c.d_model)
        for name, t in p.items():
            t.name = name
        return p

    # ------------------------------------------------------------------ state

    def freeze(self) -> "Transformer":
        for t in self.params.values():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "Transformer":
        for t in self.params.values():
            t.requires_grad = True
        return self

    def copy(self) -> "Transformer":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return Transformer(self.config, params)

    def save(self, path, dtype: str = "float32"):
        meta = {"kind": "transformer", "config": asdict(self.config)}
        return save_arrays(path, {k: v.data for k, v in self.params.items()}, meta, dtype)

    @classmethod
    def load(cls, path) -> "Transformer":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "transformer":
            raise ConfigurationError(f"{path} does not hold a transformer checkpoint")
        config = ModelConfig(**meta["config"])
        params = {k: Tensor(v, requires_grad=False, name=k) for k, v in arrays.items()}
        return cls(config, params)

    # ---------------------------------------------------------------- forward

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
            raise ContractError(f"tokens must be a non-empty 1-D or 2-D id array, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ContractError(f"token id out of vocabulary range [0, {self.config.vocab_size})")
        if ids.shape[-1] > self.config.max_seq:
            raise ContractError(f"sequence length {ids.shape[-1]} exceeds max_seq={self.config.max_seq}")
        return ids

    def _site(self, name: str, x: Tensor, adapter, alpha) -> Tensor:
        W = self.params[name]
        if adapter is not None:
            site = adapter.sites.get(name)
            if site is not None:
                return site.forward(x, W, adapter.site_alpha(name, x, alpha))
        return ad.linear(x, W)

    def forward(self, tokens, adapter=None, branch=None, alpha=None, pool_len=None):
        """Return ``(logits, acts)``.

        ``acts[0]`` is the embedding output and ``acts[l]`` the residual stream
        entering block ``l`` (``acts[n_layers]`` leaves the last block). With an ``adapter`` attached, ``branch`` (one style
        index per sequence) or ``alpha`` ([batch, N] weights) control the
        branches; router-mode adapters compute alpha themselves from
        ``acts[0]`` pooled over the first ``pool_len`` positions (the expert
        prompt; all positions when None).
        """
        ids = self._check_tokens(tokens)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        B, T = ids.shape
        c = self.config
        p = self.params

        x = ad.add(ad.embedding(p["tok_emb"], ids), ad.take(p["pos_emb"], slice(0, T)))
        acts = [x]
        if adapter is not None:
            alpha = adapter.resolve_alpha(x, branch=branch, alpha=alpha, pool_len=pool_len)

        mask = np.triu(np.full((T, T), -np.inf), k=1)
        scale = 1.0 / np.sqrt(c.head_dim)
        for i in range(c.n_layers):
            h = ad.layer_norm(x, p[f"blocks.{i}.ln1.g"], p[f"blocks.{i}.ln1.b"])
            q = self._site(site_name(i, "q"), h, adapter, alpha)
            k = self._site(site_name(i, "k"), h, adapter, alpha)
            v = self._site(site_name(i, "v"), h, adapter, alpha)
            q, k, v = (ad.transpose(ad.reshape(t, (B, T, c.n_heads, c.head_dim)), (0, 2, 1, 3)) for t in (q, k, v))
            scores = ad.add(ad.scale(ad.matmul(q, ad.swap_last(k)), scale), mask)
            att = ad.matmul(ad.softmax(scores, axis=-1), v)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, c.d_model))
            x = ad.add(x, self._site(site_name(i, "o"), att, adapter, alpha))

            h = ad.layer_norm(x, p[f"blocks.{i}.ln2.g"], p[f"blocks.{i}.ln2.b"])
            u = ad.gelu(ad.add(self._site(site_name(i, "up"), h, adapter, alpha), p[f"blocks.{i}.ff.up_b"]))
            x = ad.add(x, ad.add(self._site(site_name(i, "down"), u, adapter, alpha), p[f"blocks.{i}.ff.down_b"]))
            acts.append(x)

        h = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = ad.linear(h, p["unembed"])
        if squeeze:
            logits = ad.reshape(logits, logits.shape[1:])
            acts = [ad.reshape(a, a.shape[1:]) for a in acts]
        return logits, acts

    __call__ = forward


def lm_loss(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean next-token cross-entropy.

    Convention: ``logits[t]`` predicts ``targets[t]``; callers pass
    ``targets = tokens[1:]`` against ``logits[:-1]`` (or use
    :func:`sequence_loss`). ``weights`` masks positions (0 = ignored).
    """
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise ContractError(f"targets shape {t.shape} does not match logits {logits.shape[:-1]}")
    return ad.cross_entropy(logits, t, weights)


def sequence_loss(logits: Tensor, tokens, weights=None) -> Tensor:
    """Teacher-forced loss where position t predicts token t+1.

    ``weights[..., t]`` weighs the prediction *of* token t (t >= 1).
    """
    ids = np.asarray(tokens)
    shifted = ad.take(logits, (Ellipsis, slice(0, ids.shape[-1] - 1), slice(None)))
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[..., 1:]
    return lm_loss(shifted, ids[..., 1:], w)


def generate_greedy(model, prompt: Sequence[int], max_new: int, eos_id: int | None = None, **forward_kw) -> list[int]:
    """Argmax decoding. The returned list includes the prompt (and EOS if emitted)."""
    seq = [int(t) for t in prompt]
    if not seq:
        raise ContractError("prompt must be non-empty")
    cfg = model.config if hasattr(model, "config") else model.base.config
    for _ in range(max_new):
        if len(seq) >= cfg.max_seq:
            break
        logits, _ = model.forward(seq, **forward_kw)
        nxt = int(np.argmax(logits.data[-1]))
        seq.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return seq


def generate_batch(model, prompts: Sequence[Sequence[int]], max_new: int, eos_id: int | None = None,
                   branch=None, pad_id: int = 0, **forward_kw) -> list[list[int]]:
    """Greedy decoding for many prompts; prompts of equal length share a forward.

    Gives the same result as calling :func:`generate_greedy` per prompt.
    """
    cfg = model.config if hasattr(model, "config") else model.base.config
    branch = None if branch is None else np.asarray(branch)
    out: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    for plen, idx in sorted(groups.items()):
        seqs = np.array([list(prompts[i]) for i in idx], dtype=np.int64)
        done = np.zeros(len(idx), dtype=bool)
        lengths = np.full(len(idx), plen)
        buf = np.full((len(idx), min(plen + max_new, cfg.max_seq)), pad_id, dtype=np.int64)
        buf[:, :plen] = seqs
        for step in range(max_new):
            cur = plen + step
            if cur >= cfg.max_seq or done.all():
                break
            active = np.flatnonzero(~done)
            kw = dict(forward_kw)
            if branch is not None:
                kw["branch"] = branch[np.asarray(idx)[active]]
            if getattr(model, "mode", None) == "router":
                kw.setdefault("pool_len", plen - 1)  # route on the expert tokens, not <sep>
            logits, _ = model.forward(buf[active, :cur], **kw)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            buf[active, cur] = nxt
            lengths[active] = cur + 1
            if eos_id is not None:
                done[active[nxt == eos_id]] = True
        for j, i in enumerate(idx):
            out[i] = buf[j, : lengths[j]].tolist()
    return out  # type: ignore[return-value]


def train_full(model: Transformer, batches, steps: int, lr: float = 3e-3, warmup_ratio: float = 0.1,
               weight_decay: float = 0.0, log_every: int = 0) -> list[float]:
    """Full-parameter teacher-forced training (used to pretrain the backbone).

    ``batches`` yields ``(tokens[batch, seq], weights[batch, seq])`` pairs.
    """
    model.unfreeze()
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)
    losses = []
    for step in range(steps):
        tokens, weights = next(batches)
        with Tape() as tape:
            logits, _ = model.forward(tokens)
            loss = sequence_loss(logits, tokens, weights)
            grads = tape.backward(loss)
        opt.step(grads, lr=cosine_lr(step, steps, lr, warmup_ratio))
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"pretrain step {step:5d} loss {losses[-1]:.4f}")
    model.freeze()
    return losses
