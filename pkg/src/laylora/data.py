"""Paired expert/lay corpora: JSONL ingestion, word tokenizer, splits, and
deterministic synthetic generators.

Corpus files are JSON Lines, UTF-8, one object per line with exactly the
string keys ``id``, ``expert``, ``lay`` and ``style``.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestionError, SchemaError

log = logging.getLogger(__name__)

FIELDS = ("id", "expert", "lay", "style")
PAD, UNK, SEP, EOS = "<pad>", "<unk>", "<sep>", "<eos>"
RESERVED = (PAD, UNK, SEP, EOS)
PAD_ID, UNK_ID, SEP_ID, EOS_ID = 0, 1, 2, 3

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,;:!?)]}%'")
_NO_SPACE_AFTER = set("([{")


@dataclass(frozen=True)
class PairedSample:
    id: str
    expert: str
    lay: str
    style: str

    def to_dict(self) -> dict:
        return {"id": self.id, "expert": self.expert, "lay": self.lay, "style": self.style}


Corpus = list  # list[PairedSample]


def tokenize_words(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def detokenize_words(tokens: Sequence[str]) -> str:
    out = ""
    for tok in tokens:
        if out and tok not in _NO_SPACE_BEFORE and out[-1] not in _NO_SPACE_AFTER:
            out += " "
        out += tok
    return out


# ------------------------------------------------------------------- JSONL IO


def load_jsonl(path) -> list[PairedSample]:
    samples: list[PairedSample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}: line {lineno}: expected an object")
            missing = [k for k in FIELDS if k not in obj]
            if missing:
                raise SchemaError(f"{path}: line {lineno}: missing field(s) {', '.join(missing)}")
            extra = sorted(set(obj) - set(FIELDS))
            if extra:
                raise SchemaError(f"{path}: line {lineno}: unknown field(s) {', '.join(extra)}")
            bad = [k for k in FIELDS if not isinstance(obj[k], str) or not obj[k]]
            if bad:
                raise SchemaError(f"{path}: line {lineno}: field(s) {', '.join(bad)} must be non-empty strings")
            if obj["id"] in seen:
                raise IngestionError(f"{path}: line {lineno}: duplicate id {obj['id']!r}")
            seen.add(obj["id"])
            samples.append(PairedSample(**{k: obj[k] for k in FIELDS}))
    return samples


def save_jsonl(path, corpus: Iterable[PairedSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


# ------------------------------------------------------------------ tokenizer


@dataclass
class Tokenizer:
    vocab: dict[str, int]
    inverse: list[str] = field(init=False)

    def __post_init__(self):
        for i, tok in enumerate(RESERVED):
            if self.vocab.get(tok) != i:
                raise IngestionError(f"reserved token {tok} must have id {i}")
        self.inverse = [""] * len(self.vocab)
        for tok, i in self.vocab.items():
            self.inverse[i] = tok

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(t, UNK_ID) for t in tokenize_words(text)]

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            tok = self.inverse[int(i)]
            if strip_special and tok in RESERVED:
                if tok == EOS:
                    break
                continue
            toks.append(tok)
        return detokenize_words(toks)

    def to_dict(self) -> dict:
        return {"tokens": self.inverse}

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Tokenizer":
        return cls({t: i for i, t in enumerate(tokens)})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_tokens(json.loads(Path(path).read_text(encoding="utf-8"))["tokens"])


def build_vocab(corpus: Sequence[PairedSample], min_freq: int = 1) -> Tokenizer:
    """Tokens with frequency >= min_freq, ordered by (-frequency, token)."""
    if not corpus:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for s in corpus:
        counts.update(tokenize_words(s.expert))
        counts.update(tokenize_words(s.lay))
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Tokenizer.from_tokens(list(RESERVED) + kept)


# -------------------------------------------------------------- sequences


@dataclass
class EncodedPair:
    """``[expert] <sep> [lay] <eos>`` with the loss restricted to the lay side."""

    tokens: list[int]
    expert_len: int

    @property
    def prompt(self) -> list[int]:
        return self.tokens[: self.expert_len + 1]


def encode_pair(tok: Tokenizer, expert: str, lay: str | None = None, max_seq: int | None = None) -> EncodedPair:
    e = tok.encode(expert)
    l = [] if lay is None else tok.encode(lay) + [EOS_ID]
    if max_seq is not None and len(e) + 1 + len(l) > max_seq:
        room = max_seq - 1 - len(l)
        if room < 1:
            raise IngestionError(f"lay text alone exceeds max_seq={max_seq}")
        e = e[:room]
    return EncodedPair(e + [SEP_ID] + l, len(e))


def pad_batch(pairs: Sequence[EncodedPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to ``(tokens, loss_weights, expert_lens)``.

    ``loss_weights[b, t]`` is 1 where token t belongs to the lay side (incl. EOS).
    """
    T = max(len(p.tokens) for p in pairs)
    tokens = np.full((len(pairs), T), PAD_ID, dtype=np.int64)
    weights = np.zeros((len(pairs), T))
    for b, p in enumerate(pairs):
        tokens[b, : len(p.tokens)] = p.tokens
        weights[b, p.expert_len + 1 : len(p.tokens)] = 1.0
    lens = np.array([p.expert_len for p in pairs], dtype=np.int64)
    return tokens, weights, lens


# ---------------------------------------------------------------------- split


def split(corpus: Sequence[PairedSample], ratio: float = 0.8, seed: int = 0):
    """Deterministic shuffled split, stratified by style."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    rng = np.random.default_rng(seed)
    by_style: dict[str, list[int]] = {}
    for i, s in enumerate(corpus):
        by_style.setdefault(s.style, []).append(i)
    if any(len(v) < 2 for v in by_style.values()):
        log.warning("a style has fewer than 2 samples; falling back to an unstratified split")
        groups = [list(range(len(corpus)))]
    else:
        groups = [by_style[k] for k in sorted(by_style)]
    train_idx: list[int] = []
    test_idx: list[int] = []
    for g in groups:
        g = list(rng.permutation(g))
        n_train = int(round(ratio * len(g)))
        train_idx += g[:n_train]
        test_idx += g[n_train:]
    train_idx.sort()
    test_idx.sort()
    return [corpus[i] for i in train_idx], [corpus[i] for i in test_idx]


# ---------------------------------------------------------------- synthetic

RARE_TERMS = {
    "hypertension": "pressure",
    "neoplasm": "tumor",
    "dyspnea": "breathlessness",
    "edema": "swelling",
    "pyrexia": "fever",
    "cephalalgia": "headache",
    "emesis": "vomiting",
    "pruritus": "itching",
}
AGENTS = ("drug", "therapy", "vaccine", "diet", "surgery", "exercise")
VERBS = ("reduced", "increased", "prevented", "worsened", "treated")
POPULATIONS = ("adults", "children", "women", "patients", "smokers")
OUTCOMES = ("lower", "higher", "unchanged", "common", "rare")
NUMBERS = ("two", "three", "four", "five", "six")
UNITS = ("trials", "studies", "cohorts")

EXPERT_TEMPLATES = (
    "the {agent} {verb} {rare1} in {pop} . {rare2} was {outcome} in {num} {unit} .",
)


@dataclass(frozen=True)
class StyleSpec:
    """One lay-style transform.

    ``length``: ``keep`` | ``truncate`` (first ``keep_sentences`` sentences) |
    ``expand`` (append a glossary sentence per leading rare term).
    ``shift``: ``none`` | ``substitute`` (rare terms -> common synonyms).
    """

    name: str
    length: str = "keep"
    shift: str = "none"
    keep_sentences: int = 1
    glossary_terms: int = 1
    templates: tuple[str, ...] = EXPERT_TEMPLATES


DEFAULT_STYLES = (
    StyleSpec("concise", length="truncate"),
    StyleSpec("explain", length="expand"),
    StyleSpec("plain", shift="substitute"),
)


@dataclass(frozen=True)
class SynthSpec:
    styles: tuple[StyleSpec, ...] = DEFAULT_STYLES
    samples_per_style: int = 60
    seed: int = 0
    # planted-signal fixture (topic-coded pairs); see planted_model()
    planted_layer: int | None = None
    n_topics: int = 16
    words_per_topic: int = 4
    planted_len: int = 6


def _sentences(tokens: list[str]) -> list[list[str]]:
    out, cur = [], []
    for t in tokens:
        cur.append(t)
        if t in (".", "!", "?"):
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def apply_style(style: StyleSpec, expert: str) -> str:
    toks = tokenize_words(expert)
    if style.shift == "substitute":
        toks = [RARE_TERMS.get(t, t) for t in toks]
    if style.length == "truncate":
        toks = [t for s in _sentences(toks)[: style.keep_sentences] for t in s]
    elif style.length == "expand":
        rare = [t for t in tokenize_words(expert) if t in RARE_TERMS]
        for term in rare[: style.glossary_terms]:
            toks += [term, "means", RARE_TERMS[term], "."]
    elif style.length != "keep":
        raise ValueError(f"unknown length transform {style.length!r}")
    return detokenize_words(toks)


def _expert_text(rng: np.random.Generator, template: str) -> str:
    rare = list(RARE_TERMS)
    r1, r2 = rng.choice(len(rare), size=2, replace=False)
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    return template.format(agent=pick(AGENTS), verb=pick(VERBS), rare1=rare[r1], rare2=rare[r2],
                           pop=pick(POPULATIONS), outcome=pick(OUTCOMES), num=pick(NUMBERS), unit=pick(UNITS))


def synth_corpus(spec: SynthSpec) -> list[PairedSample]:
    """Deterministic synthetic corpus.

    Expert texts are drawn from one shared distribution regardless of style,
    so the style can only be known from the label.
    """
    if spec.planted_layer is not None:
        return _planted_corpus(spec)
    if spec.samples_per_style <= 0:
        log.warning("synth_corpus: zero samples requested")
        return []
    rng = np.random.default_rng(spec.seed)
    out = []
    for n in range(spec.samples_per_style):
        for style in spec.styles:
            tpl = style.templates[int(rng.integers(len(style.templates)))]
            expert = _expert_text(rng, tpl)
            out.append(PairedSample(f"{style.name}-{n:05d}", expert, apply_style(style, expert), style.name))
    return out


def copy_corpus(n: int, seed: int = 0) -> list[PairedSample]:
    """Identity pairs over every text shape the styles can produce.

    Used to pretrain a backbone that knows how to reproduce its input before
    any style adapter is trained.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        expert = _expert_text(rng, EXPERT_TEMPLATES[0])
        style = DEFAULT_STYLES[int(rng.integers(len(DEFAULT_STYLES)))]
        text = expert if rng.random() < 0.5 else apply_style(style, expert)
        out.append(PairedSample(f"copy-{i:05d}", text, text, "copy"))
    return out


def topic_words(spec: SynthSpec, side: str) -> list[list[str]]:
    prefix = "x" if side == "expert" else "y"
    return [[f"{prefix}{k}w{w}" for w in range(spec.words_per_topic)] for k in range(spec.n_topics)]


def _planted_corpus(spec: SynthSpec) -> list[PairedSample]:
    rng = np.random.default_rng(spec.seed)
    ex_words, lay_words = topic_words(spec, "expert"), topic_words(spec, "lay")
    n = spec.samples_per_style * max(len(spec.styles), 1)
    out = []
    for i in range(n):
        k = int(rng.integers(spec.n_topics))
        ex = " ".join(ex_words[k][int(j)] for j in rng.integers(spec.words_per_topic, size=spec.planted_len))
        lay = " ".join(lay_words[k][int(j)] for j in rng.integers(spec.words_per_topic, size=spec.planted_len))
        out.append(PairedSample(f"planted-{i:05d}", ex, lay, f"topic{k}"))
    return out


def planted_tokenizer(spec: SynthSpec) -> Tokenizer:
    words = [w for side in ("expert", "lay") for ws in topic_words(spec, side) for w in ws]
    return Tokenizer.from_tokens(list(RESERVED) + words)


def planted_model(spec: SynthSpec, tokenizer: Tokenizer | None = None, n_layers: int = 4, d_model: int = 64,
                  seed: int = 0, noise: float = 1.0, signal: float = 0.2):
    """A hand-built transformer whose layer ``spec.planted_layer`` carries an
    expert/lay topic-match feature.

    Block ``j-1`` holds an attention head in which lay tokens attend to expert
    tokens of the same topic and copy an "is expert" flag into a dedicated
    residual direction; block ``j`` recomputes the same head with the output
    negated, removing the feature again up to the small change layer norm
    makes to the recomputed head. All other blocks are identities.
    """
    from .autodiff import Tensor
    from .model import ModelConfig, Transformer, site_name

    j = spec.planted_layer
    if j is None or not 1 <= j < n_layers:
        raise ValueError(f"planted_layer must lie in [1, {n_layers - 1}], got {j}")
    code = 16
    if spec.n_topics > code or d_model < 3 * code + 8:
        raise ValueError("planted fixture needs n_topics <= 16 and d_model >= 56")
    tok = tokenizer or planted_tokenizer(spec)
    cfg = ModelConfig(vocab_size=len(tok), n_layers=n_layers, d_model=d_model, n_heads=d_model // code,
                      d_ff=4 * d_model, max_seq=4 * spec.planted_len + 8, seed=seed)
    model = Transformer(cfg)
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        if p.name.endswith((".q", ".k", ".v", ".o", ".up", ".down")) or p.name in ("tok_emb", "pos_emb"):
            p.data[...] = 0.0
    flag, out_a, out_b, noise_lo = 2 * code, 2 * code + 1, 2 * code + 2, 2 * code + 3
    emb = model.params["tok_emb"].data
    emb[:, noise_lo:] = rng.normal(0.0, noise, size=(len(tok), d_model - noise_lo))
    for side, off, sign in (("expert", 0, 1.0), ("lay", code, -1.0)):
        for k, ws in enumerate(topic_words(spec, side)):
            for w in ws:
                i = tok.vocab[w]
                emb[i, off + k] = 4.0
                emb[i, flag] = sign
    for layer, sgn in ((j - 1, 1.0), (j, -1.0)):
        p = model.params
        p[site_name(layer, "q")].data[0:code, code : 2 * code] = np.eye(code)
        p[site_name(layer, "k")].data[0:code, 0:code] = np.eye(code)
        p[site_name(layer, "v")].data[0, flag] = 1.0
        p[site_name(layer, "o")].data[out_a, 0] = sgn * signal
        p[site_name(layer, "o")].data[out_b, 0] = -sgn * signal
    return model.freeze(), tok
