import json
import logging

import numpy as np
import pytest

from laylora.data import (DEFAULT_STYLES, EOS_ID, PAD_ID, SEP_ID, UNK_ID, PairedSample, StyleSpec, SynthSpec,
                          Tokenizer, apply_style, build_vocab, copy_corpus, encode_pair, load_jsonl, pad_batch,
                          save_jsonl, split, synth_corpus, tokenize_words)
from laylora.errors import IngestionError, SchemaError
from laylora.experiments import synthetic_tokenizer


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def rec(i, **kw):
    d = {"id": str(i), "expert": f"expert {i}", "lay": f"lay {i}", "style": "s"}
    d.update(kw)
    return json.dumps(d)


def test_load_empty_file(tmp_path):
    assert load_jsonl(write_lines(tmp_path / "e.jsonl", [])) == []


def test_load_preserves_order(tmp_path):
    corpus = load_jsonl(write_lines(tmp_path / "c.jsonl", [rec(3), rec(1), rec(2)]))
    assert [s.id for s in corpus] == ["3", "1", "2"]


def test_load_missing_field_names_line(tmp_path):
    bad = json.dumps({"id": "x", "expert": "e", "style": "s"})
    with pytest.raises(SchemaError, match="line 2.*lay"):
        load_jsonl(write_lines(tmp_path / "c.jsonl", [rec(1), bad]))


def test_load_rejects_duplicates_and_garbage(tmp_path):
    with pytest.raises(IngestionError, match="duplicate"):
        load_jsonl(write_lines(tmp_path / "d.jsonl", [rec(1), rec(1)]))
    with pytest.raises(SchemaError, match="line 1"):
        load_jsonl(write_lines(tmp_path / "g.jsonl", ["{not json"]))
    with pytest.raises(SchemaError, match="extra"):
        load_jsonl(write_lines(tmp_path / "x.jsonl", [rec(1, extra="?")]))
    with pytest.raises(SchemaError):
        load_jsonl(write_lines(tmp_path / "n.jsonl", [rec(1, lay="")]))


def test_jsonl_roundtrip(tmp_path):
    corpus = synth_corpus(SynthSpec(samples_per_style=3))
    save_jsonl(tmp_path / "c.jsonl", corpus)
    assert load_jsonl(tmp_path / "c.jsonl") == corpus


# ---------------------------------------------------------------- tokenizer


def test_tokenize_words():
    assert tokenize_words("Hello, World! It's 2.5") == ["hello", ",", "world", "!", "it", "'", "s", "2", ".", "5"]


def test_vocab_hand_count():
    corpus = [PairedSample("1", "the cat sat on the mat", "a cat", "s"),
              PairedSample("2", "the dog", "dog sat", "s")]
    # distinct: the cat sat on mat a dog -> 7
    tok = build_vocab(corpus, 1)
    assert len(tok) == 4 + 7
    assert [tok.inverse[i] for i in range(4)] == ["<pad>", "<unk>", "<sep>", "<eos>"]
    frequent = build_vocab(corpus, 2)
    assert set(frequent.vocab) - {"<pad>", "<unk>", "<sep>", "<eos>"} == {"the", "cat", "sat", "dog"}
    assert frequent.encode("the mat") == [frequent.vocab["the"], UNK_ID]


def test_vocab_stable():
    corpus = synth_corpus(SynthSpec(samples_per_style=5))
    assert build_vocab(corpus).vocab == build_vocab(list(corpus)).vocab


def test_roundtrip_in_vocab_text():
    tok = synthetic_tokenizer()
    for s in synth_corpus(SynthSpec(samples_per_style=5)):
        assert " ".join(tokenize_words(tok.decode(tok.encode(s.lay)))) == " ".join(tokenize_words(s.lay))
        assert tok.decode(tok.encode(s.lay)) == s.lay


def test_decode_stops_at_eos():
    tok = synthetic_tokenizer()
    ids = tok.encode("the drug") + [EOS_ID] + tok.encode("the diet")
    assert tok.decode(ids) == "the drug"


def test_tokenizer_save_load(tmp_path):
    tok = synthetic_tokenizer()
    tok.save(tmp_path / "t.json")
    assert Tokenizer.load(tmp_path / "t.json").vocab == tok.vocab
    with pytest.raises(IngestionError):
        Tokenizer({"a": 0})


def test_encode_pair_and_padding():
    tok = synthetic_tokenizer()
    a = encode_pair(tok, "the drug", "the diet")
    b = encode_pair(tok, "the drug reduced fever", "fever")
    assert a.tokens[a.expert_len] == SEP_ID and a.tokens[-1] == EOS_ID
    assert a.prompt == tok.encode("the drug") + [SEP_ID]
    tokens, weights, lens = pad_batch([a, b])
    assert tokens.shape == (2, 7) and tokens[0, -1] == PAD_ID
    assert weights[0].tolist() == [0, 0, 0, 1, 1, 1, 0]
    assert weights[1].tolist() == [0, 0, 0, 0, 0, 1, 1]
    assert lens.tolist() == [2, 4]


def test_encode_pair_trims_expert_side():
    tok = synthetic_tokenizer()
    p = encode_pair(tok, "the drug reduced fever in adults", "the diet", max_seq=6)
    assert len(p.tokens) == 6 and p.expert_len == 2
    with pytest.raises(IngestionError):
        encode_pair(tok, "the drug", "the drug reduced fever in adults", max_seq=4)


# ---------------------------------------------------------------- synthetic


def test_synth_is_deterministic_and_labelled():
    spec = SynthSpec(samples_per_style=10, seed=5)
    a, b = synth_corpus(spec), synth_corpus(spec)
    assert a == b
    assert {s.style for s in a} == {st.name for st in DEFAULT_STYLES}
    assert len({s.id for s in a}) == len(a) == 30
    assert synth_corpus(SynthSpec(samples_per_style=10, seed=6)) != a


def test_style_transforms():
    corpus = synth_corpus(SynthSpec(samples_per_style=20))
    for s in corpus:
        n_ex, n_lay = len(tokenize_words(s.expert)), len(tokenize_words(s.lay))
        if s.style == "concise":
            assert n_lay < n_ex
        elif s.style == "explain":
            assert n_lay > n_ex and "means" in s.lay
        else:
            assert n_lay == n_ex
            assert s.lay == apply_style(StyleSpec("plain", shift="substitute"), s.expert)


def test_zero_samples_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert synth_corpus(SynthSpec(samples_per_style=0)) == []
    assert "zero samples" in caplog.text


def test_synthetic_tokenizer_covers_generators():
    tok = synthetic_tokenizer()
    for s in synth_corpus(SynthSpec(samples_per_style=30)) + copy_corpus(50):
        assert UNK_ID not in tok.encode(s.expert) + tok.encode(s.lay)


# --------------------------------------------------------------------- split


def test_split_counts_and_partition():
    corpus = [PairedSample(str(i), "e", "l", "ab"[i % 2]) for i in range(100)]
    train, test = split(corpus, 0.8, seed=3)
    assert len(train) == 80 and len(test) == 20
    ids_tr, ids_te = {s.id for s in train}, {s.id for s in test}
    assert not ids_tr & ids_te and ids_tr | ids_te == {s.id for s in corpus}
    for style in "ab":
        assert abs(sum(s.style == style for s in train) - 40) <= 1
    assert split(corpus, 0.8, seed=3) == (train, test)


def test_split_fallback_and_errors(caplog):
    corpus = [PairedSample(str(i), "e", "l", "big") for i in range(9)] + [PairedSample("x", "e", "l", "tiny")]
    with caplog.at_level(logging.WARNING):
        train, test = split(corpus, 0.8, seed=0)
    assert len(train) == 8 and "fewer than 2" in caplog.text
    with pytest.raises(ValueError):
        split(corpus, 1.0)
