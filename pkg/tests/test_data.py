import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import eval_listops_recursive
from transject import tensor as T
from transject.data import (LISTOPS_VOCAB, DataError, Example, ParseError, Vocabulary, batchify,
                            build_lm_windows, evaluate_listops, gen_listops, listops_examples,
                            listops_tokens, load_char_classification, majority_baseline,
                            read_listops_tsv, write_listops_tsv)
from transject.tensor import Tensor


def test_listops_examples():
    assert evaluate_listops("[MAX 2 4 7]") == 7
    assert evaluate_listops("[MIN 1 [MAX 2 3]]") == 1
    assert evaluate_listops("[SM 9 8 [MED 1 5 3]]") == 0
    assert eval_listops_recursive(listops_tokens("[MIN 1 [MAX 2 3]]")) == 1


def test_listops_alphabet():
    assert len(LISTOPS_VOCAB.symbols) == 16  # 4 operators, 10 digits, 2 brackets


def test_generator_matches_recursive_evaluator():
    pairs = gen_listops(10_000, 3, 80, seed=7)
    for expr, label in pairs:
        toks = listops_tokens(expr)
        assert len(toks) <= 80
        assert eval_listops_recursive(toks) == label
        assert 0 <= label <= 9


def test_generator_deterministic(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    write_listops_tsv(gen_listops(200, 2, 40, 3), a)
    write_listops_tsv(gen_listops(200, 2, 40, 3), b)
    assert a.read_bytes() == b.read_bytes()
    assert read_listops_tsv(a) == gen_listops(200, 2, 40, 3)


def test_generator_errors():
    with pytest.raises(DataError):
        gen_listops(3, 0, 40, 0)


def test_char_classification(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("1\tgood\n0\tbad\n", encoding="utf-8")
    ex, vocab = load_char_classification(train)
    assert ex[0].label == 1 and vocab.decode(ex[0].tokens) == "good"
    valid = tmp_path / "valid.tsv"
    valid.write_text("1\tgoz\n", encoding="utf-8")
    vex, _ = load_char_classification(valid, vocab)
    assert vex[0].tokens[-1] == 1  # unknown char -> unk


@pytest.mark.parametrize("line,lineno", [("1\t\n", 2), ("x\tabc\n", 2), ("1 abc\n", 2)])
def test_parse_errors(tmp_path, line, lineno):
    p = tmp_path / "bad.tsv"
    p.write_text("0\tok\n" + line, encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_char_classification(p)
    assert err.value.lineno == lineno


@given(st.text(alphabet="abcdefg ", min_size=1, max_size=30))
def test_vocab_roundtrip(s):
    vocab = Vocabulary.build([s])
    assert vocab.decode(vocab.encode(s)) == s


def test_vocab_stable_ids():
    assert Vocabulary.build(["cab"]).stoi == Vocabulary.build(["abc", "bca"]).stoi


def test_lm_windows():
    # floor((n - 1) / w) full windows: 70 tokens -> 1, 71 tokens -> 2
    assert len(build_lm_windows(list(range(70)), 35)) == 1
    assert len(build_lm_windows(list(range(71)), 35)) == 2
    w = build_lm_windows(list(range(100)), 35)
    for e in w:
        assert e.targets == [t + 1 for t in e.tokens] and len(e.tokens) == 35
    with pytest.raises(DataError):
        build_lm_windows(list(range(35)), 35)


def test_uniform_predictor_perplexity():
    v = 17
    logits = Tensor(np.zeros((1, 35, v)))
    ce = T.cross_entropy(logits, np.arange(35)[None] % v, np.ones((1, 35)))
    assert math.exp(ce.item()) == pytest.approx(v, rel=1e-12)


def test_batchify_padding_and_mask():
    same = [Example([2, 3, 4], 0), Example([5, 6, 7], 1)]
    b = next(batchify(same, 2))
    assert b.mask.all()
    mixed = [Example([2, 3, 4], 0), Example([5, 6, 7, 8, 9], 1)]
    b = next(batchify(mixed, 2))
    assert b.tokens.shape == (2, 5) and (b.mask == 0).sum() == 2
    with pytest.raises(DataError):
        next(batchify(mixed, 0))


def test_masked_mean_pool_matches_unpadded():
    rng = np.random.default_rng(0)
    exs = [Example(list(rng.integers(2, 9, size=n)), 0) for n in (3, 6, 4)]
    table = rng.normal(size=(10, 5))
    b = next(batchify(exs, 3))
    pooled = T.mean_pool(Tensor(table[b.tokens]), b.mask).data
    for i, e in enumerate(exs):
        assert np.allclose(pooled[i], table[e.tokens].mean(axis=0), atol=1e-14)


def test_majority_baseline():
    assert majority_baseline([1, 1, 2, 3]) == 0.5
    labels = [e.label for e in listops_examples(gen_listops(2000, 2, 64, 0))]
    assert majority_baseline(labels) == np.bincount(labels).max() / 2000
