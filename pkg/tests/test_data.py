"""Grammar generators, BIO validity, Dirichlet partitioning, dataset files."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedskip.data import (GrammarConfig, MultilabelExample, TaggingExample, check_bio,
                          dominant_type, gen_corpus, gen_multilabel, gen_tagging,
                          make_client_dataset, partition_clients, read_dataset,
                          write_dataset)
from fedskip.errors import ConfigError, DataError, InputError

G = GrammarConfig(vocab_size=64, n_types=3, lexicon_size=8, seq_len=16)


def test_grammar_validation():
    with pytest.raises(ConfigError):
        GrammarConfig(vocab_size=20, n_types=2, lexicon_size=10, seq_len=8)  # V < K*m+1
    with pytest.raises(ConfigError):
        GrammarConfig(vocab_size=64, n_types=2, lexicon_size=8, entity_rate=0.0)
    GrammarConfig(vocab_size=21, n_types=2, lexicon_size=10, seq_len=8)  # exactly K*m+1


def test_corpus_deterministic_and_in_vocab():
    a = gen_corpus(5, 50, G)
    b = gen_corpus(5, 50, G)
    assert np.array_equal(a, b)
    assert a.shape == (50, 16)
    assert a.min() >= 0 and a.max() < 64
    assert not np.array_equal(a, gen_corpus(6, 50, G))


def test_entity_tokens_come_from_their_lexicons():
    g = GrammarConfig(vocab_size=100, n_types=2, lexicon_size=10, seq_len=20)
    for ex in gen_tagging(9, 100, g):
        for tok, tag in zip(ex.tokens, ex.tags):
            if tag == 0:
                assert g.token_type(int(tok)) == 0
            else:
                k = (int(tag) + 1) // 2
                lo = g.lexicon_low(k)
                assert lo <= int(tok) < lo + g.lexicon_size


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bio_validity_by_construction(seed):
    for ex in gen_tagging(seed, 20, G):
        assert check_bio(ex.tags, G.n_types)


def test_check_bio_rejects_bad_transitions():
    assert not check_bio([0, 2], 3)          # I after O
    assert not check_bio([1, 4], 3)          # I-2 after B-1
    assert check_bio([1, 2, 2, 0, 3, 4], 3)  # B-1 I-1 I-1 O B-2 I-2


def test_all_filler_sequence_has_all_o_tags():
    g = GrammarConfig(vocab_size=64, n_types=3, lexicon_size=8, seq_len=16,
                      entity_rate=1e-9)
    ex = gen_tagging(3, 1, g)[0]
    assert np.all(ex.tags == 0)


def test_span_length_empirical_mean_is_two():
    # long sequences make end-of-sequence clamping negligible, so the
    # emitted spans reflect the raw geometric sampler
    g = GrammarConfig(vocab_size=64, n_types=3, lexicon_size=8, seq_len=256)
    exs = gen_tagging(21, 250, g)  # >10k spans
    lengths = []
    for ex in exs:
        run = 0
        for tag in ex.tags:
            if tag != 0 and tag % 2 == 1:  # B opens a span
                if run:
                    lengths.append(run)
                run = 1
            elif tag != 0:
                run += 1
            else:
                if run:
                    lengths.append(run)
                run = 0
        if run:
            lengths.append(run)
    assert len(lengths) > 10_000
    assert abs(np.mean(lengths) - 2.0) < 0.1


def test_span_start_rate_matches_entity_rate():
    exs = gen_tagging(33, 10_000, G)
    b = sum(int(np.sum(ex.tags % 2 == 1)) for ex in exs)
    o = sum(int(np.sum(ex.tags == 0)) for ex in exs)
    # every segment decision is either a span start (B) or one filler (O)
    assert abs(b / (b + o) - G.entity_rate) < 0.02


def test_multilabel_ground_truth_is_lexicon_membership():
    for ex in gen_multilabel(7, 300, G):
        for k in range(1, G.n_types + 1):
            lo = G.lexicon_low(k)
            present = bool(np.any((ex.tokens >= lo) & (ex.tokens < lo + G.lexicon_size)))
            assert bool(ex.labels[k - 1]) == present


def test_pure_filler_doc_has_empty_labels():
    g = GrammarConfig(vocab_size=64, n_types=3, lexicon_size=8, seq_len=16,
                      entity_rate=1e-9)
    ex = gen_multilabel(3, 1, g)[0]
    assert ex.labels.sum() == 0


def _inclusion_probability_oracle(g: GrammarConfig) -> float:
    """Exact P(no span of a fixed type) by dynamic programming over the
    renewal process, independent of the sampler."""
    p, k, t = g.entity_rate, g.n_types, g.seq_len
    geo = [0.0] + [0.5 ** length for length in range(1, t + 1)]
    f = [1.0] * (t + 1)  # f[r] = P(no target-type span in r remaining slots)
    for r in range(1, t + 1):
        stay = (1 - p) * f[r - 1]
        other = 0.0
        for length in range(1, r):
            other += geo[length] * f[r - length]
        other += 0.5 ** (r - 1)  # sampled length >= r clamps to r, consuming all
        f[r] = stay + p * ((k - 1) / k) * other
    return 1.0 - f[t]


def test_label_rate_matches_analytic_inclusion_probability():
    docs = gen_multilabel(13, 10_000, G)
    expect = _inclusion_probability_oracle(G)
    rates = np.stack([d.labels for d in docs]).mean(axis=0)
    for k in range(G.n_types):
        assert abs(rates[k] - expect) < 0.02


def test_partition_conserves_multiset_and_is_deterministic():
    data = gen_tagging(3, 200, G)
    parts = partition_clients(data, 7, 0.5, seed=5, grammar=G)
    assert len(parts) == 7
    assert all(len(p) > 0 for p in parts)
    ids = sorted(id(ex) for p in parts for ex in p.examples)
    assert ids == sorted(id(ex) for ex in data)
    again = partition_clients(data, 7, 0.5, seed=5, grammar=G)
    assert [len(p) for p in parts] == [len(p) for p in again]


def test_partition_iid_limit_matches_global_histogram():
    data = gen_tagging(3, 5000, G)
    parts = partition_clients(data, 5, 1e6, seed=9, grammar=G)
    total = np.sum([p.histogram for p in parts], axis=0)
    global_frac = total / total.sum()
    for p in parts:
        frac = p.histogram / p.histogram.sum()
        assert np.abs(frac - global_frac).max() < 0.05


def test_partition_low_alpha_produces_specialists():
    data = gen_tagging(3, 1000, G)
    found = False
    for seed in (1, 2, 3):
        for p in partition_clients(data, 10, 0.1, seed=seed, grammar=G):
            frac = p.histogram / p.histogram.sum()
            if frac.max() > 0.6:
                found = True
    assert found, "expected at least one >60% specialist client over 3 seeds"


def test_partition_validation():
    data = gen_tagging(3, 10, G)
    with pytest.raises(ConfigError):
        partition_clients(data, 11, 0.5, seed=1, grammar=G)
    with pytest.raises(ConfigError):
        partition_clients(data, 2, 0.0, seed=1, grammar=G)


def test_dominant_type_tie_breaks_low():
    ex = TaggingExample(tokens=np.array([G.lexicon_low(2), G.lexicon_low(1)]),
                        tags=np.array([3, 1]))
    assert dominant_type(ex, G) == 1
    filler = TaggingExample(tokens=np.array([0, 0]), tags=np.array([0, 0]))
    assert dominant_type(filler, G) == 0


def test_client_dataset_requires_examples():
    with pytest.raises(InputError):
        make_client_dataset(0, [], G)


def test_dataset_roundtrip_tagging(tmp_path):
    data = gen_tagging(3, 40, G)
    path = tmp_path / "train.bin"
    write_dataset(path, data, "tagging", G.n_types)
    task, items, k = read_dataset(path)
    assert task == "tagging" and k == 3 and len(items) == 40
    for a, b in zip(data, items):
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.tags, b.tags)


def test_dataset_roundtrip_multilabel_and_corpus(tmp_path):
    docs = gen_multilabel(5, 30, G)
    write_dataset(tmp_path / "ml.bin", docs, "multilabel", G.n_types)
    _, items, _ = read_dataset(tmp_path / "ml.bin")
    for a, b in zip(docs, items):
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.labels, b.labels)
    corpus = gen_corpus(5, 20, G)
    write_dataset(tmp_path / "c.bin", list(corpus), "corpus")
    _, arr, _ = read_dataset(tmp_path / "c.bin")
    assert np.array_equal(corpus, arr)


def test_dataset_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "x.bin"
    data = gen_tagging(3, 5, G)
    write_dataset(path, data, "tagging", G.n_types)
    blob = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        read_dataset(tmp_path / "bad.bin")
    (tmp_path / "trunc.bin").write_bytes(blob[:-3])
    with pytest.raises(DataError):
        read_dataset(tmp_path / "trunc.bin")
