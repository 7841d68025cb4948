import numpy as np
import pytest

from adaknn.basemodel import (
    EOS,
    PAD,
    Corpus,
    fit_count_model,
    gen_corpus,
    make_task,
    read_corpus,
    read_sequences,
    token_table,
    ToyEncoder,
    windows,
    write_corpus,
    write_sequences,
)
from adaknn.datastore import exact_search
from adaknn.experiments import build_corpus_datastore


@pytest.fixture(scope="module")
def task():
    return make_task(seed=11)


def mean_logprob(model, corpus):
    t = token_table(corpus, model.window)
    p = model.batch_dist(t.src_windows, t.prefix_windows)
    return float(np.mean(np.log(p[np.arange(len(t)), t.gold])))


def test_generation_is_deterministic(task):
    _, (d0, _) = task
    a = gen_corpus(d0, 20, "train", seed=4)
    b = gen_corpus(d0, 20, "train", seed=4)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a.pairs, b.pairs))
    c = gen_corpus(d0, 20, "test", seed=4)
    assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a.pairs, c.pairs))
    other = make_task(seed=11)[1][0]
    assert np.array_equal(other.table, d0.table)


def test_corpus_shape(task):
    _, (d0, _) = task
    corpus = gen_corpus(d0, 50, "train", seed=0)
    for source, target in corpus.pairs:
        assert d0.min_len <= len(source) <= d0.max_len
        assert len(target) == len(source) + 1 and target[-1] == EOS
        assert np.all(target[:-1] >= 2) and np.all(np.isin(source, d0.source_tokens))
    assert corpus.n_target_tokens == sum(len(s) + 1 for s, _ in corpus.pairs)


def test_empty_corpus(task):
    _, (d0, _) = task
    corpus = gen_corpus(d0, 0, "train", seed=0)
    assert len(corpus) == 0 and len(token_table(corpus)) == 0
    with pytest.raises(ValueError):
        fit_count_model(corpus, d0.vocab_size)


def test_domains_are_distinguishable(task):
    _, (d0, d1) = task
    model = fit_count_model(gen_corpus(d0, 500, "train", seed=1), d0.vocab_size, window=1, use_source=False)
    in_domain = mean_logprob(model, gen_corpus(d0, 200, "test", seed=1))
    other = mean_logprob(model, gen_corpus(d1, 200, "test", seed=1))
    assert in_domain > other + 1.0


def test_domain_spec_validation(task):
    _, (d0, _) = task
    from dataclasses import replace

    with pytest.raises(ValueError):
        replace(d0, noise_rate=1.5)
    with pytest.raises(ValueError):
        replace(d0, min_len=5, max_len=4)


def test_windows_padding():
    s, p = windows([10, 11, 12], [], 2)
    assert s.tolist() == [PAD, 10] and p.tolist() == [PAD, PAD]
    s, p = windows([10, 11, 12], [20, 21, 22], 2)
    assert s.tolist() == [12, PAD] and p.tolist() == [21, 22]


def test_encoder_properties():
    enc = ToyEncoder(30, dim=8, window=2, seed=3)
    a = enc.encode([5, 6, 7], [9])
    assert a.dtype == np.float32 and a.shape == (8,)
    assert np.array_equal(a, ToyEncoder(30, dim=8, window=2, seed=3).encode([5, 6, 7], [9]))
    assert not np.array_equal(a, ToyEncoder(30, dim=8, window=2, seed=4).encode([5, 6, 7], [9]))
    # only the windows matter
    assert np.array_equal(enc.encode([1, 6, 7, 8], [4, 2, 9]), enc.encode([3, 5, 7, 8], [5, 2, 9]))
    assert not np.array_equal(enc.encode([5, 6, 7], [9]), enc.encode([5, 8, 7], [9]))


def test_count_model_memorizes():
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(40):
        src = rng.integers(2, 50, 6)
        pairs.append((src, np.append((src * 7) % 48 + 2, EOS)))
    corpus = Corpus(pairs)
    model = fit_count_model(corpus, 50, smoothing=0.01)
    t = token_table(corpus)
    p = model.batch_dist(t.src_windows, t.prefix_windows)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    # every training context is unique here, so each gold token keeps 1 / (1 + 50 * 0.01)
    assert p[np.arange(len(t)), t.gold].min() > 0.66
    assert model.next_token_dist(*corpus.pairs[0][:1], corpus.pairs[0][1][:2]).argmax() == corpus.pairs[0][1][2]


def test_count_model_backoff_and_unseen():
    corpus = Corpus([(np.array([5, 6]), np.array([7, 8, EOS]))])
    model = fit_count_model(corpus, 10, smoothing=0.01)
    # never-seen tokens at every level: uniform
    np.testing.assert_allclose(model.next_token_dist([9, 9, 9], [3, 3]), np.full(10, 0.1))
    # full context unseen but the most recent (src, prefix) pair was seen: backs off
    p = model.next_token_dist([2, 6], [7])
    assert p[8] == pytest.approx(1.01 / 1.1)  # one count plus smoothing over 10 tokens


def test_count_model_repeated_context_and_normalisation():
    corpus = Corpus([(np.array([5, 6, 7]), np.array([20, 21, 22, EOS]))] * 100)
    model = fit_count_model(corpus, 50, smoothing=0.01)
    p = model.next_token_dist([5, 6, 7], [20])
    assert p[21] == pytest.approx(100.01 / 100.5) and p[21] > 0.99
    rng = np.random.default_rng(1)
    probs = model.batch_dist(rng.integers(0, 50, (1000, 2)), rng.integers(0, 50, (1000, 2)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(probs > 0)


def test_count_model_rejects_bad_smoothing():
    with pytest.raises(ValueError):
        fit_count_model(Corpus([(np.array([2]), np.array([3, EOS]))]), 5, smoothing=0.0)


def test_datastore_from_corpus(task):
    _, (d0, _) = task
    corpus = gen_corpus(d0, 30, "train", seed=2)
    enc = ToyEncoder(d0.vocab_size, dim=16, seed=0)
    ds = build_corpus_datastore(corpus, enc, d0.vocab_size)
    assert len(ds) == corpus.n_target_tokens
    t = token_table(corpus)
    assert ds.values.tolist() == t.gold.tolist()
    source, target = corpus.pairs[3]
    key = enc.encode(source, target[:2])
    hit = exact_search(ds, key, 1)
    assert hit.distances[0] == 0.0
    assert np.array_equal(ds.keys[hit.indices[0]], key)


def test_corpus_io(tmp_path, task):
    _, (d0, _) = task
    corpus = gen_corpus(d0, 5, "dev", seed=0)
    write_corpus(corpus, tmp_path / "c.txt")
    back = read_corpus(tmp_path / "c.txt", "dev")
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(corpus.pairs, back.pairs))
    with pytest.raises(FileNotFoundError, match="missing.txt"):
        read_corpus(tmp_path / "missing.txt")
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ValueError):
        read_corpus(tmp_path / "bad.txt")
    write_sequences([[3, 4], []], tmp_path / "h.txt")
    assert read_sequences(tmp_path / "h.txt") == [[3, 4], []]
