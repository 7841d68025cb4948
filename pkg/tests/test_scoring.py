import numpy as np
import pytest

from adaknn.basemodel import concat, fit_count_model
from adaknn.datastore import from_arrays, train_ivf
from adaknn.experiments import Suite, run_sweep, run_transfer
from adaknn.scoring import retrieve, teacher_forced_retrieval

from conftest import small_config


def brute_force_excluding(keys, q, k, own):
    d = ((keys.astype(np.float64) - q) ** 2).sum(axis=1)
    d[own] = np.inf
    return np.lexsort((np.arange(len(d)), d))[:k]


def test_exclude_drops_own_entry():
    rng = np.random.default_rng(0)
    keys = rng.normal(size=(200, 6)).astype(np.float32)
    ds = from_arrays(keys, np.arange(200) % 11, 11)
    d_in, _ = retrieve(keys, ds, 4)
    assert np.all(d_in[:, 0] == 0.0)  # every key finds itself first
    d_ex, v_ex = retrieve(keys, ds, 4, exclude=np.arange(200))
    assert np.all(d_ex[:, 0] > 0.0)
    for i in range(200):
        want = brute_force_excluding(keys, keys[i].astype(np.float64), 4, i)
        np.testing.assert_array_equal(v_ex[i], np.arange(200)[want] % 11)
    index = train_ivf(ds, 4, 10, seed=1)
    d_ivf, _ = retrieve(keys, ds, 4, index, nprobe=4, exclude=np.arange(200))
    np.testing.assert_allclose(d_ivf, d_ex)


def test_exclude_self_needs_the_datastore_corpus(small_suite):
    s = small_suite
    ds = s.datastore("d0")
    with pytest.raises(ValueError, match="exclude_self"):
        teacher_forced_retrieval(s.corpus("d0", "dev"), s.encoder, s.base_model, ds, 8, exclude_self=True)
    retr = teacher_forced_retrieval(s.corpus("d0", "train"), s.encoder, s.base_model, ds, 8, exclude_self=True)
    assert len(retr) == len(ds)
    keys = ds.keys.astype(np.float64)
    queries = s.encoder.encode_windows(retr.table.src_windows, retr.table.prefix_windows).astype(np.float64)
    for i in range(0, len(ds), 97):
        want = brute_force_excluding(keys, queries[i], 8, i)
        np.testing.assert_array_equal(retr.values[i], ds.values[want])


def test_training_on_the_datastore_corpus():
    suite = Suite(small_config(**{"metak.train_split": "train", "datastore.exclude_self": "true"}))
    result = suite.train("d0", 8)
    assert np.isfinite(result.params.W1).all()
    assert ("d0", "train", "d0", True) in suite._retrievals


def test_transfer_to_itself_is_zero(small_suite):
    row = run_transfer(small_suite, "d0", "d0", K=8).rows[0]
    assert row[4] == row[5] and row[6] == 0.0


def test_perfect_base_model_is_not_hurt():
    # deterministic translation and a confident base model that has memorised
    # every in-domain sentence, so neighbors can only add noise
    cfg = small_config(**{
        "task.share": "1.0", "task.peak": "1.0", "task.n_alt": "0", "task.noise_rate": "0.0", "metak.steps": "5000",
    })
    suite = Suite(cfg)
    seen = concat([suite.corpus("d0", split) for split in ("train", "dev", "test")])
    suite.base_model = fit_count_model(seen, cfg.task.vocab_size, smoothing=1e-6)
    scores, _ = run_sweep(suite, ["d0"])
    base = scores.column("base")[0]
    assert base == 100.0
    assert all(a >= base for a in scores.column("adaptive"))
