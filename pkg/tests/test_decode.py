import numpy as np
import pytest

from adaknn.basemodel import EOS
from adaknn.decode import InvalidDistribution, Predictor, beam_decode, decode, greedy_decode
from adaknn.metak import init_params


class ScriptedModel:
    """Next-token distribution keyed on the full prefix; unknown prefixes end the sentence."""

    def __init__(self, script, vocab=8):
        self.script, self.vocab = script, vocab
        self.calls = 0

    def __call__(self, sources, prefixes):
        self.calls += 1
        out = np.zeros((len(prefixes), self.vocab))
        for i, p in enumerate(prefixes):
            row = self.script.get(tuple(p))
            if row is None:
                out[i, EOS] = 1.0
            else:
                for tok, prob in row.items():
                    out[i, tok] = prob
        return out


# greedy takes 2 then is stuck with a flat continuation; beam finds 3 -> 4 -> EOS
TRAP = {
    (): {2: 0.55, 3: 0.45},
    (2,): {4: 0.25, 5: 0.25, 6: 0.25, 7: 0.25},
    (3,): {4: 0.95, 5: 0.05},
    (3, 4): {EOS: 1.0},
}


def test_beam_finds_better_path_than_greedy():
    src = [[9, 9, 9, 9]]
    assert greedy_decode(ScriptedModel(TRAP), src) == [[2, 4]]
    assert beam_decode(ScriptedModel(TRAP), src, beam=2) == [[3, 4]]


def test_beam_one_is_greedy(small_suite):
    pred = small_suite.predictor("vanilla", "d0", 8)
    sources = [s for s, _ in small_suite.corpus("d0", "test").head(20).pairs]
    assert beam_decode(pred, sources, beam=1) == greedy_decode(pred, sources)


def test_max_length_and_no_eos():
    loop = {(): {2: 1.0}}
    for n in range(1, 20):
        loop[tuple([2] * n)] = {2: 1.0}
    src = [[5, 5, 5]]
    assert greedy_decode(ScriptedModel(loop), src) == [[2] * 7]
    assert beam_decode(ScriptedModel(loop), src, beam=3) == [[2] * 7]
    for hyp in beam_decode(ScriptedModel(TRAP), [[1, 2], [3, 4, 5]], beam=2):
        assert EOS not in hyp


def test_length_penalty_prefers_longer_when_positive():
    script = {(): {EOS: 0.4, 2: 0.6}, (2,): {3: 0.6, EOS: 0.4}, (2, 3): {EOS: 1.0}}
    # [EOS] scores log .4; [2, 3, EOS] scores log .36 over 3 tokens
    assert beam_decode(ScriptedModel(script), [[1, 1]], beam=3, lenpen=0.0) == [[]]
    assert beam_decode(ScriptedModel(script), [[1, 1]], beam=3, lenpen=1.0) == [[2, 3]]


def test_batch_size_does_not_change_output(small_suite):
    pred = small_suite.predictor("uniform", "d0", 8)
    sources = [s for s, _ in small_suite.corpus("d0", "test").head(12).pairs]
    assert beam_decode(pred, sources, batch_size=5) == beam_decode(pred, sources, batch_size=32)


def test_base_greedy_follows_argmax(small_suite):
    pred = small_suite.predictor("base", "d0", 8)
    source = list(small_suite.corpus("d0", "test").pairs[0][0])
    prefix = []
    while len(prefix) < len(source) + 4:
        tok = int(np.argmax(small_suite.base_model.next_token_dist(source, prefix)))
        if tok == EOS:
            break
        prefix.append(tok)
    assert greedy_decode(pred, [source]) == [prefix]


def bias_only_k0(K, hidden=4):
    p = init_params(K, hidden, seed=0)
    b2 = np.full(p.n_choices, -1000.0)
    b2[0] = 0.0
    return p.with_arrays({"W1": np.zeros_like(p.W1), "W2": np.zeros_like(p.W2), "b2": b2})


def test_k0_checkpoint_reproduces_base(small_suite):
    base = small_suite.predictor("base", "d0", 8)
    ada = small_suite.predictor("adaptive", "d0", 8, params=bias_only_k0(8))
    corpus = small_suite.corpus("d0", "test").head(20)
    sources = [s for s, _ in corpus.pairs]
    prefixes = [list(t[:3]) for _, t in corpus.pairs]
    assert np.array_equal(ada(sources, prefixes), base(sources, prefixes))
    assert decode(ada, sources) == decode(base, sources)


def test_predictor_validation(small_suite):
    with pytest.raises(ValueError, match="variant"):
        Predictor("fancy", small_suite.base_model, small_suite.encoder)
    with pytest.raises(ValueError, match="datastore"):
        Predictor("vanilla", small_suite.base_model, small_suite.encoder)
    with pytest.raises(ValueError, match="Meta-k"):
        small_suite.predictor("adaptive", "d0", 8)
    with pytest.raises(ValueError, match="K=4"):
        small_suite.predictor("adaptive", "d0", 8, params=init_params(4, 4, 0))
    with pytest.raises(ValueError, match="mode"):
        decode(small_suite.predictor("base", "d0", 8), [[2, 3]], mode="sample")


def test_distribution_check_mode_over_10k_steps(small_suite):
    sources = [s for s, _ in small_suite.corpus("d0", "dev").pairs + small_suite.corpus("d0", "test").pairs]
    total = 0
    for variant in ("base", "vanilla", "uniform", "adaptive"):
        params = small_suite.train("d0", 8).params if variant == "adaptive" else None
        pred = small_suite.predictor(variant, "d0", 8, params=params)
        pred.check = True
        decode(pred, sources, beam=4)
        total += pred.steps_checked
    assert total >= 10_000


def test_check_mode_rejects_bad_distribution():
    class Broken:
        window = 2

    class Half:
        def batch_dist(self, s, p):
            return np.full((len(s), 4), 0.2)

    pred = Predictor("base", Half(), Broken(), check=True)
    with pytest.raises(InvalidDistribution):
        pred([[2, 3]], [[]])
