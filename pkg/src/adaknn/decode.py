"""Batched greedy and beam decoding over any of the four predictor variants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basemodel import EOS, ToyEncoder, windows
from .datastore import Datastore, IVFIndex
from .knn import knn_prefix_distributions
from .metak import MetakParams, batch_features, k_choices, metak_forward
from .scoring import retrieve

VARIANTS = ("base", "vanilla", "uniform", "adaptive")


class InvalidDistribution(AssertionError):
    pass


@dataclass
class Predictor:
    """Next-token distributions for a batch of (source, prefix) states."""

    variant: str
    base_model: object
    encoder: ToyEncoder
    ds: Datastore | None = None
    index: IVFIndex | None = None
    nprobe: int | None = None
    K: int = 8
    temperature: float = 1.0
    lam: float = 0.5
    params: MetakParams | None = None
    check: bool = False
    steps_checked: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant != "base" and self.ds is None:
            raise ValueError(f"variant {self.variant!r} needs a datastore")
        if self.variant == "adaptive":
            if self.params is None:
                raise ValueError("adaptive variant needs Meta-k parameters")
            if self.params.K != self.K:
                raise ValueError(f"checkpoint K={self.params.K} does not match K={self.K}")

    def __call__(self, sources: Sequence[Sequence[int]], prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        w = self.encoder.window
        wins = [windows(s, p, w) for s, p in zip(sources, prefixes)]
        src_w = np.stack([s for s, _ in wins])
        pre_w = np.stack([p for _, p in wins])
        probs = self.base_model.batch_dist(src_w, pre_w)
        if self.variant != "base":
            queries = self.encoder.encode_windows(src_w, pre_w)
            d, v = retrieve(queries, self.ds, self.K, self.index, self.nprobe)
            probs = self._mix(probs, d, v)
        if self.check:
            self._validate(probs)
        return probs

    def _mix(self, base: np.ndarray, d: np.ndarray, v: np.ndarray) -> np.ndarray:
        vocab = base.shape[1]
        if self.variant == "vanilla":
            p_knn = knn_prefix_distributions(d, v, [self.K], self.temperature, vocab)[:, 0]
            return self.lam * p_knn + (1.0 - self.lam) * base
        comps = knn_prefix_distributions(d, v, k_choices(self.K), self.temperature, vocab)
        comps[:, 0, :] = base
        if self.variant == "uniform":
            return comps.mean(axis=1)
        p_meta = metak_forward(self.params, batch_features(d, v, self.params.feature_mask))
        return np.einsum("ns,nsv->nv", p_meta, comps)

    def _validate(self, probs: np.ndarray) -> None:
        if not (np.all(probs >= 0) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-9, rtol=0)):
            raise InvalidDistribution("decoder produced an invalid next-token distribution")
        self.steps_checked += len(probs)


def _max_len(source, extra: int) -> int:
    return len(source) + extra


def greedy_decode(
    predictor, sources: Sequence[Sequence[int]], extra_len: int = 4, batch_size: int = 32
) -> list[list[int]]:
    """Argmax decoding (lowest token id on ties); the returned sequences exclude EOS."""
    out: list[list[int]] = []
    for start in range(0, len(sources), batch_size):
        batch = [list(s) for s in sources[start : start + batch_size]]
        prefixes: list[list[int]] = [[] for _ in batch]
        live = list(range(len(batch)))
        while live:
            probs = predictor([batch[i] for i in live], [prefixes[i] for i in live])
            tokens = np.argmax(probs, axis=1)
            still = []
            for i, tok in zip(live, tokens):
                if tok == EOS:
                    continue
                prefixes[i].append(int(tok))
                if len(prefixes[i]) < _max_len(batch[i], extra_len):
                    still.append(i)
            live = still
        out.extend(prefixes)
    return out


@dataclass
class _Hyp:
    tokens: list[int]
    score: float


def _normalized(h: _Hyp, lenpen: float) -> float:
    return h.score / (len(h.tokens) ** lenpen) if h.tokens else h.score


def beam_decode(
    predictor,
    sources: Sequence[Sequence[int]],
    beam: int = 4,
    lenpen: float = 0.6,
    extra_len: int = 4,
    batch_size: int = 32,
) -> list[list[int]]:
    """Beam search ranking finished hypotheses by log-probability / length**lenpen.

    Each step keeps the ``beam`` best expansions of the live hypotheses; those
    ending in EOS leave the beam. With ``beam=1`` this is greedy decoding.
    Returned sequences exclude EOS.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    results: list[list[int]] = []
    for start in range(0, len(sources), batch_size):
        batch = [list(s) for s in sources[start : start + batch_size]]
        live = [[_Hyp([], 0.0)] for _ in batch]
        finished: list[list[_Hyp]] = [[] for _ in batch]
        while any(live):
            owners = [(b, h) for b, hyps in enumerate(live) for h in hyps]
            probs = predictor([batch[b] for b, _ in owners], [h.tokens for _, h in owners])
            with np.errstate(divide="ignore"):
                logp = np.log(probs)
            new_live: list[list[_Hyp]] = [[] for _ in batch]
            row = 0
            for b, hyps in enumerate(live):
                if not hyps:
                    continue
                block = logp[row : row + len(hyps)]
                cand = np.asarray([h.score for h in hyps])[:, None] + block
                row += len(hyps)
                flat = cand.ravel()
                # stable sort: ties go to the earlier hypothesis, then the lower token id
                order = np.argsort(-flat, kind="stable")[:beam]
                for pos in order:
                    hi, tok = divmod(int(pos), cand.shape[1])
                    hyp = _Hyp(hyps[hi].tokens + [tok], float(flat[pos]))
                    if tok == EOS:
                        finished[b].append(hyp)
                    elif len(hyp.tokens) >= _max_len(batch[b], extra_len):
                        finished[b].append(_Hyp(hyp.tokens + [EOS], hyp.score))
                    else:
                        new_live[b].append(hyp)
            live = new_live
        for hyps in finished:
            best = max(hyps, key=lambda h: _normalized(h, lenpen))
            results.append([t for t in best.tokens if t != EOS])
    return results


def decode(predictor, sources, mode: str = "beam", beam: int = 4, lenpen: float = 0.6, batch_size: int = 32):
    if mode == "greedy":
        return greedy_decode(predictor, sources, batch_size=batch_size)
    if mode == "beam":
        return beam_decode(predictor, sources, beam=beam, lenpen=lenpen, batch_size=batch_size)
    raise ValueError(f"unknown decode mode {mode!r}")
