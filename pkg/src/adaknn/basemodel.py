"""Synthetic multi-domain translation tasks, a toy context encoder and a count-based base model.

Target token t is generated from the aligned source token and the previous
target token. The base model is fit on a general-domain corpus, so on a
specialised domain it is right only where that domain agrees with the general
one; a datastore built from in-domain data covers the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

PAD = 0  # also the beginning-of-sentence filler for prefix windows
EOS = 1
N_SPECIAL = 2


class BaseModel(Protocol):
    vocab_size: int

    def next_token_dist(self, source: Sequence[int], prefix: Sequence[int]) -> np.ndarray: ...

    def batch_dist(self, src_windows: np.ndarray, prefix_windows: np.ndarray) -> np.ndarray: ...


@dataclass
class DomainSpec:
    name: str
    vocab_size: int
    source_tokens: np.ndarray  # source vocabulary subset
    target_tokens: np.ndarray  # target vocabulary subset
    start_probs: np.ndarray  # (n_src,) first source token
    transitions: np.ndarray  # (n_src, n_src) source Markov chain
    table: np.ndarray  # (n_src, vocab, vocab): P(y_t | x_t, y_{t-1})
    distractors: np.ndarray  # tokens substituted by noise
    noise_rate: float = 0.1
    min_len: int = 6
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not np.allclose(self.table.sum(axis=-1), 1.0):
            raise ValueError("conditional tables must be distributions")


def _peaked_row(rng, support: np.ndarray, vocab: int, peak: float, n_alt: int) -> np.ndarray:
    row = np.zeros(vocab)
    picks = rng.choice(support, size=1 + n_alt, replace=False)
    row[picks[0]] = peak
    if n_alt:
        row[picks[1:]] += (1.0 - peak) / n_alt
    else:
        row[picks[0]] = 1.0
    return row


def _markov_chain(rng, n: int, branching: int) -> tuple[np.ndarray, np.ndarray]:
    transitions = np.zeros((n, n))
    for i in range(n):
        succ = rng.choice(n, size=min(branching, n), replace=False)
        transitions[i, succ] = rng.dirichlet(np.full(len(succ), 2.0))
    return rng.dirichlet(np.ones(n)), transitions


def _tables(rng, n_src, vocab, support, peak, n_alt, prev_sensitivity, defaults=None):
    """Rows for every (source token, previous target) pair.

    Each source token has a default row; with probability ``prev_sensitivity``
    a pair gets its own row, so the previous token matters for some contexts.
    """
    if defaults is None:
        defaults = np.stack([_peaked_row(rng, support, vocab, peak, n_alt) for _ in range(n_src)])
    table = np.repeat(defaults[:, None, :], vocab, axis=1)
    for s, prev in zip(*np.nonzero(rng.random((n_src, vocab)) < prev_sensitivity)):
        table[s, prev] = _peaked_row(rng, support, vocab, peak, n_alt)
    return table


def make_task(
    seed: int,
    vocab_size: int = 96,
    n_domains: int = 2,
    src_per_domain: int = 16,
    src_overlap: int = 4,
    tgt_per_domain: int = 24,
    tgt_overlap: int = 8,
    share: float = 0.5,
    peak: float = 0.95,
    n_alt: int = 1,
    noise_rate: float = 0.1,
    branching: int = 3,
    prev_sensitivity: float = 0.3,
    min_len: int = 6,
    max_len: int = 12,
    n_distractors: int = 2,
) -> tuple[DomainSpec, list[DomainSpec]]:
    """A general domain plus ``n_domains`` specialised domains.

    Domain i uses its own slice of source tokens (neighbouring slices overlap by
    ``src_overlap``) and its own source Markov chain. Its translation table agrees
    with the general one on a ``share`` fraction of (source, previous target)
    pairs and is domain-specific elsewhere. The general domain covers the union
    of all source slices; the base model is fit on it.
    """
    rng = np.random.default_rng(seed)
    step_src = src_per_domain - src_overlap
    n_src_all = step_src * (n_domains - 1) + src_per_domain
    src_all = np.arange(N_SPECIAL, N_SPECIAL + n_src_all)
    tgt_lo = N_SPECIAL + n_src_all
    step_tgt = tgt_per_domain - tgt_overlap
    n_tgt_all = step_tgt * (n_domains - 1) + tgt_per_domain
    if tgt_lo + n_tgt_all > vocab_size:
        raise ValueError(f"vocab_size {vocab_size} too small for {n_domains} domains")
    tgt_all = np.arange(tgt_lo, tgt_lo + n_tgt_all)

    start, trans = _markov_chain(rng, n_src_all, branching)
    g_table = _tables(rng, n_src_all, vocab_size, tgt_all, peak, n_alt, prev_sensitivity)
    general = DomainSpec(
        name="general",
        vocab_size=vocab_size,
        source_tokens=src_all,
        target_tokens=tgt_all,
        start_probs=start,
        transitions=trans,
        table=g_table,
        distractors=rng.choice(tgt_all, size=n_distractors, replace=False),
        noise_rate=noise_rate,
        min_len=min_len,
        max_len=max_len,
        seed=seed,
    )
    domains = []
    for i in range(n_domains):
        src_idx = np.arange(i * step_src, i * step_src + src_per_domain)
        tgt = tgt_all[i * step_tgt : i * step_tgt + tgt_per_domain]
        start, trans = _markov_chain(rng, len(src_idx), branching)
        own = _tables(rng, len(src_idx), vocab_size, tgt, peak, n_alt, prev_sensitivity)
        keep = rng.random((len(src_idx), vocab_size)) < share
        table = np.where(keep[..., None], g_table[src_idx], own)
        domains.append(
            DomainSpec(
                name=f"d{i}",
                vocab_size=vocab_size,
                source_tokens=src_all[src_idx],
                target_tokens=tgt,
                start_probs=start,
                transitions=trans,
                table=table,
                distractors=rng.choice(tgt, size=n_distractors, replace=False),
                noise_rate=noise_rate,
                min_len=min_len,
                max_len=max_len,
                seed=seed * 1000 + i + 1,
            )
        )
    return general, domains


@dataclass
class Corpus:
    pairs: list[tuple[np.ndarray, np.ndarray]]  # (source, target); target ends with EOS
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def n_target_tokens(self) -> int:
        return sum(len(t) for _, t in self.pairs)

    def head(self, n: int) -> "Corpus":
        return Corpus(self.pairs[:n], self.split)


SPLIT_OFFSETS = {"train": 0, "dev": 1, "test": 2}


def gen_corpus(spec: DomainSpec, n_pairs: int, split: str, seed: int) -> Corpus:
    rng = np.random.default_rng([seed, spec.seed, SPLIT_OFFSETS.get(split, 3)])
    n_src = len(spec.source_tokens)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        s = [int(rng.choice(n_src, p=spec.start_probs))]
        for _ in range(length - 1):
            s.append(int(rng.choice(n_src, p=spec.transitions[s[-1]])))
        target = []
        prev = PAD
        for si in s:
            y = int(rng.choice(spec.vocab_size, p=spec.table[si, prev]))
            if rng.random() < spec.noise_rate:
                y = int(rng.choice(spec.distractors))
            target.append(y)
            prev = y
        target.append(EOS)
        pairs.append((spec.source_tokens[s].astype(np.int64), np.asarray(target, dtype=np.int64)))
    return Corpus(pairs, split)


def windows(source: Sequence[int], prefix: Sequence[int], w: int) -> tuple[np.ndarray, np.ndarray]:
    """Source window aligned with the next target position, and the prefix window.

    Both are ordered oldest first and padded with PAD.
    """
    t = len(prefix)
    src = [source[i] if 0 <= i < len(source) else PAD for i in range(t - w + 1, t + 1)]
    pre = [prefix[i] if i >= 0 else PAD for i in range(t - w, t)]
    return np.asarray(src, dtype=np.int64), np.asarray(pre, dtype=np.int64)


@dataclass
class TokenTable:
    """Teacher-forced view of a corpus: one row per target token."""

    src_windows: np.ndarray  # (N, w)
    prefix_windows: np.ndarray  # (N, w)
    gold: np.ndarray  # (N,)
    sentence: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.gold)


def token_table(corpus: Corpus, w: int = 2) -> TokenTable:
    src_w, pre_w, gold, sent = [], [], [], []
    for n, (source, target) in enumerate(corpus.pairs):
        for t in range(len(target)):
            s, p = windows(source, target[:t], w)
            src_w.append(s)
            pre_w.append(p)
            gold.append(target[t])
            sent.append(n)
    if not gold:
        empty = np.zeros((0, w), dtype=np.int64)
        return TokenTable(empty, empty.copy(), np.zeros(0, np.int64), np.zeros(0, np.int64))
    return TokenTable(np.asarray(src_w), np.asarray(pre_w), np.asarray(gold), np.asarray(sent))


@dataclass
class ToyEncoder:
    """Sum of seeded random token embeddings, one table per window slot.

    Slot j (counting back from the most recent token) is scaled by decay**j.
    """

    vocab_size: int
    dim: int = 16
    window: int = 2
    seed: int = 0
    decay: float = 1.0
    src_emb: np.ndarray = field(init=False, repr=False)
    tgt_emb: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        scale = 1.0 / np.sqrt(self.dim)
        shape = (self.window, self.vocab_size, self.dim)
        self.src_emb = rng.normal(0.0, scale, size=shape)
        self.tgt_emb = rng.normal(0.0, scale, size=shape)
        weights = self.decay ** np.arange(self.window)[::-1]  # oldest slot first
        self.src_emb *= weights[:, None, None]
        self.tgt_emb *= weights[:, None, None]

    @property
    def context_dim(self) -> int:
        return self.dim

    def encode_windows(self, src_windows: np.ndarray, prefix_windows: np.ndarray) -> np.ndarray:
        src_windows = np.atleast_2d(src_windows)
        prefix_windows = np.atleast_2d(prefix_windows)
        out = np.zeros((len(src_windows), self.dim))
        for j in range(self.window):
            out += self.src_emb[j][src_windows[:, j]] + self.tgt_emb[j][prefix_windows[:, j]]
        return out.astype(np.float32)

    def encode(self, source: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        s, p = windows(source, prefix, self.window)
        return self.encode_windows(s[None], p[None])[0]


def toy_encoder(source: Sequence[int], prefix: Sequence[int], encoder: ToyEncoder) -> np.ndarray:
    return encoder.encode(source, prefix)


@dataclass
class CountModel:
    """Additively smoothed next-token frequencies given the context windows.

    The context is the (source window, prefix window) pair the encoder sees, or
    the prefix window alone when ``use_source`` is off. Contexts never seen in
    training back off to the same windows shortened to their most recent
    tokens; a context unseen at every level gets the uniform distribution.
    """

    vocab_size: int
    window: int
    smoothing: float
    use_source: bool
    levels: list[tuple[np.ndarray, np.ndarray]]  # per window length: (sorted codes, counts)

    def _codes(self, src_windows, prefix_windows, width: int) -> np.ndarray:
        ctx = np.atleast_2d(prefix_windows).astype(np.int64)[:, self.window - width :]
        if self.use_source:
            src = np.atleast_2d(src_windows).astype(np.int64)[:, self.window - width :]
            ctx = np.concatenate([src, ctx], axis=1)
        radix = self.vocab_size ** np.arange(ctx.shape[1], dtype=np.int64)[::-1]
        return ctx @ radix

    def batch_dist(self, src_windows: np.ndarray | None, prefix_windows: np.ndarray) -> np.ndarray:
        n = len(np.atleast_2d(prefix_windows))
        counts = np.zeros((n, self.vocab_size))
        done = np.zeros(n, dtype=bool)
        for width, (codes, table) in zip(range(self.window, 0, -1), self.levels):
            query = self._codes(src_windows, prefix_windows, width)
            pos = np.minimum(np.searchsorted(codes, query), len(codes) - 1)
            hit = (codes[pos] == query) & ~done
            counts[hit] = table[pos[hit]]
            done |= hit
        counts += self.smoothing
        return counts / counts.sum(axis=1, keepdims=True)

    def next_token_dist(self, source: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        s, p = windows(source, prefix, self.window)
        return self.batch_dist(s[None], p[None])[0]


def fit_count_model(
    corpus: Corpus, vocab_size: int, smoothing: float = 0.01, window: int = 2, use_source: bool = True
) -> CountModel:
    if len(corpus) == 0:
        raise ValueError("cannot fit a count model on an empty corpus")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    table = token_table(corpus, window)
    model = CountModel(vocab_size, window, smoothing, use_source, [])
    for width in range(window, 0, -1):
        codes = model._codes(table.src_windows, table.prefix_windows, width)
        uniq, inverse = np.unique(codes, return_inverse=True)
        counts = np.zeros((len(uniq), vocab_size))
        np.add.at(counts, (inverse, table.gold), 1.0)
        model.levels.append((uniq, counts))
    return model


def concat(corpora: Sequence[Corpus], split: str = "train") -> Corpus:
    return Corpus([p for c in corpora for p in c.pairs], split)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    lines = [
        " ".join(map(str, s)) + "\t" + " ".join(map(str, t))
        for s, t in corpus.pairs
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_corpus(path: str | Path, split: str = "train") -> Corpus:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected a tab between source and target")
        s, t = line.split("\t", 1)
        pairs.append((np.asarray(s.split(), dtype=np.int64), np.asarray(t.split(), dtype=np.int64)))
    return Corpus(pairs, split)


def write_sequences(seqs: Sequence[Sequence[int]], path: str | Path) -> None:
    Path(path).write_text("".join(" ".join(map(str, s)) + "\n" for s in seqs))


def read_sequences(path: str | Path) -> list[list[int]]:
    return [[int(x) for x in line.split()] for line in Path(path).read_text().splitlines()]
