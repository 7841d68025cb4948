"""Token distributions from retrieved neighbors, and the fixed-k / uniform predictors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datastore import NeighborList


@dataclass(frozen=True)
class VanillaConfig:
    k: int
    temperature: float
    lam: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")


def knn_distribution(neighbors: NeighborList, temperature: float, vocab_size: int) -> np.ndarray:
    """Softmax over negative distances, summed per token value.

    Only retrieved values receive mass; the normalizer runs over the retrieved set.
    """
    if len(neighbors) == 0:
        raise ValueError("empty neighbor list")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    d = np.asarray(neighbors.distances, dtype=np.float64)
    w = np.exp(-(d - d.min()) / temperature)
    probs = np.zeros(vocab_size)
    np.add.at(probs, np.asarray(neighbors.values), w)
    return probs / w.sum()


def knn_prefix_distributions(
    distances: np.ndarray, values: np.ndarray, ks, temperature: float, vocab_size: int
) -> np.ndarray:
    """Batched kNN distributions over the first k neighbors for every k in ``ks``.

    ``distances``/``values`` are (N, K) arrays sorted nearest first. Returns
    (N, len(ks), vocab_size); a k of 0 yields an all-zero row (the caller fills
    in the base distribution).
    """
    n, kmax = distances.shape
    w = np.exp(-(distances - distances[:, :1]) / temperature)
    out = np.zeros((n, len(ks), vocab_size))
    acc = np.zeros((n, vocab_size))
    rows = np.arange(n)
    norm = np.cumsum(w, axis=1)
    wanted = {k: j for j, k in enumerate(ks)}
    for i in range(max(ks)):
        acc[rows, values[:, i]] += w[:, i]
        j = wanted.get(i + 1)
        if j is not None:
            out[:, j, :] = acc / norm[:, i : i + 1]
    return out


def interpolate(p_knn: np.ndarray, p_nmt: np.ndarray, lam: float) -> np.ndarray:
    p_knn = np.asarray(p_knn, dtype=np.float64)
    p_nmt = np.asarray(p_nmt, dtype=np.float64)
    if p_knn.shape != p_nmt.shape:
        raise ValueError(f"vocab size mismatch: {p_knn.shape} vs {p_nmt.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    if lam == 0.0:
        return p_nmt.copy()
    if lam == 1.0:
        return p_knn.copy()
    return lam * p_knn + (1.0 - lam) * p_nmt


def vanilla_predict(base_dist: np.ndarray, neighbors: NeighborList, cfg: VanillaConfig) -> np.ndarray:
    if len(neighbors) < cfg.k:
        raise ValueError(f"need {cfg.k} neighbors, got {len(neighbors)}")
    p_knn = knn_distribution(neighbors.head(cfg.k), cfg.temperature, len(base_dist))
    return interpolate(p_knn, base_dist, cfg.lam)


def uniform_predict(base_dist: np.ndarray, neighbors: NeighborList, K: int, temperature: float) -> np.ndarray:
    """Equal weight on the base model and on each kNN prediction in the k-choice set."""
    from .metak import k_choices

    choices = k_choices(K)
    if len(neighbors) != K:
        raise ValueError(f"need exactly K={K} neighbors, got {len(neighbors)}")
    vocab = len(base_dist)
    total = np.asarray(base_dist, dtype=np.float64).copy()
    for k in choices[1:]:
        total += knn_distribution(neighbors.head(k), temperature, vocab)
    return total / len(choices)
