"""Teacher-forced retrieval and scoring of the base / vanilla / uniform / adaptive predictors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basemodel import Corpus, ToyEncoder, TokenTable, token_table
from .datastore import Datastore, IVFIndex, NeighborList, ivf_search, search_batch
from .knn import knn_prefix_distributions
from .metak import MetakParams, MetaTrainSet, batch_features, k_choices, metak_forward


@dataclass
class Retrieval:
    """Neighbors of every gold-prefix context of a corpus, plus the base model's predictions."""

    table: TokenTable
    distances: np.ndarray  # (N, Kmax)
    values: np.ndarray  # (N, Kmax)
    base: np.ndarray  # (N, V)

    def __len__(self) -> int:
        return len(self.table)

    @property
    def gold(self) -> np.ndarray:
        return self.table.gold

    def head_sentences(self, n: int) -> "Retrieval":
        keep = self.table.sentence < n
        t = self.table
        sub = TokenTable(t.src_windows[keep], t.prefix_windows[keep], t.gold[keep], t.sentence[keep])
        return Retrieval(sub, self.distances[keep], self.values[keep], self.base[keep])


def _without(nl: NeighborList, own: int, k: int) -> NeighborList:
    keep = np.flatnonzero(nl.indices != own)[:k]
    return NeighborList(nl.distances[keep], nl.values[keep], nl.indices[keep])


def retrieve(
    queries: np.ndarray,
    ds: Datastore,
    k: int,
    index: IVFIndex | None = None,
    nprobe: int | None = None,
    exclude: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(distances, values) arrays of shape (n, k); a partial IVF probe must find k entries.

    ``exclude[i]`` is a datastore entry that query i may not return (its own entry).
    """
    n_fetch = k if exclude is None else k + 1
    if index is None or nprobe is None or nprobe >= index.n_centroids:
        lists = search_batch(ds, queries, n_fetch)
    else:
        lists = [ivf_search(index, ds, q, n_fetch, nprobe) for q in queries]
    if exclude is not None:
        lists = [_without(nl, int(own), k) for nl, own in zip(lists, exclude)]
    short = [i for i, nl in enumerate(lists) if len(nl) < k]
    if short:
        raise ValueError(f"IVF probe returned fewer than k={k} neighbors for {len(short)} queries")
    if not lists:
        return np.zeros((0, k)), np.zeros((0, k), dtype=np.int64)
    return np.stack([nl.distances for nl in lists]), np.stack([nl.values for nl in lists])


def teacher_forced_retrieval(
    corpus: Corpus,
    encoder: ToyEncoder,
    base_model,
    ds: Datastore,
    kmax: int,
    index: IVFIndex | None = None,
    nprobe: int | None = None,
    exclude_self: bool = False,
) -> Retrieval:
    """Neighbors and base predictions for every gold-prefix context of ``corpus``.

    With ``exclude_self`` the corpus must be the one ``ds`` was built from, so
    token row i is datastore entry i and is dropped from its own neighbor list.
    """
    table = token_table(corpus, encoder.window)
    queries = encoder.encode_windows(table.src_windows, table.prefix_windows)
    exclude = None
    if exclude_self:
        if len(table) != len(ds):
            raise ValueError(f"exclude_self needs the datastore's own corpus ({len(table)} tokens vs {len(ds)} entries)")
        exclude = np.arange(len(table))
    d, v = retrieve(queries, ds, kmax, index, nprobe, exclude)
    base = base_model.batch_dist(table.src_windows, table.prefix_windows)
    return Retrieval(table, d, v, base)


def components(retr: Retrieval, K: int, temperature: float) -> np.ndarray:
    """(N, |S|, V): the base distribution followed by the kNN distribution at each k in S."""
    choices = k_choices(K)
    comps = knn_prefix_distributions(
        retr.distances[:, :K], retr.values[:, :K], choices, temperature, retr.base.shape[1]
    )
    comps[:, 0, :] = retr.base
    return comps


def accuracy(probs: np.ndarray, gold: np.ndarray) -> float:
    """Percentage of rows whose argmax is the gold token."""
    return 100.0 * float(np.mean(np.argmax(probs, axis=1) == gold))


def vanilla_probs(retr: Retrieval, k: int, lam: float, temperature: float) -> np.ndarray:
    p_knn = knn_prefix_distributions(retr.distances[:, :k], retr.values[:, :k], [k], temperature, retr.base.shape[1])
    return lam * p_knn[:, 0, :] + (1.0 - lam) * retr.base


LAMBDA_GRID = tuple(np.round(np.arange(0.0, 1.0001, 0.1), 2))


def tune_lambda(retr: Retrieval, k: int, temperature: float, grid=LAMBDA_GRID) -> tuple[float, float]:
    """Best (lambda, accuracy) on a development retrieval; ties keep the smaller lambda."""
    p_knn = knn_prefix_distributions(retr.distances[:, :k], retr.values[:, :k], [k], temperature, retr.base.shape[1])[:, 0]
    best = (grid[0], -1.0)
    for lam in grid:
        acc = accuracy(lam * p_knn + (1.0 - lam) * retr.base, retr.gold)
        if acc > best[1]:
            best = (float(lam), acc)
    return best


def uniform_probs(retr: Retrieval, K: int, temperature: float) -> np.ndarray:
    return components(retr, K, temperature).mean(axis=1)


def meta_features(retr: Retrieval, K: int, mask: str = "full") -> np.ndarray:
    return batch_features(retr.distances[:, :K], retr.values[:, :K], mask)


def adaptive_probs(retr: Retrieval, params: MetakParams, temperature: float) -> np.ndarray:
    K = params.K
    p_meta = metak_forward(params, meta_features(retr, K, params.feature_mask))
    comps = components(retr, K, temperature)
    return np.einsum("ns,nsv->nv", p_meta, comps)


def meta_train_set(retr: Retrieval, K: int, temperature: float, mask: str = "full") -> MetaTrainSet:
    comps = components(retr, K, temperature)
    q = comps[np.arange(len(retr)), :, retr.gold]
    return MetaTrainSet(meta_features(retr, K, mask), q, retr.table.sentence.copy())
