"""Key/value datastore of context vectors and token ids, with exact and IVF search.

Keys are stored as float32 rows; all distance arithmetic is done in float64 on
those rows so that every search path reports bit-identical distances.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DATASTORE_MAGIC = b"ADKNNDS1"
INDEX_MAGIC = b"ADKNNIV1"

SQUARED = "squared"
L2 = "l2"


class DatastoreError(ValueError):
    """Raised for malformed datastore input or files."""


class CorruptFileError(DatastoreError):
    pass


@dataclass(frozen=True)
class NeighborList:
    """The k retrieved neighbors of one query, nearest first.

    Ties in distance are ordered by ascending ``indices``.
    """

    distances: np.ndarray  # float64, (k,)
    values: np.ndarray  # int64, (k,)
    indices: np.ndarray  # int64, (k,)

    def __len__(self) -> int:
        return len(self.indices)

    def head(self, k: int) -> "NeighborList":
        return NeighborList(self.distances[:k], self.values[:k], self.indices[:k])


@dataclass
class Datastore:
    dim: int
    vocab_size: int
    keys: np.ndarray  # float32, (N, dim)
    values: np.ndarray  # uint32, (N,)
    metric: str = SQUARED
    _sq_norms: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def sq_norms(self) -> np.ndarray:
        if self._sq_norms is None:
            k64 = self.keys.astype(np.float64)
            self._sq_norms = np.einsum("ij,ij->i", k64, k64)
        return self._sq_norms

    def to_bytes(self) -> bytes:
        header = DATASTORE_MAGIC + struct.pack("<IIQ", self.dim, self.vocab_size, len(self))
        return (
            header
            + np.ascontiguousarray(self.keys, dtype="<f4").tobytes()
            + np.ascontiguousarray(self.values, dtype="<u4").tobytes()
        )

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()[:16]


def build_datastore(
    pairs: Iterable[tuple[Sequence[float], int]],
    dim: int,
    vocab_size: int,
    metric: str = SQUARED,
) -> Datastore:
    """Build a datastore from a stream of (context vector, token id) pairs, keeping stream order."""
    if dim <= 0 or vocab_size <= 0:
        raise DatastoreError("dim and vocab_size must be positive")
    if metric not in (SQUARED, L2):
        raise DatastoreError(f"unknown metric {metric!r}")
    keys, values = [], []
    for n, (key, value) in enumerate(pairs):
        key = np.asarray(key, dtype=np.float32)
        if key.shape != (dim,):
            raise DatastoreError(f"pair {n}: key has shape {key.shape}, expected ({dim},)")
        if not np.all(np.isfinite(key)):
            raise DatastoreError(f"pair {n}: non-finite key component")
        if not 0 <= int(value) < vocab_size:
            raise DatastoreError(f"pair {n}: token id {value} outside [0, {vocab_size})")
        keys.append(key)
        values.append(int(value))
    key_arr = np.stack(keys) if keys else np.zeros((0, dim), dtype=np.float32)
    return Datastore(dim, vocab_size, key_arr, np.asarray(values, dtype=np.uint32), metric)


def from_arrays(keys: np.ndarray, values: np.ndarray, vocab_size: int, metric: str = SQUARED) -> Datastore:
    """Vectorized equivalent of :func:`build_datastore` for pre-stacked arrays."""
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    values = np.asarray(values)
    if keys.ndim != 2 or len(keys) != len(values):
        raise DatastoreError("keys must be (N, dim) with one value per row")
    if not np.all(np.isfinite(keys)):
        raise DatastoreError("non-finite key component")
    if len(values) and (values.min() < 0 or values.max() >= vocab_size):
        raise DatastoreError(f"token id outside [0, {vocab_size})")
    return Datastore(keys.shape[1], vocab_size, keys, values.astype(np.uint32), metric)


def save_datastore(ds: Datastore, path: str | Path) -> None:
    Path(path).write_bytes(ds.to_bytes())


def load_datastore(path: str | Path, metric: str = SQUARED) -> Datastore:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise CorruptFileError(f"{path}: truncated header")
    if raw[:8] != DATASTORE_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {raw[:8]!r}")
    dim, vocab_size, n = struct.unpack("<IIQ", raw[8:24])
    if dim == 0 or vocab_size == 0:
        raise CorruptFileError(f"{path}: zero dim or vocab_size in header")
    expected = 24 + 4 * n * dim + 4 * n
    if len(raw) != expected:
        raise CorruptFileError(f"{path}: size {len(raw)} does not match header ({expected} bytes)")
    keys = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=24).reshape(n, dim)
    values = np.frombuffer(raw, dtype="<u4", count=n, offset=24 + 4 * n * dim)
    if n and int(values.max()) >= vocab_size:
        raise CorruptFileError(f"{path}: token id exceeds vocab_size")
    return Datastore(dim, vocab_size, keys.astype(np.float32), values.astype(np.uint32), metric)


def _as_queries(ds: Datastore, queries: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float32)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != ds.dim:
        raise DatastoreError(f"query dimension {q.shape[-1]} does not match datastore dim {ds.dim}")
    return q.astype(np.float64)


def _exact_distances(keys64: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = keys64 - q
    return np.einsum("ij,ij->i", diff, diff)


def _finish(ds: Datastore, cand: np.ndarray, dist: np.ndarray, k: int) -> NeighborList:
    order = np.lexsort((cand, dist))[:k]
    idx = cand[order]
    d = dist[order]
    if ds.metric == L2:
        d = np.sqrt(d)
    return NeighborList(d, ds.values[idx].astype(np.int64), idx.astype(np.int64))


def search_batch(ds: Datastore, queries: np.ndarray, k: int, chunk: int = 2048) -> list[NeighborList]:
    """Exact k-NN for many queries.

    Candidates are preselected with a float64 matrix product, then every
    candidate within a safety margin of the k-th distance is rescored with the
    direct difference formula. The margin covers the expansion's rounding, so
    the result equals a full direct scan, including index tie-breaks.
    """
    q_all = _as_queries(ds, queries)
    n = len(ds)
    if not 1 <= k <= n:
        raise DatastoreError(f"k={k} must be in [1, {n}] (datastore size)")
    keys64 = ds.keys.astype(np.float64)
    norms = ds.sq_norms
    max_norm = float(norms.max())
    out: list[NeighborList] = []
    for start in range(0, len(q_all), chunk):
        q = q_all[start : start + chunk]
        qn = np.einsum("ij,ij->i", q, q)
        approx = qn[:, None] + norms[None, :] - 2.0 * (q @ keys64.T)
        if k < n:
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        else:
            kth = approx.max(axis=1)
        margin = 1e-9 * (qn + max_norm) + 1e-300
        for row in range(len(q)):
            cand = np.flatnonzero(approx[row] <= kth[row] + margin[row])
            dist = _exact_distances(keys64[cand], q[row])
            out.append(_finish(ds, cand, dist, k))
    return out


def exact_search(ds: Datastore, query: np.ndarray, k: int) -> NeighborList:
    return search_batch(ds, np.asarray(query)[None, :] if np.ndim(query) == 1 else query, k)[0]


@dataclass
class IVFIndex:
    centroids: np.ndarray  # float32, (C, dim)
    lists: list[np.ndarray]  # one int64 array of entry indices per centroid
    trained_on: bytes  # datastore fingerprint
    objective: list[float] = field(default_factory=list, compare=False)

    @property
    def n_centroids(self) -> int:
        return len(self.centroids)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (
        np.einsum("ij,ij->i", points, points)[:, None]
        + np.einsum("ij,ij->i", centers, centers)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d, 0.0)


def _assign(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(points, centers)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(len(points)), labels]


def _kmeanspp(points: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(len(points)))]
    closest = _sq_dists(points, points[chosen]).ravel()
    for _ in range(1, c):
        total = closest.sum()
        if total <= 0:
            rest = np.setdiff1d(np.arange(len(points)), chosen)
            chosen.append(int(rng.choice(rest)))
        else:
            chosen.append(int(rng.choice(len(points), p=closest / total)))
        closest = np.minimum(closest, _sq_dists(points, points[chosen[-1:]]).ravel())
    return np.asarray(chosen)


def train_ivf(
    ds: Datastore, n_centroids: int, n_iters: int = 20, seed: int = 0, init: str = "random"
) -> IVFIndex:
    """Lloyd's k-means over the datastore keys, then one inverted list per centroid."""
    n = len(ds)
    if n == 0:
        raise DatastoreError("cannot train an IVF index on an empty datastore")
    if not 1 <= n_centroids <= n:
        raise DatastoreError(f"n_centroids={n_centroids} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    points = ds.keys.astype(np.float64)
    if init == "kmeans++":
        start = _kmeanspp(points, n_centroids, rng)
    elif init == "random":
        start = np.sort(rng.choice(n, size=n_centroids, replace=False))
    else:
        raise DatastoreError(f"unknown init {init!r}")
    centers = points[start].copy()
    objective: list[float] = []
    for _ in range(n_iters):
        labels, d = _assign(points, centers)
        objective.append(float(d.sum()))
        counts = np.bincount(labels, minlength=n_centroids)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for empty in np.flatnonzero(~nonempty):
            # move the empty centroid onto the farthest member of the largest cluster
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(_sq_dists(points[members], centers[big : big + 1]).ravel())]
            centers[empty] = points[far]
            labels[far] = empty
            counts[big] -= 1
            counts[empty] = 1
    centers32 = centers.astype(np.float32)
    labels, d = _assign(points, centers32.astype(np.float64))
    objective.append(float(d.sum()))
    lists = [np.flatnonzero(labels == c).astype(np.int64) for c in range(n_centroids)]
    return IVFIndex(centers32, lists, ds.fingerprint(), objective)


def ivf_search(index: IVFIndex, ds: Datastore, query: np.ndarray, k: int, nprobe: int) -> NeighborList:
    """Scan the ``nprobe`` lists nearest to the query; may return fewer than k neighbors."""
    if not 1 <= nprobe <= index.n_centroids:
        raise DatastoreError(f"nprobe={nprobe} must be in [1, {index.n_centroids}]")
    if k < 1:
        raise DatastoreError("k must be >= 1")
    q = _as_queries(ds, query)[0]
    cd = _exact_distances(index.centroids.astype(np.float64), q)
    probe = np.lexsort((np.arange(len(cd)), cd))[:nprobe]
    cand = np.concatenate([index.lists[c] for c in probe]) if nprobe else np.zeros(0, np.int64)
    cand = np.sort(cand)
    dist = _exact_distances(ds.keys[cand].astype(np.float64), q)
    return _finish(ds, cand, dist, k)


def index_to_bytes(index: IVFIndex) -> bytes:
    c, dim = index.centroids.shape
    parts = [
        INDEX_MAGIC,
        struct.pack("<II", c, dim),
        index.trained_on,
        np.ascontiguousarray(index.centroids, dtype="<f4").tobytes(),
        np.asarray([len(l) for l in index.lists], dtype="<u8").tobytes(),
    ]
    parts += [np.asarray(l, dtype="<u4").tobytes() for l in index.lists]
    return b"".join(parts)


def save_index(index: IVFIndex, path: str | Path) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def load_index(path: str | Path) -> IVFIndex:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise CorruptFileError(f"{path}: truncated header")
    if raw[:8] != INDEX_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {raw[:8]!r}")
    c, dim = struct.unpack("<II", raw[8:16])
    fingerprint = raw[16:32]
    off = 32
    need = off + 4 * c * dim + 8 * c
    if c == 0 or len(raw) < need:
        raise CorruptFileError(f"{path}: truncated centroid block")
    centroids = np.frombuffer(raw, dtype="<f4", count=c * dim, offset=off).reshape(c, dim).astype(np.float32)
    off += 4 * c * dim
    lengths = np.frombuffer(raw, dtype="<u8", count=c, offset=off).astype(np.int64)
    off += 8 * c
    if len(raw) != off + 4 * int(lengths.sum()):
        raise CorruptFileError(f"{path}: list block size does not match header")
    lists = []
    for length in lengths:
        lists.append(np.frombuffer(raw, dtype="<u4", count=int(length), offset=off).astype(np.int64))
        off += 4 * int(length)
    return IVFIndex(centroids, lists, fingerprint)


def check_index(index: IVFIndex, ds: Datastore) -> None:
    if index.trained_on != ds.fingerprint():
        raise DatastoreError("IVF index was trained on a different datastore")
