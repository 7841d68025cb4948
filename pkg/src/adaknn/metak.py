"""Meta-k network: a two-layer FFN that weights kNN predictions of different sizes.

Input features are the K neighbor distances followed by the K running counts of
distinct token values; the output is a softmax over the k-choice set
{0, 1, 2, 4, ..., K}, where k=0 stands for the base model alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datastore import NeighborList
from .knn import knn_distribution

log = logging.getLogger(__name__)

FEATURE_MASKS = ("full", "no-counts", "no-distances", "none")
NONLINEARITIES = ("relu", "tanh")
LOG_FLOOR = 1e-12
PARAM_NAMES = ("W1", "b1", "W2", "b2")
CHECKPOINT_MAGIC = "ADKNNMK1"


def k_choices(K: int) -> list[int]:
    if K < 1 or K & (K - 1):
        raise ValueError(f"K={K} is not a power of two >= 1")
    return [0] + [1 << j for j in range(K.bit_length())]


def distinct_counts(values: np.ndarray) -> np.ndarray:
    """Running number of distinct values; works row-wise on (N, K) arrays."""
    values = np.asarray(values)
    if values.ndim == 1:
        return distinct_counts(values[None, :])[0]
    n, K = values.shape
    seen_before = np.zeros((n, K), dtype=bool)
    for i in range(1, K):
        seen_before[:, i] = (values[:, :i] == values[:, i : i + 1]).any(axis=1)
    return np.cumsum(~seen_before, axis=1)


def apply_mask(features: np.ndarray, mask: str) -> np.ndarray:
    if mask not in FEATURE_MASKS:
        raise ValueError(f"unknown feature mask {mask!r}")
    features = np.array(features, dtype=np.float64)
    K = features.shape[-1] // 2
    if mask in ("no-distances", "none"):
        features[..., :K] = 0.0
    if mask in ("no-counts", "none"):
        features[..., K:] = 0.0
    return features


def extract_features(neighbors: NeighborList, K: int, mask: str = "full") -> np.ndarray:
    """Concatenate the K distances and the K distinct-value counts."""
    if len(neighbors) != K:
        raise ValueError(f"expected {K} neighbors, got {len(neighbors)}")
    counts = distinct_counts(neighbors.values)
    return apply_mask(np.concatenate([neighbors.distances, counts]), mask)


def batch_features(distances: np.ndarray, values: np.ndarray, mask: str = "full") -> np.ndarray:
    return apply_mask(np.concatenate([distances, distinct_counts(values)], axis=1), mask)


@dataclass
class MetakParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    K: int
    nonlinearity: str = "relu"
    feature_mask: str = "full"
    seed: int = 0
    # optional per-feature standardization, applied before W1
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_choices(self) -> int:
        return self.W2.shape[0]

    def n_parameters(self) -> int:
        return sum(getattr(self, name).size for name in PARAM_NAMES)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "MetakParams":
        return replace(self, **arrays)


def init_params(
    K: int,
    hidden: int,
    seed: int,
    nonlinearity: str = "relu",
    feature_mask: str = "full",
) -> MetakParams:
    """Glorot-uniform weights, zero biases."""
    if nonlinearity not in NONLINEARITIES:
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    if feature_mask not in FEATURE_MASKS:
        raise ValueError(f"unknown feature mask {feature_mask!r}")
    n_out = len(k_choices(K))
    rng = np.random.default_rng(seed)
    a1 = np.sqrt(6.0 / (2 * K + hidden))
    a2 = np.sqrt(6.0 / (hidden + n_out))
    return MetakParams(
        W1=rng.uniform(-a1, a1, size=(hidden, 2 * K)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-a2, a2, size=(n_out, hidden)),
        b2=np.zeros(n_out),
        K=K,
        nonlinearity=nonlinearity,
        feature_mask=feature_mask,
        seed=seed,
    )


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _prepare(params: MetakParams, features: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != params.W1.shape[1]:
        raise ValueError(f"feature length {x.shape[1]} does not match network input {params.W1.shape[1]}")
    x = apply_mask(x, params.feature_mask)
    if params.shift is not None:
        x = (x - params.shift) / params.scale
    return x


def _forward(params: MetakParams, x: np.ndarray):
    z1 = x @ params.W1.T + params.b1
    a1 = _act(z1, params.nonlinearity)
    probs = softmax(a1 @ params.W2.T + params.b2)
    return z1, a1, probs


def metak_forward(params: MetakParams, features: np.ndarray) -> np.ndarray:
    """Distribution over the k-choice set; accepts one feature vector or a batch."""
    probs = _forward(params, _prepare(params, features))[2]
    return probs[0] if np.ndim(features) == 1 else probs


def aggregate(
    p_meta: np.ndarray, neighbors: NeighborList, base_dist: np.ndarray, temperature: float
) -> np.ndarray:
    """Mix the base distribution and the kNN distribution at each k in the choice set."""
    K = len(neighbors)
    choices = k_choices(K)
    p_meta = np.asarray(p_meta, dtype=np.float64)
    if p_meta.shape != (len(choices),):
        raise ValueError(f"p_meta has shape {p_meta.shape}, expected ({len(choices)},)")
    vocab = len(base_dist)
    out = p_meta[0] * np.asarray(base_dist, dtype=np.float64)
    for weight, k in zip(p_meta[1:], choices[1:]):
        out = out + weight * knn_distribution(neighbors.head(k), temperature, vocab)
    return out


def component_gold_probs(
    neighbors: NeighborList, base_dist: np.ndarray, gold: int, temperature: float
) -> np.ndarray:
    """Probability of ``gold`` under every mixture component, in k-choice order."""
    choices = k_choices(len(neighbors))
    vocab = len(base_dist)
    q = [float(base_dist[gold])]
    q += [knn_distribution(neighbors.head(k), temperature, vocab)[gold] for k in choices[1:]]
    return np.asarray(q)


@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    n_clamped: int = 0


def loss_and_grad_arrays(params: MetakParams, features: np.ndarray, gold_probs: np.ndarray) -> LossResult:
    """Mean cross-entropy of the aggregated prediction and its gradient.

    ``gold_probs[n, j]`` is the probability of sample n's gold token under
    component j; the base model and the kNN components are constants here.
    """
    x = _prepare(params, features)
    z1, a1, m = _forward(params, x)
    q = np.asarray(gold_probs, dtype=np.float64)
    p = (m * q).sum(axis=1)
    clamped = p < LOG_FLOOR
    p_safe = np.maximum(p, LOG_FLOOR)
    n = len(x)
    loss = float(-np.log(p_safe).mean())
    # d(-log p)/dlogit_j = m_j (1 - q_j / p); zero where the floor is active
    dlogits = m * (1.0 - q / p_safe[:, None])
    dlogits[clamped] = 0.0
    dlogits /= n
    gW2 = dlogits.T @ a1
    gb2 = dlogits.sum(axis=0)
    dz1 = (dlogits @ params.W2) * _act_grad(z1, a1, params.nonlinearity)
    gW1 = dz1.T @ x
    gb1 = dz1.sum(axis=0)
    return LossResult(loss, {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}, int(clamped.sum()))


def loss_and_grad(params: MetakParams, batch, temperature: float) -> LossResult:
    """``batch`` is a sequence of (features, neighbors, base_dist, gold) tuples."""
    if not batch:
        raise ValueError("empty batch")
    feats, q = [], []
    for features, neighbors, base_dist, gold in batch:
        if not 0 <= gold < len(base_dist):
            raise ValueError(f"gold token {gold} outside vocabulary")
        feats.append(features)
        q.append(component_gold_probs(neighbors, base_dist, gold, temperature))
    result = loss_and_grad_arrays(params, np.asarray(feats), np.asarray(q))
    if result.n_clamped:
        log.warning("%d samples hit the log floor", result.n_clamped)
    return result


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: MetakParams, grads: dict[str, np.ndarray]) -> tuple[AdamState, MetakParams]:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    t = state.step + 1
    new_m, new_v, new_arrays = {}, {}, {}
    for name, value in params.arrays().items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {value.shape}")
        m = state.beta1 * state.m.get(name, np.zeros_like(value)) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(value)) + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_arrays[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return new_state, params.with_arrays(new_arrays)


@dataclass
class MetaTrainSet:
    """Precomputed training samples: features, per-component gold probabilities, sentence ids."""

    features: np.ndarray  # (N, 2K)
    gold_probs: np.ndarray  # (N, |S|)
    sentence: np.ndarray  # (N,) int, groups tokens into sentences for batching

    def __len__(self) -> int:
        return len(self.features)

    def subset_sentences(self, n_sentences: int) -> "MetaTrainSet":
        keep = self.sentence < n_sentences
        return MetaTrainSet(self.features[keep], self.gold_probs[keep], self.sentence[keep])


@dataclass
class TrainResult:
    params: MetakParams
    losses: list[float]
    n_clamped: int = 0


def _round32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def train_metak(
    train_set: MetaTrainSet,
    K: int,
    hidden: int,
    steps: int,
    batch_size: int,
    seed: int,
    feature_mask: str = "full",
    lr: float = 3e-4,
    nonlinearity: str = "relu",
    standardize: bool = False,
) -> TrainResult:
    """Adam on the aggregated cross-entropy, with shuffled mini-batches of whole sentences."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    params = init_params(K, hidden, seed, nonlinearity, feature_mask)
    if train_set.features.shape[1] != 2 * K:
        raise ValueError("training features do not match K")
    if standardize:
        x = apply_mask(train_set.features, feature_mask)
        std = x.std(axis=0)
        params.shift = _round32(x.mean(axis=0))
        params.scale = _round32(np.where(std > 0, std, 1.0))
    rng = np.random.default_rng(seed + 1)
    sentences = np.unique(train_set.sentence)
    # token rows grouped by sentence for cheap batch gathering
    order = np.argsort(train_set.sentence, kind="stable")
    bounds = np.searchsorted(train_set.sentence[order], sentences)
    ends = np.append(bounds[1:], len(order))
    state = AdamState(lr=lr)
    losses: list[float] = []
    clamped = 0
    perm = np.zeros(0, dtype=np.int64)
    pos = 0
    for _ in range(steps):
        if pos >= len(perm):
            perm = rng.permutation(len(sentences))
            pos = 0
        chosen = perm[pos : pos + batch_size]
        pos += batch_size
        rows = np.concatenate([order[bounds[s] : ends[s]] for s in chosen])
        result = loss_and_grad_arrays(params, train_set.features[rows], train_set.gold_probs[rows])
        losses.append(result.loss)
        clamped += result.n_clamped
        state, params = adam_step(state, params, result.grads)
    return TrainResult(params, losses, clamped)


def mean_loss(params: MetakParams, train_set: MetaTrainSet) -> float:
    return loss_and_grad_arrays(params, train_set.features, train_set.gold_probs).loss


def save_checkpoint(params: MetakParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def checkpoint_bytes(params: MetakParams) -> bytes:
    standardize = params.shift is not None
    header = "\n".join(
        [
            CHECKPOINT_MAGIC,
            f"K={params.K}",
            f"H={params.hidden}",
            f"n_choices={params.n_choices}",
            f"nonlinearity={params.nonlinearity}",
            f"feature_mask={params.feature_mask}",
            f"seed={params.seed}",
            f"standardize={int(standardize)}",
            "",
            "",
        ]
    ).encode("ascii")
    blocks = [params.W1, params.b1, params.W2, params.b2]
    if standardize:
        blocks += [params.shift, params.scale]
    return header + b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks)


def load_checkpoint(path: str | Path) -> MetakParams:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0 or not raw.startswith(CHECKPOINT_MAGIC.encode()):
        raise ValueError(f"{path}: not a Meta-k checkpoint")
    fields = dict(line.split("=", 1) for line in raw[:sep].decode("ascii").splitlines()[1:])
    K, H, n_out = int(fields["K"]), int(fields["H"]), int(fields["n_choices"])
    if n_out != len(k_choices(K)):
        raise ValueError(f"{path}: n_choices={n_out} inconsistent with K={K}")
    standardize = fields.get("standardize", "0") == "1"
    shapes = [(H, 2 * K), (H,), (n_out, H), (n_out,)]
    if standardize:
        shapes += [(2 * K,), (2 * K,)]
    body = raw[sep + 2 :]
    expected = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(body) != expected:
        raise ValueError(f"{path}: parameter block is {len(body)} bytes, expected {expected}")
    arrays, off = [], 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 4 * count
    params = MetakParams(
        *arrays[:4],
        K=K,
        nonlinearity=fields["nonlinearity"],
        feature_mask=fields["feature_mask"],
        seed=int(fields["seed"]),
    )
    if standardize:
        params.shift, params.scale = arrays[4], arrays[5]
    return params
