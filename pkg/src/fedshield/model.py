"""Tiny next-word-prediction model: training, clipping, evaluation, checkpoints.

Architecture (hidden width equals ``embed_dim``)::

    context  = mean(E[w_{i-2}], E[w_{i-1}])      # just E[w_0] at position 1
    hidden   = tanh(W_h @ context + b_h)
    logits   = W_o @ hidden + b_o

Flattened parameter layout, in order: ``E`` (V x e, row-major), ``W_h``
(e x e), ``W_o`` (V x e), ``b_h`` (e), ``b_o`` (V), so
``d = 2*V*e + e*e + e + V``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._validation import check_int, check_real, check_vector
from .corpus import LocalDataset, Vocabulary

CONTEXT_WIDTH = 2
INIT_SCALE = 0.05

CHECKPOINT_MAGIC = b"FSHD"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")  # magic, version, reserved, d -> 16 bytes


@dataclass(frozen=True)
class Architecture:
    vocab_size: int
    embed_dim: int

    def __post_init__(self):
        check_int(self.vocab_size, "vocab_size", min_value=2)
        check_int(self.embed_dim, "embed_dim", min_value=1)

    @property
    def n_params(self) -> int:
        V, e = self.vocab_size, self.embed_dim
        return 2 * V * e + e * e + e + V

    def unflatten(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        """Structured views into ``theta`` (no copies)."""
        V, e = self.vocab_size, self.embed_dim
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected parameter vector of length {self.n_params}, got {theta.shape}")
        sizes = [("embedding", (V, e)), ("hidden_w", (e, e)), ("output_w", (V, e)),
                 ("hidden_b", (e,)), ("output_b", (V,))]
        out, pos = {}, 0
        for name, shape in sizes:
            size = int(np.prod(shape))
            out[name] = theta[pos:pos + size].reshape(shape)
            pos += size
        return out


@dataclass
class ClientUpdate:
    delta: np.ndarray
    weight: int
    round_index: int = 0


@dataclass(frozen=True)
class MetricsReport:
    prediction_accuracy: float
    picked_ratio_proxy: float
    mean_log_loss: float
    n_eval: int

    def as_dict(self) -> dict:
        return {
            "prediction_accuracy": self.prediction_accuracy,
            "picked_ratio_proxy": self.picked_ratio_proxy,
            "mean_log_loss": self.mean_log_loss,
            "n_eval": self.n_eval,
        }


def init_model(vocab: Vocabulary | int, embed_dim: int, seed: int) -> np.ndarray:
    """Uniform(-0.05, 0.05) initialisation from a seeded generator."""
    vocab_size = len(vocab) if isinstance(vocab, Vocabulary) else vocab
    arch = Architecture(vocab_size, embed_dim)
    rng = np.random.default_rng(seed)
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=arch.n_params)


def make_events(sequences: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Turn sequences into (contexts, targets).

    ``contexts`` has shape (n, 2); a missing left neighbour is -1.
    """
    ctx, tgt = [], []
    for s in sequences:
        s = np.asarray(s, dtype=np.int64)
        if len(s) < 2:
            continue
        pos = np.arange(1, len(s))
        prev1 = s[pos - 1]
        prev2 = np.where(pos >= 2, s[np.maximum(pos - 2, 0)], -1)
        ctx.append(np.stack([prev2, prev1], axis=1))
        tgt.append(s[1:])
    if not ctx:
        return np.empty((0, CONTEXT_WIDTH), dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(ctx), np.concatenate(tgt)


def _context_vectors(emb: np.ndarray, contexts: np.ndarray):
    present = contexts >= 0
    counts = present.sum(axis=1).astype(np.float64)
    gathered = emb[np.where(present, contexts, 0)] * present[..., None]
    return gathered.sum(axis=1) / counts[:, None], present, counts


def logits(theta: np.ndarray, arch: Architecture, contexts: np.ndarray) -> np.ndarray:
    p = arch.unflatten(theta)
    c, _, _ = _context_vectors(p["embedding"], contexts)
    h = np.tanh(c @ p["hidden_w"].T + p["hidden_b"])
    return h @ p["output_w"].T + p["output_b"]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(theta: np.ndarray, arch: Architecture, contexts: np.ndarray,
                  targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the events and its gradient w.r.t. ``theta``."""
    p = arch.unflatten(theta)
    n = len(targets)
    c, present, counts = _context_vectors(p["embedding"], contexts)
    h = np.tanh(c @ p["hidden_w"].T + p["hidden_b"])
    z = h @ p["output_w"].T + p["output_b"]
    logp = _log_softmax(z)
    loss = -logp[np.arange(n), targets].mean()

    grad = np.zeros_like(theta)
    g = arch.unflatten(grad)
    dz = np.exp(logp)
    dz[np.arange(n), targets] -= 1.0
    dz /= n
    g["output_w"][...] = dz.T @ h
    g["output_b"][...] = dz.sum(axis=0)
    dpre = (dz @ p["output_w"]) * (1.0 - h * h)
    g["hidden_w"][...] = dpre.T @ c
    g["hidden_b"][...] = dpre.sum(axis=0)
    dc = (dpre @ p["hidden_w"]) / counts[:, None]
    for j in range(CONTEXT_WIDTH):
        rows = present[:, j]
        np.add.at(g["embedding"], contexts[rows, j], dc[rows])
    return float(loss), grad


def _sgd(theta: np.ndarray, arch: Architecture, contexts: np.ndarray, targets: np.ndarray,
         n_steps: int, lr: float, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Minibatch SGD over reshuffled passes of the events; returns a new vector."""
    theta = theta.copy()
    n = len(targets)
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for _ in range(n_steps):
        if pos >= len(order):
            order, pos = rng.permutation(n), 0
        batch = order[pos:pos + batch_size]
        pos += batch_size
        _, grad = loss_and_grad(theta, arch, contexts[batch], targets[batch])
        theta -= lr * grad
    return theta


def local_train(base: np.ndarray, data: LocalDataset, arch: Architecture, *, epochs: int = 1,
                lr: float = 0.1, batch_size: int = 16, seed: int = 0,
                round_index: int = 0) -> ClientUpdate:
    """Run ``epochs`` shuffled passes of minibatch SGD on one client's data.

    Raises ``ValueError`` when the dataset has no next-token events; the
    caller decides whether to drop that client.
    """
    check_int(epochs, "epochs", min_value=1)
    check_real(lr, "lr", nonnegative=True)
    check_int(batch_size, "batch_size", min_value=1)
    base = check_vector(base, "base", dim=arch.n_params)
    contexts, targets = make_events(data.sequences)
    if len(targets) == 0:
        raise ValueError(f"client dataset {data.user_id!r} has no training examples")
    n_steps = epochs * -(-len(targets) // batch_size)
    trained = _sgd(base, arch, contexts, targets, n_steps, lr, batch_size,
                   np.random.default_rng(seed))
    return ClientUpdate(delta=trained - base, weight=len(targets), round_index=round_index)


def pretrain(params: np.ndarray, public_corpus: LocalDataset, arch: Architecture, *, steps: int,
             lr: float = 0.1, batch_size: int = 32, seed: int = 0) -> np.ndarray:
    """Central, non-private SGD on public data for a fixed number of steps."""
    check_int(steps, "steps", min_value=0)
    check_real(lr, "lr", nonnegative=True)
    params = check_vector(params, "params", dim=arch.n_params)
    if steps == 0:
        return params.copy()
    contexts, targets = make_events(public_corpus.sequences)
    if len(targets) == 0:
        raise ValueError("public corpus has no training examples")
    return _sgd(params, arch, contexts, targets, steps, lr, batch_size, np.random.default_rng(seed))


def clip_update(delta: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``delta`` by ``min(1, C / ||delta||_2)``."""
    clip_norm = check_real(clip_norm, "clip_norm", positive=True)
    delta = check_vector(delta, "delta")
    norm = float(np.sqrt(np.dot(delta, delta)))
    if norm <= clip_norm:
        return delta.copy()
    return delta * (clip_norm / norm)


def true_token_ranks(z: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Rank of each target among its logits; ties favour the lower index."""
    true = z[np.arange(len(targets)), targets][:, None]
    idx = np.arange(z.shape[1])[None, :]
    ahead = (z > true) | ((z == true) & (idx < targets[:, None]))
    return ahead.sum(axis=1)


def evaluate(params: np.ndarray, heldout: Sequence[LocalDataset], arch: Architecture,
             k: int = 3) -> MetricsReport:
    """Top-1 accuracy, top-k containment ("picked ratio" proxy) and mean log loss."""
    check_int(k, "k", min_value=1, max_value=arch.vocab_size)
    if not heldout:
        raise ValueError("heldout must contain at least one dataset")
    contexts, targets = make_events([s for ds in heldout for s in ds.sequences])
    if len(targets) == 0:
        raise ValueError("heldout data has no next-token events")
    z = logits(check_vector(params, "params", dim=arch.n_params), arch, contexts)
    ranks = true_token_ranks(z, targets)
    logp = _log_softmax(z)[np.arange(len(targets)), targets]
    return MetricsReport(
        prediction_accuracy=float(np.mean(ranks < 1)),
        picked_ratio_proxy=float(np.mean(ranks < k)),
        mean_log_loss=float(-logp.mean()),
        n_eval=int(len(targets)),
    )


def save_checkpoint(params: np.ndarray, path: str | Path) -> None:
    params = check_vector(params, "params")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, params.shape[0])
    Path(path).write_bytes(header + params.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, _, d = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * d:
        raise ValueError(f"{path}: expected {d} float32 values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64)
