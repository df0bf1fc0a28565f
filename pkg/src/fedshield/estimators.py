"""scikit-learn style front ends.

* :class:`NextWordPredictor` fits the model centrally (no privacy machinery).
* :class:`FederatedNextWordPredictor` fits it by federated rounds over
  per-user sentence lists, in any of the four privacy modes.
* :class:`StochasticQuantizer` is the client-side DDP encoder as a transformer.

Sentences may be given as strings (tokenized by lowercase + whitespace split)
or as token lists.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import ExperimentConfig, validate_config
from .corpus import LocalDataset, Vocabulary, tokenize
from .ddp import DdpConfig, client_encode, decode
from .model import Architecture, MetricsReport, evaluate, init_model, logits, pretrain


def _as_tokens(sentences) -> list[list[str]]:
    if isinstance(sentences, str):
        raise TypeError("expected a sequence of sentences, got a single string")
    return [tokenize(s) if isinstance(s, str) else [t.lower() for t in s] for s in sentences]


def _contexts(vocab: Vocabulary, X) -> np.ndarray:
    """Last two tokens of each context as an (n, 2) index array; -1 pads."""
    rows = []
    for toks in _as_tokens(X):
        if not toks:
            raise ValueError("every context needs at least one token")
        idx = [vocab.index(t) for t in toks[-2:]]
        rows.append([-1] * (2 - len(idx)) + idx)
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


class _NextWordMixin:
    def _dataset(self, X, user_id: str = "eval") -> LocalDataset:
        return LocalDataset(user_id, [self.vocabulary_.encode(s) for s in _as_tokens(X)])

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        z = logits(self.params_, self.architecture_, _contexts(self.vocabulary_, X))
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        """Most likely next token for each context."""
        check_is_fitted(self, "params_")
        z = logits(self.params_, self.architecture_, _contexts(self.vocabulary_, X))
        return np.array(self.vocabulary_.decode(z.argmax(axis=1)), dtype=object)

    def evaluate(self, X, k: int | None = None) -> MetricsReport:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, [self._dataset(X)], self.architecture_, k or self.k)

    def score(self, X, y=None) -> float:
        """Top-1 next-word accuracy over every position of the sentences in ``X``."""
        return self.evaluate(X).prediction_accuracy

    @property
    def classes_(self) -> np.ndarray:
        check_is_fitted(self, "vocabulary_")
        return np.array(self.vocabulary_.tokens, dtype=object)


class NextWordPredictor(_NextWordMixin, ClassifierMixin, BaseEstimator):
    """Centrally trained next-word model.

    Parameters
    ----------
    vocab_size : int
        Vocabulary size including the out-of-vocabulary class.
    embed_dim : int
        Embedding and hidden width.
    steps, lr, batch_size : SGD settings.
    k : int
        Shortlist size used for the picked-ratio proxy in :meth:`evaluate`.
    random_state : int
    """

    def __init__(self, vocab_size: int = 50, embed_dim: int = 16, steps: int = 500, lr: float = 0.5,
                 batch_size: int = 32, k: int = 3, random_state: int = 0):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.k = k
        self.random_state = random_state

    def fit(self, X, y=None):
        sentences = _as_tokens(X)
        self.vocabulary_ = Vocabulary.build(sentences, self.vocab_size)
        self.architecture_ = Architecture(len(self.vocabulary_), self.embed_dim)
        params = init_model(self.vocabulary_, self.embed_dim, self.random_state)
        self.params_ = pretrain(params, self._dataset(sentences, "train"), self.architecture_,
                                steps=self.steps, lr=self.lr, batch_size=self.batch_size,
                                seed=self.random_state + 1)
        return self


class FederatedNextWordPredictor(_NextWordMixin, BaseEstimator):
    """Federated training over users; ``fit(X)`` takes one sentence list per user.

    After fitting, ``ledger_`` holds the privacy ledger and ``history_`` the
    per-round metrics on ``eval_set`` (or on the training data when none is
    given). The vocabulary is built from ``public_corpus`` when provided,
    otherwise from the users' data.
    """

    def __init__(self, mode: str = "BASELINE", rounds: int = 20, report_goal: int = 10,
                 min_aggregation: int = 5, min_separation: int = 1, dropout_rate: float = 0.0,
                 vocab_size: int = 50, embed_dim: int = 16, clip_norm: float = 1.0,
                 noise_multiplier: float = 1.0, ddp_scale: float = 65536.0, ddp_mu: float = 0.0,
                 client_lr: float = 0.5, client_epochs: int = 1, server_lr: float = 1.0,
                 pretrain_steps: int = 0, k: int = 3, random_state: int = 0):
        self.mode = mode
        self.rounds = rounds
        self.report_goal = report_goal
        self.min_aggregation = min_aggregation
        self.min_separation = min_separation
        self.dropout_rate = dropout_rate
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.ddp_scale = ddp_scale
        self.ddp_mu = ddp_mu
        self.client_lr = client_lr
        self.client_epochs = client_epochs
        self.server_lr = server_lr
        self.pretrain_steps = pretrain_steps
        self.k = k
        self.random_state = random_state

    def to_config(self, n_users: int) -> ExperimentConfig:
        return validate_config(ExperimentConfig(
            mode=self.mode, seed=self.random_state, population_size=n_users, rounds=self.rounds,
            report_goal=self.report_goal, min_aggregation=self.min_aggregation,
            min_separation=self.min_separation, dropout_rate=self.dropout_rate, vocab_size=self.vocab_size,
            embed_dim=self.embed_dim, eval_k=self.k, client_epochs=self.client_epochs,
            client_lr=self.client_lr, server_lr=self.server_lr, clip_norm=self.clip_norm,
            noise_multiplier=self.noise_multiplier, ddp_scale=self.ddp_scale, ddp_mu=self.ddp_mu,
            pretrain_steps=self.pretrain_steps, telemetry_wall_time=False))

    def fit(self, X: Sequence[Iterable], y=None, eval_set=None, public_corpus=None):
        from .experiment import train_federated
        from .seeding import child_seed

        users = [_as_tokens(u) for u in X]
        if not users:
            raise ValueError("need at least one user")
        cfg = self.to_config(len(users))
        source = _as_tokens(public_corpus) if public_corpus is not None else [s for u in users for s in u]
        self.vocabulary_ = Vocabulary.build(source, self.vocab_size)
        self.architecture_ = Architecture(len(self.vocabulary_), self.embed_dim)
        datasets = [LocalDataset(f"user-{i}", [self.vocabulary_.encode(s) for s in u]) for i, u in enumerate(users)]
        params = init_model(self.vocabulary_, self.embed_dim, child_seed(cfg.seed, "init"))
        if public_corpus is not None and self.pretrain_steps:
            params = pretrain(params, self._dataset(public_corpus, "public"), self.architecture_,
                              steps=self.pretrain_steps, seed=child_seed(cfg.seed, "pretrain"))
        heldout = [self._dataset(eval_set)] if eval_set is not None else datasets
        run = train_federated(cfg, datasets, heldout, params)
        self.params_ = run.params
        self.ledger_ = run.ledger
        self.history_ = run.rows
        return self


class StochasticQuantizer(TransformerMixin, BaseEstimator):
    """Row-wise DDP client encoding: scale, stochastic rounding, Skellam noise, mod 2^bits.

    ``transform`` rejects rows whose L2 norm exceeds ``clip_norm``;
    ``inverse_transform`` decodes centred residues and divides by ``scale``.
    """

    def __init__(self, clip_norm: float = 1.0, scale: float = 256.0, bits: int = 32, mu: float = 0.0,
                 random_state: int = 0):
        self.clip_norm = clip_norm
        self.scale = scale
        self.bits = bits
        self.mu = mu
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.config_ = DdpConfig(self.clip_norm, self.scale, self.bits, self.mu, 1)
        if X is not None:
            self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        rng = np.random.default_rng(self.random_state)
        return np.stack([client_encode(row, self.config_, int(rng.integers(2**63))) for row in X])

    def inverse_transform(self, Xq) -> np.ndarray:
        check_is_fitted(self, "config_")
        Xq = np.atleast_2d(np.asarray(Xq, dtype=np.uint64))
        return decode(Xq, self.config_.modulus).astype(np.float64) / self.config_.scale
