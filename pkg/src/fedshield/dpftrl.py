"""DP-FTRL server side: tree-aggregated Gaussian noise on prefix sums of the
aggregated updates, and the user-level zCDP ledger.

Tree nodes are identified by ``(level, index)``; node ``(l, j)`` covers rounds
``j*2^l + 1 .. (j+1)*2^l``. The prefix ``[1, t]`` is covered by one node per
set bit of ``t``. Node noise is ``N(0, sigma^2 I_d)`` drawn from
``numpy.random.default_rng([tree_seed, level, index])``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ._validation import check_int, check_real, check_vector


class Verdict(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"


def tree_height(T: int) -> int:
    """Nodes a single round touches: ceil(log2 T) + 1."""
    check_int(T, "T", min_value=1)
    return (T - 1).bit_length() + 1


def prefix_nodes(t: int) -> list[tuple[int, int]]:
    """Tree nodes whose intervals partition ``[1, t]``, largest first."""
    nodes, start = [], 0
    for level in range(t.bit_length() - 1, -1, -1):
        if t >> level & 1:
            nodes.append((level, start >> level))
            start += 1 << level
    return nodes


@dataclass
class NoiseTree:
    horizon: int
    sigma: float
    dim: int
    seed: int

    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        check_int(self.horizon, "horizon", min_value=1)
        check_real(self.sigma, "sigma", nonnegative=True)
        check_int(self.dim, "dim", min_value=1)

    def node_noise(self, level: int, index: int) -> np.ndarray:
        if self.sigma == 0:
            return np.zeros(self.dim)
        key = (level, index)
        if key not in self._cache:
            self._cache[key] = np.random.default_rng([self.seed, level, index]).normal(0.0, self.sigma, self.dim)
        return self._cache[key]

    def cumulative_noise(self, t: int) -> np.ndarray:
        check_int(t, "t", min_value=1, max_value=self.horizon)
        total = np.zeros(self.dim)
        for level, index in prefix_nodes(t):
            total += self.node_noise(level, index)
        return total


def tree_cumulative_noise(tree: NoiseTree, t: int) -> np.ndarray:
    return tree.cumulative_noise(t)


class ServerSGD:
    """Plain federated averaging step: ``checkpoint + lr * mean_update``."""

    def __init__(self, lr: float = 1.0, momentum: float = 0.0):
        self.lr = check_real(lr, "lr", nonnegative=True)
        self.momentum = check_real(momentum, "momentum", nonnegative=True)
        self._velocity: np.ndarray | None = None

    def step(self, checkpoint: np.ndarray, mean_update: np.ndarray, round_index: int) -> np.ndarray:
        mean_update = check_vector(mean_update, "mean_update", dim=checkpoint.shape[0])
        if self.momentum == 0:
            return checkpoint + self.lr * mean_update
        self._velocity = mean_update if self._velocity is None else self.momentum * self._velocity + mean_update
        return checkpoint + self.lr * self._velocity


@dataclass
class ServerOptimizerState:
    checkpoint: np.ndarray
    momentum_buffer: np.ndarray
    noisy_prefix_sum: np.ndarray
    prev_noise: np.ndarray
    lr: float
    momentum: float
    steps: int = 0


class DPFTRLOptimizer:
    """Noisy prefix-sum server update with optional heavy-ball momentum.

    With ``S~_t = sum_{r<=t} mean_r + tree_noise(t) / noise_weight`` the
    applied increment is ``g_t = S~_t - S~_{t-1}``, so with zero momentum the
    checkpoint is ``checkpoint_0 + lr * S~_t``. The tree is re-keyed every
    ``restart_period`` rounds when that is set.
    """

    def __init__(self, checkpoint: np.ndarray, *, lr: float, momentum: float = 0.0,
                 noise_multiplier: float, clip_norm: float, noise_weight: int, horizon: int,
                 seed: int, restart_period: int | None = None):
        checkpoint = check_vector(checkpoint, "checkpoint")
        self.noise_multiplier = check_real(noise_multiplier, "noise_multiplier", nonnegative=True)
        self.clip_norm = check_real(clip_norm, "clip_norm", positive=True)
        self.noise_weight = check_int(noise_weight, "noise_weight", min_value=1)
        self.horizon = check_int(horizon, "horizon", min_value=1)
        self.restart_period = restart_period or horizon
        self.seed = seed
        d = checkpoint.shape[0]
        self.state = ServerOptimizerState(
            checkpoint=checkpoint.copy(), momentum_buffer=np.zeros(d), noisy_prefix_sum=np.zeros(d),
            prev_noise=np.zeros(d), lr=check_real(lr, "lr", nonnegative=True),
            momentum=check_real(momentum, "momentum", nonnegative=True))
        self._trees: dict[int, NoiseTree] = {}

    @property
    def sigma(self) -> float:
        return self.noise_multiplier * self.clip_norm

    def tree_for(self, round_index: int) -> tuple[NoiseTree, int]:
        """The tree covering ``round_index`` and the round's position within it."""
        segment, local = divmod(round_index - 1, self.restart_period)
        if segment not in self._trees:
            length = min(self.restart_period, self.horizon - segment * self.restart_period)
            self._trees[segment] = NoiseTree(max(length, 1), self.sigma, self.state.checkpoint.shape[0],
                                             seed=self.seed * 7919 + segment)
        return self._trees[segment], local + 1

    def noise_at(self, round_index: int) -> np.ndarray:
        """Cumulative noise of all completed segments plus the current prefix."""
        tree, local_t = self.tree_for(round_index)
        noise = tree.cumulative_noise(local_t)
        segment = (round_index - 1) // self.restart_period
        for s in range(segment):
            prev_tree, _ = self.tree_for(s * self.restart_period + 1)
            noise = noise + prev_tree.cumulative_noise(prev_tree.horizon)
        return noise

    def step(self, checkpoint: np.ndarray, mean_update: np.ndarray, round_index: int) -> np.ndarray:
        st = self.state
        if round_index > self.horizon:
            raise ValueError(f"round {round_index} beyond noise-tree horizon {self.horizon}")
        mean_update = check_vector(mean_update, "mean_update", dim=st.checkpoint.shape[0])
        noise = self.noise_at(round_index)
        increment = mean_update + (noise - st.prev_noise) / self.noise_weight
        st.prev_noise = noise
        st.noisy_prefix_sum = st.noisy_prefix_sum + increment
        if st.momentum == 0:
            st.momentum_buffer = increment
        else:
            st.momentum_buffer = st.momentum * st.momentum_buffer + increment
        st.checkpoint = checkpoint + st.lr * st.momentum_buffer
        st.steps += 1
        return st.checkpoint


def server_step(optimizer: DPFTRLOptimizer, aggregate_mean_update: np.ndarray, t: int) -> ServerOptimizerState:
    optimizer.step(optimizer.state.checkpoint, aggregate_mean_update, t)
    return optimizer.state


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def account_zcdp(clip_norm: float, noise_multiplier: float, T: int, k_max: int) -> float:
    """rho = k_max * h / (2 z^2) with h = ceil(log2 T) + 1 nodes per participation.

    Each node is a Gaussian mechanism with sensitivity C and std z*C, i.e.
    rho = 1/(2 z^2); a user touches at most h nodes per participation. The
    clip norm cancels but is kept in the signature for the ledger.
    """
    check_real(clip_norm, "clip_norm", positive=True)
    z = check_real(noise_multiplier, "noise_multiplier", allow_inf=True)
    if z <= 0:
        raise ValueError(f"noise_multiplier must be > 0, got {z}")
    check_int(T, "T", min_value=0)
    check_int(k_max, "k_max", min_value=1)
    if T == 0 or math.isinf(z):
        return 0.0
    return k_max * tree_height(T) / (2.0 * z * z)


def max_participations(T: int, min_separation: int) -> int:
    """Participation cap implied by the separation policy: ceil(T / min_separation).

    A separation of 0 or 1 places no cap beyond one participation per round.
    """
    check_int(min_separation, "min_separation", min_value=0)
    return max(1, -(-T // max(min_separation, 1)))


def account_with_restarts(clip_norm: float, noise_multiplier: float, T: int, min_separation: int,
                          restart_period: int | None = None) -> float:
    """Compose per-tree rho additively over restart segments."""
    if noise_multiplier == 0:
        return math.inf
    period = restart_period or max(T, 1)
    rho, start = 0.0, 0
    while start < T:
        length = min(period, T - start)
        rho += account_zcdp(clip_norm, noise_multiplier, length, max_participations(length, min_separation))
        start += length
    return rho


def zcdp_to_eps(rho: float, delta: float) -> float:
    """epsilon = rho + 2 sqrt(rho ln(1/delta))."""
    rho = check_real(rho, "rho", nonnegative=True, allow_inf=True)
    delta = check_real(delta, "delta")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if math.isinf(rho):
        return math.inf
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


@dataclass
class PrivacyLedger:
    clip_norm: float
    noise_multiplier: float
    rounds: int = 0
    min_separation: int = 1
    restart_period: int | None = None
    rho_ddp_per_round: float | None = None
    deltas: tuple[float, ...] = (1e-10,)
    budget: float | None = None
    per_round: list = field(default_factory=list, repr=False)

    def record_round(self, round_index: int) -> None:
        if round_index != self.rounds + 1:
            raise ValueError(f"ledger expected round {self.rounds + 1}, got {round_index}")
        self.rounds += 1
        self.per_round.append(round_index)

    @property
    def k_max(self) -> int:
        return max_participations(self.rounds, self.min_separation)

    @property
    def rho_central(self) -> float:
        if self.rounds == 0:
            return 0.0
        return account_with_restarts(self.clip_norm, self.noise_multiplier, self.rounds,
                                     self.min_separation, self.restart_period)

    @property
    def rho_ddp(self) -> float | None:
        """Per-round DDP term composed over a user's at most ``k_max`` participations."""
        if self.rho_ddp_per_round is None or self.rounds == 0:
            return None if self.rho_ddp_per_round is None else 0.0
        return self.k_max * self.rho_ddp_per_round

    @property
    def total_rho(self) -> float:
        # An infinite DDP term means "no distributed guarantee", not an infinite central cost.
        if self.rho_ddp is None or math.isinf(self.rho_ddp):
            return self.rho_central
        return self.rho_central + self.rho_ddp

    def conversions(self) -> list[dict]:
        return [{"delta": d, "eps": zcdp_to_eps(self.total_rho, d)} for d in self.deltas]

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None or math.isinf(x) else x

        verdict = None if self.budget is None else check_budget(self, self.budget).value
        out = {
            "C": self.clip_norm,
            "z": self.noise_multiplier,
            "T": self.rounds,
            "min_separation": self.min_separation,
            "k_max": self.k_max,
            "restart_period": self.restart_period,
            "rho_central": num(self.rho_central),
            "rho_ddp": num(self.rho_ddp),
            "rho_ddp_per_round": num(self.rho_ddp_per_round),
            "total_rho": num(self.total_rho),
            "conversions": [{"delta": c["delta"], "eps": num(c["eps"])} for c in self.conversions()],
            "budget": self.budget,
            "verdict": verdict,
        }
        if self.rho_ddp is not None and math.isinf(self.rho_ddp):
            out["rho_ddp_note"] = "no distributed guarantee"
        if math.isinf(self.rho_central):
            out["rho_central_note"] = "no central noise"
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def check_budget(ledger: PrivacyLedger | float, rho_budget: float) -> Verdict:
    """PASS iff total rho <= budget (inclusive)."""
    rho = ledger.total_rho if isinstance(ledger, PrivacyLedger) else float(ledger)
    return Verdict.PASS if rho <= rho_budget else Verdict.FAIL

