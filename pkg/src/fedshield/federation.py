"""Round orchestration: cohort sampling under a participation-separation
policy, dropout simulation, minimum-aggregation enforcement and telemetry.

``run_round`` never handles individual client updates. It hands the
aggregation backend a callable that trains one participant and gets back
only the aggregate (mean update, survivor count, contributor positions).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Protocol, Sequence

import numpy as np

from ._validation import check_int, check_probability
from .corpus import LocalDataset
from .model import Architecture, ClientUpdate, clip_update, local_train
from .seeding import child_seed


class PopulationExhausted(RuntimeError):
    """Too few eligible clients to fill a cohort; the round is skipped."""


class RoundAborted(RuntimeError):
    pass


class Decision(str, Enum):
    PROCEED = "PROCEED"
    ABORT = "ABORT"


@dataclass
class Population:
    clients: list[LocalDataset]
    last_participation: dict[str, int] = field(default_factory=dict)
    # Simulation-side audit trail of (round, user_id); never written to telemetry.
    audit_log: list[tuple[int, str]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        ids = [c.user_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("user ids must be unique")
        self._by_id = {c.user_id: c for c in self.clients}

    def __len__(self) -> int:
        return len(self.clients)

    def dataset(self, user_id: str) -> LocalDataset:
        return self._by_id[user_id]

    def is_eligible(self, user_id: str, round_index: int, min_separation: int) -> bool:
        last = self.last_participation.get(user_id)
        return last is None or last <= round_index - min_separation

    def eligible(self, round_index: int, min_separation: int) -> list[str]:
        return [c.user_id for c in self.clients if self.is_eligible(c.user_id, round_index, min_separation)]

    def record_participation(self, user_ids: Sequence[str], round_index: int) -> None:
        for uid in user_ids:
            self.last_participation[uid] = round_index
            self.audit_log.append((round_index, uid))


def audit_min_separation(audit_log: Sequence[tuple[int, str]], min_separation: int) -> list[tuple[str, int, int]]:
    """Pairs of participations by one user closer than ``min_separation`` rounds."""
    last: dict[str, int] = {}
    violations = []
    for round_index, uid in sorted(audit_log):
        if uid in last and round_index - last[uid] < min_separation:
            violations.append((uid, last[uid], round_index))
        last[uid] = round_index
    return violations


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    cohort: tuple[str, ...]
    report_goal: int
    min_aggregation: int
    dropout_rate: float = 0.0
    min_separation: int = 1

    def __post_init__(self):
        check_int(self.round_index, "round_index", min_value=1)
        check_int(self.min_separation, "min_separation", min_value=0)
        check_int(self.min_aggregation, "min_aggregation", min_value=1)
        check_probability(self.dropout_rate, "dropout_rate")
        if not len(self.cohort) >= self.report_goal >= self.min_aggregation:
            raise ValueError(
                f"need cohort size ({len(self.cohort)}) >= report_goal ({self.report_goal}) "
                f">= min_aggregation ({self.min_aggregation})")
        if len(set(self.cohort)) != len(self.cohort):
            raise ValueError("cohort contains duplicate user ids")


@dataclass(frozen=True)
class TelemetryRecord:
    round_index: int
    cohort_size: int
    survivor_count: int
    abort_flag: bool
    wall_time_ms: float
    abort_reason: str | None = None
    metrics: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RoundOutcome:
    new_checkpoint: np.ndarray | None
    survivors: int
    telemetry: TelemetryRecord

    @property
    def aborted(self) -> bool:
        return self.new_checkpoint is None


def sample_cohort(pop: Population, round_index: int, report_goal: int, min_separation: int, seed: int,
                  *, min_aggregation: int | None = None, dropout_rate: float = 0.0) -> RoundPlan:
    """Uniform draw without replacement from the currently eligible clients."""
    check_int(report_goal, "report_goal", min_value=1)
    check_int(min_separation, "min_separation", min_value=0)
    eligible = pop.eligible(round_index, min_separation)
    if len(eligible) < report_goal:
        raise PopulationExhausted(
            f"POPULATION_EXHAUSTED: round {round_index} has {len(eligible)} eligible clients, needs {report_goal}")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(eligible), size=report_goal, replace=False))
    return RoundPlan(round_index, tuple(eligible[i] for i in picked), report_goal,
                     report_goal if min_aggregation is None else min_aggregation, dropout_rate, min_separation)


def simulate_dropouts(plan: RoundPlan, seed: int) -> list[str]:
    """Each cohort member independently survives with probability 1 - dropout_rate."""
    if plan.dropout_rate == 0:
        return list(plan.cohort)
    keep = np.random.default_rng(seed).random(len(plan.cohort)) >= plan.dropout_rate
    return [uid for uid, k in zip(plan.cohort, keep) if k]


def enforce_min_aggregation(survivor_count: int, min_aggregation: int) -> Decision:
    check_int(survivor_count, "survivor_count", min_value=0)
    check_int(min_aggregation, "min_aggregation", min_value=0)
    return Decision.PROCEED if survivor_count >= min_aggregation else Decision.ABORT


@dataclass(frozen=True)
class ClientTrainer:
    """Local SGD followed by L2 clipping; what every participant runs."""

    arch: Architecture
    clip_norm: float
    epochs: int = 1
    lr: float = 0.1
    batch_size: int = 16

    def __call__(self, data: LocalDataset, checkpoint: np.ndarray, seed: int, round_index: int) -> ClientUpdate:
        update = local_train(checkpoint, data, self.arch, epochs=self.epochs, lr=self.lr,
                             batch_size=self.batch_size, seed=seed, round_index=round_index)
        update.delta = clip_update(update.delta, self.clip_norm)
        return update


@dataclass(frozen=True)
class Aggregate:
    mean_update: np.ndarray
    survivor_count: int
    contributors: tuple[int, ...]  # cohort positions, not updates


class AggregationBackend(Protocol):
    name: str

    def aggregate(self, round_index: int, n_participants: int, dropped: frozenset,
                  client_fn: Callable[[int], ClientUpdate], seed: int) -> Aggregate: ...


class ServerOptimizer(Protocol):
    def step(self, checkpoint: np.ndarray, mean_update: np.ndarray, round_index: int) -> np.ndarray: ...


def run_round(pop: Population, plan: RoundPlan, checkpoint: np.ndarray, aggregation_backend: AggregationBackend,
              server_optimizer: ServerOptimizer, seed: int, *, trainer: ClientTrainer,
              clock: Callable[[], float] = time.perf_counter) -> RoundOutcome:
    """One federated round. Aborts leave ``checkpoint`` and participation state untouched."""
    from .secagg import SecAggError  # local import keeps federation usable without the protocol

    started = clock()
    r = plan.round_index

    def done(new_checkpoint, survivors, reason=None):
        record = TelemetryRecord(r, len(plan.cohort), survivors, new_checkpoint is None,
                                 round(1000.0 * (clock() - started), 3), reason)
        return RoundOutcome(new_checkpoint, survivors, record)

    survivors = set(simulate_dropouts(plan, child_seed(seed, "dropout", r)))
    if enforce_min_aggregation(len(survivors), plan.min_aggregation) is Decision.ABORT:
        return done(None, len(survivors), "below_min_aggregation")

    cohort = [pop.dataset(uid) for uid in plan.cohort]
    dropped = frozenset(i for i, uid in enumerate(plan.cohort) if uid not in survivors)

    def client_fn(i: int) -> ClientUpdate:
        return trainer(cohort[i], checkpoint, child_seed(seed, "client", f"{r}/{cohort[i].user_id}"), r)

    try:
        agg = aggregation_backend.aggregate(r, len(cohort), dropped, client_fn, child_seed(seed, "backend", r))
    except SecAggError as exc:
        return done(None, len(survivors), f"secagg_failed: {type(exc).__name__}")
    if enforce_min_aggregation(agg.survivor_count, plan.min_aggregation) is Decision.ABORT:
        return done(None, agg.survivor_count, "below_min_aggregation")

    new_checkpoint = server_optimizer.step(checkpoint, agg.mean_update, r)
    pop.record_participation([plan.cohort[i] for i in agg.contributors], r)
    return done(new_checkpoint, agg.survivor_count)


def with_metrics(record: TelemetryRecord, metrics: dict | None) -> TelemetryRecord:
    return replace(record, metrics=metrics)
