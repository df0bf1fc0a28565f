import sys

import numpy as np
import pytest

from fedshield.aggregation import PlainMeanBackend, SecAggBackend
from fedshield.corpus import LocalDataset
from fedshield.ddp import DdpConfig
from fedshield.dpftrl import ServerSGD
from fedshield.federation import (Aggregate, ClientTrainer, Decision, Population, PopulationExhausted, RoundPlan,
                                  audit_min_separation, enforce_min_aggregation, run_round, sample_cohort,
                                  simulate_dropouts)
from fedshield.model import Architecture, ClientUpdate, clip_update, init_model, local_train
from fedshield.seeding import child_seed


def _population(n, prefix="c"):
    rng = np.random.default_rng(n)
    return Population([LocalDataset(f"{prefix}{i}", [rng.integers(0, 6, 8)]) for i in range(n)])


def test_forced_selection_takes_everyone():
    pop = _population(10)
    plan = sample_cohort(pop, 1, 10, 0, seed=3)
    assert sorted(plan.cohort) == sorted(c.user_id for c in pop.clients)


def test_min_separation_forces_the_other_client():
    pop = Population([LocalDataset("A", []), LocalDataset("B", [])])
    for seed in range(20):
        pop.last_participation.clear()
        first = sample_cohort(pop, 1, 1, 2, seed=seed).cohort
        pop.record_participation(first, 1)
        second = sample_cohort(pop, 2, 1, 2, seed=seed + 100).cohort
        assert set(first) | set(second) == {"A", "B"}


def test_eligibility_boundary():
    pop = _population(3)
    pop.record_participation(["c0"], 5)
    assert not pop.is_eligible("c0", 8, 4)
    assert pop.is_eligible("c0", 9, 4)


def test_population_exhausted():
    pop = _population(4)
    pop.record_participation(["c0", "c1"], 1)
    with pytest.raises(PopulationExhausted, match="POPULATION_EXHAUSTED"):
        sample_cohort(pop, 2, 3, 4, seed=0)


def test_selection_is_uniform_over_rounds():
    n, goal, rounds = 10, 3, 2000
    pop = _population(n)
    counts = dict.fromkeys((c.user_id for c in pop.clients), 0)
    for r in range(1, rounds + 1):
        for uid in sample_cohort(pop, r, goal, 1, seed=child_seed(0, "cohort", r)).cohort:
            counts[uid] += 1
    p = goal / n
    sd = np.sqrt(rounds * p * (1 - p))
    assert all(abs(c - rounds * p) <= 3 * sd for c in counts.values())


def _plan(cohort, dropout, min_agg=1, r=1):
    return RoundPlan(r, tuple(cohort), len(cohort), min_agg, dropout)


def test_dropout_rate_zero_keeps_everyone():
    assert simulate_dropouts(_plan(["a", "b"], 0.0), 1) == ["a", "b"]


def test_dropouts_follow_binomial():
    plan = _plan([f"u{i}" for i in range(1000)], 0.2)
    survivors = simulate_dropouts(plan, 42)
    assert abs(len(survivors) - 800) <= 3 * np.sqrt(1000 * 0.8 * 0.2)
    assert simulate_dropouts(plan, 42) == survivors


@pytest.mark.parametrize("count,goal,expected", [(150, 100, Decision.PROCEED), (80, 100, Decision.ABORT),
                                                  (100, 100, Decision.PROCEED)])
def test_min_aggregation(count, goal, expected):
    assert enforce_min_aggregation(count, goal) is expected


def test_round_plan_validates_sizes():
    with pytest.raises(ValueError, match="min_aggregation"):
        RoundPlan(1, ("a", "b"), 2, 3)


def test_audit_finds_close_participations():
    log = [(1, "a"), (2, "b"), (4, "a"), (9, "a")]
    assert audit_min_separation(log, 4) == [("a", 1, 4)]
    assert audit_min_separation(log, 3) == []


# -- rounds ------------------------------------------------------------------

ARCH = Architecture(6, 3)
TRAINER = ClientTrainer(ARCH, clip_norm=0.05, epochs=1, lr=0.5, batch_size=4)


def test_plain_mean_round_is_federated_averaging():
    pop = _population(3)
    ckpt = init_model(6, 3, 0)
    plan = _plan([c.user_id for c in pop.clients], 0.0, min_agg=3)
    out = run_round(pop, plan, ckpt, PlainMeanBackend(), ServerSGD(1.0), seed=7, trainer=TRAINER)
    deltas = []
    for c in pop.clients:
        upd = local_train(ckpt, c, ARCH, epochs=1, lr=0.5, batch_size=4, seed=child_seed(7, "client", f"1/{c.user_id}"))
        deltas.append(clip_update(upd.delta, 0.05))
    assert np.allclose(out.new_checkpoint, ckpt + np.mean(deltas, axis=0), rtol=0, atol=1e-15)
    assert out.survivors == 3 and not out.aborted
    assert pop.last_participation == {"c0": 1, "c1": 1, "c2": 1}


def test_secagg_round_matches_plain_mean_within_quantization():
    scale = 2.0**16
    outs = []
    for backend in (PlainMeanBackend(), SecAggBackend(DdpConfig(0.05, scale, 32, 0.0, 5))):
        pop = _population(5)
        plan = _plan([c.user_id for c in pop.clients], 0.0, min_agg=5)
        outs.append(run_round(pop, plan, init_model(6, 3, 0), backend, ServerSGD(1.0), seed=3,
                              trainer=TRAINER).new_checkpoint)
    assert np.max(np.abs(outs[0] - outs[1])) <= 2 / scale


def test_abort_leaves_checkpoint_and_state_untouched():
    pop = _population(10)
    ckpt = init_model(6, 3, 0)
    before = ckpt.copy()
    plan = _plan([c.user_id for c in pop.clients], 0.9, min_agg=8)
    out = run_round(pop, plan, ckpt, PlainMeanBackend(), ServerSGD(1.0), seed=1, trainer=TRAINER)
    assert out.aborted and out.new_checkpoint is None
    assert out.telemetry.abort_flag and out.telemetry.abort_reason == "below_min_aggregation"
    assert np.array_equal(ckpt, before) and ckpt.tobytes() == before.tobytes()
    assert pop.last_participation == {} and pop.audit_log == []


def test_secagg_failure_aborts_round():
    pop = _population(6)
    plan = RoundPlan(1, tuple(c.user_id for c in pop.clients), 6, 1, 0.7)
    survivors = simulate_dropouts(plan, child_seed(2, "dropout", 1))
    assert 1 <= len(survivors) < 5
    # threshold 5 of 6: more than one dropout makes unmasking impossible
    backend = SecAggBackend(DdpConfig(0.05, 2.0**10, 32, 0.0, 6), threshold=5)
    out = run_round(pop, plan, init_model(6, 3, 0), backend, ServerSGD(1.0), seed=2, trainer=TRAINER)
    assert out.aborted and out.telemetry.abort_reason.startswith("secagg_failed")
    assert pop.last_participation == {}


def test_only_survivors_are_recorded():
    pop = _population(10)
    plan = _plan([c.user_id for c in pop.clients], 0.3, min_agg=1)
    out = run_round(pop, plan, init_model(6, 3, 0), PlainMeanBackend(), ServerSGD(1.0), seed=5, trainer=TRAINER)
    assert len(pop.last_participation) == out.survivors < 10


def test_telemetry_carries_no_identifiers():
    pop = _population(4, prefix="secret-id-")
    plan = _plan([c.user_id for c in pop.clients], 0.0)
    out = run_round(pop, plan, init_model(6, 3, 0), PlainMeanBackend(), ServerSGD(1.0), seed=0, trainer=TRAINER,
                    clock=lambda: 0.0)
    line = out.telemetry.to_json()
    assert "secret-id-" not in line
    assert '"wall_time_ms": 0.0' in line


@pytest.mark.parametrize("backend", [PlainMeanBackend(), SecAggBackend(DdpConfig(0.05, 2.0**12, 32, 0.5, 6))],
                         ids=["plain", "secagg"])
def test_individual_updates_never_leave_the_backend(backend):
    """Trace every function that receives a ClientUpdate as a return value."""
    receivers = set()

    def tracer(frame, event, arg):
        if event == "return" and isinstance(arg, ClientUpdate) and frame.f_back is not None:
            receivers.add(frame.f_back.f_code.co_name)
        return tracer

    pop = _population(6)
    plan = _plan([c.user_id for c in pop.clients], 0.0)
    sys.settrace(tracer)
    try:
        out = run_round(pop, plan, init_model(6, 3, 0), backend, ServerSGD(1.0), seed=0, trainer=TRAINER)
    finally:
        sys.settrace(None)
    assert receivers <= {"client_fn", "__call__", "aggregate"}
    assert "aggregate" in receivers
    assert "run_round" not in receivers
    assert not any(isinstance(v, ClientUpdate) for v in vars(out).values())


def test_aggregate_exposes_only_summary_fields():
    assert set(Aggregate.__dataclass_fields__) == {"mean_update", "survivor_count", "contributors"}
