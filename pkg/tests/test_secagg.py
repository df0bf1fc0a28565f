import json
import logging
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from fedshield import secagg
from fedshield.secagg import (SHAMIR_PRIME, CommGraph, FieldSpec, InsufficientShares, PairwiseSecret, Phase,
                              ProtocolViolation, SecAggClient, SecAggSession, SecretKind, SecretShare,
                              build_topology, default_degree, default_threshold, derive_pairwise,
                              eval_polynomial, expand_mask, keygen, mask_update, run_protocol, shamir_reconstruct,
                              shamir_share, write_transcript)

GOLDEN = json.loads((Path(__file__).parent / "data" / "expand_mask_golden.json").read_text())


def _random_inputs(n, d, q, seed):
    rng = np.random.default_rng(seed)
    return {i: rng.integers(0, q, d, dtype=np.uint64) for i in range(n)}


def _plain_sum(inputs, ids, q):
    return sum((inputs[i].astype(object) for i in ids), np.zeros(len(next(iter(inputs.values()))), dtype=object)) % q


# -- key agreement -----------------------------------------------------------

def test_keygen_is_deterministic():
    assert keygen(3, 99) == keygen(3, 99)
    assert keygen(3, 99) != keygen(3, 100)


def test_pairwise_secret_is_symmetric():
    rng = random.Random(0)
    for _ in range(100):
        a, b = rng.sample(range(1000), 2)
        ka, kb = keygen(a, rng.getrandbits(128)), keygen(b, rng.getrandbits(128))
        assert derive_pairwise(ka, kb.public_key) == derive_pairwise(kb, ka.public_key)


def test_pairwise_secrets_do_not_collide():
    rng = random.Random(1)
    for _ in range(100):
        a, b, c = rng.sample(range(1000), 3)
        ka, kb, kc = (keygen(i, rng.getrandbits(128)) for i in (a, b, c))
        assert derive_pairwise(ka, kb.public_key).seed != derive_pairwise(ka, kc.public_key).seed


def test_self_pairing_rejected():
    k = keygen(1, 1)
    with pytest.raises(ValueError):
        derive_pairwise(k, k.public_key)


# -- mask expansion --------------------------------------------------------

@pytest.mark.parametrize("case", GOLDEN, ids=lambda c: f"seed{c['seed'] % 1000}-d{c['d']}")
def test_expand_mask_golden(case):
    out = expand_mask(case["seed"], case["d"], case["q"])
    assert out.dtype == np.uint64
    assert [int(v) for v in out] == case["mask"]


def test_golden_file_agrees_with_reference_stream():
    from philox_reference import reference_mask

    for case in GOLDEN:
        assert reference_mask(case["seed"], case["d"], case["q"]) == case["mask"]


def test_expand_mask_prefix_stable():
    assert np.array_equal(expand_mask(7, 10, 2**32)[:3], expand_mask(7, 3, 2**32))


def test_expand_mask_is_uniform():
    counts = np.bincount(expand_mask(2024, 100_000, 256).astype(np.int64), minlength=256)
    assert chisquare(counts).pvalue > 0.001


def test_expand_mask_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        expand_mask(1, 4, 100)


# -- Shamir ----------------------------------------------------------------

def test_shamir_hand_example():
    p = 257
    assert eval_polynomial([5, 3], [1, 2, 3], p) == [8, 11, 14]
    shares = [SecretShare(1, 8), SecretShare(2, 11), SecretShare(3, 14)]
    for pair in ((0, 1), (0, 2), (1, 2)):
        assert shamir_reconstruct([shares[i] for i in pair], 2, prime=p) == 5


def test_shamir_threshold_one_is_constant():
    shares = shamir_share(42, 5, 1, seed=3, prime=257)
    assert all(s.value == 42 for s in shares)


def test_shamir_errors():
    with pytest.raises(ValueError, match="duplicate"):
        shamir_reconstruct([SecretShare(1, 8), SecretShare(1, 8)], 2, prime=257)
    with pytest.raises(InsufficientShares):
        shamir_reconstruct([SecretShare(1, 8)], 2, prime=257)
    with pytest.raises(ValueError):
        shamir_share(1, 2, 3, seed=0)


def test_single_share_is_consistent_with_every_secret():
    # t = 2: one share (x, y) fits exactly one line through (0, s) for each s
    p = 257
    for x, y in ((1, 8), (5, 100)):
        for s in range(p):
            assert sum(eval_polynomial([s, a], [x], p)[0] == y for a in range(p)) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, SHAMIR_PRIME - 1), st.integers(1, 12), st.data())
def test_any_threshold_subset_reconstructs(secret, n, data):
    t = data.draw(st.integers(1, n))
    shares = shamir_share(secret, n, t, seed=data.draw(st.integers(0, 2**64)))
    subset = data.draw(st.permutations(shares))[:t]
    assert shamir_reconstruct(subset, t) == secret


# -- masking ---------------------------------------------------------------

def test_two_client_mask_example(monkeypatch):
    monkeypatch.setattr(secagg, "expand_mask", lambda seed, d, q: np.array([100], dtype=np.uint64))
    q = 2**16
    s = {1: PairwiseSecret(1, 2, 0), 2: PairwiseSecret(1, 2, 0)}
    y1 = mask_update(1, np.array([5]), None, {2: s[1]}, None, q, neighbors=[2])
    y2 = mask_update(2, np.array([7]), None, {1: s[2]}, None, q, neighbors=[1])
    assert y1.tolist() == [105] and y2.tolist() == [65443]
    assert (int(y1[0]) + int(y2[0])) % q == 12


def test_isolated_node_is_unmasked():
    graph = CommGraph(1, (frozenset(),), 0)
    u = np.array([3, 1, 4], dtype=np.uint64)
    assert np.array_equal(mask_update(0, u, None, {}, graph, 2**16), u)


def test_pairwise_masks_cancel_on_full_graph():
    n, d, q = 5, 6, 2**32
    graph = CommGraph.complete(n)
    keys = [keygen(i, 1000 + i) for i in range(n)]
    zero = np.zeros(d, dtype=np.uint64)
    total = np.zeros(d, dtype=np.uint64)
    for i in range(n):
        pw = {j: derive_pairwise(keys[i], keys[j].public_key) for j in graph.neighbors[i]}
        total += mask_update(i, zero, None, pw, graph, q)
    assert not np.any(total & np.uint64(q - 1))


def test_missing_neighbor_secret_raises():
    graph = CommGraph.complete(3)
    with pytest.raises(KeyError):
        mask_update(0, np.zeros(2, dtype=np.uint64), None, {1: PairwiseSecret(0, 1, 5)}, graph, 2**16)


def test_masked_entries_look_uniform_to_the_server():
    q, n = 2**8, 20_000
    rng = random.Random(5)
    values = []
    for trial in range(n):
        me, peer = keygen(0, rng.getrandbits(128)), keygen(1, rng.getrandbits(128))
        pw = {1: derive_pairwise(me, peer.public_key)}
        values.append(int(mask_update(0, np.array([7], dtype=np.uint64), None, pw, None, q, neighbors=[1])[0]))
    assert chisquare(np.bincount(values, minlength=q)).pvalue > 0.001


# -- full protocol ---------------------------------------------------------

def test_one_dropout_of_five():
    inputs = _random_inputs(5, 4, 2**16, 0)
    del inputs[2]
    res = run_protocol(inputs, FieldSpec(16, 4), CommGraph.complete(5), 3, seed=1)
    assert res.survivors == {0, 1, 3, 4}
    assert res.total.tolist() == _plain_sum(inputs, [0, 1, 3, 4], 2**16).tolist()
    assert res.session.phase is Phase.DONE


def test_no_dropouts_plain_sum_without_self_masks():
    n, d, q = 4, 3, 2**16
    graph = CommGraph.complete(n)
    inputs = _random_inputs(n, d, q, 3)
    keys = [keygen(i, 7 * i + 1) for i in range(n)]
    total = np.zeros(d, dtype=np.uint64)
    for i in range(n):
        pw = {j: derive_pairwise(keys[i], keys[j].public_key) for j in graph.neighbors[i]}
        total += mask_update(i, inputs[i], None, pw, graph, q)
    assert (total & np.uint64(q - 1)).tolist() == _plain_sum(inputs, range(n), q).tolist()


def test_too_many_dropouts_fail_the_session():
    inputs = _random_inputs(5, 2, 2**16, 0)
    live = {i: inputs[i] for i in (0, 1)}
    with pytest.raises(InsufficientShares):
        run_protocol(live, FieldSpec(16, 2), CommGraph.complete(5), 3, seed=1)


def test_failed_session_phase_is_recorded():
    field, graph = FieldSpec(16, 2), CommGraph.complete(3)
    s = SecAggSession(1, field, graph, threshold=3)
    clients = [SecAggClient(i, graph.neighbors[i], field, 3, seed=i) for i in range(3)]
    for c in clients:
        s.receive_advertise(c.client_id, c.public_key)
    s.advance()
    for c in clients:
        s.receive_shares(c.client_id, c.make_shares(s.roster(c.client_id)))
    s.advance()
    c = clients[0]
    c.receive_shares(s.inbox(0))
    s.receive_masked(0, c.masked_input(np.zeros(2, dtype=np.uint64), s.peer_keys(0)))
    with pytest.raises(InsufficientShares):
        s.advance()
    assert s.phase is Phase.FAILED


def test_late_dropout_after_masked_input_still_counts():
    inputs = _random_inputs(6, 3, 2**32, 9)
    res = run_protocol(inputs, FieldSpec(32, 3), CommGraph.complete(6), 4, seed=2,
                       drop_after={5: Phase.MASKED_INPUT})
    assert 5 in res.survivors
    assert res.total.tolist() == _plain_sum(inputs, range(6), 2**32).tolist()


def test_subgraph_matches_complete_graph():
    n, d = 50, 5
    inputs = _random_inputs(n, d, 2**32, 11)
    sub = run_protocol(inputs, FieldSpec(32, d), build_topology(n, 8, 6, seed=4), 6, seed=3)
    full = run_protocol(inputs, FieldSpec(32, d), CommGraph.complete(n), 6, seed=3)
    assert np.array_equal(sub.total, full.total)
    assert sub.total.tolist() == _plain_sum(inputs, range(n), 2**32).tolist()


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_secure_sum_equals_plaintext_sum(data):
    n = data.draw(st.integers(2, 12))
    t = data.draw(st.integers(1, n))
    complete = data.draw(st.booleans()) or max(t, 2) > n - 2
    if complete:
        graph, max_drop = CommGraph.complete(n), n - t
    else:
        k = data.draw(st.integers(max(t, 2), n - 2))
        graph, max_drop = build_topology(n, k, t, seed=data.draw(st.integers(0, 999))), min(n - t, k + 1 - t)
    dropped = data.draw(st.lists(st.integers(0, n - 1), unique=True, max_size=max_drop))
    drop_after = {i: data.draw(st.sampled_from([Phase.ADVERTISE, Phase.SHARE_KEYS, Phase.MASKED_INPUT]))
                  for i in dropped}
    inputs = _random_inputs(n, 3, 2**16, data.draw(st.integers(0, 2**32)))
    live = {i: v for i, v in inputs.items() if drop_after.get(i, Phase.UNMASK) >= Phase.MASKED_INPUT}
    res = run_protocol(live, FieldSpec(16, 3), graph, t, seed=data.draw(st.integers(0, 2**64)),
                       drop_after=drop_after)
    assert res.total.tolist() == _plain_sum(inputs, res.survivors, 2**16).tolist()
    assert res.survivors == set(live)


# -- state machine ---------------------------------------------------------

def test_requesting_both_kinds_is_impossible():
    s = SecAggSession(1, FieldSpec(16, 1), CommGraph.complete(3), 2)
    s.request_shares(0, SecretKind.SELF_MASK_SEED)
    with pytest.raises(ProtocolViolation, match="BOTH_KINDS_REVEALED"):
        s.request_shares(0, SecretKind.PAIRWISE_KEY)


def test_client_refuses_to_reveal_second_kind():
    field, graph = FieldSpec(16, 1), CommGraph.complete(3)
    clients = [SecAggClient(i, graph.neighbors[i], field, 2, seed=i) for i in range(3)]
    for c in clients:
        for h, bundle in c.make_shares(range(3)).items():
            clients[h].receive_shares([bundle])
    assert len(clients[1].reveal({0: SecretKind.SELF_MASK_SEED})) == 1
    with pytest.raises(ProtocolViolation, match="BOTH_KINDS_REVEALED"):
        clients[1].reveal({0: SecretKind.PAIRWISE_KEY})


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 9), st.data())
def test_no_run_ever_reveals_both_kinds(n, data):
    t = data.draw(st.integers(1, n))
    dropped = data.draw(st.lists(st.integers(0, n - 1), unique=True, max_size=n - t))
    drop_after = {i: data.draw(st.sampled_from(list(Phase)[:4])) for i in dropped}
    live = {i: np.zeros(1, dtype=np.uint64) for i in range(n) if drop_after.get(i, Phase.UNMASK) >= Phase.MASKED_INPUT}
    res = run_protocol(live, FieldSpec(16, 1), CommGraph.complete(n), t, seed=n, drop_after=drop_after)
    kinds: dict[int, set] = {}
    for shares in res.session._revealed.values():
        for sh in shares:
            kinds.setdefault(sh.owner, set()).add(sh.kind)
    assert all(len(k) == 1 for k in kinds.values())


def test_out_of_phase_messages_are_rejected_and_logged(caplog):
    field, graph = FieldSpec(16, 1), CommGraph.complete(3)
    s = SecAggSession(4, field, graph, 2)
    c = SecAggClient(0, graph.neighbors[0], field, 2, seed=0)
    assert s.receive_advertise(0, c.public_key)
    s.advance()
    with caplog.at_level(logging.WARNING, logger="fedshield.secagg"):
        assert not s.receive_advertise(1, SecAggClient(1, graph.neighbors[1], field, 2, seed=1).public_key)
        assert not s.receive_masked(0, np.zeros(1, dtype=np.uint64))
    assert [r[2] for r in s.rejected] == ["advertise", "masked_input"]
    assert "rejected advertise" in caplog.text
    assert 1 not in s.public_keys


def test_phases_only_move_forward():
    s = SecAggSession(1, FieldSpec(16, 1), CommGraph.complete(2), 1)
    seen = [s.phase]
    for _ in range(2):
        seen.append(s.advance())
    assert seen == sorted(seen)
    with pytest.raises(InsufficientShares):
        s.advance()  # nobody sent a masked input
    with pytest.raises(ProtocolViolation):
        s.advance()


def test_transcript_has_digests_only(tmp_path):
    inputs = _random_inputs(4, 3, 2**16, 2)
    transcript = []
    run_protocol(inputs, FieldSpec(16, 3), CommGraph.complete(4), 3, seed=5, transcript=transcript)
    path = tmp_path / "t.jsonl"
    write_transcript(transcript, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert {tuple(sorted(r)) for r in rows} == {("message_type", "payload_digest", "phase", "round", "sender")}
    assert {r["message_type"] for r in rows} == {"advertise", "share_keys", "masked_input", "unmask"}
    assert all(len(r["payload_digest"]) == 16 for r in rows)


# -- topology --------------------------------------------------------------

def test_regular_topology_audit():
    g = build_topology(50, 8, 5, seed=1)
    assert all(g.degree(i) == 8 for i in range(50))
    assert g.is_connected()
    assert all(i in g.neighbors[j] for i in range(50) for j in g.neighbors[i])
    assert g == build_topology(50, 8, 5, seed=1)


def test_full_degree_is_complete_graph():
    assert build_topology(6, 5, 3, seed=0) == CommGraph.complete(6)


def test_odd_product_gives_near_regular_graph():
    g = build_topology(9, 3, 2, seed=2)
    degrees = sorted(g.degree(i) for i in range(9))
    assert degrees == [3] * 8 + [4]
    assert g.is_connected()


def test_disconnected_degrees_rejected():
    with pytest.raises(secagg.TopologyError):
        build_topology(6, 1, 1, seed=0)


def test_degree_below_threshold_rejected():
    with pytest.raises(ValueError, match="infeasible"):
        build_topology(10, 2, 3, seed=0)


def test_defaults():
    assert default_threshold(20) == 14
    assert default_degree(20) == 19 and default_degree(500) == 50


@given(st.integers(0, 2**128 - 1), st.integers(0, 2**128 - 1))
@settings(max_examples=50, deadline=None)
def test_key_agreement_matches_builtin_pow(seed_a, seed_b):
    a, b = keygen(0, seed_a), keygen(1, seed_b)
    assert a.public == pow(3, a.secret, 2**127 - 1)
    shared = pow(b.public, a.secret, 2**127 - 1)
    assert shared == pow(a.public, b.secret, 2**127 - 1)
    assert derive_pairwise(a, b.public_key) == derive_pairwise(b, a.public_key)
