"""Aggregation backends: the only code that touches individual client updates."""

from __future__ import annotations

import numpy as np

from .ddp import DdpConfig, client_encode, dequantize_sum
from .federation import Aggregate
from .secagg import (CommGraph, FieldSpec, Phase, build_topology, default_degree, default_threshold,
                     run_protocol)
from .seeding import child_seed


class PlainMeanBackend:
    """Unweighted mean of the survivors' clipped deltas, summed in cohort order."""

    name = "PLAIN_MEAN"

    def aggregate(self, round_index, n_participants, dropped, client_fn, seed) -> Aggregate:
        contributors = tuple(i for i in range(n_participants) if i not in dropped)
        total = None
        for i in contributors:
            delta = client_fn(i).delta
            total = delta.copy() if total is None else total + delta
        return Aggregate(total / len(contributors), len(contributors), contributors)


class SecAggBackend:
    """Quantize (plus Skellam noise when ``ddp.mu > 0``), secure-sum, dequantize.

    Clients marked as dropped still take part in the key-agreement phases and
    go silent before sending a masked input, at a seeded random phase, so the
    protocol's dropout recovery is exercised every round.
    """

    def __init__(self, ddp: DdpConfig, threshold: int | None = None, degree: int | None = None,
                 transcript: list | None = None):
        self.ddp = ddp.validate_headroom()
        self.threshold = threshold
        self.degree = degree
        self.transcript = transcript
        self.name = "SECAGG_DDP" if ddp.mu > 0 else "SECAGG"

    def topology(self, n: int, seed: int) -> tuple[CommGraph, int]:
        k = min(self.degree or default_degree(n), n - 1)
        t = self.threshold or min(default_threshold(n), k)
        return build_topology(n, k, t, seed), t

    def aggregate(self, round_index, n_participants, dropped, client_fn, seed) -> Aggregate:
        graph, t = self.topology(n_participants, child_seed(seed, "topology"))
        rng = np.random.default_rng(child_seed(seed, "drop_phase"))
        drop_after = {i: Phase(int(rng.integers(0, 2))) for i in sorted(dropped)}
        inputs = {}
        for i in range(n_participants):
            if i not in dropped:
                inputs[i] = client_encode(client_fn(i).delta, self.ddp, child_seed(seed, "encode", i))
        field = FieldSpec(self.ddp.bits, len(next(iter(inputs.values()))))
        result = run_protocol(inputs, field, graph, t, child_seed(seed, "protocol"), drop_after,
                              round_index=round_index, transcript=self.transcript)
        survivors = tuple(sorted(result.survivors))
        return Aggregate(dequantize_sum(result.total, len(survivors), self.ddp), len(survivors), survivors)
