"""Secure Aggregation with double masking, Shamir dropout recovery and
optional k-regular ("subgraph") topologies.

The server only ever sees masked vectors ``y_i`` and the shares it asks for
during unmasking, and learns the modular sum of the surviving inputs.

NOT SECURE FOR PRODUCTION. Key agreement is textbook finite-field
Diffie-Hellman over the Mersenne prime 2^127 - 1 with seeded, hash-derived
secret exponents; the mask PRG is Philox4x64-10. Both are documented bit for
bit so the protocol is reproducible, which is the point of this module.

Bit-exact definitions
---------------------
* ``keygen(client_id, seed)``: ``secret = 1 + (u64_le(SHA-256(b"fedshield/keygen" ||
  u128_le(seed) || u64_le(client_id))[:8]) mod (2^61 - 2))``; ``public =
  3^secret mod (2^127 - 1)``. Secrets fit the Shamir field.
* ``derive_pairwise``: ``shared = peer_public^secret mod (2^127 - 1)``;
  ``seed = u128_le(SHA-256(b"fedshield/pairwise" || u64_le(lo) || u64_le(hi) ||
  u128_le(shared))[:16])`` with ``lo < hi`` the two client ids.
* ``expand_mask(seed, d, q)``: Philox4x64-10 keyed with ``(seed mod 2^64,
  seed >> 64)``; block ``j`` is produced from counter ``(j, 0, 0, 0)`` and
  yields four 64-bit words; entry ``i`` is word ``i mod 4`` of block ``i // 4``
  reduced mod ``q`` (a power of two, so no rejection is needed).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import threading
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping

import networkx as nx
import numpy as np

from ._validation import check_int

try:
    from gmpy2 import powmod as _mpz_powmod

    def _powmod(base: int, exp: int, mod: int) -> int:
        return int(_mpz_powmod(base, exp, mod))
except ImportError:  # pragma: no cover
    _powmod = pow

logger = logging.getLogger(__name__)

SHAMIR_PRIME = (1 << 61) - 1
DH_PRIME = (1 << 127) - 1
DH_GENERATOR = 3


class SecAggError(RuntimeError):
    """Base class for protocol failures that abort a round."""


class InsufficientShares(SecAggError):
    pass


class ProtocolViolation(SecAggError):
    """An action that would break the protocol's privacy contract."""


class TopologyError(SecAggError):
    pass


class Phase(IntEnum):
    ADVERTISE = 0
    SHARE_KEYS = 1
    MASKED_INPUT = 2
    UNMASK = 3
    DONE = 4
    FAILED = 5


class SecretKind(Enum):
    SELF_MASK_SEED = "self_mask_seed"
    PAIRWISE_KEY = "pairwise_key"


@dataclass(frozen=True)
class FieldSpec:
    bits: int
    dim: int

    def __post_init__(self):
        if self.bits not in (8, 16, 32):
            # 8 bits is only used for fast statistical tests.
            raise ValueError(f"bit width must be 8, 16 or 32, got {self.bits}")
        check_int(self.dim, "dim", min_value=1)

    @property
    def modulus(self) -> int:
        return 1 << self.bits


# ---------------------------------------------------------------------------
# Key agreement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PublicKey:
    client_id: int
    value: int


@dataclass(frozen=True)
class KeyPair:
    client_id: int
    secret: int
    public: int

    @property
    def public_key(self) -> PublicKey:
        return PublicKey(self.client_id, self.public)


@dataclass(frozen=True)
class PairwiseSecret:
    low: int
    high: int
    seed: int


def keygen(client_id: int, seed: int) -> KeyPair:
    check_int(client_id, "client_id", min_value=0)
    digest = hashlib.sha256(
        b"fedshield/keygen" + (seed % (1 << 128)).to_bytes(16, "little") + client_id.to_bytes(8, "little")
    ).digest()
    secret = 1 + int.from_bytes(digest[:8], "little") % (SHAMIR_PRIME - 2)
    return KeyPair(client_id, secret, _powmod(DH_GENERATOR, secret, DH_PRIME))


def derive_pairwise(me: KeyPair, peer: PublicKey) -> PairwiseSecret:
    if me.client_id == peer.client_id:
        raise ValueError(f"client {me.client_id} cannot pair with itself")
    shared = _powmod(peer.value, me.secret, DH_PRIME)
    lo, hi = sorted((me.client_id, peer.client_id))
    digest = hashlib.sha256(
        b"fedshield/pairwise" + lo.to_bytes(8, "little") + hi.to_bytes(8, "little")
        + shared.to_bytes(16, "little")
    ).digest()
    return PairwiseSecret(lo, hi, int.from_bytes(digest[:16], "little"))


def expand_mask(seed: int, d: int, q: int) -> np.ndarray:
    """Deterministic uniform vector in Z_q of length ``d`` (see module docstring)."""
    check_int(d, "d", min_value=1)
    if q < 2 or q & (q - 1):
        raise ValueError(f"modulus must be a power of two, got {q}")
    return _philox_raw(seed % (1 << 128), d) & np.uint64(q - 1)


_local = threading.local()


def _philox_raw(key: int, n: int) -> np.ndarray:
    # Re-keying one generator per thread is ~5x cheaper than constructing a new one.
    bitgen = getattr(_local, "philox", None)
    if bitgen is None:
        bitgen = _local.philox = np.random.Philox(key=0)
        _local.state = bitgen.state
    state = _local.state
    state["state"]["key"] = np.array([key & 0xFFFFFFFFFFFFFFFF, key >> 64], dtype=np.uint64)
    state["state"]["counter"] = np.full(4, 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)  # first block: counter 0
    state["buffer_pos"] = 4
    bitgen.state = state
    return bitgen.random_raw(n)


# ---------------------------------------------------------------------------
# Shamir secret sharing over GF(2^61 - 1)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SecretShare:
    x: int
    value: int
    owner: int = -1
    kind: SecretKind = SecretKind.SELF_MASK_SEED


def shamir_share(secret: int, n: int, t: int, seed: int, *, prime: int = SHAMIR_PRIME,
                 owner: int = -1, kind: SecretKind = SecretKind.SELF_MASK_SEED,
                 xs: Iterable[int] | None = None) -> list[SecretShare]:
    """Split ``secret`` into shares at x = 1..n (or the given ``xs``)."""
    check_int(t, "t", min_value=1)
    xs = list(range(1, n + 1)) if xs is None else list(xs)
    if not t <= len(xs) < prime:
        raise ValueError(f"need 1 <= t <= n < p, got t={t}, n={len(xs)}")
    if len(set(xs)) != len(xs) or any(not 0 < x < prime for x in xs):
        raise ValueError("share indices must be distinct and nonzero mod p")
    if not 0 <= secret < prime:
        raise ValueError("secret must lie in [0, p)")
    rng = random.Random(seed)
    coeffs = [secret] + [rng.randrange(prime) for _ in range(t - 1)]
    return [SecretShare(x, y, owner, kind) for x, y in zip(xs, eval_polynomial(coeffs, xs, prime))]


def eval_polynomial(coeffs: list[int], xs: Iterable[int], prime: int) -> list[int]:
    """Horner evaluation of ``sum_k coeffs[k] x^k`` mod ``prime`` at each x."""
    high_first = coeffs[::-1]
    out = []
    for x in xs:
        acc = 0
        for c in high_first:
            acc = (acc * x + c) % prime
        out.append(acc)
    return out


def shamir_reconstruct(shares: Iterable[SecretShare], t: int, *, prime: int = SHAMIR_PRIME) -> int:
    """Lagrange interpolation at 0 from the first ``t`` shares."""
    shares = list(shares)
    xs = [s.x for s in shares]
    if len(set(xs)) != len(xs):
        raise ValueError("duplicate share indices")
    if len(shares) < t:
        raise InsufficientShares(f"have {len(shares)} shares, need {t}")
    use = shares[:t]
    xs = [s.x for s in use]
    nums, dens = [], []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if i != j:
                num = num * xj % prime
                den = den * (xj - xi) % prime
        nums.append(num)
        dens.append(den)
    # One modular inversion for all denominators (Montgomery's trick).
    prefix = [1]
    for den in dens:
        prefix.append(prefix[-1] * den % prime)
    inv = pow(prefix[-1], prime - 2, prime)
    secret = 0
    for i in range(t - 1, -1, -1):
        inv_i = inv * prefix[i] % prime
        inv = inv * dens[i] % prime
        secret = (secret + use[i].value * nums[i] % prime * inv_i) % prime
    return secret


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommGraph:
    n: int
    neighbors: tuple[frozenset, ...]
    k: int

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        seen, stack = {0}, [0]
        while stack:
            for j in self.neighbors[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n

    @classmethod
    def complete(cls, n: int) -> "CommGraph":
        return cls(n, tuple(frozenset(j for j in range(n) if j != i) for i in range(n)), n - 1)

    @classmethod
    def from_networkx(cls, g: nx.Graph, k: int) -> "CommGraph":
        n = g.number_of_nodes()
        return cls(n, tuple(frozenset(g.neighbors(i)) for i in range(n)), k)


def _random_regular(k: int, n: int, seed: int) -> nx.Graph:
    # The pairing model stalls for dense graphs; take the complement of a sparse one instead.
    if 2 * k > n - 1:
        sparse = nx.random_regular_graph(n - 1 - k, n, seed=seed)
        return nx.complement(sparse)
    return nx.random_regular_graph(k, n, seed=seed)


def build_topology(n: int, k: int, t: int, seed: int, *, max_attempts: int = 100) -> CommGraph:
    """Random connected k-regular graph; when n*k is odd, one node gets degree k+1."""
    check_int(n, "n", min_value=1)
    check_int(t, "t", min_value=1)
    check_int(k, "k", min_value=0, max_value=max(n - 1, 0))
    if k < t:
        raise ValueError(f"infeasible topology: degree k={k} below threshold t={t}")
    if k == n - 1:
        return CommGraph.complete(n)
    if k < 2:
        raise TopologyError(f"no connected {k}-regular graph exists on {n} nodes")
    for attempt in range(max_attempts):
        rng = random.Random(seed * 1000003 + attempt)
        if n * k % 2 == 0:
            g = _random_regular(k, n, rng.randrange(2**32))
        else:
            # k odd, n odd: build on n-1 nodes, then splice node n-1 into (k+1)/2 disjoint edges.
            g = _random_regular(k, n - 1, rng.randrange(2**32))
            edges = sorted(g.edges())
            rng.shuffle(edges)
            used, picked = set(), []
            for u, v in edges:
                if u not in used and v not in used:
                    picked.append((u, v))
                    used.update((u, v))
                    if len(picked) == (k + 1) // 2:
                        break
            if len(picked) < (k + 1) // 2:
                continue
            g.add_node(n - 1)
            for u, v in picked:
                g.remove_edge(u, v)
                g.add_edge(u, n - 1)
                g.add_edge(v, n - 1)
        graph = CommGraph.from_networkx(g, k)
        if graph.is_connected():
            return graph
    raise TopologyError(f"no connected {k}-regular graph on {n} nodes after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


def mask_update(i: int, u: np.ndarray, self_mask_seed: int | None,
                pairwise: Mapping[int, PairwiseSecret], graph: CommGraph | None, q: int,
                neighbors: Iterable[int] | None = None) -> np.ndarray:
    """y_i = u_i + PRG(b_i) + sum_{j>i} PRG(s_ij) - sum_{j<i} PRG(s_ij)  (mod q).

    ``neighbors`` defaults to all of ``i``'s graph neighbours; the protocol
    passes the subset that completed key sharing (and may then omit ``graph``).
    """
    if graph is None and neighbors is None:
        raise ValueError("need a graph or an explicit neighbour set")
    u = np.asarray(u, dtype=np.uint64)
    if u.ndim != 1 or np.any(u >= np.uint64(q)):
        raise ValueError("input must be a 1-D vector with entries in [0, q)")
    nbrs = sorted(graph.neighbors[i] if neighbors is None else neighbors)
    missing = [j for j in nbrs if j not in pairwise]
    if missing:
        raise KeyError(f"client {i} lacks pairwise secrets for neighbours {missing}")
    d = u.shape[0]
    y = u.copy()
    if self_mask_seed is not None:
        y += expand_mask(self_mask_seed, d, q)
    for j in nbrs:
        m = expand_mask(pairwise[j].seed, d, q)
        if i < j:
            y += m
        else:
            y -= m
    return y & np.uint64(q - 1)


# ---------------------------------------------------------------------------
# Protocol parties
# ---------------------------------------------------------------------------


@dataclass
class ShareBundle:
    """Shares a client addressed to one holder (encrypted to it in a real deployment)."""

    owner: int
    holder: int
    self_mask: SecretShare
    pairwise_key: SecretShare


class SecAggClient:
    """One simulated client. Holds its secrets and the shares others sent it."""

    def __init__(self, client_id: int, neighbors: Iterable[int], field_spec: FieldSpec,
                 threshold: int, seed: int):
        self.client_id = client_id
        self.neighbors = frozenset(neighbors)
        self.field = field_spec
        self.threshold = threshold
        self._seed = seed
        self.keys = keygen(client_id, seed)
        self._self_mask_seed = 1 + random.Random(seed ^ 0x5E1F).randrange(SHAMIR_PRIME - 1)
        self._held: dict[int, ShareBundle] = {}
        self._revealed: dict[int, SecretKind] = {}

    @property
    def public_key(self) -> PublicKey:
        return self.keys.public_key

    def make_shares(self, roster: Iterable[int]) -> dict[int, ShareBundle]:
        """Shamir-share both secrets among ``roster`` (neighbours that advertised) and self."""
        holders = sorted(set(roster) & self.neighbors | {self.client_id})
        if len(holders) < self.threshold:
            raise InsufficientShares(
                f"client {self.client_id} has {len(holders)} share holders, threshold {self.threshold}")
        xs = [h + 1 for h in holders]
        b = shamir_share(self._self_mask_seed, len(xs), self.threshold, self._seed ^ 0xB,
                         owner=self.client_id, kind=SecretKind.SELF_MASK_SEED, xs=xs)
        s = shamir_share(self.keys.secret, len(xs), self.threshold, self._seed ^ 0x5,
                         owner=self.client_id, kind=SecretKind.PAIRWISE_KEY, xs=xs)
        return {h: ShareBundle(self.client_id, h, bs, ss) for h, bs, ss in zip(holders, b, s)}

    def receive_shares(self, bundles: Iterable[ShareBundle]) -> None:
        for bundle in bundles:
            if bundle.holder != self.client_id:
                raise ProtocolViolation(f"share for {bundle.holder} delivered to {self.client_id}")
            self._held[bundle.owner] = bundle

    def masked_input(self, u: np.ndarray, peers: Iterable[PublicKey]) -> np.ndarray:
        peers = [p for p in peers if p.client_id != self.client_id]
        pairwise = {p.client_id: derive_pairwise(self.keys, p) for p in peers}
        return mask_update(self.client_id, u, self._self_mask_seed, pairwise, None,
                           self.field.modulus, neighbors=pairwise.keys())

    def reveal(self, request: Mapping[int, SecretKind]) -> list[SecretShare]:
        out = []
        for owner, kind in sorted(request.items()):
            prior = self._revealed.get(owner)
            if prior is not None and prior is not kind:
                raise ProtocolViolation(
                    f"BOTH_KINDS_REVEALED: client {self.client_id} asked for {kind.value} "
                    f"of {owner} after revealing {prior.value}")
            bundle = self._held.get(owner)
            if bundle is None:
                continue
            self._revealed[owner] = kind
            out.append(bundle.self_mask if kind is SecretKind.SELF_MASK_SEED else bundle.pairwise_key)
        return out


class SecAggSession:
    """Server-side state machine for one aggregation round.

    Phases advance monotonically via :meth:`advance`; a client silent in a
    phase is treated as dropped for every later phase. Messages tagged with a
    phase other than the current one are rejected and logged.
    """

    def __init__(self, round_index: int, field_spec: FieldSpec, graph: CommGraph, threshold: int,
                 transcript: list | None = None):
        check_int(threshold, "threshold", min_value=1, max_value=graph.n)
        self.round_index = round_index
        self.field = field_spec
        self.graph = graph
        self.threshold = threshold
        self.phase = Phase.ADVERTISE
        self.transcript = transcript
        self.rejected: list[tuple[Phase, int, str]] = []
        self.public_keys: dict[int, PublicKey] = {}
        self._outbox: dict[int, dict[int, ShareBundle]] = {}
        self._masked: dict[int, np.ndarray] = {}
        self._revealed: dict[int, list[SecretShare]] = {}
        self._requested: dict[int, SecretKind] = {}
        self.u1: frozenset = frozenset()  # advertised
        self.u2: frozenset = frozenset()  # shared keys
        self.u3: frozenset = frozenset()  # sent masked input
        self.u4: frozenset = frozenset()  # answered unmask requests

    # -- plumbing -----------------------------------------------------------

    def _log(self, sender: int, message_type: str, payload) -> None:
        if self.transcript is None:
            return
        digest = hashlib.sha256(repr(payload).encode("utf-8")).hexdigest()[:16]
        self.transcript.append({"round": self.round_index, "phase": self.phase.name,
                                "sender": sender, "message_type": message_type,
                                "payload_digest": digest})

    def _accept(self, expected: Phase, sender: int, message_type: str) -> bool:
        if self.phase is not expected:
            logger.warning("round %d: rejected %s from %d in phase %s", self.round_index,
                           message_type, sender, self.phase.name)
            self.rejected.append((self.phase, sender, message_type))
            return False
        if not 0 <= sender < self.graph.n:
            raise ValueError(f"unknown sender {sender}")
        return True

    def _fail(self, exc: SecAggError):
        self.phase = Phase.FAILED
        raise exc

    # -- incoming messages --------------------------------------------------

    def receive_advertise(self, sender: int, key: PublicKey) -> bool:
        if not self._accept(Phase.ADVERTISE, sender, "advertise"):
            return False
        self.public_keys[sender] = key
        self._log(sender, "advertise", key.value)
        return True

    def receive_shares(self, sender: int, bundles: Mapping[int, ShareBundle]) -> bool:
        if not self._accept(Phase.SHARE_KEYS, sender, "share_keys") or sender not in self.u1:
            return False
        self._outbox[sender] = dict(bundles)
        self._log(sender, "share_keys", sorted(bundles))
        return True

    def receive_masked(self, sender: int, y: np.ndarray) -> bool:
        if not self._accept(Phase.MASKED_INPUT, sender, "masked_input") or sender not in self.u2:
            return False
        y = np.asarray(y, dtype=np.uint64)
        if y.shape != (self.field.dim,) or np.any(y >= np.uint64(self.field.modulus)):
            raise ValueError(f"malformed masked input from {sender}")
        self._masked[sender] = y
        self._log(sender, "masked_input", y.tobytes())
        return True

    def receive_reveal(self, sender: int, shares: Iterable[SecretShare]) -> bool:
        if not self._accept(Phase.UNMASK, sender, "unmask") or sender not in self.u3:
            return False
        shares = list(shares)
        for s in shares:
            if self._requested.get(s.owner) is not s.kind:
                raise ProtocolViolation(f"unrequested {s.kind.value} share of {s.owner} from {sender}")
        self._revealed[sender] = shares
        self._log(sender, "unmask", [(s.owner, s.kind.value) for s in shares])
        return True

    # -- server-side views --------------------------------------------------

    def roster(self, i: int) -> frozenset:
        """Neighbours of ``i`` that advertised keys."""
        return self.graph.neighbors[i] & self.u1

    def inbox(self, i: int) -> list[ShareBundle]:
        return [b[i] for owner, b in sorted(self._outbox.items()) if i in b and owner in self.u2]

    def peer_keys(self, i: int) -> list[PublicKey]:
        return [self.public_keys[j] for j in sorted(self.graph.neighbors[i] & self.u2)]

    def request_shares(self, owner: int, kind: SecretKind) -> None:
        """Record that ``kind`` shares of ``owner`` will be requested; both kinds never may."""
        prior = self._requested.get(owner)
        if prior is not None and prior is not kind:
            raise ProtocolViolation(f"BOTH_KINDS_REVEALED for client {owner}")
        self._requested[owner] = kind

    def unmask_request(self, i: int) -> dict[int, SecretKind]:
        """Which shares holder ``i`` must reveal: only owners it actually holds shares for."""
        owners = (self.graph.neighbors[i] | {i}) & self.u2
        return {o: self._requested[o] for o in sorted(owners) if o in self._requested}

    # -- phase transitions --------------------------------------------------

    def advance(self) -> Phase:
        if self.phase is Phase.ADVERTISE:
            self.u1 = frozenset(self.public_keys)
            self.phase = Phase.SHARE_KEYS
        elif self.phase is Phase.SHARE_KEYS:
            self.u2 = frozenset(self._outbox) & self.u1
            self.phase = Phase.MASKED_INPUT
        elif self.phase is Phase.MASKED_INPUT:
            self.u3 = frozenset(self._masked) & self.u2
            if len(self.u3) < self.threshold:
                self._fail(InsufficientShares(
                    f"round {self.round_index}: {len(self.u3)} masked inputs, threshold {self.threshold}"))
            self.phase = Phase.UNMASK
            for owner in sorted(self.u3):
                self.request_shares(owner, SecretKind.SELF_MASK_SEED)
            for owner in sorted(self.u2 - self.u3):
                self.request_shares(owner, SecretKind.PAIRWISE_KEY)
        else:
            raise ProtocolViolation(f"cannot advance from phase {self.phase.name}")
        return self.phase

    def finalize(self) -> np.ndarray:
        """Remove all masks and return the sum of the ``u3`` inputs mod q."""
        if self.phase is not Phase.UNMASK:
            raise ProtocolViolation(f"cannot finalize from phase {self.phase.name}")
        self.u4 = frozenset(self._revealed)
        q, d = self.field.modulus, self.field.dim
        by_owner: dict[int, list[SecretShare]] = {}
        for holder in sorted(self._revealed):
            for s in self._revealed[holder]:
                by_owner.setdefault(s.owner, []).append(s)

        total = np.zeros(d, dtype=np.uint64)
        for i in sorted(self.u3):
            total += self._masked[i]
        for owner, kind in sorted(self._requested.items(), key=lambda kv: kv[0]):
            shares = by_owner.get(owner, [])
            if len(shares) < self.threshold:
                self._fail(InsufficientShares(
                    f"round {self.round_index}: {len(shares)} {kind.value} shares of client {owner}, "
                    f"threshold {self.threshold}"))
            secret = shamir_reconstruct(shares, self.threshold)
            if kind is SecretKind.SELF_MASK_SEED:
                total -= expand_mask(secret, d, q)
            else:
                dropped = KeyPair(owner, secret, self.public_keys[owner].value)
                for i in sorted(self.graph.neighbors[owner] & self.u3):
                    m = expand_mask(derive_pairwise(dropped, self.public_keys[i]).seed, d, q)
                    # survivor i added +m if i < owner, else -m
                    if i < owner:
                        total -= m
                    else:
                        total += m
        self.phase = Phase.DONE
        return total & np.uint64(q - 1)


def default_threshold(n: int) -> int:
    return max(1, math.ceil(2 * n / 3))


def default_degree(n: int) -> int:
    return max(0, min(n - 1, 50))


@dataclass
class SecAggResult:
    total: np.ndarray
    survivors: frozenset
    session: SecAggSession = field(repr=False)


def run_protocol(inputs: Mapping[int, np.ndarray], field_spec: FieldSpec, graph: CommGraph,
                 threshold: int, seed: int, drop_after: Mapping[int, Phase] | None = None,
                 round_index: int = 0, transcript: list | None = None) -> SecAggResult:
    """Drive a full session over simulated clients ``0..n-1``.

    ``inputs`` maps client id to its vector in Z_q; clients without an input
    drop before sending a masked input. ``drop_after[i] = P`` makes client
    ``i`` go silent once phase ``P`` is over (it sends nothing in later
    phases). Raises :class:`SecAggError` subclasses when the round fails.
    """
    drop_after = dict(drop_after or {})
    n = graph.n
    for i in range(n):
        if i not in inputs:
            drop_after[i] = min(drop_after.get(i, Phase.SHARE_KEYS), Phase.SHARE_KEYS)

    def alive(i: int, phase: Phase) -> bool:
        return i not in drop_after or drop_after[i] >= phase

    session = SecAggSession(round_index, field_spec, graph, threshold, transcript)
    clients = {i: SecAggClient(i, graph.neighbors[i], field_spec, threshold,
                               seed=(seed * 1000003 + i) % (1 << 128)) for i in range(n)}
    for i in range(n):
        if alive(i, Phase.ADVERTISE):
            session.receive_advertise(i, clients[i].public_key)
    session.advance()
    for i in range(n):
        if alive(i, Phase.SHARE_KEYS) and i in session.u1:
            try:
                bundles = clients[i].make_shares(session.roster(i))
            except InsufficientShares:
                continue  # too few live neighbours; this client sits the round out
            session.receive_shares(i, bundles)
    session.advance()
    for i in range(n):
        if alive(i, Phase.MASKED_INPUT) and i in session.u2:
            clients[i].receive_shares(session.inbox(i))
            session.receive_masked(i, clients[i].masked_input(inputs[i], session.peer_keys(i)))
    session.advance()
    for i in sorted(session.u3):
        if alive(i, Phase.UNMASK):
            session.receive_reveal(i, clients[i].reveal(session.unmask_request(i)))
    total = session.finalize()
    return SecAggResult(total, session.u3, session)


def write_transcript(transcript: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in transcript:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
