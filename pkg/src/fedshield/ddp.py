"""Distributed DP on the SecAgg wire: clip -> scale -> stochastic rounding ->
per-client Skellam noise -> modular secure sum -> centred decode.

Integers travel in Z_q with a two's-complement style encoding: a value ``x``
with ``|x| < q/2`` is sent as ``x mod q`` and decoded back by mapping residues
``>= q/2`` to ``residue - q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_int, check_real, check_vector

TAIL_SIGMAS = 6.0


class HeadroomError(ValueError):
    """The configured field cannot hold the aggregate without risking wraparound."""


@dataclass(frozen=True)
class DdpConfig:
    """Quantization and noise settings.

    ``scale`` converts model units to field units; ``mu`` is the Poisson rate
    of each Skellam half, so every client adds per-entry noise of variance
    ``2 * mu`` (field units); ``n_clients`` bounds the number of summands.
    """

    clip_norm: float
    scale: float
    bits: int = 32
    mu: float = 0.0
    n_clients: int = 1

    def __post_init__(self):
        check_real(self.clip_norm, "clip_norm", positive=True)
        check_real(self.scale, "scale", positive=True)
        check_real(self.mu, "mu", nonnegative=True)
        check_int(self.n_clients, "n_clients", min_value=1)
        if self.bits not in (8, 16, 32):
            raise ValueError(f"bits must be 8, 16 or 32, got {self.bits}")

    @property
    def modulus(self) -> int:
        return 1 << self.bits

    def aggregate_bound(self) -> float:
        """Largest |entry| of the noisy sum we plan for, in field units.

        Each client contributes at most ``scale * C + 1`` after stochastic
        rounding; the summed Skellam noise is bounded at ``6`` standard
        deviations, ``6 * sqrt(2 * mu * n)``.
        """
        n = self.n_clients
        return n * (self.scale * self.clip_norm + 1.0) + TAIL_SIGMAS * math.sqrt(2.0 * self.mu * n)

    def validate_headroom(self) -> "DdpConfig":
        bound = self.aggregate_bound()
        if bound >= self.modulus / 2:
            raise HeadroomError(
                f"headroom violation: aggregate bound {bound:.6g} (n={self.n_clients}, scale={self.scale}, "
                f"clip_norm={self.clip_norm}, mu={self.mu}) must stay below q/2 = {self.modulus // 2}")
        return self


def encode(values: np.ndarray, q: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    return np.mod(values, q).astype(np.uint64)


def decode(residues: np.ndarray, q: int) -> np.ndarray:
    r = np.asarray(residues, dtype=np.uint64).astype(np.int64)
    return np.where(r >= q // 2, r - q, r)


def stochastic_round(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """floor(x) + Bernoulli(x - floor(x)); integers pass through untouched."""
    lo = np.floor(x)
    frac = x - lo
    up = rng.random(x.shape) < frac
    return (lo + up).astype(np.int64)


def quantize(v: np.ndarray, cfg: DdpConfig, seed: int) -> np.ndarray:
    """Scale by ``cfg.scale``, round stochastically and encode into Z_q."""
    v = check_vector(v, "v")
    norm = float(np.sqrt(np.dot(v, v)))
    if norm > cfg.clip_norm * (1 + 1e-12):
        raise ValueError(f"update norm {norm:.6g} exceeds clip_norm {cfg.clip_norm}; clip before quantizing")
    return encode(stochastic_round(cfg.scale * v, np.random.default_rng(seed)), cfg.modulus)


def skellam_noise(mu: float, d: int, rng: np.random.Generator) -> np.ndarray:
    if mu == 0:
        return np.zeros(d, dtype=np.int64)
    return rng.poisson(mu, d).astype(np.int64) - rng.poisson(mu, d).astype(np.int64)


def add_discrete_noise(qv: np.ndarray, mu: float, seed: int, q: int) -> np.ndarray:
    """Add Skellam(mu, mu) noise per entry, mod q."""
    check_real(mu, "mu", nonnegative=True)
    qv = np.asarray(qv, dtype=np.uint64)
    if mu == 0:
        return qv.copy()
    noise = skellam_noise(mu, qv.shape[0], np.random.default_rng(seed))
    return (qv + encode(noise, q)) & np.uint64(q - 1)


def dequantize_sum(sum_q: np.ndarray, n: int, cfg: DdpConfig) -> np.ndarray:
    """Centred decode of a modular sum, divided by ``scale * n``: the mean update."""
    check_int(n, "survivor count", min_value=1)
    return decode(sum_q, cfg.modulus).astype(np.float64) / (cfg.scale * n)


def client_encode(v: np.ndarray, cfg: DdpConfig, seed: int) -> np.ndarray:
    """What a client puts on the wire: quantized update plus its Skellam noise."""
    rng = np.random.default_rng(seed)
    qv = quantize(v, cfg, int(rng.integers(2**63)))
    return add_discrete_noise(qv, cfg.mu, int(rng.integers(2**63)), cfg.modulus)


def ddp_zcdp_contribution(cfg: DdpConfig, n_min: int) -> float:
    """Gaussian-approximation zCDP of the summed Skellam noise alone.

    rho = (s*C)^2 / (2 * sigma_total^2) with sigma_total^2 = 2 * mu * n_min.
    This approximates, and is not, an exact Skellam accounting. Returns
    ``math.inf`` when ``mu == 0`` (no distributed guarantee).
    """
    check_int(n_min, "n_min", min_value=1)
    if cfg.mu == 0:
        return math.inf
    sensitivity = cfg.scale * cfg.clip_norm
    return sensitivity**2 / (2.0 * 2.0 * cfg.mu * n_min)
