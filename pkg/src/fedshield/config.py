"""Experiment configuration.

File grammar (UTF-8 text)::

    file    := { line "\\n" }
    line    := blank | comment | entry
    comment := "#" any-text
    entry   := key "=" value          # surrounding whitespace ignored
    key     := section "." name | name   # e.g. federation.report_goal

Values are parsed by the key's declared type: integers, reals (``inf``
allowed where noted), booleans (``true``/``false``), strings, comma
separated real lists, and ``none`` for optional fields. Unknown keys and
repeated keys are errors. Every key has a default; :func:`format_config`
writes the full effective configuration back out in the same grammar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .ddp import DdpConfig, HeadroomError
from .secagg import default_degree, default_threshold

MODES = ("BASELINE", "DP_ONLY", "SECAGG_ONLY", "DP_SECAGG_DDP")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "BASELINE"
    seed: int = 0
    output_dir: str = "runs/default"
    corpus_path: str | None = None
    population_size: int = 100
    rounds: int = 20
    report_goal: int = 20
    min_aggregation: int = 10
    min_separation: int = 4
    dropout_rate: float = 0.0
    vocab_size: int = 50
    embed_dim: int = 16
    eval_k: int = 3
    client_epochs: int = 1
    client_lr: float = 0.5
    client_batch_size: int = 16
    pretrain_steps: int = 300
    pretrain_lr: float = 0.5
    pretrain_batch_size: int = 32
    server_lr: float = 1.0
    server_momentum: float = 0.0
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    restart_period: int | None = None
    deltas: tuple = (1e-10,)
    ddp_scale: float = 65536.0
    ddp_bits: int = 32
    ddp_mu: float = 0.0
    secagg_threshold: int | None = None
    secagg_degree: int | None = None
    secagg_transcript: bool = False
    budget_rho: float | None = None
    compare_tau: float = 0.01
    telemetry_wall_time: bool = True

    @property
    def uses_secagg(self) -> bool:
        return self.mode in ("SECAGG_ONLY", "DP_SECAGG_DDP")

    @property
    def uses_central_dp(self) -> bool:
        return self.mode in ("DP_ONLY", "DP_SECAGG_DDP")

    @property
    def effective_mu(self) -> float:
        return self.ddp_mu if self.mode == "DP_SECAGG_DDP" else 0.0

    @property
    def effective_noise_multiplier(self) -> float:
        return self.noise_multiplier if self.uses_central_dp else 0.0

    def ddp_config(self) -> DdpConfig:
        return DdpConfig(clip_norm=self.clip_norm, scale=self.ddp_scale, bits=self.ddp_bits,
                         mu=self.effective_mu, n_clients=self.report_goal)

    def secagg_params(self) -> tuple[int, int]:
        k = min(self.secagg_degree or default_degree(self.report_goal), self.report_goal - 1)
        t = self.secagg_threshold or min(default_threshold(self.report_goal), k)
        return t, k


# dotted key -> (attribute, kind)
SCHEMA: dict[str, tuple[str, str]] = {
    "mode": ("mode", "str"),
    "seed": ("seed", "int"),
    "output.dir": ("output_dir", "str"),
    "corpus.path": ("corpus_path", "optstr"),
    "population.size": ("population_size", "int"),
    "federation.rounds": ("rounds", "int"),
    "federation.report_goal": ("report_goal", "int"),
    "federation.min_aggregation": ("min_aggregation", "int"),
    "federation.min_separation": ("min_separation", "int"),
    "federation.dropout_rate": ("dropout_rate", "float"),
    "model.vocab_size": ("vocab_size", "int"),
    "model.embed_dim": ("embed_dim", "int"),
    "model.eval_k": ("eval_k", "int"),
    "client.epochs": ("client_epochs", "int"),
    "client.lr": ("client_lr", "float"),
    "client.batch_size": ("client_batch_size", "int"),
    "pretrain.steps": ("pretrain_steps", "int"),
    "pretrain.lr": ("pretrain_lr", "float"),
    "pretrain.batch_size": ("pretrain_batch_size", "int"),
    "server.lr": ("server_lr", "float"),
    "server.momentum": ("server_momentum", "float"),
    "dp.clip_norm": ("clip_norm", "float"),
    "dp.noise_multiplier": ("noise_multiplier", "float_inf"),
    "dp.restart_period": ("restart_period", "optint"),
    "dp.deltas": ("deltas", "floatlist"),
    "ddp.scale": ("ddp_scale", "float"),
    "ddp.bits": ("ddp_bits", "int"),
    "ddp.mu": ("ddp_mu", "float"),
    "secagg.threshold": ("secagg_threshold", "optint"),
    "secagg.degree": ("secagg_degree", "optint"),
    "secagg.transcript": ("secagg_transcript", "bool"),
    "budget.rho": ("budget_rho", "optfloat"),
    "compare.tau": ("compare_tau", "float"),
    "telemetry.wall_time": ("telemetry_wall_time", "bool"),
}
_ATTR_TO_KEY = {attr: key for key, (attr, _) in SCHEMA.items()}


def _parse_value(key: str, kind: str, raw: str) -> Any:
    raw = raw.strip()
    try:
        if kind.startswith("opt") and raw.lower() == "none":
            return None
        if kind in ("int", "optint"):
            return int(raw)
        if kind in ("float", "optfloat"):
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError("must be finite")
            return value
        if kind == "float_inf":
            value = float(raw)
            if math.isnan(value):
                raise ValueError("must not be NaN")
            return value
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if kind == "floatlist":
            return tuple(float(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}: {exc}") from None


def _format_value(kind: str, value: Any) -> str:
    if value is None:
        return "none"
    if kind == "bool":
        return "true" if value else "false"
    if kind == "floatlist":
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    values: dict[str, Any] = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        attr, kind = SCHEMA[key]
        values[attr] = _parse_value(key, kind, raw)
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks; raises ConfigError (HeadroomError for wraparound risk)."""
    def need(cond: bool, attr: str, msg: str):
        if not cond:
            raise ConfigError(f"{_ATTR_TO_KEY[attr]}: {msg}")

    need(cfg.mode in MODES, "mode", f"must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    need(cfg.seed >= 0, "seed", "must be >= 0")
    need(cfg.population_size >= 1, "population_size", "must be >= 1")
    need(cfg.rounds >= 1, "rounds", "must be >= 1")
    need(cfg.min_aggregation >= 1, "min_aggregation", "must be >= 1")
    if cfg.min_aggregation > cfg.report_goal:
        raise ConfigError(
            f"federation.min_aggregation ({cfg.min_aggregation}) must not exceed "
            f"federation.report_goal ({cfg.report_goal})")
    if cfg.report_goal > cfg.population_size:
        raise ConfigError(
            f"federation.report_goal ({cfg.report_goal}) must not exceed population.size ({cfg.population_size})")
    need(cfg.min_separation >= 1, "min_separation", "must be >= 1")
    need(0.0 <= cfg.dropout_rate < 1.0, "dropout_rate", "must lie in [0, 1)")
    need(cfg.vocab_size >= 2, "vocab_size", "must be >= 2")
    need(cfg.embed_dim >= 1, "embed_dim", "must be >= 1")
    need(1 <= cfg.eval_k <= cfg.vocab_size, "eval_k", "must lie in [1, model.vocab_size]")
    need(cfg.client_epochs >= 1, "client_epochs", "must be >= 1")
    need(cfg.client_lr >= 0, "client_lr", "must be >= 0")
    need(cfg.client_batch_size >= 1, "client_batch_size", "must be >= 1")
    need(cfg.pretrain_steps >= 0, "pretrain_steps", "must be >= 0")
    need(cfg.pretrain_lr >= 0, "pretrain_lr", "must be >= 0")
    need(cfg.pretrain_batch_size >= 1, "pretrain_batch_size", "must be >= 1")
    need(cfg.server_lr >= 0, "server_lr", "must be >= 0")
    need(0 <= cfg.server_momentum < 1, "server_momentum", "must lie in [0, 1)")
    need(cfg.clip_norm > 0, "clip_norm", "must be > 0")
    need(cfg.noise_multiplier >= 0, "noise_multiplier", "must be >= 0")
    need(cfg.restart_period is None or cfg.restart_period >= 1, "restart_period", "must be >= 1 or none")
    need(len(cfg.deltas) >= 1 and all(0 < d < 1 for d in cfg.deltas), "deltas", "every delta must lie in (0, 1)")
    need(cfg.ddp_scale > 0, "ddp_scale", "must be > 0")
    need(cfg.ddp_bits in (16, 32), "ddp_bits", "must be 16 or 32")
    need(cfg.ddp_mu >= 0, "ddp_mu", "must be >= 0")
    need(cfg.budget_rho is None or cfg.budget_rho >= 0, "budget_rho", "must be >= 0 or none")
    need(cfg.compare_tau >= 0, "compare_tau", "must be >= 0")
    if cfg.uses_secagg:
        need(cfg.report_goal >= 2, "report_goal", "SecAgg needs at least 2 clients per round")
        t, k = cfg.secagg_params()
        need(1 <= t <= cfg.report_goal, "secagg_threshold", f"must lie in [1, report_goal], got {t}")
        if t > k:
            raise ConfigError(f"secagg.threshold ({t}) must not exceed secagg.degree ({k})")
        need(k == cfg.report_goal - 1 or k >= 2, "secagg_degree", "must be >= 2 for a connected topology")
        try:
            cfg.ddp_config().validate_headroom()
        except HeadroomError as exc:
            raise HeadroomError(f"ddp.scale/ddp.mu/dp.clip_norm: {exc}") from None
    return cfg


def format_config(cfg: ExperimentConfig) -> str:
    lines = ["# effective configuration (every key, defaults included)"]
    for key, (attr, kind) in SCHEMA.items():
        lines.append(f"{key} = {_format_value(kind, getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return validate_config(replace(cfg, **changes))


def config_fields() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
