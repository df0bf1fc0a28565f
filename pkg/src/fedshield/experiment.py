"""End-to-end experiment pipelines and their output files.

Output directory layout::

    effective_config.cfg    every config key, defaults included
    metrics.csv             round, survivors, aborted, prediction_accuracy,
                            picked_ratio_proxy, mean_log_loss
    telemetry.jsonl         one TelemetryRecord per round (no user ids)
    ledger.json             privacy ledger and budget verdict
    final.ckpt              only when the budget verdict is not FAIL

Seeds: every stream derives from the master seed via
:func:`fedshield.seeding.child_seed` with labels ``init``, ``pretrain``,
``cohort``, ``dropout``, ``client``, ``backend`` and ``dp_tree``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregation import PlainMeanBackend, SecAggBackend
from .config import ExperimentConfig, format_config, validate_config
from .corpus import CorpusSplit, LocalDataset, read_corpus, split_corpus
from .ddp import ddp_zcdp_contribution
from .dpftrl import DPFTRLOptimizer, PrivacyLedger, ServerSGD, Verdict, check_budget
from .federation import (ClientTrainer, Population, PopulationExhausted, TelemetryRecord, run_round,
                         sample_cohort, with_metrics)
from .model import Architecture, MetricsReport, evaluate, init_model, pretrain, save_checkpoint
from .seeding import child_seed

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("round", "survivors", "aborted", "prediction_accuracy", "picked_ratio_proxy", "mean_log_loss")
CHECKPOINT_NAME = "final.ckpt"
WITHHELD = "WITHHELD"


@dataclass
class TrainingRun:
    params: np.ndarray
    rows: list[dict]
    telemetry: list[TelemetryRecord]
    ledger: PrivacyLedger
    population: Population
    transcript: list | None = None


@dataclass
class ExperimentResult:
    metrics: list[dict]
    ledger: PrivacyLedger
    checkpoint_path: Path | None  # None means WITHHELD
    telemetry_path: Path
    output_dir: Path
    final_params: np.ndarray = field(repr=False)
    population: Population = field(repr=False)

    @property
    def checkpoint(self) -> Path | str:
        return WITHHELD if self.checkpoint_path is None else self.checkpoint_path


def architecture(cfg: ExperimentConfig) -> Architecture:
    return Architecture(cfg.vocab_size, cfg.embed_dim)


def prepare_data(cfg: ExperimentConfig) -> CorpusSplit:
    return split_corpus(read_corpus(cfg.corpus_path), cfg.vocab_size, cfg.population_size)


def initial_params(cfg: ExperimentConfig, split: CorpusSplit) -> np.ndarray:
    arch = architecture(cfg)
    params = init_model(len(split.vocab), cfg.embed_dim, child_seed(cfg.seed, "init"))
    return pretrain(params, split.public, arch, steps=cfg.pretrain_steps, lr=cfg.pretrain_lr,
                    batch_size=cfg.pretrain_batch_size, seed=child_seed(cfg.seed, "pretrain"))


def build_ledger(cfg: ExperimentConfig, rounds: int = 0) -> PrivacyLedger:
    rho_ddp = None
    if cfg.mode == "DP_SECAGG_DDP":
        rho_ddp = ddp_zcdp_contribution(cfg.ddp_config(), cfg.min_aggregation)
    return PrivacyLedger(clip_norm=cfg.clip_norm, noise_multiplier=cfg.effective_noise_multiplier,
                         rounds=rounds, min_separation=cfg.min_separation, restart_period=cfg.restart_period,
                         rho_ddp_per_round=rho_ddp, deltas=tuple(cfg.deltas), budget=cfg.budget_rho)


def build_backend(cfg: ExperimentConfig, transcript: list | None = None):
    if not cfg.uses_secagg:
        return PlainMeanBackend()
    t, k = cfg.secagg_params()
    return SecAggBackend(cfg.ddp_config(), threshold=t, degree=k, transcript=transcript)


def build_server_optimizer(cfg: ExperimentConfig, params: np.ndarray):
    if not cfg.uses_central_dp:
        return ServerSGD(cfg.server_lr, cfg.server_momentum)
    return DPFTRLOptimizer(params, lr=cfg.server_lr, momentum=cfg.server_momentum,
                           noise_multiplier=cfg.noise_multiplier, clip_norm=cfg.clip_norm,
                           noise_weight=cfg.report_goal, horizon=cfg.rounds,
                           seed=child_seed(cfg.seed, "dp_tree"), restart_period=cfg.restart_period)


def _metrics_row(round_index: int, survivors: int, aborted: bool, m: MetricsReport) -> dict:
    return {"round": round_index, "survivors": survivors, "aborted": int(aborted),
            "prediction_accuracy": m.prediction_accuracy, "picked_ratio_proxy": m.picked_ratio_proxy,
            "mean_log_loss": m.mean_log_loss}


def train_federated(cfg: ExperimentConfig, users: list[LocalDataset], heldout: list[LocalDataset],
                    params: np.ndarray) -> TrainingRun:
    """Run ``cfg.rounds`` rounds from ``params``; nothing is written to disk."""
    validate_config(cfg)
    arch = architecture(cfg)
    population = Population(list(users))
    trainer = ClientTrainer(arch, cfg.clip_norm, cfg.client_epochs, cfg.client_lr, cfg.client_batch_size)
    transcript = [] if cfg.secagg_transcript else None
    backend = build_backend(cfg, transcript)
    optimizer = build_server_optimizer(cfg, params)
    ledger = build_ledger(cfg)
    clock = time.perf_counter if cfg.telemetry_wall_time else (lambda: 0.0)

    checkpoint = params.copy()
    rows, telemetry = [], []
    for r in range(1, cfg.rounds + 1):
        try:
            plan = sample_cohort(population, r, cfg.report_goal, cfg.min_separation,
                                 child_seed(cfg.seed, "cohort", r), min_aggregation=cfg.min_aggregation,
                                 dropout_rate=cfg.dropout_rate)
        except PopulationExhausted:
            logger.info("round %d skipped: population exhausted", r)
            record = TelemetryRecord(r, 0, 0, True, 0.0, "population_exhausted")
            survivors, aborted = 0, True
        else:
            outcome = run_round(population, plan, checkpoint, backend, optimizer, cfg.seed,
                                trainer=trainer, clock=clock)
            record, survivors, aborted = outcome.telemetry, outcome.survivors, outcome.aborted
            if not aborted:
                checkpoint = outcome.new_checkpoint
        # Every scheduled round is charged, aborted or not; this keeps the dry-run ledger exact.
        ledger.record_round(r)
        report = evaluate(checkpoint, heldout, arch, cfg.eval_k)
        telemetry.append(with_metrics(record, report.as_dict()))
        rows.append(_metrics_row(r, survivors, aborted, report))
    return TrainingRun(checkpoint, rows, telemetry, ledger, population, transcript)


def format_metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def release_checkpoint(params: np.ndarray, ledger: PrivacyLedger, path: str | Path) -> Path | None:
    """Write the final model unless the ledger fails its budget; then make sure none exists."""
    path = Path(path)
    if ledger.budget is not None and check_budget(ledger, ledger.budget) is Verdict.FAIL:
        if path.exists():
            path.unlink()
        logger.warning("budget FAIL (rho=%s > %s): final checkpoint withheld", ledger.total_rho, ledger.budget)
        return None
    save_checkpoint(params, path)
    return path


def write_effective_config(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.cfg"
    path.write_text(format_config(cfg), encoding="utf-8")
    return path


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    validate_config(cfg)
    out = Path(out_dir or cfg.output_dir)
    write_effective_config(cfg, out)
    logger.info("effective config:\n%s", format_config(cfg))
    split = prepare_data(cfg)
    params = initial_params(cfg, split)
    run = train_federated(cfg, split.users, [split.heldout], params)

    (out / "metrics.csv").write_text(format_metrics_csv(run.rows), encoding="utf-8")
    telemetry_path = out / "telemetry.jsonl"
    telemetry_path.write_text("".join(rec.to_json() + "\n" for rec in run.telemetry), encoding="utf-8")
    run.ledger.write(out / "ledger.json")
    if run.transcript is not None:
        from .secagg import write_transcript

        write_transcript(run.transcript, out / "secagg_transcript.jsonl")
    ckpt = release_checkpoint(run.params, run.ledger, out / CHECKPOINT_NAME)
    return ExperimentResult(run.rows, run.ledger, ckpt, telemetry_path, out, run.params, run.population)


def account(cfg: ExperimentConfig) -> PrivacyLedger:
    """The ledger ``run_experiment`` would produce, without touching data."""
    validate_config(cfg)
    return build_ledger(cfg, rounds=cfg.rounds)


BASIS_FIELDS = ("seed", "corpus_path", "population_size", "vocab_size", "embed_dim", "eval_k",
                "pretrain_steps", "pretrain_lr", "pretrain_batch_size")


def compare(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig, out_dir: str | Path | None = None,
            tau: float | None = None) -> dict:
    """Paired runs; deltas are ``b - a`` per round."""
    mismatched = [f for f in BASIS_FIELDS if getattr(cfg_a, f) != getattr(cfg_b, f)]
    if mismatched:
        raise ValueError(f"configs differ in comparison-basis fields: {', '.join(mismatched)}")
    if cfg_a.rounds != cfg_b.rounds:
        raise ValueError("configs differ in federation.rounds")
    tau = cfg_a.compare_tau if tau is None else tau
    out = Path(out_dir or cfg_a.output_dir)
    res_a = run_experiment(cfg_a, out / "a")
    res_b = run_experiment(cfg_b, out / "b")
    keys = ("prediction_accuracy", "picked_ratio_proxy", "mean_log_loss")
    deltas = [{"round": ra["round"], **{k: rb[k] - ra[k] for k in keys}}
              for ra, rb in zip(res_a.metrics, res_b.metrics)]
    final_delta = deltas[-1]["prediction_accuracy"]
    within = abs(final_delta) <= tau
    return {
        "a": {"mode": cfg_a.mode, "ledger": res_a.ledger.to_dict(), "final": res_a.metrics[-1]},
        "b": {"mode": cfg_b.mode, "ledger": res_b.ledger.to_dict(), "final": res_b.metrics[-1]},
        "deltas": deltas,
        "tau": tau,
        "final_accuracy_delta": final_delta,
        "verdict": f"utility delta within {tau}: {'yes' if within else 'no'}",
    }


def evaluate_checkpoint(cfg: ExperimentConfig, params: np.ndarray) -> MetricsReport:
    split = prepare_data(cfg)
    return evaluate(params, [split.heldout], architecture(cfg), cfg.eval_k)


def with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return cfg if seed is None else replace(cfg, seed=seed)
