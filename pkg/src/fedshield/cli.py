"""Command line entry point: ``fedshield {pretrain,train,evaluate,account,compare}``.

Exit codes: 0 success, 2 configuration error, 3 privacy budget FAIL.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .ddp import HeadroomError
from .dpftrl import Verdict, check_budget
from .experiment import (account, compare, evaluate_checkpoint, initial_params, prepare_data, run_experiment,
                         write_effective_config)
from .model import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET = 0, 2, 3

logger = logging.getLogger("fedshield")


def _load(path: str, seed: int | None, out: str | None) -> ExperimentConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, output_dir=out)
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_pretrain(args) -> int:
    cfg = _load(args.config[0], args.seed, args.out)
    out = Path(cfg.output_dir)
    write_effective_config(cfg, out)
    params = initial_params(cfg, prepare_data(cfg))
    save_checkpoint(params, out / "pretrained.ckpt")
    _print(evaluate_checkpoint(cfg, params).as_dict())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args.config[0], args.seed, args.out)
    result = run_experiment(cfg)
    _print({"final": result.metrics[-1], "ledger": result.ledger.to_dict(), "checkpoint": str(result.checkpoint)})
    return EXIT_BUDGET if result.checkpoint_path is None else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args.config[0], args.seed, args.out)
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "final.ckpt"
    report = evaluate_checkpoint(cfg, load_checkpoint(path)).as_dict()
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "eval.json").write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
    _print(report)
    return EXIT_OK


def cmd_account(args) -> int:
    cfg = _load(args.config[0], args.seed, args.out)
    ledger = account(cfg)
    out = Path(cfg.output_dir)
    write_effective_config(cfg, out)
    ledger.write(out / "ledger.json")
    _print(ledger.to_dict())
    if ledger.budget is not None and check_budget(ledger, ledger.budget) is Verdict.FAIL:
        return EXIT_BUDGET
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.config) != 2:
        raise ConfigError("compare needs exactly two --config arguments")
    cfg_a = _load(args.config[0], args.seed, args.out)
    cfg_b = _load(args.config[1], args.seed, args.out)
    try:
        report = compare(cfg_a, cfg_b, out_dir=cfg_a.output_dir)
    except ValueError as exc:
        if "comparison-basis" in str(exc) or "federation.rounds" in str(exc):
            raise ConfigError(str(exc)) from None
        raise
    Path(cfg_a.output_dir, "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                                      encoding="utf-8")
    _print({k: report[k] for k in ("verdict", "final_accuracy_delta", "tau")}
           | {"rho_a": report["a"]["ledger"]["total_rho"], "rho_b": report["b"]["ledger"]["total_rho"]})
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "evaluate": cmd_evaluate,
            "account": cmd_account, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedshield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", required=True, metavar="PATH",
                       help="experiment config (give twice for compare)")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, metavar="DIR", help="override output.dir")
        if name == "evaluate":
            p.add_argument("--checkpoint", default=None, metavar="PATH")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "compare" and len(args.config) != 1:
        print("error: give exactly one --config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, HeadroomError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
