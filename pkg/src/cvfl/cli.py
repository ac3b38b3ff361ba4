"""Command-line entry point.

``cvfl run`` executes one experiment and writes ``rounds.jsonl``,
``summary.csv``, ``config.json`` and the final model checkpoints to the output
directory. ``cvfl sweep`` tabulates cluster heads and participants over a grid
of RB budgets and model sizes, ``cvfl verify`` runs the oracle suites and
``cvfl presets`` dumps a built-in configuration as JSON.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import learner, orchestrator, verify
from .config import PRESETS, ExperimentConfig, Seeds, load_config, preset
from .exceptions import ConfigurationError

logger = logging.getLogger("cvfl")

SUMMARY_COLUMNS = (
    "mode",
    "round",
    "heads",
    "participants",
    "dropped",
    "feasible_candidates",
    "num_models",
    "head_objective",
    "match_objective",
    "accuracy",
    "loss",
)

SWEEP_COLUMNS = (
    "total_rbs",
    "model_size_bits",
    "repeats",
    "heads_mean",
    "heads_std",
    "participants_mean",
    "participants_std",
)


def _int_list(text: str) -> list[int]:
    return [int(float(x)) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvfl", description="Clustered vehicular federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_source(p):
        p.add_argument("target", nargs="?", help="preset name or path to a JSON config")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)

    run = sub.add_parser("run", help="run one experiment")
    add_source(run)
    run.add_argument("--rounds", type=int)
    run.add_argument("--total-rbs", type=int)
    run.add_argument("--model-size-bits", type=float)
    run.add_argument("--baseline", action="store_true", help="also run the vanilla FL baseline")
    run.add_argument("--out", type=Path, default=Path("runs"))

    sweep = sub.add_parser("sweep", help="heads and participants over an RB / model-size grid")
    add_source(sweep)
    sweep.add_argument("--rounds", type=int)
    sweep.add_argument("--total-rbs", type=_int_list, default=[2, 3, 4])
    sweep.add_argument("--model-size-bits", type=_int_list, default=[160_000, 320_000, 640_000])
    sweep.add_argument("--repeats", type=int, default=5)
    sweep.add_argument("--train", action="store_true", help="train models during the sweep (slow)")
    sweep.add_argument("--out", type=Path, help="CSV path; stdout when omitted")

    ver = sub.add_parser("verify", help="run the oracle suites")
    ver.add_argument("suites", nargs="*", metavar="suite", help=f"any of {', '.join(verify.SUITES)}; all when omitted")

    pre = sub.add_parser("presets", help="print a preset as JSON")
    pre.add_argument("name", nargs="?", choices=sorted(PRESETS))
    return parser


def resolve_config(args) -> ExperimentConfig:
    sources = [s for s in (args.target, args.preset, args.config) if s is not None]
    if len(sources) != 1:
        raise ConfigurationError("give exactly one of a preset name, --preset or --config")
    if args.config is not None:
        return load_config(args.config)
    name = args.preset or args.target
    if name in PRESETS:
        return preset(name)
    return load_config(name)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value} in summary")
        return repr(value)
    return str(value)


def summary_row(report: orchestrator.RoundReport) -> list[str]:
    values = {
        "mode": report.mode,
        "round": report.round,
        "heads": len(report.heads),
        "participants": report.participants,
        "dropped": len(report.dropped),
        "feasible_candidates": report.feasible_candidates,
        "num_models": report.num_models,
        "head_objective": report.head_objective,
        "match_objective": report.match_objective,
        "accuracy": report.accuracy,
        "loss": report.loss,
    }
    return [_cell(values[c]) for c in SUMMARY_COLUMNS]


def cmd_run(args) -> int:
    config = resolve_config(args).with_overrides(
        seed=args.seed, rounds=args.rounds, total_rbs=args.total_rbs, model_size_bits=args.model_size_bits
    )
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json() + "\n")

    with open(out / "rounds.jsonl", "w") as jsonl, open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)

        def emit(report):
            jsonl.write(report.to_json(config.record_timing) + "\n")
            writer.writerow(summary_row(report))

        result = orchestrator.run_experiment(config, on_report=emit)
        if args.baseline:
            baseline = orchestrator.run_vanilla_baseline(config, on_report=emit)

    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for m in result.models:
        learner.save_params(m, models_dir / f"cvfl_v{m.version}.bin")
    stats = orchestrator.summarize(result.reports)
    print(f"cvfl: {stats['rounds']} rounds, {stats['mean_heads']:.2f} heads/round, "
          f"{stats['mean_participants']:.2f} participants/round, final accuracy {stats['final_accuracy']}")
    if args.baseline:
        learner.save_params(baseline.models[0], models_dir / "vanilla.bin")
        stats = orchestrator.summarize(baseline.reports)
        print(f"vanilla: {stats['mean_participants']:.2f} participants/round, final accuracy {stats['final_accuracy']}")
    return 0


def sweep_rows(config: ExperimentConfig, total_rbs, model_sizes, repeats: int, seed: int = 0, train: bool = False):
    """Mean and std of heads/round and participants/round for every grid cell."""
    if repeats < 1 or not total_rbs or not model_sizes:
        raise ConfigurationError("the sweep grid and repeats must be non-empty")
    rows = []
    for size in model_sizes:
        for rbs in total_rbs:
            heads, parts = [], []
            for r in range(repeats):
                cfg = config.with_overrides(total_rbs=rbs, model_size_bits=size)
                cfg = cfg.replace(seeds=Seeds.from_base([seed, r]), train_models=train)
                stats = orchestrator.summarize(orchestrator.run_experiment(cfg).reports)
                heads.append(stats["mean_heads"])
                parts.append(stats["mean_participants"])
            rows.append(
                {
                    "total_rbs": rbs,
                    "model_size_bits": size,
                    "repeats": repeats,
                    "heads_mean": float(np.mean(heads)),
                    "heads_std": float(np.std(heads)),
                    "participants_mean": float(np.mean(parts)),
                    "participants_std": float(np.std(parts)),
                }
            )
    return rows


def cmd_sweep(args) -> int:
    config = resolve_config(args).with_overrides(rounds=args.rounds)
    rows = sweep_rows(config, args.total_rbs, args.model_size_bits, args.repeats, args.seed or 0, args.train)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in SWEEP_COLUMNS])
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_verify(args) -> int:
    unknown = [s for s in args.suites if s not in verify.SUITES]
    if unknown:
        raise ConfigurationError(f"unknown suite(s) {unknown}; choose from {list(verify.SUITES)}")
    results = verify.run_suites(args.suites)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def cmd_presets(args) -> int:
    for name in [args.name] if args.name else sorted(PRESETS):
        print(preset(name).to_json())
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "presets": cmd_presets}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"cvfl: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cvfl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
