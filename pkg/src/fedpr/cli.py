"""Command-line entry point.

Subcommands: ``run`` (train and persist a result bundle), ``eval``
(recompute the cross-client matrix from a checkpoint), ``gen-data``
(write a synthetic dataset file) and ``selftest`` (run the acceptance
suite).  Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import ConfigError, FedprError
from .harness import (
    ExperimentConfig,
    dataset_for_run,
    load_checkpoint,
    matrix_to_csv,
    run_experiment,
)
from .metrics import cross_eval
from .synthdata import SyntheticSpec, generate, write_dataset


class _Parser(argparse.ArgumentParser):
    # Spec'd CLI contract: bad flags print usage and exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fedpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train under a mode and write the result bundle")
    run.add_argument("--config", type=Path, help="JSON experiment config")
    run.add_argument("--mode", choices=("fedpr", "fedavg", "centralized"))
    run.add_argument("--seed", type=int, action="append", help="repeatable run seed")
    run.add_argument("--rounds", type=int)
    run.add_argument("--clients", type=int)
    run.add_argument("--select-frac", type=float)
    run.add_argument("--lr", type=float)
    run.add_argument("--alpha", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--gamma", type=float)
    run.add_argument("--out", type=Path)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset file")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--clients", type=int, default=4)
    gen.add_argument("--samples-per-client", type=int, default=600)
    gen.add_argument("--train-fraction", type=float, default=0.7)
    gen.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("eval", help="cross-evaluate checkpointed clients")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--config", type=Path, required=True, help="config echo of the original run")
    ev.add_argument("--data", type=Path, help="override: evaluate on this dataset file")
    ev.add_argument("--out", type=Path, required=True)

    st = sub.add_parser("selftest", help="run the acceptance suite")
    st.add_argument("--tests-dir", type=Path)
    return parser


def _load_config(path: Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_json_dict(obj)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.rounds is not None:
        cfg.round = dataclasses.replace(cfg.round, rounds=args.rounds)
    if args.select_frac is not None:
        cfg.round = dataclasses.replace(cfg.round, selection_fraction=args.select_frac)
    if args.lr is not None:
        cfg.round = dataclasses.replace(cfg.round, lr=args.lr)
    weights = cfg.round.weights
    if args.alpha is not None or args.beta is not None or args.gamma is not None:
        weights = dataclasses.replace(
            weights,
            alpha=weights.alpha if args.alpha is None else args.alpha,
            beta=weights.beta if args.beta is None else args.beta,
            gamma=weights.gamma if args.gamma is None else args.gamma,
        )
        cfg.round = dataclasses.replace(cfg.round, weights=weights)
    if args.clients is not None:
        if not isinstance(cfg.data, SyntheticSpec):
            raise ConfigError("--clients only applies to synthetic data configs")
        cfg.data = dataclasses.replace(cfg.data, clients=args.clients)
    if args.out is not None:
        cfg.output_dir = str(args.out)
    cfg.validate()
    run_experiment(cfg)
    return 0


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        clients=args.clients,
        samples_per_client=args.samples_per_client,
        train_fraction=args.train_fraction,
        seed=args.seed,
    )
    write_dataset(generate(spec), args.out)
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    if args.data is not None:
        data = dataset_for_run(
            dataclasses.replace(cfg, data=str(args.data)), cfg.seeds[0]
        )
    else:
        data = dataset_for_run(cfg, cfg.seeds[0])
    clients, _, _ = load_checkpoint(args.checkpoint, data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "matrix.csv").write_text(matrix_to_csv(cross_eval(clients)))
    return 0


def _cmd_selftest(args) -> int:
    import pytest

    candidates = []
    if args.tests_dir is not None:
        candidates.append(Path(args.tests_dir))
    candidates.append(Path.cwd() / "tests")
    candidates.append(Path(__file__).resolve().parents[2] / "tests")
    for base in candidates:
        target = base / "test_acceptance.py"
        if target.is_file():
            return int(pytest.main([str(target), "-q"]))
    raise ConfigError("cannot locate tests/test_acceptance.py; pass --tests-dir")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "gen-data": _cmd_gen_data,
        "eval": _cmd_eval,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FedprError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
