"""Main entry point for the mutadetect command-line interface."""

import argparse
import sys
from typing import Any, Dict, List, NoReturn, Optional

from mutadetect import __version__
from mutadetect.commands.pipeline import (
    cmd_evaluate,
    cmd_gradcheck,
    cmd_preprocess,
    cmd_sweep,
    cmd_synth,
    cmd_train,
)
from mutadetect.config import RunConfig, apply_overrides, load_run_config
from mutadetect.errors import ConfigError, MutaDetectError
from mutadetect.settings import settings
from mutadetect.settings import validate_config as validate_config_func
from mutadetect.synth import SynthParams
from mutadetect.utils.artifacts import canonical_json
from mutadetect.utils.pylogger import force_reconfigure_all_loggers, get_python_logger

# Initialize logger
logger = get_python_logger()


def validate_config() -> None:
    """Validate process settings and apply the configured log level.

    Raises:
        ValueError: If a setting is invalid.
    """
    try:
        validate_config_func(settings)
        force_reconfigure_all_loggers(settings.PYTHON_LOG_LEVEL)
        logger.debug("Configuration validation passed", threads=settings.MUTADETECT_THREADS)
    except AttributeError as e:
        raise RuntimeError(f"Configuration object is not properly initialized: {e}") from e


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Run config JSON file")
    parser.add_argument("--seed", type=int, help="64-bit run seed")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--trials", type=int, help="Number of trials")
    parser.add_argument("--T", type=int, dest="T", help="Window length")
    parser.add_argument("--loss", choices=("hsc", "deepsad"), help="Training objective")
    parser.add_argument("--embedding-table", help="TSV trigram table")
    parser.add_argument("--embedding-dim", type=int, help="Fallback vector dimension")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mutadetect",
        description="Predict mutations at protein sequence positions with semi-supervised anomaly detection.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    preprocess = sub.add_parser("preprocess", help="Build samples and the split manifest")
    _add_run_flags(preprocess)

    train = sub.add_parser("train", help="Train all trials and write checkpoints")
    _add_run_flags(train)
    train.add_argument(
        "--audit-leakage",
        action="store_true",
        help="Refit every trial with flipped test labels and require identical results",
    )

    sweep = sub.add_parser("sweep", help="Run the pipeline once per window length")
    _add_run_flags(sweep)
    sweep.add_argument(
        "--T-sweep",
        type=int,
        nargs="+",
        dest="T_sweep",
        help="Window lengths (default: train.T_sweep)",
    )
    sweep.add_argument(
        "--audit-leakage", action="store_true", help="Audit every trial for test leakage"
    )

    evaluate = sub.add_parser("evaluate", help="Score a split with a checkpoint")
    _add_run_flags(evaluate)
    evaluate.add_argument("--checkpoint", help="Checkpoint file (default: trial 0)")
    evaluate.add_argument("--split", default="test", choices=("train", "validation", "test"))
    evaluate.add_argument("--threshold", type=float, help="Override the stored threshold")

    gradcheck = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--points", type=int, default=10)
    gradcheck.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    synth = sub.add_parser("synth", help="Generate a synthetic corpus")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--mutation-rate", type=float, default=0.1)
    synth.add_argument("--cohorts", type=int, default=10)
    synth.add_argument("--size", type=int, default=20)
    synth.add_argument("--length", type=int, default=50)
    synth.add_argument("--noise-rate", type=float, default=0.02)
    synth.add_argument("--ambiguity-rate", type=float, default=0.0)
    synth.add_argument("--time-unit", choices=("year", "month"), default="year")
    synth.add_argument("--format", choices=("csv", "fasta"), default="csv")
    synth.add_argument("--positions", type=int, nargs="+", help="Tracked positions")
    synth.add_argument("--motif-strength", type=float, default=2.0)
    synth.add_argument("--embedding-dim", type=int, default=100)
    return parser


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Load --config (or defaults) and merge the command-line overrides."""
    config = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(
        config,
        seed=args.seed,
        out=args.out,
        trials=args.trials,
        T=args.T,
        T_sweep=getattr(args, "T_sweep", None),
        loss=args.loss,
        embedding_table=args.embedding_table,
        embedding_dim=args.embedding_dim,
    )


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    threads = settings.MUTADETECT_THREADS
    if args.command == "gradcheck":
        return cmd_gradcheck(seed=args.seed, points=args.points, corrupt=args.corrupt)
    if args.command == "synth":
        try:
            params = SynthParams(
                mutation_rate=args.mutation_rate,
                cohorts=args.cohorts,
                size=args.size,
                length=args.length,
                seed=args.seed,
                noise_rate=args.noise_rate,
                ambiguity_rate=args.ambiguity_rate,
                time_unit=args.time_unit,
                format=args.format,
                tracked_positions=args.positions,
                motif_strength=args.motif_strength,
                embedding_dim=args.embedding_dim,
            )
        except ValueError as e:
            return ConfigError(f"invalid synth parameters: {e}").to_dict()
        return cmd_synth(params, args.out)

    try:
        config = resolve_run_config(args)
    except MutaDetectError as e:
        return e.to_dict()
    if args.command == "preprocess":
        return cmd_preprocess(config, threads=threads)
    if args.command == "train":
        return cmd_train(config, threads=threads, audit_leakage=args.audit_leakage)
    if args.command == "sweep":
        return cmd_sweep(config, threads=threads, audit_leakage=args.audit_leakage)
    return cmd_evaluate(
        config, checkpoint=args.checkpoint, split=args.split, threshold=args.threshold
    )


def handle_command_error(error: BaseException, context: str = "command") -> int:
    """Map an error that escaped a command to an exit code, with logging.

    Args:
        error: The exception that occurred
        context: Context where the error occurred for better logging

    Returns:
        The process exit code.
    """
    if isinstance(error, MutaDetectError):
        logger.critical(f"{type(error).__name__} during {context}: {error.message}")
        return error.exit_code
    if isinstance(error, ValueError):
        # Configuration or validation errors
        logger.critical(f"Configuration error during {context}: {error}")
        return ConfigError.exit_code
    if isinstance(error, KeyboardInterrupt):
        logger.info("Interrupted by user")
        return 1
    logger.critical(f"Unexpected error during {context}: {error}", exc_info=True)
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and print its result as JSON.

    Returns:
        The exit code: 0 success, 1 unexpected, 2 config, 3 data, 4 numerical.
    """
    args = build_parser().parse_args(argv)
    try:
        validate_config()
        result = dispatch(args)
    except (Exception, KeyboardInterrupt) as e:
        return handle_command_error(e, args.command)
    sys.stdout.write(canonical_json(result))
    return int(result.get("exit_code", 0))


def run() -> NoReturn:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
