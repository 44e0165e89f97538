"""Pipeline commands: preprocess, train, evaluate, sweep, gradcheck, synth.

Every command takes a resolved `RunConfig` (or generator parameters), writes
its artifacts atomically under the output directory and returns a result
dict that the CLI prints as JSON.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from mutadetect.commands import cli_command
from mutadetect.config import RunConfig, apply_overrides
from mutadetect.dataset import (
    CorpusSchema,
    DatasetSplits,
    SiteSample,
    parse_corpus,
    prepare_dataset,
    split_counts,
    split_dataset,
)
from mutadetect.embedding import TrigramTable, load_table, table_summary
from mutadetect.errors import CheckpointError, ConfigError, DataError, GradCheckFailure
from mutadetect.gradcheck import run_gradcheck
from mutadetect.metrics import SITE_HEADER, classify_report, roc_auc, site_report
from mutadetect.model import load_checkpoint, params_from_checkpoint
from mutadetect.sequences import format_time_index
from mutadetect.settings import settings
from mutadetect.synth import SynthParams, generate_corpus, write_corpus
from mutadetect.trainer import (
    MetricSummary,
    SampleBatch,
    aggregate_across,
    run_trials,
    score_samples,
)
from mutadetect.utils.artifacts import (
    read_jsonl,
    write_csv_atomic,
    write_json_atomic,
    write_jsonl_atomic,
)
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()

MANIFEST_FORMAT_VERSION = 1
SPLITS = ("train", "validation", "test")


def output_dir(config: RunConfig) -> Path:
    return Path(config.paths.output_dir or settings.MUTADETECT_OUTPUT_DIR)


def resolve_table(config: RunConfig) -> TrigramTable:
    """Load the configured trigram table or fall back to seeded vectors.

    Raises:
        ConfigError: If the table is unavailable and fallbacks are disabled.
    """
    paths, emb = config.paths, config.embedding
    if paths.embedding_table is not None:
        table_path = Path(paths.embedding_table)
        if table_path.exists():
            return load_table(
                table_path,
                fallback_seed=emb.fallback_seed,
                allow_fallback=paths.allow_fallback_embeddings,
            )
        if not paths.allow_fallback_embeddings:
            raise ConfigError(
                f"embedding table not found: {table_path}",
                hint="Fix paths.embedding_table or set paths.allow_fallback_embeddings",
            )
        logger.warning("Embedding table not found, using fallback vectors", path=str(table_path))
    elif not paths.allow_fallback_embeddings:
        raise ConfigError(
            "no embedding table configured and fallback vectors are disabled",
            hint="Set paths.embedding_table or --embedding-table",
        )
    return TrigramTable.fallback_only(dim=emb.dim, seed=emb.fallback_seed)


@cli_command
def cmd_preprocess(config: RunConfig, threads: int = 1) -> Dict[str, Any]:
    """Parse, sanitize, cluster and sample the corpus; write samples and manifest."""
    if config.paths.corpus is None:
        raise ConfigError("paths.corpus is not set", hint="Add paths.corpus to the run config")
    table = resolve_table(config)
    schema = CorpusSchema(
        format=config.paths.corpus_format,
        time_unit=config.dataset.time_unit,
        expected_length=config.dataset.expected_length,
    )
    cohorts = parse_corpus(config.paths.corpus, schema)
    prepared = prepare_dataset(
        cohorts, table, config.dataset, config.train.T, config.seed, threads
    )

    windows = sorted(prepared.groups)
    groups = [prepared.groups[w] for w in windows]
    splits = split_dataset(groups, config.dataset.split)
    unit = config.dataset.time_unit
    per_window = {}
    for window_end, group in zip(windows, groups):
        counts = split_counts(len(group), config.dataset.split)
        per_window[format_time_index(window_end, unit)] = {
            "samples": len(group),
            "train": counts.train,
            "validation": counts.validation,
            "test": counts.test,
        }

    mutated = sum(1 for s in prepared.samples if s.label == 0)
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "seed": config.seed,
        "T": config.train.T,
        "dim": table.dim,
        "positions": prepared.positions,
        "cohorts": {
            format_time_index(t, unit): n for t, n in prepared.cohort_sizes.items()
        },
        "chains": prepared.chains,
        "windows": per_window,
        "totals": {
            "samples": len(prepared.samples),
            "mutated": mutated,
            "normal": len(prepared.samples) - mutated,
        },
        "splits": {
            "train": splits.train,
            "validation": splits.validation,
            "test": splits.test,
        },
        "embedding": table_summary(table),
    }
    out = output_dir(config)
    write_jsonl_atomic(out / "samples.jsonl", (s.to_json() for s in prepared.samples))
    write_json_atomic(out / "manifest.json", manifest)
    logger.info("Preprocessing finished", out=str(out), samples=len(prepared.samples))
    return {
        "output_dir": str(out),
        "cohorts": manifest["cohorts"],
        "windows": per_window,
        "totals": manifest["totals"],
    }


def load_prepared(out: Path, T: Optional[int] = None) -> tuple[Dict[str, Any], List[SiteSample]]:
    """Read manifest.json and samples.jsonl written by preprocess.

    Raises:
        DataError: If the files are missing or of another format version.
        ConfigError: If the samples were built for another T.
    """
    manifest_path, samples_path = out / "manifest.json", out / "samples.jsonl"
    if not manifest_path.exists() or not samples_path.exists():
        raise DataError(
            f"no preprocessed samples in {out}", hint="Run `mutadetect preprocess` first"
        )
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise DataError(f"unsupported manifest format_version {manifest.get('format_version')!r}")
    if T is not None and manifest["T"] != T:
        raise ConfigError(
            f"samples were built with T={manifest['T']}, config asks for T={T}",
            hint="Re-run `mutadetect preprocess` with the same config",
        )
    samples = [SiteSample.from_json(row) for row in read_jsonl(samples_path)]
    return manifest, samples


def _split(manifest: Dict[str, Any], samples: List[SiteSample]) -> DatasetSplits:
    index = manifest["splits"]
    return DatasetSplits(
        train=[samples[i] for i in index["train"]],
        validation=[samples[i] for i in index["validation"]],
        test=[samples[i] for i in index["test"]],
    )


def _format_summary(aggregate: Dict[str, Any]) -> Dict[str, str]:
    table = {}
    for name, stats in aggregate.items():
        if stats["mean"] is None:
            table[name] = "n/a"
        else:
            table[name] = f"{stats['mean']:.4f} ± {stats['std']:.4f}"
    return table


@cli_command
def cmd_train(
    config: RunConfig, threads: int = 1, audit_leakage: bool = False
) -> Dict[str, Any]:
    """Run all trials; write checkpoints, trials.json and curves.csv."""
    out = output_dir(config)
    manifest, samples = load_prepared(out, config.train.T)
    summary = run_trials(
        config.train,
        _split(manifest, samples),
        config.seed,
        threads=threads,
        checkpoint_dir=out / "checkpoints",
        audit_leakage=audit_leakage,
    )
    payload = summary.model_dump(mode="json")
    write_json_atomic(out / "trials.json", payload)
    rows = [
        (
            trial.trial,
            record.epoch,
            repr(record.train_loss),
            repr(record.val_f1),
            "" if record.test_f1 is None else repr(record.test_f1),
        )
        for trial in summary.trials
        for record in trial.history
    ]
    write_csv_atomic(
        out / "curves.csv", ("trial", "epoch", "train_loss", "val_f1", "test_f1"), rows
    )
    return {
        "output_dir": str(out),
        "trials": len(summary.trials),
        "summary": _format_summary(payload["aggregate"]),
        "aggregate": payload["aggregate"],
    }


@cli_command
def cmd_evaluate(
    config: RunConfig,
    checkpoint: Optional[str] = None,
    split: str = "test",
    threshold: Optional[float] = None,
) -> Dict[str, Any]:
    """Score one split with a checkpoint; write report.json, roc.csv and sites.csv."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}", hint=f"Choose one of {', '.join(SPLITS)}")
    out = output_dir(config)
    ckpt_path = Path(checkpoint) if checkpoint else out / "checkpoints" / "trial_0.json"
    ckpt = load_checkpoint(ckpt_path)
    params = params_from_checkpoint(ckpt)

    manifest, samples = load_prepared(out)
    chosen = [samples[i] for i in manifest["splits"][split]]
    batch = SampleBatch.from_samples(chosen)
    if batch.x.shape[2] != ckpt.shape.input_dim:
        raise CheckpointError(
            f"samples have dim {batch.x.shape[2]}, checkpoint expects {ckpt.shape.input_dim}",
            hint="Evaluate with the samples the checkpoint was trained on",
        )
    if ckpt.shape.encoder == "lstm_attention" and batch.x.shape[1] < 2:
        raise CheckpointError("samples are too short for the attention encoder")

    tau = ckpt.threshold if threshold is None else threshold
    scores = score_samples(params, batch.x, ckpt.loss)
    report = classify_report(scores, batch.y, tau)

    eval_dir = out / f"eval_{split}"
    write_json_atomic(
        eval_dir / "report.json",
        {"checkpoint": ckpt_path.name, "split": split, "samples": len(batch)}
        | report.model_dump(mode="json"),
    )
    roc_rows: List[tuple] = []
    if report.auc is not None:
        roc_rows = [tuple(repr(v) for v in row) for row in roc_auc(scores, batch.y).rows()]
    write_csv_atomic(eval_dir / "roc.csv", ("threshold", "fpr", "tpr"), roc_rows)
    sites = site_report(batch.positions, scores, batch.y, tau)
    write_csv_atomic(
        eval_dir / "sites.csv",
        SITE_HEADER,
        (
            (r.position, r.samples, r.predicted, r.actual, repr(r.precision), repr(r.recall))
            for r in sites
        ),
    )
    logger.info("Evaluation finished", split=split, f1=report.f1, auc=report.auc)
    return {
        "output_dir": str(eval_dir),
        "report": report.model_dump(mode="json"),
        "top_sites": [r.position for r in sites[:10] if r.predicted > 0],
    }


@cli_command
def cmd_sweep(
    config: RunConfig, threads: int = 1, audit_leakage: bool = False
) -> Dict[str, Any]:
    """Preprocess, train and evaluate once per window length; average across T.

    Each T gets its own run directory `T<value>` under the output directory.
    """
    out = output_dir(config)
    per_t: Dict[str, Dict[str, Any]] = {}
    for T in config.train.window_lengths():
        run_dir = out / f"T{T}"
        sub = apply_overrides(config, T=T, out=str(run_dir))
        logger.info("Sweep step", T=T, out=str(run_dir))
        prepared = cmd_preprocess(sub, threads=threads)
        if prepared["exit_code"] != 0:
            return prepared | {"T": T}
        trained = cmd_train(sub, threads=threads, audit_leakage=audit_leakage)
        if trained["exit_code"] != 0:
            return trained | {"T": T}
        evaluated = cmd_evaluate(sub, split="test")
        if evaluated["exit_code"] != 0:
            return evaluated | {"T": T}
        per_t[str(T)] = trained["aggregate"]

    across = aggregate_across(
        {
            T: {name: MetricSummary.model_validate(s) for name, s in aggregate.items()}
            for T, aggregate in per_t.items()
        }
    )
    payload = {
        "T_values": config.train.window_lengths(),
        "per_T": per_t,
        "across_T": {name: s.model_dump(mode="json") for name, s in across.items()},
    }
    write_json_atomic(out / "sweep.json", payload)
    logger.info(
        "Sweep finished", **{f"mean_{k}": v.mean for k, v in across.items()}
    )
    return {
        "output_dir": str(out),
        "T_values": payload["T_values"],
        "summary": _format_summary(payload["across_T"]),
        "across_T": payload["across_T"],
    }


@cli_command
def cmd_gradcheck(
    seed: int = 0, points: int = 10, corrupt: float = 0.0
) -> Dict[str, Any]:
    """Finite-difference check of every primitive and the full model paths."""
    report = run_gradcheck(seed=seed, points=points, corrupt=corrupt)
    rows = [
        {
            "check": r.name,
            "max_error": r.max_error,
            "tolerance": r.tolerance,
            "passed": r.passed,
        }
        for r in report.rows
    ]
    if report.passed:
        return {"checks": rows}
    failure = GradCheckFailure(
        f"{len(report.failures())} gradient check(s) failed",
        hint="The failing rows name the primitive or model path",
    )
    logger.error("Gradient check failed", failures=len(report.failures()))
    return failure.to_dict() | {"checks": rows}


@cli_command
def cmd_synth(params: SynthParams, out: str | Path) -> Dict[str, Any]:
    """Generate a synthetic corpus and its ground truth."""
    corpus = generate_corpus(params)
    paths = write_corpus(corpus, out)
    truth = corpus.ground_truth()
    return {
        "corpus": str(paths["corpus"]),
        "ground_truth": str(paths["ground_truth"]),
        "embedding_table": str(paths["embedding_table"]),
        "records": truth["records"],
        "planted": truth["planted"],
        "planted_fraction": truth["planted_fraction"],
    }
