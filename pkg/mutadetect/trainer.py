"""Mini-batch training, validation threshold selection, and multi-trial runs."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from mutadetect import numcore as nc
from mutadetect.config import LossConfig, TrainConfig
from mutadetect.dataset import DatasetSplits, SiteSample
from mutadetect.errors import (
    ContractError,
    DataError,
    MutaDetectError,
    NonFiniteLossError,
    TrialError,
)
from mutadetect.loss import anomaly_scores, compute_center, objective
from mutadetect.metrics import MetricsReport, classify_report, confusion
from mutadetect.model import (
    ModelParams,
    ModelShape,
    forward,
    init_params,
    make_checkpoint,
    predict,
    save_checkpoint,
)
from mutadetect.numcore import Tensor
from mutadetect.utils.pylogger import get_python_logger
from mutadetect.utils.seeding import derive_rng

logger = get_python_logger()

METRIC_NAMES = ("auc", "f1", "precision", "recall")
SCORE_CHUNK = 1024


@dataclass
class SampleBatch:
    """Stacked inputs (n, T, d), labels (n,) and site positions (n,)."""

    x: np.ndarray
    y: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @classmethod
    def from_samples(cls, samples: Sequence[SiteSample]) -> "SampleBatch":
        if not samples:
            raise DataError("no samples in split")
        shapes = {s.inputs.shape for s in samples}
        if len(shapes) != 1:
            raise DataError(f"samples disagree on (T, dim): {sorted(shapes)}")
        return cls(
            x=np.stack([s.inputs for s in samples]),
            y=np.array([s.label for s in samples], dtype=np.int64),
            positions=np.array([s.position for s in samples], dtype=np.int64),
        )


def select_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold maximizing F1 of "score > tau means mutated" on validation.

    Candidates are midpoints between consecutive distinct scores plus
    min-1 and max+1; ties go to the larger tau. Without mutated samples the
    threshold is the max score, without normal samples it is min-1.

    Raises:
        ContractError: If no scores are given.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.size == 0:
        raise ContractError("select_threshold needs at least one score")
    positive = y == 0
    if not positive.any():
        logger.warning("Validation has no mutated samples, threshold = max score")
        return float(s.max())
    if positive.all():
        logger.warning("Validation has only mutated samples, threshold = min score - 1")
        return float(s.min() - 1.0)

    distinct = np.unique(s)
    candidates = np.r_[distinct[0] - 1.0, (distinct[:-1] + distinct[1:]) / 2.0, distinct[-1] + 1.0]
    pos_scores = np.sort(s[positive])
    neg_scores = np.sort(s[~positive])
    tp = pos_scores.size - np.searchsorted(pos_scores, candidates, side="right")
    fp = neg_scores.size - np.searchsorted(neg_scores, candidates, side="right")
    fn = pos_scores.size - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(
            precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0
        )
    best = candidates.size - 1 - int(np.argmax(f1[::-1]))
    return float(candidates[best])


def score_samples(params: ModelParams, x: np.ndarray, loss: LossConfig) -> np.ndarray:
    """Eval-mode anomaly scores, in chunks."""
    parts = [
        anomaly_scores(predict(x[start : start + SCORE_CHUNK], params), loss)
        for start in range(0, len(x), SCORE_CHUNK)
    ]
    return np.concatenate(parts)


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_f1: float
    test_f1: Optional[float] = None


@dataclass
class TrainedModel:
    params: ModelParams
    loss: LossConfig
    threshold: float
    history: List[EpochRecord] = field(default_factory=list)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return score_samples(self.params, x, self.loss)


def _max_abs_grad(params: Sequence[Tensor]) -> float:
    return max(
        (float(np.abs(p.grad).max()) for p in params if p.grad is not None and p.grad.size),
        default=0.0,
    )


def fit(
    train: SampleBatch,
    val: SampleBatch,
    cfg: TrainConfig,
    trial_seed: int,
    test: Optional[SampleBatch] = None,
) -> TrainedModel:
    """Train one model with plain SGD for `cfg.epochs` epochs.

    Each epoch shuffles the training set, records the mean training loss and
    the validation F1 at that epoch's best validation threshold. When `test`
    is given its F1 at the same threshold is recorded for inspection only.

    Raises:
        DataError: If a split is empty or the splits disagree on shape.
        NonFiniteLossError: If a batch loss is NaN or infinite.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation splits must be non-empty")
    if train.x.shape[1:] != val.x.shape[1:]:
        raise DataError(f"train {train.x.shape[1:]} and validation {val.x.shape[1:]} differ")

    shape = ModelShape.from_train_config(cfg, input_dim=train.x.shape[2])
    params = init_params(shape, derive_rng(trial_seed, "init"))
    shuffle_rng = derive_rng(trial_seed, "shuffle")
    dropout_rng = derive_rng(trial_seed, "dropout")

    loss_cfg = cfg.loss
    if loss_cfg.mode == "deepsad" and loss_cfg.center is None:
        normals = train.x[train.y == 1]
        if len(normals) == 0:
            raise DataError("no normal training samples to place the hypersphere center")
        center = compute_center(predict(normals, params))
        loss_cfg = loss_cfg.model_copy(update={"center": center})

    n = len(train)
    batch_size = min(cfg.batch_size, n)
    weights = params.weight_matrices()
    trainable = params.parameters()
    tape = nc.current_tape()
    history: List[EpochRecord] = []
    last_grad = 0.0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for batch_no, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            tape.clear()
            outputs = forward(Tensor(train.x[idx]), params, training=True, rng=dropout_rng)
            loss = objective(outputs, train.y[idx], weights, loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                tape.clear()
                raise NonFiniteLossError(epoch, batch_no, last_grad)
            nc.backward(loss, tape)
            last_grad = _max_abs_grad(trainable)
            nc.sgd_step(trainable, cfg.lr)
            total += value * len(idx)

        val_scores = score_samples(params, val.x, loss_cfg)
        tau = select_threshold(val_scores, val.y)
        record = EpochRecord(
            epoch=epoch,
            train_loss=total / n,
            val_f1=confusion(val_scores, val.y, tau).f1,
        )
        if test is not None:
            record.test_f1 = confusion(score_samples(params, test.x, loss_cfg), test.y, tau).f1
        history.append(record)
        logger.debug(
            "Epoch finished",
            epoch=epoch,
            train_loss=record.train_loss,
            val_f1=record.val_f1,
        )

    for p in trainable:
        p.requires_grad = False
    threshold = select_threshold(score_samples(params, val.x, loss_cfg), val.y)
    return TrainedModel(params=params, loss=loss_cfg, threshold=threshold, history=history)


class TrialResult(BaseModel):
    trial: int
    seed: int
    threshold: float
    checkpoint: Optional[str] = None
    history: List[EpochRecord]
    validation: MetricsReport
    test: MetricsReport


class MetricSummary(BaseModel):
    mean: Optional[float]
    std: Optional[float]
    n: int


class TrialsSummary(BaseModel):
    trials: List[TrialResult]
    aggregate: Dict[str, MetricSummary]


def aggregate_metrics(reports: Sequence[MetricsReport]) -> Dict[str, MetricSummary]:
    """Mean and sample standard deviation per metric; std is 0 for one value."""
    summary: Dict[str, MetricSummary] = {}
    for name in METRIC_NAMES:
        values = np.array(
            [getattr(r, name) for r in reports if getattr(r, name) is not None], dtype=np.float64
        )
        if values.size == 0:
            summary[name] = MetricSummary(mean=None, std=None, n=0)
            continue
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        summary[name] = MetricSummary(mean=float(values.mean()), std=std, n=int(values.size))
    return summary


def aggregate_across(
    per_group: Mapping[Any, Mapping[str, MetricSummary]],
) -> Dict[str, MetricSummary]:
    """Mean and sample std of the per-group means, e.g. across window lengths T.

    Groups without a mean for a metric are left out of that metric.
    """
    summary: Dict[str, MetricSummary] = {}
    for name in METRIC_NAMES:
        means = np.array(
            [
                group[name].mean
                for group in per_group.values()
                if name in group and group[name].mean is not None
            ],
            dtype=np.float64,
        )
        if means.size == 0:
            summary[name] = MetricSummary(mean=None, std=None, n=0)
            continue
        std = float(means.std(ddof=1)) if means.size > 1 else 0.0
        summary[name] = MetricSummary(mean=float(means.mean()), std=std, n=int(means.size))
    return summary


def _checkpoint_json(model: TrainedModel, trial: int, seed: int) -> Dict[str, Any]:
    return make_checkpoint(model.params, model.threshold, model.loss, trial, seed).model_dump(
        mode="json"
    )


def audit_fit(
    train: SampleBatch,
    val: SampleBatch,
    test: SampleBatch,
    cfg: TrainConfig,
    trial: int,
    trial_seed: int,
    reference: TrainedModel,
) -> None:
    """Refit with inverted test labels and compare against `reference`.

    The refit sees the test split exactly as the reference fit did, only with
    every label flipped. Threshold, training loss and validation F1 traces and
    the checkpoint must come out identical.

    Raises:
        ContractError: Naming what changed when the test labels were flipped.
    """
    poisoned = SampleBatch(x=test.x, y=1 - test.y, positions=test.positions)
    refit = fit(train, val, cfg, trial_seed, test=poisoned)
    changed = []
    if refit.threshold != reference.threshold:
        changed.append("threshold")
    if [r.val_f1 for r in refit.history] != [r.val_f1 for r in reference.history]:
        changed.append("validation F1 trace")
    if [r.train_loss for r in refit.history] != [r.train_loss for r in reference.history]:
        changed.append("training loss trace")
    if _checkpoint_json(refit, trial, trial_seed) != _checkpoint_json(
        reference, trial, trial_seed
    ):
        changed.append("checkpoint")
    if changed:
        raise ContractError(
            f"trial {trial}: flipping the test labels changed the {', '.join(changed)}",
            hint="Training must not read the test split",
        )
    logger.info("Leakage audit passed", trial=trial)


def run_trials(
    cfg: TrainConfig,
    splits: DatasetSplits,
    seed: int,
    threads: int = 1,
    checkpoint_dir: Optional[Path] = None,
    audit_leakage: bool = False,
    seed_stride: int = 1,
) -> TrialsSummary:
    """Run `cfg.trials` independent fits with seeds seed + i * seed_stride.

    Under `audit_leakage` the test labels are frozen read-only, every fit
    receives the test split, and each trial is refitted with flipped test
    labels through `audit_fit`.

    Raises:
        TrialError: Wrapping the first failing trial's error.
    """
    train = SampleBatch.from_samples(splits.train)
    val = SampleBatch.from_samples(splits.validation)
    test = SampleBatch.from_samples(splits.test)
    if audit_leakage:
        test.y.flags.writeable = False

    observe = cfg.record_test_curve or audit_leakage

    def one_trial(trial: int) -> TrialResult:
        trial_seed = seed + trial * seed_stride
        logger.info("Starting trial", trial=trial, seed=trial_seed)
        model = fit(train, val, cfg, trial_seed, test=test if observe else None)
        if audit_leakage:
            audit_fit(train, val, test, cfg, trial, trial_seed, model)
        test_report = classify_report(model.scores(test.x), test.y, model.threshold)
        path = None
        if checkpoint_dir is not None:
            checkpoint = make_checkpoint(
                model.params, model.threshold, model.loss, trial, trial_seed
            )
            path = save_checkpoint(Path(checkpoint_dir) / f"trial_{trial}.json", checkpoint)
        result = TrialResult(
            trial=trial,
            seed=trial_seed,
            threshold=model.threshold,
            checkpoint=None if path is None else path.name,
            history=model.history,
            validation=classify_report(model.scores(val.x), val.y, model.threshold),
            test=test_report,
        )
        logger.info(
            "Finished trial",
            trial=trial,
            test_f1=test_report.f1,
            test_auc=test_report.auc,
            threshold=model.threshold,
        )
        return result

    results: List[TrialResult] = []
    with ThreadPoolExecutor(max_workers=max(1, min(threads, cfg.trials))) as pool:
        futures = [pool.submit(one_trial, i) for i in range(cfg.trials)]
        for i, future in enumerate(futures):
            try:
                results.append(future.result())
            except MutaDetectError as e:
                raise TrialError(i, e) from e
            except (ArithmeticError, ValueError) as e:
                raise TrialError(i, e) from e

    summary = TrialsSummary(
        trials=results, aggregate=aggregate_metrics([r.test for r in results])
    )
    logger.info(
        "Trials complete",
        trials=len(results),
        **{f"mean_{k}": v.mean for k, v in summary.aggregate.items()},
    )
    return summary
