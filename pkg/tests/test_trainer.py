"""Tests for threshold selection, training and multi-trial runs."""

import numpy as np
import pytest

from mutadetect import trainer
from mutadetect.config import LossConfig, TrainConfig
from mutadetect.dataset import DatasetSplits, SiteSample
from mutadetect.errors import ContractError, DataError, NonFiniteLossError, TrialError
from mutadetect.metrics import MetricsReport, confusion
from mutadetect.trainer import (
    MetricSummary,
    SampleBatch,
    aggregate_across,
    aggregate_metrics,
    fit,
    run_trials,
    select_threshold,
)


def _config(**overrides):
    values = dict(
        hidden=6,
        attention_size=4,
        out_dim=3,
        epochs=3,
        batch_size=16,
        lr=0.05,
        dropout=0.0,
        trials=2,
        T=3,
    )
    values.update(overrides)
    return TrainConfig(**values)


def _constant_samples(n_normal, n_mutated, level=2.0):
    """Normals are all-zero windows, mutated windows are constant `level`."""
    return [
        SiteSample(
            position=3,
            inputs=np.full((3, 4), 0.0 if i < n_normal else level),
            label=1 if i < n_normal else 0,
            chain_id="c",
            draw=i,
            window_end=2005,
        )
        for i in range(n_normal + n_mutated)
    ]


@pytest.fixture
def splits(separable_samples):
    return DatasetSplits(
        train=separable_samples(40, 10, seed=1),
        validation=separable_samples(8, 4, seed=2),
        test=separable_samples(8, 4, seed=3),
    )


class TestSelectThreshold:
    """Test validation threshold selection."""

    def test_matches_exhaustive_search(self, rng):
        """Test the chosen threshold attains the best F1 over all cut points."""
        # Arrange
        scores = rng.integers(0, 10, size=80).astype(float)
        labels = rng.integers(0, 2, size=80)
        cuts = np.r_[scores.min() - 1.0, np.unique(scores)]
        best = max(confusion(scores, labels, c).f1 for c in cuts)

        # Act
        tau = select_threshold(scores, labels)

        # Assert
        assert confusion(scores, labels, tau).f1 == best

    def test_ties_prefer_larger_threshold(self):
        """Test equal F1 at min-1 and 3.5 resolves to 3.5."""
        assert select_threshold([1.0, 2.0, 3.0, 4.0], [0, 1, 1, 0]) == 3.5

    def test_no_mutated_samples(self):
        """Test the max-score fallback."""
        assert select_threshold([0.3, 0.7], [1, 1]) == 0.7

    def test_only_mutated_samples(self):
        """Test the min-score-minus-one fallback."""
        assert select_threshold([0.3, 0.7], [0, 0]) == pytest.approx(-0.7)

    def test_empty(self):
        """Test at least one score is required."""
        with pytest.raises(ContractError):
            select_threshold([], [])


class TestSampleBatch:
    """Test stacking samples."""

    def test_stacks_fields(self, separable_samples):
        """Test shapes of the stacked arrays."""
        batch = SampleBatch.from_samples(separable_samples(3, 2))
        assert batch.x.shape == (5, 3, 4)
        assert batch.y.tolist() == [1, 1, 1, 0, 0]
        assert len(batch) == 5

    def test_empty(self):
        """Test an empty split."""
        with pytest.raises(DataError):
            SampleBatch.from_samples([])


class TestFit:
    """Test single-model training."""

    def test_learns_to_separate_constant_windows(self):
        """Test mutated windows score above normal ones after training."""
        # Arrange
        train = SampleBatch.from_samples(_constant_samples(30, 10))
        val = SampleBatch.from_samples(_constant_samples(6, 3))
        cfg = _config(epochs=10)

        # Act
        model = fit(train, val, cfg, trial_seed=4)
        scores = model.scores(val.x)

        # Assert
        assert scores[val.y == 0].min() > scores[val.y == 1].max()
        assert confusion(scores, val.y, model.threshold).f1 == 1.0
        assert model.history[-1].train_loss < model.history[0].train_loss

    def test_same_seed_same_model(self, splits):
        """Test training is reproducible."""
        train = SampleBatch.from_samples(splits.train)
        val = SampleBatch.from_samples(splits.validation)
        first = fit(train, val, _config(), trial_seed=11)
        second = fit(train, val, _config(), trial_seed=11)
        assert first.threshold == second.threshold
        assert [r.train_loss for r in first.history] == [r.train_loss for r in second.history]

    def test_history_records_test_curve_when_given(self, splits):
        """Test per-epoch test F1 is recorded only with a test split."""
        # Arrange
        train = SampleBatch.from_samples(splits.train)
        val = SampleBatch.from_samples(splits.validation)
        test = SampleBatch.from_samples(splits.test)

        # Act
        with_test = fit(train, val, _config(epochs=2), trial_seed=0, test=test)
        without = fit(train, val, _config(epochs=2), trial_seed=0)

        # Assert
        assert [r.epoch for r in with_test.history] == [1, 2]
        assert all(r.test_f1 is not None for r in with_test.history)
        assert all(r.test_f1 is None for r in without.history)

    def test_deepsad_sets_center_from_normals(self, splits):
        """Test the center is filled in before training."""
        train = SampleBatch.from_samples(splits.train)
        val = SampleBatch.from_samples(splits.validation)
        model = fit(train, val, _config(loss=LossConfig(mode="deepsad")), trial_seed=0)
        assert model.loss.center is not None
        assert len(model.loss.center) == 3
        assert all(abs(c) >= 0.01 for c in model.loss.center)

    def test_non_finite_loss(self, separable_samples):
        """Test NaN inputs stop training with a numerical error."""
        # Arrange
        samples = separable_samples(4, 2)
        samples[0].inputs[0, 0] = np.nan
        train = SampleBatch.from_samples(samples)
        val = SampleBatch.from_samples(separable_samples(2, 2))

        # Act
        with pytest.raises(NonFiniteLossError) as excinfo:
            fit(train, val, _config(), trial_seed=0)

        # Assert
        assert excinfo.value.epoch == 1
        assert excinfo.value.exit_code == 4

    def test_zero_learning_rate_keeps_initial_parameters(self, splits):
        """Test lr=0 leaves every parameter at its initial value."""
        train = SampleBatch.from_samples(splits.train)
        val = SampleBatch.from_samples(splits.validation)
        first = fit(train, val, _config(lr=0.0, epochs=1), trial_seed=5)
        second = fit(train, val, _config(lr=0.0, epochs=3), trial_seed=5)
        for a, b in zip(first.params.parameters(), second.params.parameters()):
            np.testing.assert_array_equal(a.values, b.values)


class TestRunTrials:
    """Test multi-trial runs."""

    def test_threads_do_not_change_results(self, splits, tmp_path):
        """Test parallel trials reproduce sequential ones and write checkpoints."""
        # Act
        sequential = run_trials(_config(), splits, seed=3, threads=1)
        parallel = run_trials(
            _config(), splits, seed=3, threads=2, checkpoint_dir=tmp_path / "ckpt"
        )

        # Assert
        assert [t.seed for t in parallel.trials] == [3, 4]
        assert [t.threshold for t in sequential.trials] == [t.threshold for t in parallel.trials]
        assert [t.checkpoint for t in parallel.trials] == ["trial_0.json", "trial_1.json"]
        assert (tmp_path / "ckpt" / "trial_1.json").exists()
        assert set(parallel.aggregate) == {"auc", "f1", "precision", "recall"}

    def test_seed_stride(self, splits):
        """Test trial seeds follow seed + i * stride."""
        summary = run_trials(_config(epochs=1), splits, seed=10, seed_stride=100)
        assert [t.seed for t in summary.trials] == [10, 110]

    def test_audit_passes_for_clean_training(self, splits):
        """Test an audited run succeeds and matches the unaudited one."""
        # Act
        plain = run_trials(_config(epochs=2, trials=1), splits, seed=0)
        audited = run_trials(_config(epochs=2, trials=1), splits, seed=0, audit_leakage=True)

        # Assert
        assert audited.trials[0].threshold == plain.trials[0].threshold
        assert audited.trials[0].history == plain.trials[0].history
        assert audited.trials[0].test == plain.trials[0].test

    def test_audit_catches_training_that_reads_test_labels(self, splits, monkeypatch):
        """Test a fit whose threshold depends on the test labels is rejected."""
        # Arrange
        real_fit = trainer.fit

        def leaky_fit(train, val, cfg, trial_seed, test=None):
            model = real_fit(train, val, cfg, trial_seed, test=test)
            if test is not None:
                model.threshold += float(test.y.mean())
            return model

        monkeypatch.setattr(trainer, "fit", leaky_fit)

        # Act
        with pytest.raises(TrialError) as excinfo:
            run_trials(_config(epochs=1, trials=1), splits, seed=0, audit_leakage=True)

        # Assert
        assert isinstance(excinfo.value.cause, ContractError)
        assert "threshold" in excinfo.value.message
        assert excinfo.value.exit_code == 4

    def test_audit_freezes_test_labels(self, splits, monkeypatch):
        """Test writing to the test labels during an audited run fails."""
        # Arrange
        real_fit = trainer.fit

        def scribbling_fit(train, val, cfg, trial_seed, test=None):
            test.y[0] = 1 - test.y[0]
            return real_fit(train, val, cfg, trial_seed, test=test)

        monkeypatch.setattr(trainer, "fit", scribbling_fit)

        # Act & Assert
        with pytest.raises(TrialError):
            run_trials(_config(epochs=1, trials=1), splits, seed=0, audit_leakage=True)

    def test_identical_seeds_give_zero_spread(self, splits):
        """Test trials forced onto one seed agree exactly."""
        # Act
        summary = run_trials(_config(epochs=2, trials=3), splits, seed=5, seed_stride=0)

        # Assert
        assert len({t.threshold for t in summary.trials}) == 1
        for name in ("f1", "auc", "precision", "recall"):
            assert summary.aggregate[name].n == 3
            assert summary.aggregate[name].std == pytest.approx(0.0, abs=1e-12)

    def test_failing_trial_is_wrapped(self, splits):
        """Test a trial error names the trial and keeps the exit code."""
        # Arrange
        no_normals = DatasetSplits(
            train=[s for s in splits.train if s.label == 0],
            validation=splits.validation,
            test=splits.test,
        )

        # Act
        with pytest.raises(TrialError) as excinfo:
            run_trials(_config(loss=LossConfig(mode="deepsad")), no_normals, seed=0)

        # Assert
        assert excinfo.value.trial == 0
        assert excinfo.value.exit_code == 3


class TestAggregate:
    """Test metric aggregation across trials."""

    def _report(self, f1, auc):
        return MetricsReport(
            auc=auc, f1=f1, precision=f1, recall=f1, threshold=0.0, tp=1, fp=0, tn=1, fn=0
        )

    def test_mean_and_sample_std(self):
        """Test ddof=1 standard deviation and skipped undefined AUCs."""
        summary = aggregate_metrics([self._report(0.5, 0.9), self._report(0.7, None)])
        assert summary["f1"].mean == pytest.approx(0.6)
        assert summary["f1"].std == pytest.approx(np.std([0.5, 0.7], ddof=1))
        assert (summary["auc"].mean, summary["auc"].std, summary["auc"].n) == (0.9, 0.0, 1)

    def test_all_undefined(self):
        """Test a metric with no values."""
        summary = aggregate_metrics([self._report(0.5, None)])
        assert summary["auc"].mean is None

    def test_across_groups_averages_group_means(self):
        """Test the across-T summary is the mean and spread of per-T means."""
        # Arrange
        per_t = {
            5: {"f1": MetricSummary(mean=0.8, std=0.1, n=5)},
            10: {"f1": MetricSummary(mean=0.6, std=0.0, n=5)},
            15: {"f1": MetricSummary(mean=None, std=None, n=0)},
        }

        # Act
        summary = aggregate_across(per_t)

        # Assert
        assert summary["f1"].mean == pytest.approx(0.7)
        assert summary["f1"].std == pytest.approx(np.std([0.8, 0.6], ddof=1))
        assert summary["f1"].n == 2
        assert summary["auc"].mean is None
