"""Tests for the training objectives and anomaly scores."""

import math

import numpy as np
import pytest

from mutadetect import numcore as nc
from mutadetect.config import LossConfig
from mutadetect.errors import ConfigError, ContractError, DataError, DimensionError
from mutadetect.loss import (
    CENTER_PUSH,
    anomaly_score,
    anomaly_scores,
    compute_center,
    deepsad_loss,
    hsc_loss,
    objective,
)
from mutadetect.numcore import Tensor


class TestDeepSad:
    """Test the DeepSAD objective."""

    def test_value_matches_formula(self):
        """Test compactness, inverse distance and weight decay terms."""
        # Arrange
        outputs = Tensor([[1.0, 0.0], [0.0, 2.0]])
        labels = np.array([1, 0])
        weight = Tensor([[1.0, 1.0], [0.0, 1.0]])
        cfg = LossConfig(mode="deepsad", center=[0.0, 0.0], eta=2.0, weight_decay=0.1)

        # Act
        loss = deepsad_loss(outputs, labels, [weight], cfg)

        # Assert
        # normal: 1, anomaly: 2 * 1/4, decay: 0.05 * 3
        assert loss.item() == pytest.approx((1.0 + 0.5) / 2 + 0.15)

    def test_distance_is_clamped_for_anomalies_at_center(self):
        """Test an anomaly exactly at c yields a finite loss."""
        cfg = LossConfig(mode="deepsad", center=[1.0], clamp_eps=1e-3, weight_decay=0.0)
        loss = deepsad_loss(Tensor([[1.0]]), np.array([0]), [], cfg)
        assert loss.item() == pytest.approx(1000.0)

    def test_unset_center(self):
        """Test the center must be known."""
        with pytest.raises(ConfigError):
            deepsad_loss(Tensor([[1.0]]), np.array([1]), [], LossConfig(mode="deepsad"))

    def test_center_size_checked(self):
        """Test the center dimension must match the outputs."""
        cfg = LossConfig(mode="deepsad", center=[0.0, 0.0, 0.0])
        with pytest.raises(DimensionError):
            deepsad_loss(Tensor([[1.0, 2.0]]), np.array([1]), [], cfg)

    def test_gradient_pulls_normals_in_and_pushes_anomalies_out(self):
        """Test the gradient direction for each class."""
        # Arrange
        outputs = Tensor([[1.0, 1.0], [0.5, 0.5]], requires_grad=True)
        cfg = LossConfig(mode="deepsad", center=[0.0, 0.0], weight_decay=0.0)

        # Act
        nc.backward(deepsad_loss(outputs, np.array([1, 0]), [], cfg))

        # Assert
        assert np.all(outputs.grad[0] > 0)
        assert np.all(outputs.grad[1] < 0)


class TestHsc:
    """Test the hypersphere classifier objective."""

    def test_value_matches_formula(self):
        """Test per-class terms."""
        # Arrange
        outputs = Tensor([[3.0, 4.0], [0.0, 1.0]])
        radial = np.sqrt(2.0) - 1.0
        expected = (25.0 - np.log(1.0 - np.exp(-radial))) / 2

        # Act
        loss = hsc_loss(outputs, np.array([1, 0]), LossConfig())

        # Assert
        assert loss.item() == pytest.approx(expected)

    def test_anomaly_at_origin_is_clamped(self):
        """Test phi = 0 for an anomaly gives -log(eps)."""
        loss = hsc_loss(Tensor([[0.0, 0.0]]), np.array([0]), LossConfig(clamp_eps=1e-6))
        assert loss.item() == pytest.approx(-np.log(1e-6))

    def test_objective_dispatch(self):
        """Test the configured mode is used."""
        outputs = Tensor([[0.5, 0.5]])
        labels = np.array([1])
        assert objective(outputs, labels, [], LossConfig()).item() == pytest.approx(0.5)

    def test_label_count_checked(self):
        """Test one label per output row."""
        with pytest.raises(DimensionError):
            hsc_loss(Tensor([[1.0], [2.0]]), np.array([1]), LossConfig())

    def test_empty_batch(self):
        """Test empty batches are rejected."""
        with pytest.raises(ContractError):
            hsc_loss(Tensor(np.zeros((0, 2))), np.array([]), LossConfig())


class TestScores:
    """Test anomaly scores and the center."""

    def test_hsc_score_is_squared_norm(self):
        """Test distance to the origin."""
        np.testing.assert_allclose(anomaly_scores(np.array([[3.0, 4.0], [0.0, 0.0]]), LossConfig()), [25.0, 0.0])

    def test_deepsad_score_uses_center(self):
        """Test distance to c."""
        cfg = LossConfig(mode="deepsad", center=[1.0, 1.0])
        assert anomaly_score(np.array([1.0, 3.0]), cfg) == pytest.approx(4.0)

    def test_center_pushes_near_zero_coordinates(self):
        """Test small coordinates move to +-0.1, exact zero to +0.1."""
        # Arrange
        outputs = np.array([[0.5, 0.004, -0.006, 0.0], [0.7, 0.004, -0.002, 0.0]])

        # Act
        center = compute_center(outputs)

        # Assert
        assert center == pytest.approx([0.6, CENTER_PUSH, -CENTER_PUSH, CENTER_PUSH])

    def test_center_needs_normals(self):
        """Test an empty set of normal outputs."""
        with pytest.raises(DataError):
            compute_center(np.zeros((0, 3)))


def _deepsad_reference(outputs, labels, weights, center, eta, lam, eps):
    total = 0.0
    for row, label in zip(outputs.tolist(), labels.tolist()):
        d = sum((a - c) ** 2 for a, c in zip(row, center))
        total += d if label == 1 else eta / max(d, eps)
    decay = sum(v * v for w in weights for v in w.ravel().tolist())
    return total / len(labels) + lam / 2.0 * decay


def _hsc_reference(outputs, labels, eps):
    total = 0.0
    for row, label in zip(outputs.tolist(), labels.tolist()):
        d = sum(a * a for a in row)
        if label == 1:
            total += d
        else:
            inside = 1.0 - math.exp(-(math.sqrt(d + 1.0) - 1.0))
            total -= math.log(min(max(inside, eps), 1.0))
    return total / len(labels)


class TestLossOracle:
    """Compare both objectives with a per-sample scalar computation."""

    def test_deepsad_on_random_batches(self, rng):
        """Test 100 random batches with weight decay switched on."""
        for _ in range(100):
            # Arrange
            n, dim = int(rng.integers(1, 9)), int(rng.integers(1, 6))
            outputs = rng.normal(size=(n, dim))
            labels = rng.integers(0, 2, size=n)
            weights = [rng.normal(size=(int(rng.integers(1, 4)), dim)) for _ in range(2)]
            center = rng.normal(size=dim).tolist()
            cfg = LossConfig(
                mode="deepsad",
                center=center,
                eta=float(rng.uniform(0.5, 2.0)),
                weight_decay=float(rng.uniform(1e-4, 0.1)),
            )

            # Act
            loss = deepsad_loss(Tensor(outputs), labels, [Tensor(w) for w in weights], cfg)

            # Assert
            expected = _deepsad_reference(
                outputs, labels, weights, center, cfg.eta, cfg.weight_decay, cfg.clamp_eps
            )
            assert loss.item() == pytest.approx(expected, rel=1e-9)

    def test_hsc_on_random_batches(self, rng):
        """Test 100 random batches of the hypersphere objective."""
        for _ in range(100):
            n, dim = int(rng.integers(1, 9)), int(rng.integers(1, 6))
            outputs = rng.normal(scale=float(rng.uniform(0.1, 2.0)), size=(n, dim))
            labels = rng.integers(0, 2, size=n)
            loss = hsc_loss(Tensor(outputs), labels, LossConfig())
            expected = _hsc_reference(outputs, labels, LossConfig().clamp_eps)
            assert loss.item() == pytest.approx(expected, rel=1e-9)
