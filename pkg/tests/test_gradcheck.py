"""Tests for the gradient check suite."""

import numpy as np

from mutadetect.gradcheck import check_models, primitive_cases, run_gradcheck


class TestGradCheck:
    """Test the finite-difference suite."""

    def test_every_primitive_has_a_case(self):
        """Test the suite covers the differentiable primitives."""
        assert {"matmul", "softmax", "log", "take", "stack", "dropout"} <= set(primitive_cases())

    def test_model_paths_pass(self):
        """Test LSTM+attention and transformer gradients under both losses."""
        rows = check_models(np.random.default_rng(0), coords=20)
        assert [r.name for r in rows] == [
            "model/lstm_attention+hsc",
            "model/transformer+hsc",
            "model/lstm_attention+deepsad",
        ]
        assert all(r.passed for r in rows), [(r.name, r.max_error) for r in rows]

    def test_corrupted_gradients_fail(self):
        """Test a shifted analytic gradient is caught everywhere."""
        report = run_gradcheck(seed=0, points=2, coords=5, corrupt=0.5)
        assert not report.passed
        assert len(report.failures()) == len(report.rows)
