"""Tests for the encoders, head and checkpoints."""

import json
import math

import numpy as np
import pytest
from scipy.special import expit, softmax

from mutadetect import numcore as nc
from mutadetect.config import LossConfig, TrainConfig
from mutadetect.errors import CheckpointError, ContractError, DimensionError
from mutadetect.model import (
    LstmParams,
    ModelShape,
    encode_trace,
    forward,
    init_params,
    load_checkpoint,
    lstm_step,
    make_checkpoint,
    params_from_checkpoint,
    predict,
    save_checkpoint,
)
from mutadetect.numcore import Tensor


@pytest.fixture
def lstm_shape():
    return ModelShape(input_dim=4, hidden=5, attention_size=3, out_dim=2, dropout=0.0)


@pytest.fixture
def transformer_shape():
    return ModelShape(
        encoder="transformer", input_dim=4, d_k=3, ffn_hidden=6, out_dim=2, dropout=0.0
    )


def _reference_encode(x, params):
    """Plain numpy forward pass of one sample through LSTM + attention."""
    lstm, att = params.lstm, params.attention
    v = {k: t.values for k, t in vars(lstm).items()}
    h = np.zeros(lstm.hidden)
    s = np.zeros(lstm.hidden)
    hs, ss = [], []
    for x_t in x:
        z = np.concatenate([h, x_t])
        f = expit(v["W_f"] @ z + v["b_f"])
        i = expit(v["W_i"] @ z + v["b_i"])
        o = expit(v["W_o"] @ z + v["b_o"])
        s = f * s + i * np.tanh(v["W_s"] @ z + v["b_s"])
        h = o * np.tanh(s)
        hs.append(h)
        ss.append(s)
    scores = [
        att.v.values @ np.tanh(att.W_e.values @ np.concatenate([ss[-2], h_i]) + att.b_e.values)
        for h_i in hs[:-1]
    ]
    alpha = softmax(scores)
    context = sum(a * h_i for a, h_i in zip(alpha, hs[:-1]))
    return np.tanh(att.W_h.values @ np.concatenate([context, hs[-1]]) + att.b_h.values), alpha


class TestInit:
    """Test parameter initialisation."""

    def test_shapes_and_forget_bias(self, lstm_shape, rng):
        """Test tensor shapes and the forget-gate bias."""
        # Act
        params = init_params(lstm_shape, rng)
        named = params.named_tensors()

        # Assert
        assert named["lstm.W_f"].shape == (5, 9)
        assert named["attention.W_e"].shape == (3, 10)
        assert named["attention.W_h"].shape == (5, 10)
        assert named["head.W_phi"].shape == (2, 5)
        np.testing.assert_array_equal(named["lstm.b_f"].values, np.ones(5))
        np.testing.assert_array_equal(named["lstm.b_i"].values, np.zeros(5))
        assert all(t.ndim == 2 for t in params.weight_matrices())

    def test_transformer_head_reads_input_dim(self, transformer_shape, rng):
        """Test the transformer keeps the input dimension."""
        params = init_params(transformer_shape, rng)
        assert params.lstm is None
        assert params.head.W_phi.shape == (2, 4)
        assert params.transformer.W_O.shape == (4, 3)

    def test_from_train_config(self):
        """Test shape fields are copied from the training config."""
        shape = ModelShape.from_train_config(TrainConfig(hidden=7, out_dim=3), input_dim=11)
        assert (shape.input_dim, shape.hidden, shape.out_dim) == (11, 7, 3)


class TestLstmAttention:
    """Test the LSTM + temporal attention encoder."""

    def test_matches_reference_implementation(self, lstm_shape, rng):
        """Test the batched encoder against a per-sample numpy version."""
        # Arrange
        params = init_params(lstm_shape, rng)
        x = rng.normal(size=(3, 4, 4))

        # Act
        trace = encode_trace(Tensor(x), params.lstm, params.attention)

        # Assert
        for b in range(3):
            expected, alpha = _reference_encode(x[b], params)
            np.testing.assert_allclose(trace.encoded.values[b], expected, atol=1e-12)
            np.testing.assert_allclose(trace.weights.values[b], alpha, atol=1e-12)

    def test_weights_form_distribution_over_prior_states(self, lstm_shape, rng):
        """Test one weight per h_1..h_{T-1}, summing to one."""
        params = init_params(lstm_shape, rng)
        trace = encode_trace(Tensor(rng.normal(size=(2, 6, 4))), params.lstm, params.attention)
        assert trace.weights.shape == (2, 5)
        np.testing.assert_allclose(trace.weights.values.sum(axis=1), 1.0)
        assert np.all(np.abs(trace.encoded.values) < 1.0)

    def test_single_step_window_rejected(self, lstm_shape, rng):
        """Test T=1 leaves nothing to attend over."""
        params = init_params(lstm_shape, rng)
        with pytest.raises(ContractError):
            encode_trace(Tensor(np.zeros((1, 1, 4))), params.lstm, params.attention)

    def test_wrong_input_dim(self, lstm_shape, rng):
        """Test the input dimension is checked."""
        params = init_params(lstm_shape, rng)
        with pytest.raises(DimensionError):
            forward(Tensor(np.zeros((1, 3, 7))), params)

    def test_lstm_step_accepts_single_vectors(self, lstm_shape, rng):
        """Test the unbatched cell agrees with a batch of one."""
        # Arrange
        params = init_params(lstm_shape, rng).lstm
        h, s, x = rng.normal(size=5), rng.normal(size=5), rng.normal(size=4)

        # Act
        h1, s1 = lstm_step(Tensor(h), Tensor(s), Tensor(x), params)
        hb, sb = lstm_step(Tensor(h[None]), Tensor(s[None]), Tensor(x[None]), params)

        # Assert
        np.testing.assert_allclose(h1.values, hb.values[0])
        np.testing.assert_allclose(s1.values, sb.values[0])

    def test_dropout_only_in_training(self, rng):
        """Test eval mode is deterministic and training mode uses the mask."""
        # Arrange
        shape = ModelShape(input_dim=4, hidden=8, attention_size=3, out_dim=2, dropout=0.5)
        params = init_params(shape, rng)
        x = Tensor(rng.normal(size=(2, 3, 4)))

        # Act
        first = forward(x, params).values
        second = forward(x, params).values
        trained = forward(x, params, training=True, rng=np.random.default_rng(1)).values

        # Assert
        np.testing.assert_array_equal(first, second)
        assert not np.allclose(first, trained)


def _scalar_lstm_step(h_prev, s_prev, x_t, w):
    """One cell update written out per unit with Python floats."""
    z = list(h_prev) + list(x_t)

    def pre(name, j):
        return sum(w["W_" + name][j][k] * z[k] for k in range(len(z))) + w["b_" + name][j]

    def sigmoid(a):
        return 1.0 / (1.0 + math.exp(-a))

    h, s = [], []
    for j in range(len(h_prev)):
        f = sigmoid(pre("f", j))
        i = sigmoid(pre("i", j))
        o = sigmoid(pre("o", j))
        s_j = f * s_prev[j] + i * math.tanh(pre("s", j))
        s.append(s_j)
        h.append(o * math.tanh(s_j))
    return h, s


def _lstm_params(values):
    return LstmParams(**{name: Tensor(array) for name, array in values.items()})


class TestLstmStepOracle:
    """Compare the cell with a per-equation scalar version."""

    def test_random_cases(self, rng):
        """Test 100 random cells, states and inputs."""
        for _ in range(100):
            # Arrange
            hidden, d = int(rng.integers(1, 7)), int(rng.integers(1, 6))
            values = {f"W_{g}": rng.normal(size=(hidden, hidden + d)) for g in "fios"}
            values.update({f"b_{g}": rng.normal(size=hidden) for g in "fios"})
            h, s, x = rng.normal(size=hidden), rng.normal(size=hidden), rng.normal(size=d)

            # Act
            h_t, s_t = lstm_step(Tensor(h), Tensor(s), Tensor(x), _lstm_params(values))

            # Assert
            lists = {k: v.tolist() for k, v in values.items()}
            h_ref, s_ref = _scalar_lstm_step(h.tolist(), s.tolist(), x.tolist(), lists)
            np.testing.assert_allclose(h_t.values, h_ref, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(s_t.values, s_ref, rtol=1e-10, atol=1e-12)

    def test_zero_weights_open_every_gate_half_way(self, rng):
        """Test all-zero weights give gates of exactly 0.5."""
        # Arrange
        hidden, d = 4, 3
        values = {f"W_{g}": np.zeros((hidden, hidden + d)) for g in "fios"}
        values.update({f"b_{g}": np.zeros(hidden) for g in "fios"})
        params = _lstm_params(values)
        h, s, x = rng.normal(size=hidden), rng.normal(size=hidden), rng.normal(size=d)

        # Act
        h_zero, s_zero = lstm_step(Tensor(h), Tensor(np.zeros(hidden)), Tensor(x), params)
        h_t, s_t = lstm_step(Tensor(h), Tensor(s), Tensor(x), params)

        # Assert
        np.testing.assert_array_equal(h_zero.values, np.zeros(hidden))
        np.testing.assert_array_equal(s_zero.values, np.zeros(hidden))
        np.testing.assert_array_equal(s_t.values, 0.5 * s)
        np.testing.assert_allclose(h_t.values, 0.5 * np.tanh(0.5 * s), rtol=1e-15)


class TestTransformer:
    """Test the self-attention ablation encoder."""

    def test_output_shape(self, transformer_shape, rng):
        """Test one output row per sample."""
        params = init_params(transformer_shape, rng)
        assert forward(Tensor(rng.normal(size=(5, 3, 4))), params).shape == (5, 2)

    def test_mean_pooling_ignores_time_order(self, transformer_shape, rng):
        """Test permuting time steps leaves the output unchanged."""
        # Arrange
        params = init_params(transformer_shape, rng)
        x = rng.normal(size=(2, 4, 4))

        # Act
        out = predict(x, params)
        permuted = predict(x[:, ::-1, :], params)

        # Assert
        np.testing.assert_allclose(out, permuted, atol=1e-12)


class TestPredict:
    """Test eval-mode prediction."""

    def test_records_nothing(self, lstm_shape, rng):
        """Test predict leaves the tape empty."""
        params = init_params(lstm_shape, rng)
        predict(rng.normal(size=(2, 3, 4)), params)
        assert len(nc.current_tape()) == 0


class TestCheckpoints:
    """Test saving and restoring trained parameters."""

    def test_round_trip_reproduces_predictions(self, lstm_shape, rng, tmp_path):
        """Test restored parameters score bit-identically."""
        # Arrange
        params = init_params(lstm_shape, rng)
        x = rng.normal(size=(4, 3, 4))
        path = tmp_path / "ckpt.json"

        # Act
        save_checkpoint(path, make_checkpoint(params, 0.25, LossConfig(), trial=1, seed=9))
        loaded = load_checkpoint(path)
        restored = params_from_checkpoint(loaded)

        # Assert
        np.testing.assert_array_equal(predict(x, restored), predict(x, params))
        assert loaded.threshold == 0.25
        assert loaded.trial == 1
        assert not any(t.requires_grad for t in restored.parameters())

    def test_missing_tensor(self, lstm_shape, rng):
        """Test incomplete checkpoints are rejected."""
        checkpoint = make_checkpoint(init_params(lstm_shape, rng), 0.0, LossConfig(), 0, 0)
        del checkpoint.tensors["lstm.W_f"]
        with pytest.raises(CheckpointError, match="lstm.W_f"):
            params_from_checkpoint(checkpoint)

    def test_misshaped_tensor(self, lstm_shape, rng):
        """Test a tensor with the wrong shape."""
        checkpoint = make_checkpoint(init_params(lstm_shape, rng), 0.0, LossConfig(), 0, 0)
        checkpoint.tensors["head.b_phi"] = {"shape": [3], "values": [0.0, 0.0, 0.0]}
        with pytest.raises(CheckpointError, match="head.b_phi"):
            params_from_checkpoint(checkpoint)

    def test_other_format_version(self, lstm_shape, rng, tmp_path):
        """Test checkpoints of another version are refused."""
        # Arrange
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, make_checkpoint(init_params(lstm_shape, rng), 0.0, LossConfig(), 0, 0))
        data = json.loads(path.read_text())
        data["format_version"] = 2
        path.write_text(json.dumps(data))

        # Act & Assert
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        """Test a missing checkpoint."""
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "none.json")
