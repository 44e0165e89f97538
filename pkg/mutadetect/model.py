"""LSTM + temporal attention encoder, transformer ablation, and the linear head.

Vectors are rows: a batch of inputs has shape (B, T, input_dim) and every
weight matrix W maps a concatenated input z through z @ W^T + b. Single
(unbatched) vectors are accepted by the step-level functions.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from mutadetect import numcore as nc
from mutadetect.config import LossConfig, TrainConfig
from mutadetect.errors import CheckpointError, ContractError, DimensionError
from mutadetect.numcore import Tensor
from mutadetect.utils.artifacts import write_json_atomic
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()

CHECKPOINT_FORMAT_VERSION = 1

EncoderKind = Literal["lstm_attention", "transformer"]


class ModelShape(BaseModel):
    """Hyperparameters that fix every tensor shape."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder: EncoderKind = "lstm_attention"
    input_dim: int = Field(gt=0)
    hidden: int = Field(default=128, gt=0)
    attention_size: int = Field(default=64, gt=0)
    out_dim: int = Field(default=32, gt=0)
    d_k: int = Field(default=64, gt=0)
    ffn_hidden: int = Field(default=128, gt=0)
    dropout: float = Field(default=0.5, ge=0, lt=1)

    @classmethod
    def from_train_config(cls, cfg: TrainConfig, input_dim: int) -> "ModelShape":
        return cls(
            encoder=cfg.encoder,
            input_dim=input_dim,
            hidden=cfg.hidden,
            attention_size=cfg.attention_size,
            out_dim=cfg.out_dim,
            d_k=cfg.d_k,
            ffn_hidden=cfg.ffn_hidden,
            dropout=cfg.dropout,
        )

    @property
    def encoded_dim(self) -> int:
        return self.hidden if self.encoder == "lstm_attention" else self.input_dim


@dataclass
class LstmParams:
    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_s: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_s: Tensor

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.hidden


@dataclass
class AttentionParams:
    v: Tensor
    W_e: Tensor
    b_e: Tensor
    W_h: Tensor
    b_h: Tensor


@dataclass
class HeadParams:
    W_phi: Tensor
    b_phi: Tensor


@dataclass
class TransformerParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[0]


@dataclass
class ModelParams:
    shape: ModelShape
    head: HeadParams
    lstm: Optional[LstmParams] = None
    attention: Optional[AttentionParams] = None
    transformer: Optional[TransformerParams] = None

    def named_tensors(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {}
        for prefix in ("lstm", "attention", "transformer", "head"):
            group = getattr(self, prefix)
            if group is None:
                continue
            for key, tensor in vars(group).items():
                named[f"{prefix}.{key}"] = tensor
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_tensors().values())

    def weight_matrices(self) -> List[Tensor]:
        """Tensors that weight decay applies to (biases excluded)."""
        return [t for t in self.named_tensors().values() if t.ndim == 2]


# --- Initialisation ---


def _zeros(size: int, name: str, value: float = 0.0) -> Tensor:
    return Tensor(np.full(size, value), requires_grad=True, name=name)


def init_params(shape: ModelShape, rng: np.random.Generator) -> ModelParams:
    """uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
    d, h, a = shape.input_dim, shape.hidden, shape.attention_size
    enc = shape.encoded_dim
    head = HeadParams(
        W_phi=nc.init_uniform((shape.out_dim, enc), enc, rng, "head.W_phi"),
        b_phi=_zeros(shape.out_dim, "head.b_phi"),
    )
    if shape.encoder == "transformer":
        k, f = shape.d_k, shape.ffn_hidden
        transformer = TransformerParams(
            W_Q=nc.init_uniform((k, d), d, rng, "transformer.W_Q"),
            W_K=nc.init_uniform((k, d), d, rng, "transformer.W_K"),
            W_V=nc.init_uniform((k, d), d, rng, "transformer.W_V"),
            W_O=nc.init_uniform((d, k), k, rng, "transformer.W_O"),
            W_1=nc.init_uniform((f, d), d, rng, "transformer.W_1"),
            b_1=_zeros(f, "transformer.b_1"),
            W_2=nc.init_uniform((d, f), f, rng, "transformer.W_2"),
            b_2=_zeros(d, "transformer.b_2"),
        )
        return ModelParams(shape=shape, head=head, transformer=transformer)

    lstm = LstmParams(
        W_f=nc.init_uniform((h, h + d), h + d, rng, "lstm.W_f"),
        W_i=nc.init_uniform((h, h + d), h + d, rng, "lstm.W_i"),
        W_o=nc.init_uniform((h, h + d), h + d, rng, "lstm.W_o"),
        W_s=nc.init_uniform((h, h + d), h + d, rng, "lstm.W_s"),
        b_f=_zeros(h, "lstm.b_f", 1.0),
        b_i=_zeros(h, "lstm.b_i"),
        b_o=_zeros(h, "lstm.b_o"),
        b_s=_zeros(h, "lstm.b_s"),
    )
    attention = AttentionParams(
        v=nc.init_uniform((a,), a, rng, "attention.v"),
        W_e=nc.init_uniform((a, 2 * h), 2 * h, rng, "attention.W_e"),
        b_e=_zeros(a, "attention.b_e"),
        W_h=nc.init_uniform((h, 2 * h), 2 * h, rng, "attention.W_h"),
        b_h=_zeros(h, "attention.b_h"),
    )
    return ModelParams(shape=shape, head=head, lstm=lstm, attention=attention)


# --- Building blocks ---


def _affine(W: Tensor, z: Tensor, b: Tensor) -> Tensor:
    """z @ W^T + b for a single vector or any batch of row vectors."""
    if z.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"input of size {z.shape[-1]} does not match weight {W.name or ''} {W.shape}"
        )
    if z.ndim == 1:
        out = nc.matmul(nc.reshape(z, (1, -1)), nc.transpose(W))
        return nc.reshape(out, (-1,)) + b
    return nc.matmul(z, nc.transpose(W)) + b


def lstm_step(
    h_prev: Tensor, s_prev: Tensor, x_t: Tensor, params: LstmParams
) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; returns (h_t, s_t)."""
    hidden = params.hidden
    if h_prev.shape[-1] != hidden or s_prev.shape[-1] != hidden:
        raise DimensionError(
            f"state sizes {h_prev.shape}, {s_prev.shape} do not match hidden {hidden}"
        )
    z = nc.concat([h_prev, x_t], axis=-1)
    f_t = nc.sigmoid(_affine(params.W_f, z, params.b_f))
    i_t = nc.sigmoid(_affine(params.W_i, z, params.b_i))
    o_t = nc.sigmoid(_affine(params.W_o, z, params.b_o))
    s_t = f_t * s_prev + i_t * nc.tanh(_affine(params.W_s, z, params.b_s))
    h_t = o_t * nc.tanh(s_t)
    return h_t, s_t


def attention_score(s_prev: Tensor, h_i: Tensor, params: AttentionParams) -> Tensor:
    """Additive score v^T tanh(W_e [s_prev; h_i] + b_e) over the last axis."""
    z = nc.concat([s_prev, h_i], axis=-1)
    return nc.sum(params.v * nc.tanh(_affine(params.W_e, z, params.b_e)), axis=-1)


@dataclass
class EncoderTrace:
    """Intermediate values of one encode pass, kept for inspection."""

    encoded: Tensor
    weights: Tensor
    hidden_states: List[Tensor]
    cell_states: List[Tensor]


def encode_trace(
    x: Tensor,
    lstm: LstmParams,
    attention: AttentionParams,
    dropout: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> EncoderTrace:
    """Run the LSTM over x (B, T, d) and attend over h_1..h_{T-1}.

    Scores use the cell state s_{T-1} that precedes the final step.

    Raises:
        ContractError: If T < 2.
    """
    if x.ndim != 3:
        raise DimensionError(f"encode expects (batch, T, dim), got {x.shape}")
    batch, T, dim = x.shape
    if T < 2:
        raise ContractError(f"attention needs at least one prior state, got T={T}")
    if dim != lstm.input_dim:
        raise DimensionError(f"input dim {dim} does not match LSTM input {lstm.input_dim}")

    h = Tensor(np.zeros((batch, lstm.hidden)))
    s = Tensor(np.zeros((batch, lstm.hidden)))
    hs: List[Tensor] = []
    ss: List[Tensor] = []
    for t in range(T):
        h, s = lstm_step(h, s, x[:, t, :], lstm)
        hs.append(h)
        ss.append(s)

    prior = nc.stack(hs[:-1], axis=1)  # (B, T-1, hidden)
    query = nc.stack([ss[-2]] * (T - 1), axis=1)
    weights = nc.softmax(attention_score(query, prior, attention), axis=-1)
    context = nc.sum(nc.reshape(weights, (batch, T - 1, 1)) * prior, axis=1)
    encoded = nc.tanh(_affine(attention.W_h, nc.concat([context, hs[-1]], axis=-1), attention.b_h))
    encoded = nc.dropout(encoded, dropout, rng, training)
    return EncoderTrace(encoded=encoded, weights=weights, hidden_states=hs, cell_states=ss)


def encode(
    x: Tensor,
    lstm: LstmParams,
    attention: AttentionParams,
    dropout: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    return encode_trace(x, lstm, attention, dropout, training, rng).encoded


def project(h_hat: Tensor, head: HeadParams) -> Tensor:
    """Linear head phi = W_phi h + b_phi."""
    return _affine(head.W_phi, h_hat, head.b_phi)


def self_attention_scores(x: Tensor, params: TransformerParams) -> Tensor:
    """q k^T / sqrt(d_k) for x (B, T, d); shape (B, T, T)."""
    q = nc.matmul(x, nc.transpose(params.W_Q))
    k = nc.matmul(x, nc.transpose(params.W_K))
    return nc.matmul(q, nc.transpose(k)) * (1.0 / np.sqrt(params.d_k))


def transformer_encode(
    x: Tensor,
    params: TransformerParams,
    dropout: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """One single-head encoder layer, mean-pooled over time; shape (B, d)."""
    if x.ndim != 3:
        raise DimensionError(f"transformer_encode expects (batch, T, dim), got {x.shape}")
    if x.shape[-1] != params.W_Q.shape[1]:
        raise DimensionError(
            f"input dim {x.shape[-1]} does not match W_Q {params.W_Q.shape}"
        )
    weights = nc.softmax(self_attention_scores(x, params), axis=-1)
    values = nc.matmul(x, nc.transpose(params.W_V))
    attended = nc.matmul(nc.matmul(weights, values), nc.transpose(params.W_O))
    residual = x + attended
    hidden = nc.relu(_affine(params.W_1, residual, params.b_1))
    out = residual + _affine(params.W_2, hidden, params.b_2)
    pooled = nc.mean(out, axis=1)
    return nc.dropout(pooled, dropout, rng, training)


def forward(
    x: Tensor,
    params: ModelParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Encode a batch and project it; returns phi outputs (B, out_dim)."""
    p = params.shape.dropout
    if params.shape.encoder == "transformer":
        assert params.transformer is not None
        encoded = transformer_encode(x, params.transformer, p, training, rng)
    else:
        assert params.lstm is not None and params.attention is not None
        encoded = encode(x, params.lstm, params.attention, p, training, rng)
    return project(encoded, params.head)


def predict(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Eval-mode outputs for a plain array; nothing is recorded."""
    with nc.no_grad():
        return forward(Tensor(x), params).numpy()


# --- Checkpoints ---


class Checkpoint(BaseModel):
    """Trained parameters plus everything needed to score with them."""

    model_config = ConfigDict(extra="forbid")

    format_version: Literal[1] = CHECKPOINT_FORMAT_VERSION
    shape: ModelShape
    tensors: Dict[str, Dict[str, Any]]
    threshold: float
    loss: LossConfig
    trial: int = 0
    seed: int = 0


def make_checkpoint(
    params: ModelParams, threshold: float, loss: LossConfig, trial: int, seed: int
) -> Checkpoint:
    return Checkpoint(
        shape=params.shape,
        tensors=nc.tensors_to_dict(params.named_tensors()),
        threshold=threshold,
        loss=loss,
        trial=trial,
        seed=seed,
    )


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    return write_json_atomic(path, checkpoint.model_dump(mode="json"))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint file.

    Raises:
        CheckpointError: If the file is missing, malformed, or of another version.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", hint="Run `mutadetect train` first")
    try:
        return Checkpoint.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CheckpointError(
            f"checkpoint {path} does not match format_version {CHECKPOINT_FORMAT_VERSION}: "
            f"{e.error_count()} problem(s)"
        ) from e


def params_from_checkpoint(checkpoint: Checkpoint) -> ModelParams:
    """Rebuild frozen parameters, checking each tensor against the stored shape.

    Raises:
        CheckpointError: On missing, extra, or mis-shaped tensors.
    """
    template = init_params(checkpoint.shape, np.random.default_rng(0))
    expected = template.named_tensors()
    try:
        loaded = nc.tensors_from_dict(checkpoint.tensors)
    except DimensionError as e:
        raise CheckpointError(str(e)) from e
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise CheckpointError(f"checkpoint tensors differ: missing {missing}, unexpected {extra}")
    for name, tensor in loaded.items():
        if tensor.shape != expected[name].shape:
            raise CheckpointError(
                f"tensor {name} has shape {tensor.shape}, model expects {expected[name].shape}"
            )
        target = expected[name]
        target.values = tensor.values
        target.requires_grad = False
    return template
