"""Finite-difference checks for every primitive and for the full model paths."""

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from mutadetect import numcore as nc
from mutadetect.config import LossConfig
from mutadetect.loss import deepsad_loss, hsc_loss
from mutadetect.model import ModelParams, ModelShape, forward, init_params
from mutadetect.numcore import Tensor
from mutadetect.utils.pylogger import get_python_logger
from mutadetect.utils.seeding import derive_rng

logger = get_python_logger()

PRIMITIVE_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-3
# small step so ReLU kinks rarely fall inside the difference interval
MODEL_EPS = 1e-6
POINT_SHAPE = (3, 4)

Sampler = Callable[[np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class CheckRow:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


def _weights(shape: Tuple[int, ...]) -> np.ndarray:
    size = int(np.prod(shape, dtype=np.int64))
    return (np.cos(np.arange(size)) + 1.5).reshape(shape)


def _scalar(out: Tensor) -> Tensor:
    """Weighted sum so every output entry contributes a distinct slope."""
    return nc.sum(out * _weights(out.shape))


def _uniform(lo: float, hi: float) -> Sampler:
    return lambda rng: rng.uniform(lo, hi, size=POINT_SHAPE)


def _away_from(kinks: Tuple[float, ...], margin: float = 0.05) -> Sampler:
    def sample(rng: np.random.Generator) -> np.ndarray:
        x = rng.uniform(-2.0, 2.0, size=POINT_SHAPE)
        for k in kinks:
            close = np.abs(x - k) < margin
            x[close] = k + np.sign(x[close] - k + 1e-12) * margin * 2
        return x

    return sample


_C = np.linspace(0.5, 1.5, 12).reshape(POINT_SHAPE)
_M = np.linspace(-1.0, 1.0, 20).reshape(4, 5)
_L = np.linspace(-1.0, 1.0, 6).reshape(2, 3)


def primitive_cases() -> Dict[str, Tuple[Callable[[Tensor], Tensor], Sampler]]:
    """name -> (unary function of the point, sampler of safe points)."""
    general = _uniform(-2.0, 2.0)
    positive = _uniform(0.5, 2.0)
    return {
        "add": (lambda x: nc.add(x, _C), general),
        "sub": (lambda x: nc.sub(_C, x), general),
        "mul": (lambda x: nc.mul(x, x), general),
        "div": (lambda x: nc.div(_C, x), positive),
        "neg": (nc.neg, general),
        "reciprocal": (nc.reciprocal, positive),
        "square": (nc.square, general),
        "clamp": (lambda x: nc.clamp(x, -1.0, 1.0), _away_from((-1.0, 1.0))),
        "sigmoid": (nc.sigmoid, general),
        "tanh": (nc.tanh, general),
        "relu": (nc.relu, _away_from((0.0,))),
        "exp": (nc.exp, general),
        "log": (nc.log, positive),
        "sqrt": (nc.sqrt, positive),
        "softmax": (lambda x: nc.softmax(x, axis=-1), general),
        "dropout": (
            lambda x: nc.dropout(x, 0.3, np.random.default_rng(7), training=True),
            general,
        ),
        "sum": (lambda x: nc.sum(x, axis=0), general),
        "mean": (lambda x: nc.mean(x, axis=1), general),
        "sq_norm": (nc.sq_norm, general),
        "matmul": (lambda x: nc.matmul(x, Tensor(_M)), general),
        "matmul_left": (lambda x: nc.matmul(Tensor(_L), x), general),
        "transpose": (nc.transpose, general),
        "reshape": (lambda x: nc.reshape(x, (2, 6)), general),
        "concat": (lambda x: nc.concat([x, nc.square(x)], axis=1), general),
        "stack": (lambda x: nc.stack([x, nc.tanh(x)], axis=0), general),
        "take": (lambda x: x[np.array([0, 2, 2]), 1:3], general),
    }


def check_primitives(
    rng: np.random.Generator, points: int = 10, corrupt: float = 0.0
) -> List[CheckRow]:
    rows = []
    for name, (fn, sampler) in primitive_cases().items():
        worst = 0.0
        for _ in range(points):
            point = Tensor(sampler(rng), name=name)
            error = nc.grad_check(lambda x, fn=fn: _scalar(fn(x)), point, analytic_offset=corrupt)
            worst = max(worst, error)
        rows.append(CheckRow(name, worst, PRIMITIVE_TOLERANCE))
    return rows


def _model_row(
    name: str,
    shape: ModelShape,
    loss_fn: Callable[[Tensor, np.ndarray, ModelParams], Tensor],
    rng: np.random.Generator,
    coords: int,
    corrupt: float,
    batch: int = 6,
    T: int = 5,
) -> CheckRow:
    params = init_params(shape, rng)
    x = Tensor(rng.normal(size=(batch, T, shape.input_dim)))
    labels = np.array([1, 0] * (batch // 2) + [1] * (batch % 2))

    def f(_: Tensor) -> Tensor:
        return loss_fn(forward(x, params), labels, params)

    named = list(params.named_tensors().values())
    sizes = np.array([t.values.size for t in named])
    flat = rng.choice(int(sizes.sum()), size=min(coords, int(sizes.sum())), replace=False)
    offsets = np.r_[0, np.cumsum(sizes)]
    worst = 0.0
    for i, tensor in enumerate(named):
        picked = [int(c - offsets[i]) for c in flat if offsets[i] <= c < offsets[i + 1]]
        if not picked:
            continue
        error = nc.grad_check(
            f, tensor, eps=MODEL_EPS, coords=picked, analytic_offset=corrupt
        )
        worst = max(worst, error)
    nc.zero_grad(named)
    return CheckRow(name, worst, MODEL_TOLERANCE)


def check_models(
    rng: np.random.Generator, coords: int = 20, corrupt: float = 0.0
) -> List[CheckRow]:
    hsc = LossConfig(mode="hsc")
    lstm = ModelShape(input_dim=6, hidden=8, attention_size=5, out_dim=4, dropout=0.0)
    transformer = ModelShape(
        encoder="transformer", input_dim=6, d_k=5, ffn_hidden=7, out_dim=4, dropout=0.0
    )
    deepsad = LossConfig(mode="deepsad", center=[0.3, -0.2, 0.1, 0.4], weight_decay=1e-2)

    def hsc_fn(out: Tensor, labels: np.ndarray, _: ModelParams) -> Tensor:
        return hsc_loss(out, labels, hsc)

    def deepsad_fn(out: Tensor, labels: np.ndarray, params: ModelParams) -> Tensor:
        return deepsad_loss(out, labels, params.weight_matrices(), deepsad)

    return [
        _model_row("model/lstm_attention+hsc", lstm, hsc_fn, rng, coords, corrupt),
        _model_row("model/transformer+hsc", transformer, hsc_fn, rng, coords, corrupt),
        _model_row("model/lstm_attention+deepsad", lstm, deepsad_fn, rng, coords, corrupt),
    ]


@dataclass
class GradCheckReport:
    rows: List[CheckRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self) -> List[CheckRow]:
        return [r for r in self.rows if not r.passed]


def run_gradcheck(
    seed: int = 0, points: int = 10, coords: int = 20, corrupt: float = 0.0
) -> GradCheckReport:
    """Run the whole suite. `corrupt` shifts every analytic gradient (negative control)."""
    rows = check_primitives(derive_rng(seed, "gradcheck-primitives"), points, corrupt)
    rows += check_models(derive_rng(seed, "gradcheck-models"), coords, corrupt)
    report = GradCheckReport(rows)
    for row in report.failures():
        logger.error("Gradient check failed", check=row.name, max_error=row.max_error)
    logger.info("Gradient checks finished", checks=len(rows), failed=len(report.failures()))
    return report
