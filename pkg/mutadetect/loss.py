"""DeepSAD and hypersphere-classifier objectives, and the anomaly score.

Labels follow the training convention: 1 = normal (unmutated), 0 = anomaly.
"""

from typing import List, Sequence

import numpy as np

from mutadetect import numcore as nc
from mutadetect.config import LossConfig
from mutadetect.errors import ConfigError, ContractError, DataError, DimensionError
from mutadetect.numcore import Tensor
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()

# Center coordinates closer than this to 0 are pushed out to +-CENTER_PUSH
CENTER_EPS = 0.01
CENTER_PUSH = 0.1


def _check_batch(outputs: Tensor, labels: np.ndarray) -> Tensor:
    if outputs.ndim != 2 or outputs.shape[0] == 0:
        raise ContractError(f"loss needs a non-empty (batch, out_dim) batch, got {outputs.shape}")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (outputs.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {outputs.shape[0]}")
    return Tensor(labels)


def _center(cfg: LossConfig, out_dim: int) -> np.ndarray:
    if cfg.center is None:
        raise ConfigError(
            "deepsad loss needs the hypersphere center c",
            hint="Set train.loss.center or let the trainer compute it from normal samples",
        )
    center = np.asarray(cfg.center, dtype=np.float64)
    if center.shape != (out_dim,):
        raise DimensionError(f"center has {center.size} entries, outputs have {out_dim}")
    return center


def deepsad_loss(
    outputs: Tensor, labels: np.ndarray, weights: Sequence[Tensor], cfg: LossConfig
) -> Tensor:
    """Mean compactness of normals + eta-weighted inverse distance of anomalies
    + (lambda/2) * sum of squared Frobenius norms of `weights`.

    The inverse distance is taken of max(distance, clamp_eps).

    Raises:
        ConfigError: If the center is unset.
    """
    y = _check_batch(outputs, labels)
    center = _center(cfg, outputs.shape[1])
    distances = nc.sq_norm(outputs - center, axis=-1)
    inverse = nc.reciprocal(nc.clamp(distances, lo=cfg.clamp_eps))
    per_sample = y * distances + (1.0 - y) * cfg.eta * inverse
    loss = nc.mean(per_sample)
    if cfg.weight_decay > 0 and weights:
        decay = nc.stack([nc.sq_norm(w, axis=None) for w in weights])
        loss = loss + nc.sum(decay) * (cfg.weight_decay / 2.0)
    return loss


def hsc_loss(outputs: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """y*||phi||^2 - (1-y)*log(1 - exp(-(sqrt(||phi||^2 + 1) - 1))), averaged.

    The log argument is clamped to [clamp_eps, 1].
    """
    y = _check_batch(outputs, labels)
    distances = nc.sq_norm(outputs, axis=-1)
    radial = nc.sqrt(distances + 1.0) - 1.0
    inside = nc.clamp(1.0 - nc.exp(-radial), lo=cfg.clamp_eps, hi=1.0)
    per_sample = y * distances - (1.0 - y) * nc.log(inside)
    return nc.mean(per_sample)


def objective(
    outputs: Tensor, labels: np.ndarray, weights: Sequence[Tensor], cfg: LossConfig
) -> Tensor:
    """The configured training loss."""
    if cfg.mode == "deepsad":
        return deepsad_loss(outputs, labels, weights, cfg)
    return hsc_loss(outputs, labels, cfg)


def anomaly_scores(outputs: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Squared distance to c (deepsad) or to the origin (hsc); higher is more anomalous."""
    outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    if cfg.mode == "deepsad":
        outputs = outputs - _center(cfg, outputs.shape[1])
    return (outputs * outputs).sum(axis=1)


def anomaly_score(output: np.ndarray, cfg: LossConfig) -> float:
    return float(anomaly_scores(output, cfg)[0])


def compute_center(normal_outputs: np.ndarray) -> List[float]:
    """Mean of phi over normal samples, with near-zero coordinates pushed out.

    Raises:
        DataError: If there are no normal samples.
    """
    normal_outputs = np.asarray(normal_outputs, dtype=np.float64)
    if normal_outputs.ndim != 2 or len(normal_outputs) == 0:
        raise DataError("no normal training samples to place the hypersphere center")
    center = normal_outputs.mean(axis=0)
    near = np.abs(center) < CENTER_EPS
    center[near & (center < 0)] = -CENTER_PUSH
    center[near & (center >= 0)] = CENTER_PUSH
    if near.any():
        logger.debug("Pushed center coordinates away from zero", count=int(near.sum()))
    return center.tolist()
