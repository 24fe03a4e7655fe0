"""Inverse-effectiveness gradient modulation for the fusion layer.

Each training batch yields a unimodal strength score (mean probe-head
confidence on the true labels) and a multimodal one (mean fused confidence).
The fusion coefficient

    xi = gamma * (1 + gate(1 - S_unimodal / S_multimodal))

scales only the fusion layer's gradient: weak unimodal evidence pushes xi
toward 2*gamma and accelerates fusion learning, strong unimodal evidence pulls
it toward 0. The gate is a bounded odd saturating function (tanh by default),
so 0 < xi < 2*gamma and the update never reverses the descent direction. xi is
treated as a constant scalar: no gradient flows through the score computation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .model import Batch, MultimodalModel, forward_full
from .tensor import GradientSet, Tape, Tensor, backward

log = logging.getLogger(__name__)

EPS_DIV = 1e-12

# tanh saturates to exactly +-1.0 in float64 for |x| >~ 19; the clamp keeps
# xi strictly inside the open interval (0, 2*gamma).
_GATE_LIMIT = 1.0 - 1e-12

GATINGS: dict[str, Callable[[float], float]] = {
    "tanh": math.tanh,
    "softsign": lambda r: r / (1.0 + abs(r)),
    "arctan": lambda r: math.atan(r) * (2.0 / math.pi),
}


@dataclass
class IEMFConfig:
    gamma: float = 1.0
    gating: str = "tanh"
    enabled: bool = True

    def __post_init__(self):
        if not self.gamma > 0.0:
            raise ConfigError("gamma must be positive")
        if self.gating not in GATINGS:
            raise ConfigError(f"unknown gating {self.gating!r}; choose from {sorted(GATINGS)}")


@dataclass
class StrengthScores:
    """Batch-level confidence scores and the resulting fusion coefficient."""

    s_unimodal: float
    s_multimodal: float
    xi: float
    batch_size: int


@dataclass
class StepMetrics:
    loss: float
    accuracy: float
    xi: float


def per_sample_content(probs: Tensor, labels) -> Tensor:
    """Probability each sample's head assigned to its true label: c_i = probs[i, y_i]."""
    arr = probs.data
    if arr.ndim != 2:
        raise ContractError(f"probabilities must be (B,M), got shape {probs.shape}")
    row_sums = arr.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-9):
        raise ContractError("probability rows must sum to 1")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != arr.shape[0]:
        raise ContractError(f"expected {arr.shape[0]} labels, got {y.shape[0]}")
    if y.min() < 0 or y.max() >= arr.shape[1]:
        raise IndexError("label out of range")
    return Tensor(arr[np.arange(arr.shape[0]), y])


def batch_strength_scores(c_a: Tensor, c_v: Tensor, c_av: Tensor) -> tuple[float, float]:
    """Means over the batch: ((sum c_a + sum c_v) / 2B, mean c_av)."""
    a, v, av = c_a.data.reshape(-1), c_v.data.reshape(-1), c_av.data.reshape(-1)
    if not (a.shape == v.shape == av.shape):
        raise ContractError("per-sample content vectors must have equal length")
    if a.shape[0] < 1:
        raise ContractError("strength scores need a non-empty batch")
    s_unimodal = float((a + v).sum() / (2.0 * a.shape[0]))
    s_multimodal = float(av.mean())
    return s_unimodal, s_multimodal


def iemf_coefficient(s_unimodal: float, s_multimodal: float, cfg: IEMFConfig) -> float:
    """Bounded fusion coefficient in (0, 2*gamma); equals gamma when the scores tie."""
    if s_multimodal <= EPS_DIV:
        log.warning(
            "degenerate batch: multimodal strength %.3e <= %.0e, using xi = gamma",
            s_multimodal, EPS_DIV,
        )
        return float(cfg.gamma)
    g = GATINGS[cfg.gating](1.0 - s_unimodal / s_multimodal)
    g = min(max(g, -_GATE_LIMIT), _GATE_LIMIT)
    return cfg.gamma * (1.0 + g)


def sgd_delta(w: np.ndarray, g: np.ndarray, lr: float, weight_decay: float) -> np.ndarray:
    """Plain decoupled step: lr * (g + weight_decay * w)."""
    return lr * (g + weight_decay * w)


def fusion_deltas(model: MultimodalModel, grads: GradientSet, eta: float, xi: float,
                  weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """Staged fusion-layer updates scaled by xi; bias excluded from weight decay."""
    if not (np.isfinite(eta) and np.isfinite(xi)):
        raise NumericError("non-finite step size")
    deltas: dict[str, np.ndarray] = {}
    lr = eta * xi
    for pid in ("fusion.W", "fusion.b"):
        if pid not in grads:
            raise ContractError(f"gradient set is missing {pid}")
        wd = weight_decay if pid.endswith(".W") else 0.0
        delta = sgd_delta(model.params[pid], grads[pid].data, lr, wd)
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"non-finite update for {pid}; step aborted")
        deltas[pid] = delta
    return deltas


def modulated_fusion_update(model: MultimodalModel, grads: GradientSet, eta: float, xi: float,
                            weight_decay: float = 0.0) -> None:
    """Apply W_f <- W_f - eta*xi*(grad + wd*W_f) and likewise for the bias.

    The deltas are staged and validated before anything is committed, so a
    failed update leaves the model untouched.
    """
    deltas = fusion_deltas(model, grads, eta, xi, weight_decay)
    for pid, delta in deltas.items():
        model.params[pid] = model.params[pid] - delta


def iemf_train_step(batch: Batch, model: MultimodalModel, cfg) -> tuple[StrengthScores, StepMetrics]:
    """One modulated SGD step: forward, scores, coefficient, backward, update.

    With modulation disabled the coefficient is forced to 1 and the update is
    bit-identical to a vanilla step; the scores are still computed for the
    trace. Any failure propagates before parameters are modified.
    """
    from .training import sgd_step, top1_accuracy

    tape = Tape()
    out = forward_full(batch, model, tape)
    c_a = per_sample_content(out.p_a, batch.y)
    c_v = per_sample_content(out.p_v, batch.y)
    c_av = per_sample_content(out.p_av, batch.y)
    s_unimodal, s_multimodal = batch_strength_scores(c_a, c_v, c_av)
    icfg = cfg.iemf
    xi = iemf_coefficient(s_unimodal, s_multimodal, icfg) if icfg.enabled else 1.0
    grads = backward(tape, out.loss)
    sgd_step(model, grads, cfg, xi)
    scores = StrengthScores(s_unimodal, s_multimodal, xi, batch.size)
    metrics = StepMetrics(
        loss=out.loss.item(),
        accuracy=top1_accuracy(out.logits_av, batch.y),
        xi=xi,
    )
    return scores, metrics
