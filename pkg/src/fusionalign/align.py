"""Symmetric temperature-scaled InfoNCE coupling brain embeddings to fused
visual embeddings.

Logits are cosine similarities divided by tau = exp(log_tau); the loss is the
mean of row-wise and column-wise cross-entropy with diagonal targets,
stabilized by max subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .errors import ShapeError
from .ndgrad import Tensor

TAU_INIT = 0.07
TAU_MIN = 0.01


@dataclass
class TemperatureParam:
    """Temperature trained in log space so tau stays positive."""

    log_tau: Tensor

    @classmethod
    def init(cls, tau: float = TAU_INIT) -> "TemperatureParam":
        return cls(log_tau=Tensor(np.array(np.log(tau)), requires_grad=True))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def clamp(self) -> None:
        # applied between optimizer steps, outside the tape
        self.log_tau.data = np.maximum(self.log_tau.data, np.log(TAU_MIN))

    def tensors(self) -> dict[str, Tensor]:
        return {"temp.log_tau": self.log_tau}


@dataclass
class SimilarityMatrix:
    logits: Tensor  # (N_b, N_f)
    tau: float
    provenance: dict = field(default_factory=dict)


def similarity(zb: Tensor, zf: Tensor,
               temp: TemperatureParam | None = None,
               provenance: dict | None = None) -> SimilarityMatrix:
    """Cosine-logit matrix s_ij = <zb_i/|zb_i|, zf_j/|zf_j|> / tau."""
    if zb.shape[1] != zf.shape[1]:
        raise ShapeError(f"embedding dims differ: {zb.shape} vs {zf.shape}")
    zb_hat = ng.l2_normalize(zb)
    zf_hat = ng.l2_normalize(zf)
    raw = ng.matmul(zb_hat, ng.transpose(zf_hat))
    if temp is None:
        return SimilarityMatrix(raw, 1.0, provenance or {})
    inv_tau = ng.reciprocal(ng.exp(temp.log_tau))
    return SimilarityMatrix(ng.mul_scalar(raw, inv_tau), temp.tau,
                            provenance or {})


def _log_softmax(m: np.ndarray, axis: int) -> np.ndarray:
    shifted = m - m.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def infonce_loss(sim: SimilarityMatrix | Tensor) -> Tensor:
    """-(1/2N) * (sum_i log softmax_row(s)_ii + sum_i log softmax_col(s)_ii)."""
    logits = sim.logits if isinstance(sim, SimilarityMatrix) else sim
    s = logits.data
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"InfoNCE needs a square logit matrix, got {s.shape}")
    n = s.shape[0]
    lsr = _log_softmax(s, axis=1)
    lsc = _log_softmax(s, axis=0)
    loss = -(np.trace(lsr) + np.trace(lsc)) / (2.0 * n)

    def grad_logits(g):
        p_row = np.exp(lsr)
        p_col = np.exp(lsc)
        eye = np.eye(n)
        return g * ((p_row - eye) + (p_col - eye)) / (2.0 * n)

    return ng._emit(np.array(loss), (logits,), (grad_logits,))
