"""Brain-side encoders. MBP flattens a C x T signal, maps it linearly to the
shared width, and applies the same residual-MLP-plus-LayerNorm block as the
visual fuser. Anything implementing BrainBackbone can replace it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import ndgrad as ng
from .errors import ShapeError
from .fusion import Mlp, _uniform_init
from .ndgrad import Tensor


@runtime_checkable
class BrainBackbone(Protocol):
    """Contract: map flattened (n, C*T) signals to (n, d) embeddings and
    expose trainable tensors to the optimizer."""

    def forward(self, signals: Tensor) -> Tensor: ...

    def tensors(self) -> dict[str, Tensor]: ...


@dataclass
class MbpParams:
    w_b: Tensor  # (C*T, d)
    proj_mlp: Mlp
    ln_gamma: Tensor
    ln_beta: Tensor
    d: int
    ln_eps: float = 1e-5

    @classmethod
    def init(cls, rng: np.random.Generator, signal_len: int, d: int = 1024,
             d_hidden: int = 1024) -> "MbpParams":
        return cls(
            w_b=Tensor(_uniform_init(rng, signal_len, (signal_len, d)),
                       requires_grad=True),
            proj_mlp=Mlp.init(rng, d, d_hidden, d),
            ln_gamma=Tensor(np.ones(d), requires_grad=True),
            ln_beta=Tensor(np.zeros(d), requires_grad=True),
            d=d,
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {"brain.w_b": self.w_b}
        out.update(self.proj_mlp.tensors("brain.mlp"))
        out["brain.ln_gamma"] = self.ln_gamma
        out["brain.ln_beta"] = self.ln_beta
        return out

    def forward(self, signals: Tensor) -> Tensor:
        return mbp_forward(self, signals)


def flatten_signals(signals: np.ndarray) -> np.ndarray:
    """(n, C, T) -> (n, C*T), channel-major: channel 0's T samples first."""
    if signals.ndim == 2:
        signals = signals[None]
    return np.ascontiguousarray(signals).reshape(signals.shape[0], -1)


def mbp_forward(params: MbpParams, signals: Tensor) -> Tensor:
    """z_b = LayerNorm(zbar + mlp(zbar)) with zbar = flat(signal) @ W_b.

    ``signals`` must already be flattened to (n, C*T)."""
    if signals.data.ndim != 2:
        raise ShapeError(f"expected flattened (n, C*T) signals, got {signals.shape}")
    if signals.shape[1] != params.w_b.shape[0]:
        raise ShapeError(
            f"signal length mismatch: expected {params.w_b.shape[0]}, "
            f"got {signals.shape[1]}")
    zbar = ng.matmul(signals, params.w_b)
    resid = params.proj_mlp.forward(zbar)
    return ng.layer_norm(ng.add(zbar, resid), params.ln_gamma,
                         params.ln_beta, eps=params.ln_eps)


@dataclass
class LinearBackbone:
    """Trivial BrainBackbone used to prove the interface is pluggable."""

    w: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, signal_len: int, d: int) -> "LinearBackbone":
        return cls(w=Tensor(_uniform_init(rng, signal_len, (signal_len, d)),
                            requires_grad=True))

    def forward(self, signals: Tensor) -> Tensor:
        if signals.shape[1] != self.w.shape[0]:
            raise ShapeError(
                f"signal length mismatch: expected {self.w.shape[0]}, "
                f"got {signals.shape[1]}")
        return ng.matmul(signals, self.w)

    def tensors(self) -> dict[str, Tensor]:
        return {"brain.linear.w": self.w}
