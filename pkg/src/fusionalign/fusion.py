"""Hierarchical visual fuser: per-branch linear alignment, summed into the
shared space, then a residual two-layer GELU MLP under LayerNorm.

Branch masking zeroes a branch's post-projection summand, which is the
inference-time ablation mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .errors import MaskError, ShapeError
from .ndgrad import Tensor


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Mlp:
    """Two-layer GELU MLP: x @ W1 + b1 -> gelu -> @ W2 + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int,
             d_out: int) -> "Mlp":
        return cls(
            w1=Tensor(_uniform_init(rng, d_in, (d_in, d_hidden)), requires_grad=True),
            b1=Tensor(np.zeros(d_hidden), requires_grad=True),
            w2=Tensor(_uniform_init(rng, d_hidden, (d_hidden, d_out)),
                      requires_grad=True),
            b2=Tensor(np.zeros(d_out), requires_grad=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        h = ng.gelu(ng.add_bias(ng.matmul(x, self.w1), self.b1))
        return ng.add_bias(ng.matmul(h, self.w2), self.b2)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class HvfParams:
    branch_maps: list[Tensor]  # W_v^(k), each (d_k, d), no bias
    fuse_mlp: Mlp
    ln_gamma: Tensor
    ln_beta: Tensor
    d: int
    ln_eps: float = 1e-5

    @classmethod
    def init(cls, rng: np.random.Generator, branch_dims: list[int],
             d: int = 1024, d_hidden: int = 1024) -> "HvfParams":
        return cls(
            branch_maps=[Tensor(_uniform_init(rng, dk, (dk, d)), requires_grad=True)
                         for dk in branch_dims],
            fuse_mlp=Mlp.init(rng, d, d_hidden, d),
            ln_gamma=Tensor(np.ones(d), requires_grad=True),
            ln_beta=Tensor(np.zeros(d), requires_grad=True),
            d=d,
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {f"hvf.branch_map.{k}": w for k, w in enumerate(self.branch_maps)}
        out.update(self.fuse_mlp.tensors("hvf.mlp"))
        out["hvf.ln_gamma"] = self.ln_gamma
        out["hvf.ln_beta"] = self.ln_beta
        return out


@dataclass
class BranchMask:
    active: list[bool]

    @classmethod
    def full(cls, k: int) -> "BranchMask":
        return cls([True] * k)

    @classmethod
    def drop(cls, k: int, index: int) -> "BranchMask":
        active = [True] * k
        active[index] = False
        return cls(active)

    def validate(self, k: int) -> None:
        if len(self.active) != k:
            raise MaskError(f"mask length {len(self.active)} != branch count {k}")
        if not any(self.active):
            raise MaskError("all branches masked; at least one must stay active")


def hvf_forward(params: HvfParams, branch_embeddings: list[Tensor],
                mask: BranchMask | None = None) -> Tensor:
    """Fused embedding z_f = LayerNorm(zbar + mlp(zbar)), zbar = sum of the
    per-branch linear projections. Masked branches contribute zero."""
    k = len(params.branch_maps)
    if len(branch_embeddings) != k:
        raise ShapeError(
            f"got {len(branch_embeddings)} branch inputs for {k} branch maps")
    if mask is None:
        mask = BranchMask.full(k)
    mask.validate(k)
    zbar = None
    for emb, w, on in zip(branch_embeddings, params.branch_maps, mask.active):
        if emb.shape[1] != w.shape[0]:
            raise ShapeError(
                f"branch input dim {emb.shape[1]} != map rows {w.shape[0]}")
        if not on:
            continue
        term = ng.matmul(emb, w)
        zbar = term if zbar is None else ng.add(zbar, term)
    resid = params.fuse_mlp.forward(zbar)
    return ng.layer_norm(ng.add(zbar, resid), params.ln_gamma,
                         params.ln_beta, eps=params.ln_eps)
