"""Fusion-prior stack: residual condition projector, a toy DDPM substrate
(linear-beta schedule, forward noising, conditional MLP denoiser), the
noise-prediction loss, and condition export for external generators.

The toy denoiser stands in for the frozen UNet/adapter pair; conditioning
enters by plain concatenation, which is the documented fidelity boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .errors import ContractError, ShapeError
from .fusion import Mlp, _uniform_init
from .ndgrad import Tensor

TIME_FEATURE_DIM = 32
DENOISER_WIDTH = 128


@dataclass
class ProjectorParams:
    """Residual projector z_c = z + mlp(z); output dim equals input dim."""

    mlp: Mlp
    d: int

    @classmethod
    def init(cls, rng: np.random.Generator, d: int = 1024,
             d_hidden: int = 4096) -> "ProjectorParams":
        return cls(mlp=Mlp.init(rng, d, d_hidden, d), d=d)

    def tensors(self) -> dict[str, Tensor]:
        return self.mlp.tensors("projector.mlp")


def project_condition(p: ProjectorParams, z: Tensor) -> Tensor:
    if z.shape[1] != p.d:
        raise ShapeError(f"projector expects dim {p.d}, got {z.shape[1]}")
    return ng.add(z, p.mlp.forward(z))


@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, num_steps: int = 50, beta_start: float = 1e-4,
               beta_end: float = 2e-2) -> "DiffusionSchedule":
        if num_steps < 1:
            raise ContractError("schedule needs at least one step")
        betas = np.linspace(beta_start, beta_end, num_steps)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ContractError("betas must lie in (0, 1)")
        return cls(betas=betas, alpha_bars=np.cumprod(1.0 - betas))

    @property
    def num_steps(self) -> int:
        return len(self.betas)


def add_noise(schedule: DiffusionSchedule, x0: np.ndarray, t: int,
              eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t is 1-based."""
    if not (1 <= t <= schedule.num_steps):
        raise ContractError(f"timestep {t} outside [1, {schedule.num_steps}]")
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    abar = schedule.alpha_bars[t - 1]
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def timestep_features(t: np.ndarray, num_steps: int,
                      dim: int = TIME_FEATURE_DIM) -> np.ndarray:
    """Sinusoidal features of the normalized timestep, (n, dim)."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    phase = (t[:, None] / num_steps) * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


@dataclass
class ToyDenoiser:
    """Conditional MLP noise predictor: (x_t, time features, z_c) -> eps_hat.

    ``backbone_w`` is a fixed random mixing of the noisy latent standing in
    for the frozen generative trunk; it is never trained. No text pathway:
    empty-prompt conditioning is modeled by its absence.
    """

    w_in: Tensor
    b_in: Tensor
    w_mid: Tensor
    b_mid: Tensor
    w_out: Tensor
    b_out: Tensor
    backbone_w: Tensor
    x_dim: int
    cond_dim: int

    @classmethod
    def init(cls, rng: np.random.Generator, x_dim: int, cond_dim: int,
             width: int = DENOISER_WIDTH) -> "ToyDenoiser":
        d_in = x_dim + TIME_FEATURE_DIM + cond_dim
        return cls(
            w_in=Tensor(_uniform_init(rng, d_in, (d_in, width)), requires_grad=True),
            b_in=Tensor(np.zeros(width), requires_grad=True),
            w_mid=Tensor(_uniform_init(rng, width, (width, width)),
                         requires_grad=True),
            b_mid=Tensor(np.zeros(width), requires_grad=True),
            w_out=Tensor(_uniform_init(rng, width, (width, x_dim)),
                         requires_grad=True),
            b_out=Tensor(np.zeros(x_dim), requires_grad=True),
            backbone_w=Tensor(rng.standard_normal((x_dim, x_dim))
                              / np.sqrt(x_dim)),
            x_dim=x_dim, cond_dim=cond_dim,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"denoiser.w_in": self.w_in, "denoiser.b_in": self.b_in,
                "denoiser.w_mid": self.w_mid, "denoiser.b_mid": self.b_mid,
                "denoiser.w_out": self.w_out, "denoiser.b_out": self.b_out,
                "denoiser.backbone.w": self.backbone_w}

    def forward(self, x_t: Tensor, t: np.ndarray, z_c: Tensor,
                num_steps: int) -> Tensor:
        if x_t.shape[1] != self.x_dim or z_c.shape[1] != self.cond_dim:
            raise ShapeError(
                f"denoiser built for x_dim={self.x_dim}, cond_dim={self.cond_dim}; "
                f"got {x_t.shape} / {z_c.shape}")
        mixed = ng.matmul(x_t, self.backbone_w)
        feats = Tensor(timestep_features(t, num_steps))
        h = ng.concat_cols([mixed, feats, z_c])
        h = ng.gelu(ng.add_bias(ng.matmul(h, self.w_in), self.b_in))
        h = ng.gelu(ng.add_bias(ng.matmul(h, self.w_mid), self.b_mid))
        return ng.add_bias(ng.matmul(h, self.w_out), self.b_out)


def prior_loss(denoiser: ToyDenoiser, schedule: DiffusionSchedule,
               x0: np.ndarray, z_c: Tensor,
               rng: np.random.Generator) -> Tensor:
    """Mean over the batch of ||eps - denoiser(x_t, t, z_c)||^2 with eps and t
    drawn from ``rng``. Gradients flow to the denoiser and through z_c."""
    n = x0.shape[0]
    if z_c.shape[0] != n:
        raise ShapeError(f"batch mismatch: x0 {x0.shape} vs z_c {z_c.shape}")
    t = rng.integers(1, schedule.num_steps + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    abar = schedule.alpha_bars[t - 1][:, None]
    x_t = Tensor(np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps)
    eps_hat = denoiser.forward(x_t, t, z_c, schedule.num_steps)
    diff = ng.sub(eps_hat, Tensor(eps))
    return ng.scale(ng.sum_all(ng.mul(diff, diff)), 1.0 / n)


def export_conditions(z_c: np.ndarray, path: str | Path,
                      stage: str = "inference") -> None:
    """Write condition vectors in the bank payload format (binary32 LE) with a
    small manifest recording shape and producing stage."""
    import json

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(z_c, dtype="<f4").tofile(path / "conditions.f32")
    (path / "conditions.json").write_text(json.dumps({
        "rows": int(z_c.shape[0]),
        "dim": int(z_c.shape[1]),
        "dtype": "float32-le",
        "source_stage": stage,
    }, indent=2, sort_keys=True) + "\n")


def load_conditions(path: str | Path) -> np.ndarray:
    import json

    path = Path(path)
    meta = json.loads((path / "conditions.json").read_text())
    raw = np.fromfile(path / "conditions.f32", dtype="<f4")
    return raw.reshape(meta["rows"], meta["dim"])
