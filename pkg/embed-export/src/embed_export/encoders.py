"""Encoder backends.

Every encoder maps a batch of preprocessed images (n, H, W, 3) float32 in
[0, 1] to a (n, dim) float32 matrix. Semantic encoders emit one global
token per image; the pixel encoder emits a flattened spatial latent whose
dimension is H*W/16 (4 channels at 1/8 resolution on each axis).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


def preprocess_image(path: str | Path, size: int) -> np.ndarray:
    """Deterministic canonical preprocessing: RGB convert, bilinear resize
    to size x size, scale to [0, 1] float32."""
    with Image.open(path) as img:
        img = img.convert("RGB").resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


@dataclass
class ProjectionEncoder:
    """Seeded Gaussian projection of the flattened image to a global token.

    A deterministic stand-in used when no pretrained weights are present
    on disk; the choice is recorded in the export manifest.
    """

    dim: int
    seed: int = 0
    kind: str = "semantic"

    def encode(self, images: np.ndarray) -> np.ndarray:
        flat = images.reshape(images.shape[0], -1).astype(np.float64)
        rng = np.random.default_rng([self.seed, flat.shape[1]])
        w = rng.standard_normal((flat.shape[1], self.dim)) / np.sqrt(flat.shape[1])
        return (flat @ w).astype(np.float32)


@dataclass
class PixelLatentEncoder:
    """Spatial latent: each 8x8x3 block projects to 4 channels, flattened.

    Output dim is (H/8)*(W/8)*4 = H*W/16 for square inputs divisible by 8.
    """

    image_hw: tuple[int, int]
    seed: int = 0
    kind: str = "pixel"

    @property
    def dim(self) -> int:
        h, w = self.image_hw
        return (h * w) // 16

    def encode(self, images: np.ndarray) -> np.ndarray:
        n, h, w, c = images.shape
        if (h, w) != tuple(self.image_hw) or h % 8 or w % 8:
            raise ValueError(
                f"pixel encoder built for {self.image_hw}, images are {h}x{w}")
        blocks = images.reshape(n, h // 8, 8, w // 8, 8, c)
        blocks = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 8, w // 8, 192)
        rng = np.random.default_rng([self.seed, 192])
        proj = rng.standard_normal((192, 4)) / np.sqrt(192)
        latent = blocks.astype(np.float64) @ proj
        return latent.reshape(n, -1).astype(np.float32)


@dataclass
class TorchvisionEncoder:
    """Global average-pooled features of a torchvision backbone.

    ``weights_path`` points at a locally stored state dict; without one the
    backbone runs with a seeded random initialization, which keeps exports
    reproducible on machines with no downloaded weights.
    """

    model_name: str
    weights_path: str | None = None
    seed: int = 0
    kind: str = "semantic"
    _model: object | None = None
    _dim: int | None = None

    def _build(self):
        import torch
        from torchvision import models

        if self._model is None:
            torch.manual_seed(self.seed)
            net = models.get_model(self.model_name, weights=None)
            if self.weights_path:
                net.load_state_dict(torch.load(self.weights_path,
                                               map_location="cpu"))
            # strip the classifier head; pool whatever spatial map remains
            trunk = torch.nn.Sequential(*list(net.children())[:-1])
            trunk.eval()
            self._model = trunk
        return self._model

    @property
    def dim(self) -> int:
        if self._dim is None:
            import torch

            trunk = self._build()
            with torch.no_grad():
                probe = torch.zeros(1, 3, 64, 64)
                self._dim = int(trunk(probe).flatten(1).shape[1])
        return self._dim

    def encode(self, images: np.ndarray) -> np.ndarray:
        import torch

        trunk = self._build()
        batch = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
        with torch.no_grad():
            feats = trunk(batch).flatten(1)
        return feats.numpy().astype(np.float32)
