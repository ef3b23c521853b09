"""Image-folder discovery, split assignment, and bank writing.

The output directory matches the dataset format the fusionalign loader
expects: ``manifest.json`` plus one ``branch_<id>.f32`` little-endian
binary32 payload per branch, row-major over stimuli. An extra
``export_manifest.json`` records encoder provenance and preprocessing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import (
    PixelLatentEncoder,
    ProjectionEncoder,
    TorchvisionEncoder,
    preprocess_image,
)

BANK_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class ExportError(Exception):
    pass


@dataclass
class BranchSpec:
    """One encoder branch: backend 'projection', 'torchvision', or 'pixel'."""

    branch_id: str
    backend: str
    dim: int | None = None          # declared; checked against the encoder
    model_name: str | None = None   # torchvision only
    weights_path: str | None = None

    def build(self, image_size: int, seed: int):
        if self.backend == "projection":
            if self.dim is None:
                raise ExportError(f"branch {self.branch_id}: projection "
                                  "backend needs an explicit dim")
            return ProjectionEncoder(dim=self.dim, seed=seed)
        if self.backend == "pixel":
            return PixelLatentEncoder(image_hw=(image_size, image_size),
                                      seed=seed)
        if self.backend == "torchvision":
            if not self.model_name:
                raise ExportError(f"branch {self.branch_id}: torchvision "
                                  "backend needs model_name")
            return TorchvisionEncoder(model_name=self.model_name,
                                      weights_path=self.weights_path,
                                      seed=seed)
        raise ExportError(f"unknown backend {self.backend!r}")


@dataclass
class ExportSpec:
    branches: list[BranchSpec]
    image_size: int = 128
    test_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        ids = [b.branch_id for b in self.branches]
        if not ids:
            raise ExportError("at least one branch is required")
        if len(set(ids)) != len(ids):
            raise ExportError(f"duplicate branch ids: {ids}")
        if self.image_size % 8:
            raise ExportError("image_size must be divisible by 8")
        if not 0.0 < self.test_fraction < 1.0:
            raise ExportError("test_fraction must be in (0, 1)")


def discover_images(image_dir: str | Path) -> list[tuple[str, str, Path]]:
    """(stimulus_id, concept, path) triples, deterministically sorted.

    The concept is the parent directory name when images sit in
    subdirectories, otherwise the filename stem up to the last '_'.
    """
    root = Path(image_dir)
    if not root.is_dir():
        raise ExportError(f"image directory {root} does not exist")
    out = []
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.parent != root:
            concept = p.parent.name
        else:
            stem = p.stem
            concept = stem.rsplit("_", 1)[0] if "_" in stem else stem
        out.append((p.relative_to(root).as_posix(), concept, p))
    if not out:
        raise ExportError(f"no images found under {root}")
    return out


def assign_splits(concepts: list[str], test_fraction: float) -> list[str]:
    """Concept-disjoint split: the lexicographically last fraction of
    concepts goes to the test partition."""
    uniq = sorted(set(concepts))
    n_test = max(1, int(round(len(uniq) * test_fraction)))
    n_test = min(n_test, len(uniq) - 1)
    test = set(uniq[len(uniq) - n_test:])
    return ["test" if c in test else "train" for c in concepts]


def export_bank(image_dir: str | Path, spec: ExportSpec,
                out_dir: str | Path) -> dict:
    """Encode every image with every branch and write the dataset directory.

    A branch whose encoder output contradicts its declared dim aborts the
    export before any payload file is written.
    """
    spec.validate()
    stimuli = discover_images(image_dir)
    ids = [s for s, _, _ in stimuli]
    concepts = [c for _, c, _ in stimuli]
    splits = assign_splits(concepts, spec.test_fraction)

    images = np.stack([preprocess_image(p, spec.image_size)
                       for _, _, p in stimuli])
    payloads: dict[str, np.ndarray] = {}
    branch_meta = []
    for b in spec.branches:
        enc = b.build(spec.image_size, spec.seed)
        mat = enc.encode(images)
        if b.dim is not None and mat.shape[1] != b.dim:
            raise ExportError(
                f"branch {b.branch_id}: encoder produced dim {mat.shape[1]}, "
                f"manifest declares {b.dim}")
        payloads[b.branch_id] = mat
        meta = {"branch_id": b.branch_id,
                "name": b.model_name or b.backend,
                "dim": int(mat.shape[1]), "kind": enc.kind}
        if enc.kind == "pixel":
            meta["image_hw"] = [spec.image_size, spec.image_size]
        branch_meta.append(meta)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for bid, mat in payloads.items():
        np.ascontiguousarray(mat, dtype="<f4").tofile(out / f"branch_{bid}.f32")
    manifest = {
        "bank_version": BANK_VERSION,
        "num_stimuli": len(ids),
        "stimuli": [{"id": i, "concept": c, "split": s}
                    for i, c, s in zip(ids, concepts, splits)],
        "branches": branch_meta,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    export_manifest = {
        "bank_version": BANK_VERSION,
        "image_dir": str(image_dir),
        "images": ids,
        "seed": spec.seed,
        "preprocessing": {"resize": [spec.image_size, spec.image_size],
                          "resample": "bilinear", "scale": "[0,1] float32"},
        "encoders": [{"branch_id": b.branch_id, "backend": b.backend,
                      "model_name": b.model_name,
                      "weights_path": b.weights_path,
                      "dim": meta["dim"], "kind": meta["kind"]}
                     for b, meta in zip(spec.branches, branch_meta)],
    }
    (out / "export_manifest.json").write_text(
        json.dumps(export_manifest, indent=2, sort_keys=True) + "\n")
    return manifest
