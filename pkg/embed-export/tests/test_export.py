import hashlib
import json
import warnings
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from embed_export.cli import main
from embed_export.encoders import PixelLatentEncoder, preprocess_image
from embed_export.export import (
    BranchSpec,
    ExportError,
    ExportSpec,
    assign_splits,
    discover_images,
    export_bank,
)


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    """Six concept folders, two images each, distinct per-concept colors."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    for c in range(6):
        d = root / f"concept{c}"
        d.mkdir()
        base = rng.integers(0, 256, size=3)
        for i in range(2):
            px = np.clip(base + rng.integers(-30, 30, size=(40, 40, 3)),
                         0, 255).astype(np.uint8)
            Image.fromarray(px).save(d / f"img{i}.png")
    return root


def _spec(**kw):
    base = dict(
        branches=[
            BranchSpec("sem_a", "projection", dim=32),
            BranchSpec("sem_b", "projection", dim=16),
            BranchSpec("vae", "pixel"),
        ],
        image_size=128, test_fraction=0.5, seed=0)
    base.update(kw)
    return ExportSpec(**base)


def test_discover_sorted_with_concepts(image_dir):
    found = discover_images(image_dir)
    assert len(found) == 12
    assert found == sorted(found)
    assert found[0][1] == "concept0"


def test_split_is_concept_disjoint():
    concepts = ["a", "a", "b", "c", "c", "d"]
    splits = assign_splits(concepts, 0.5)
    train = {c for c, s in zip(concepts, splits) if s == "train"}
    test = {c for c, s in zip(concepts, splits) if s == "test"}
    assert train and test and not (train & test)


def test_preprocess_shape_and_range(image_dir):
    path = next(image_dir.rglob("*.png"))
    img = preprocess_image(path, 64)
    assert img.shape == (64, 64, 3)
    assert img.dtype == np.float32
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_pixel_latent_dim_is_hw_over_16():
    enc = PixelLatentEncoder(image_hw=(128, 128))
    assert enc.dim == 1024
    assert PixelLatentEncoder(image_hw=(64, 64)).dim == 256


def test_export_writes_bank_format(image_dir, tmp_path):
    out = tmp_path / "bank"
    manifest = export_bank(image_dir, _spec(), out)
    assert manifest["num_stimuli"] == 12
    by_id = {b["branch_id"]: b for b in manifest["branches"]}
    assert by_id["vae"]["dim"] == 1024  # 128*128/16
    assert by_id["vae"]["kind"] == "pixel"
    assert (out / "branch_vae.f32").stat().st_size == 12 * 1024 * 4
    assert (out / "branch_sem_a.f32").stat().st_size == 12 * 32 * 4
    meta = json.loads((out / "export_manifest.json").read_text())
    assert meta["preprocessing"]["resize"] == [128, 128]


def test_declared_dim_mismatch_aborts_before_writing(image_dir, tmp_path):
    out = tmp_path / "bank"
    spec = _spec(branches=[BranchSpec("sem_a", "projection", dim=32),
                           BranchSpec("vae", "pixel", dim=999)])
    with pytest.raises(ExportError, match="declares 999"):
        export_bank(image_dir, spec, out)
    assert not out.exists() or not list(out.glob("*.f32"))


def test_export_deterministic(image_dir, tmp_path):
    def tree_hash(root):
        h = hashlib.sha256()
        for p in sorted(Path(root).rglob("*")):
            if p.is_file():
                h.update(p.name.encode() + p.read_bytes())
        return h.hexdigest()

    a, b = tmp_path / "a", tmp_path / "b"
    export_bank(image_dir, _spec(), a)
    export_bank(image_dir, _spec(), b)
    assert tree_hash(a) == tree_hash(b)


def test_cli_round_trip(image_dir, tmp_path, capsys):
    out = tmp_path / "bank"
    assert main(["--images", str(image_dir), "--out", str(out),
                 "--branch", "sem:projection:24", "--branch", "vae:pixel",
                 "--size", "64", "--seed", "7"]) == 0
    printed = capsys.readouterr().out
    assert "12 stimuli" in printed and "vae=256" in printed
    assert main(["--images", str(tmp_path / "nope"), "--out", str(out)]) == 2


def test_bank_interop_with_primary(image_dir, tmp_path):
    """Acceptance gate: the exported bank loads through the fusionalign
    validator with zero warnings and supports a short alignment run."""
    fusionalign = pytest.importorskip("fusionalign")
    from fusionalign import databank
    from fusionalign.trainer import desk_config, train_alignment

    out = tmp_path / "bank"
    export_bank(image_dir, _spec(), out)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        bank = databank.load_bank(out)
    bank.validate()
    pixel = [b for b in bank.branches if b.kind == "pixel"][0]
    assert pixel.dim == (pixel.image_hw[0] * pixel.image_hw[1]) // 16 == 1024

    # pair the stimuli with synthetic recordings and align briefly
    rng = np.random.default_rng(1)
    recordings = [
        databank.BrainRecording(
            subject_id="subj01", stimulus_id=sid, repetition_index=0,
            channels=["O1", "Oz", "O2"], sample_rate_hz=10.0,
            samples=rng.standard_normal((3, 10)), window_ms=(0.0, 1000.0))
        for sid in bank.stimulus_ids
    ]
    cfg = desk_config(stage="align_retrieval", epochs=2, batch_size=8,
                      seed=1, d=32, d_hidden=32)
    _, trace = train_alignment(cfg, bank, recordings)
    assert trace and all(np.isfinite(l) for _, _, l in trace)


def test_torchvision_backend_if_available(image_dir, tmp_path):
    pytest.importorskip("torch")
    pytest.importorskip("torchvision")
    out = tmp_path / "bank"
    spec = _spec(branches=[
        BranchSpec("res", "torchvision", model_name="resnet18"),
        BranchSpec("vae", "pixel"),
    ], image_size=64)
    manifest = export_bank(image_dir, spec, out)
    by_id = {b["branch_id"]: b for b in manifest["branches"]}
    assert by_id["res"]["dim"] == 512
    first = (out / "branch_res.f32").read_bytes()
    export_bank(image_dir, spec, tmp_path / "bank2")
    assert (tmp_path / "bank2" / "branch_res.f32").read_bytes() == first
