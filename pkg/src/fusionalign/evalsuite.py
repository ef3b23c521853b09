"""Retrieval metrics, ablation runners, low-level image metrics (PixCorr,
SSIM), and embedding export."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import similarity
from .databank import EmbeddingBank, Branch, BrainRecording
from .errors import ContractError, DegenerateInputError, ProtocolError, ShapeError
from .fusion import BranchMask, hvf_forward
from .ndgrad import Tensor
from .trainer import (
    Checkpoint,
    RunConfig,
    model_from_checkpoint,
    prepare_alignment_data,
    train_alignment,
)

SYNTHETIC_CAVEAT = (
    "Synthetic-data run: published large-scale retrieval and reconstruction "
    "numbers require real recordings and pretrained encoders and are out of "
    "desk scope.")

EVAL_RESOLUTION = 256  # PixCorr/SSIM comparison size, bilinear


@dataclass
class RetrievalReport:
    k_way: int
    top1: float  # percent
    top5: float
    num_queries: int
    per_subject: dict[str, dict[str, float]]
    config: dict
    wall_clock_s: float
    caveat: str | None = None

    def validate(self) -> None:
        if not (0.0 <= self.top1 <= self.top5 <= 100.0):
            raise ContractError(
                f"accuracy ordering violated: top1={self.top1}, top5={self.top5}")
        if self.k_way < 2:
            raise ContractError(f"k_way must be >= 2, got {self.k_way}")

    def to_dict(self) -> dict:
        return {"k_way": self.k_way, "top1": self.top1, "top5": self.top5,
                "num_queries": self.num_queries,
                "per_subject": self.per_subject, "config": self.config,
                "wall_clock_s": self.wall_clock_s, "caveat": self.caveat}


def rank_queries(query_z: np.ndarray, gallery_z: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by descending cosine similarity per query.

    Ties resolve to the lowest gallery index (stable sort)."""
    qn = query_z / np.linalg.norm(query_z, axis=1, keepdims=True)
    gn = gallery_z / np.linalg.norm(gallery_z, axis=1, keepdims=True)
    sims = qn @ gn.T
    return np.argsort(-sims, axis=1, kind="stable"), sims


def _forward_embeddings(model, bank: EmbeddingBank, rows: np.ndarray,
                        mask: BranchMask | None):
    branches = [Tensor(bank.branch_matrix(b.branch_id, rows))
                for b in bank.branches]
    return hvf_forward(model.hvf, branches, mask).data


def evaluate_retrieval(ckpt: Checkpoint, bank: EmbeddingBank,
                       recordings: list[BrainRecording],
                       k_way: int | None = None,
                       mask: BranchMask | None = None,
                       seed: int = 0,
                       only_subjects: set[str] | None = None,
                       synthetic: bool = True) -> RetrievalReport:
    """Nearest-neighbor retrieval of fused visual embeddings from brain
    queries over the test gallery. k_way defaults to the full gallery."""
    t0 = time.perf_counter()
    model, config = model_from_checkpoint(ckpt)
    test_rows = bank.indices("test")
    rng = np.random.default_rng([seed, 3])
    if k_way is None:
        k_way = len(test_rows)
    if k_way > len(test_rows):
        raise ContractError(
            f"gallery has {len(test_rows)} stimuli, smaller than k_way={k_way}")
    if k_way < len(test_rows):
        test_rows = np.sort(rng.choice(test_rows, size=k_way, replace=False))
    gallery_ids = [bank.stimulus_ids[i] for i in test_rows]
    gallery_pos = {sid: j for j, sid in enumerate(gallery_ids)}

    signals, rows, subjects = prepare_alignment_data(
        config, bank, recordings, "test", only_subjects=only_subjects)
    keep = np.array([bank.stimulus_ids[r] in gallery_pos for r in rows])
    signals, rows = signals[keep], rows[keep]
    subjects = [s for s, k in zip(subjects, keep) if k]

    gallery_z = _forward_embeddings(model, bank, test_rows, mask)
    query_z = model.brain.forward(Tensor(signals)).data
    order, _ = rank_queries(query_z, gallery_z)
    truth = np.array([gallery_pos[bank.stimulus_ids[r]] for r in rows])
    ranks = np.argmax(order == truth[:, None], axis=1)

    def acc(rank_arr):
        return {"top1": 100.0 * float(np.mean(rank_arr == 0)),
                "top5": 100.0 * float(np.mean(rank_arr < 5))}

    per_subject = {}
    for subj in sorted(set(subjects)):
        sel = np.array([s == subj for s in subjects])
        per_subject[subj] = acc(ranks[sel])
    overall = acc(ranks)
    report = RetrievalReport(
        k_way=k_way, top1=overall["top1"], top5=overall["top5"],
        num_queries=len(ranks), per_subject=per_subject,
        config={"fingerprint": ckpt.meta.get("fingerprint"),
                "mask": mask.active if mask else None,
                "channels": config.channel_subset,
                "window_ms": config.window_ms,
                "seed": seed,
                "metric_resolution": EVAL_RESOLUTION},
        wall_clock_s=time.perf_counter() - t0,
        caveat=SYNTHETIC_CAVEAT if synthetic else None,
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


@dataclass
class AblationCellSpec:
    name: str
    mask: list[bool] | None = None          # reuse trained weights
    branch_subset: list[int] | None = None  # retrain on these branches
    channel_subset: str | list[str] | None = None  # retrain
    window_ms: tuple[float, float] | None = None   # retrain


@dataclass
class AblationGrid:
    cells: list[tuple[AblationCellSpec, RetrievalReport]] = field(
        default_factory=list)

    def validate(self) -> None:
        keys = {(r.k_way, r.config["seed"]) for _, r in self.cells}
        if len(keys) > 1:
            raise ProtocolError(
                f"ablation cells evaluated on different test partitions: {keys}")


def _subset_bank(bank: EmbeddingBank, branch_indices: list[int]) -> EmbeddingBank:
    branches = [bank.branches[i] for i in branch_indices]
    return EmbeddingBank(
        num_stimuli=bank.num_stimuli, branches=branches,
        stimulus_ids=bank.stimulus_ids, concept_labels=bank.concept_labels,
        splits=bank.splits,
        payload={b.branch_id: bank.payload[b.branch_id] for b in branches},
        latents=bank.latents)


def run_ablation(base_config: RunConfig, bank: EmbeddingBank,
                 recordings: list[BrainRecording],
                 cells: list[AblationCellSpec],
                 trained: Checkpoint | None = None,
                 k_way: int | None = None, seed: int = 0) -> AblationGrid:
    """Masking cells reuse ``trained``; encoder-subset/channel/window cells
    retrain with the shared seed. All cells share one test partition."""
    grid = AblationGrid()
    need_trained = trained is None and any(c.mask for c in cells)
    if need_trained:
        trained, _ = train_alignment(base_config, bank, recordings)
    for cell in cells:
        if cell.mask is not None:
            report = evaluate_retrieval(trained, bank, recordings,
                                        k_way=k_way, seed=seed,
                                        mask=BranchMask(cell.mask))
        else:
            cfg = RunConfig(**{**_config_dict(base_config),
                               "channel_subset": cell.channel_subset
                               or base_config.channel_subset,
                               "window_ms": cell.window_ms
                               or base_config.window_ms})
            cell_bank = bank
            if cell.branch_subset is not None:
                cell_bank = _subset_bank(bank, cell.branch_subset)
            ckpt, _ = train_alignment(cfg, cell_bank, recordings)
            report = evaluate_retrieval(ckpt, cell_bank, recordings,
                                        k_way=k_way, seed=seed)
        grid.cells.append((cell, report))
    grid.validate()
    return grid


def _config_dict(config: RunConfig) -> dict:
    from dataclasses import asdict
    return asdict(config)


# ---------------------------------------------------------------------------
# low-level image metrics
# ---------------------------------------------------------------------------


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.2989, 0.5870, 0.1140])
    return img


def resize_bilinear(img: np.ndarray, size: int = EVAL_RESOLUTION) -> np.ndarray:
    """Bilinear resize of a grayscale image to size x size (align-corners)."""
    img = to_grayscale(img)
    h, w = img.shape
    ys = np.linspace(0, h - 1, size)
    xs = np.linspace(0, w - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def pixcorr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over flattened pixels."""
    a = to_grayscale(a).ravel()
    b = to_grayscale(b).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"image sizes differ: {a.shape} vs {b.shape}")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac @ ac) * (bc @ bc))
    if denom == 0.0:
        raise DegenerateInputError("correlation undefined for a constant image")
    return float((ac @ bc) / denom)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Mean local SSIM over valid positions of a Gaussian window."""
    a = to_grayscale(a)
    b = to_grayscale(b)
    if a.shape != b.shape:
        raise ShapeError(f"image sizes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ContractError(
            f"image {a.shape} smaller than the {window}x{window} window")
    kern = _gaussian_kernel(window, sigma)
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = np.tensordot(wa, kern, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, kern, axes=([2, 3], [0, 1]))
    e_aa = np.tensordot(wa * wa, kern, axes=([2, 3], [0, 1]))
    e_bb = np.tensordot(wb * wb, kern, axes=([2, 3], [0, 1]))
    e_ab = np.tensordot(wa * wb, kern, axes=([2, 3], [0, 1]))
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
        ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_embeddings(ckpt: Checkpoint, bank: EmbeddingBank,
                      recordings: list[BrainRecording],
                      out_dir: str | Path,
                      mask: BranchMask | None = None) -> dict:
    """Write z_b, z_f, per-branch projections, and the query-gallery cosine
    similarity matrix in the bank payload format (binary32 LE)."""
    model, config = model_from_checkpoint(ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_rows = bank.indices("test")
    gallery_z = _forward_embeddings(model, bank, test_rows, mask)
    signals, rows, subjects = prepare_alignment_data(config, bank, recordings,
                                                     "test")
    query_z = model.brain.forward(Tensor(signals)).data
    _, sims = rank_queries(query_z, gallery_z)

    files = {"z_f.f32": gallery_z, "z_b.f32": query_z, "similarity.f32": sims}
    for b in bank.branches:
        proj = bank.branch_matrix(b.branch_id, test_rows) @ \
            dict(zip([x.branch_id for x in bank.branches],
                     model.hvf.branch_maps))[b.branch_id].data
        files[f"branch_proj_{b.branch_id}.f32"] = proj
    for name, arr in files.items():
        np.ascontiguousarray(arr, dtype="<f4").tofile(out / name)
    manifest = {
        "gallery_stimuli": [bank.stimulus_ids[i] for i in test_rows],
        "query_stimuli": [bank.stimulus_ids[r] for r in rows],
        "query_subjects": subjects,
        "shapes": {name: list(arr.shape) for name, arr in files.items()},
        "fingerprint": ckpt.meta.get("fingerprint"),
    }
    (out / "export.json").write_text(json.dumps(manifest, indent=2,
                                                sort_keys=True) + "\n")
    return manifest
