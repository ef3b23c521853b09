"""On-disk dataset formats, preprocessing, and the synthetic generator.

A dataset directory holds one ``manifest.json`` plus raw little-endian
binary32 payloads: ``branch_<id>.f32`` (num_stimuli x dim, row-major),
``brain_<subject>.f32`` (num_stimuli x reps x C x T), and optionally
``latents.f32`` with the synthetic ground-truth codes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BankVersionError,
    ContractError,
    CorruptBankError,
    EmptyGroupError,
    MissingChannelError,
)

BANK_VERSION = 1

# 17 occipito-parietal channels, in the documented order.
O_PLUS_P_CHANNELS = [
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2",
]

CHANNEL_SETS = {
    "o_plus_p": O_PLUS_P_CHANNELS,
    "occipital": ["O1", "Oz", "O2"],
    "parietal": ["P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8"],
}


@dataclass
class Branch:
    branch_id: str
    name: str
    dim: int
    kind: str  # "semantic" | "pixel"
    image_hw: tuple[int, int] | None = None


@dataclass
class EmbeddingBank:
    """Precomputed per-stimulus embeddings from K encoder branches."""

    num_stimuli: int
    branches: list[Branch]
    stimulus_ids: list[str]
    concept_labels: list[str]
    splits: list[str]  # "train" | "test" per stimulus
    payload: dict[str, np.ndarray]  # branch_id -> (num_stimuli, dim) float32
    latents: np.ndarray | None = None  # synthetic ground truth, float32

    def validate(self) -> None:
        ids = [b.branch_id for b in self.branches]
        if len(set(ids)) != len(ids):
            raise CorruptBankError(f"duplicate branch ids: {ids}")
        for b in self.branches:
            if b.dim <= 0:
                raise CorruptBankError(f"branch {b.branch_id} has dim {b.dim}")
            mat = self.payload.get(b.branch_id)
            if mat is None:
                raise CorruptBankError(f"missing payload for branch {b.branch_id}")
            if mat.shape != (self.num_stimuli, b.dim):
                raise CorruptBankError(
                    f"branch {b.branch_id}: payload shape {mat.shape} does not "
                    f"match manifest ({self.num_stimuli}, {b.dim})")
            if b.kind == "pixel" and b.image_hw is not None:
                h, w = b.image_hw
                if b.dim != (h * w) // 16:
                    raise CorruptBankError(
                        f"pixel branch {b.branch_id}: dim {b.dim} != "
                        f"{h}*{w}/16 = {(h * w) // 16}")
        for name, seq in (("stimulus_ids", self.stimulus_ids),
                          ("concept_labels", self.concept_labels),
                          ("splits", self.splits)):
            if len(seq) != self.num_stimuli:
                raise CorruptBankError(
                    f"{name} length {len(seq)} != num_stimuli {self.num_stimuli}")
        train = {c for c, s in zip(self.concept_labels, self.splits) if s == "train"}
        test = {c for c, s in zip(self.concept_labels, self.splits) if s == "test"}
        overlap = train & test
        if overlap:
            raise CorruptBankError(
                f"zero-shot split violated; concepts in both partitions: "
                f"{sorted(overlap)[:5]}")

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split],
                        dtype=np.int64)

    def branch_matrix(self, branch_id: str, rows: np.ndarray | None = None) -> np.ndarray:
        mat = self.payload[branch_id].astype(np.float64)
        return mat if rows is None else mat[rows]


@dataclass
class BrainRecording:
    subject_id: str
    stimulus_id: str
    repetition_index: int
    channels: list[str]
    sample_rate_hz: float
    samples: np.ndarray  # (C, T)
    window_ms: tuple[float, float]

    def __post_init__(self):
        if self.samples.shape[0] != len(self.channels):
            raise CorruptBankError(
                f"samples rows {self.samples.shape[0]} != channels "
                f"{len(self.channels)}")
        if len(set(self.channels)) != len(self.channels):
            raise CorruptBankError("duplicate channel names")


@dataclass
class PreprocSpec:
    channel_subset: str | list[str] = "all"
    window_ms: tuple[float, float] | None = None  # None = full window
    average_repetitions: bool = True

    def resolve_channels(self, available: list[str]) -> list[str]:
        if isinstance(self.channel_subset, list):
            return list(self.channel_subset)
        if self.channel_subset == "all":
            return list(available)
        if self.channel_subset == "others":
            op = set(O_PLUS_P_CHANNELS)
            return [c for c in available if c not in op]
        if self.channel_subset in CHANNEL_SETS:
            return list(CHANNEL_SETS[self.channel_subset])
        raise ContractError(f"unknown channel subset {self.channel_subset!r}")


@dataclass
class SynthSpec:
    seed: int = 0
    num_train_stimuli: int = 200
    num_test_stimuli: int = 200
    branch_dims: list[int] = field(default_factory=lambda: [32, 24, 64])
    num_channels: int = 17
    num_timepoints: int = 50
    noise_sigma: float = 0.0
    latent_dim: int = 16
    branch_info_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    branch_noise_sigma: float = 0.05
    num_subjects: int = 1
    num_repetitions: int = 4
    pixel_branch_index: int | None = None  # branch treated as "pixel" kind

    def validate(self) -> None:
        if any(d <= 0 for d in self.branch_dims):
            raise ContractError(f"branch dims must be positive: {self.branch_dims}")
        if min(self.num_train_stimuli, self.num_test_stimuli, self.num_channels,
               self.num_timepoints, self.latent_dim, self.num_subjects,
               self.num_repetitions) <= 0:
            raise ContractError("all synthetic dimensions must be positive")
        if self.noise_sigma < 0 or self.branch_noise_sigma < 0:
            raise ContractError("noise sigmas must be >= 0")
        if len(self.branch_info_weights) != len(self.branch_dims):
            raise ContractError("branch_info_weights length must match branch_dims")
        if any(w < 0 for w in self.branch_info_weights) or \
                not any(w > 0 for w in self.branch_info_weights):
            raise ContractError("info weights must be nonnegative and not all zero")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _write_f32(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape))
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != expected:
        raise CorruptBankError(
            f"{path.name}: expected {expected} float32 values, found {raw.size}")
    return raw.reshape(shape)


def save_bank(bank: EmbeddingBank, dataset_dir: str | Path,
              recordings: list[BrainRecording] | None = None) -> None:
    bank.validate()
    d = Path(dataset_dir)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "bank_version": BANK_VERSION,
        "num_stimuli": bank.num_stimuli,
        "stimuli": [
            {"id": s, "concept": c, "split": sp}
            for s, c, sp in zip(bank.stimulus_ids, bank.concept_labels, bank.splits)
        ],
        "branches": [
            {"branch_id": b.branch_id, "name": b.name, "dim": b.dim,
             "kind": b.kind,
             **({"image_hw": list(b.image_hw)} if b.image_hw else {})}
            for b in bank.branches
        ],
    }
    for b in bank.branches:
        _write_f32(d / f"branch_{b.branch_id}.f32", bank.payload[b.branch_id])
    if bank.latents is not None:
        manifest["latent_dim"] = int(bank.latents.shape[1])
        _write_f32(d / "latents.f32", bank.latents)
    if recordings:
        by_subject: dict[str, list[BrainRecording]] = {}
        for r in recordings:
            by_subject.setdefault(r.subject_id, []).append(r)
        ref = recordings[0]
        reps = max(r.repetition_index for r in recordings) + 1
        manifest["brain"] = {
            "subjects": sorted(by_subject),
            "channels": ref.channels,
            "sample_rate_hz": ref.sample_rate_hz,
            "window_ms": list(ref.window_ms),
            "repetitions": reps,
        }
        order = {sid: i for i, sid in enumerate(bank.stimulus_ids)}
        shape = (bank.num_stimuli, reps, len(ref.channels), ref.samples.shape[1])
        for subj, recs in by_subject.items():
            cube = np.zeros(shape, dtype=np.float32)
            for r in recs:
                cube[order[r.stimulus_id], r.repetition_index] = r.samples
            _write_f32(d / f"brain_{subj}.f32", cube)
    (d / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bank(dataset_dir: str | Path) -> EmbeddingBank:
    d = Path(dataset_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    version = manifest.get("bank_version")
    if version != BANK_VERSION:
        raise BankVersionError(f"unsupported bank_version {version!r}")
    n = int(manifest["num_stimuli"])
    branches = [
        Branch(b["branch_id"], b["name"], int(b["dim"]), b["kind"],
               tuple(b["image_hw"]) if "image_hw" in b else None)
        for b in manifest["branches"]
    ]
    payload = {}
    for b in branches:
        try:
            payload[b.branch_id] = _read_f32(d / f"branch_{b.branch_id}.f32",
                                             (n, b.dim))
        except CorruptBankError as e:
            raise CorruptBankError(f"branch {b.branch_id}: {e}") from None
    latents = None
    if "latent_dim" in manifest:
        latents = _read_f32(d / "latents.f32", (n, int(manifest["latent_dim"])))
    bank = EmbeddingBank(
        num_stimuli=n,
        branches=branches,
        stimulus_ids=[s["id"] for s in manifest["stimuli"]],
        concept_labels=[s["concept"] for s in manifest["stimuli"]],
        splits=[s["split"] for s in manifest["stimuli"]],
        payload=payload,
        latents=latents,
    )
    bank.validate()
    return bank


def load_recordings(dataset_dir: str | Path,
                    subjects: list[str] | None = None) -> list[BrainRecording]:
    d = Path(dataset_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if "brain" not in manifest:
        raise CorruptBankError("dataset has no brain recordings")
    brain = manifest["brain"]
    stim_ids = [s["id"] for s in manifest["stimuli"]]
    n = int(manifest["num_stimuli"])
    reps = int(brain["repetitions"])
    channels = list(brain["channels"])
    t = None
    recordings = []
    for subj in subjects or brain["subjects"]:
        path = d / f"brain_{subj}.f32"
        raw = np.fromfile(path, dtype="<f4")
        per = n * reps * len(channels)
        if raw.size % per != 0:
            raise CorruptBankError(
                f"{path.name}: size {raw.size} not divisible by "
                f"stimuli*reps*channels = {per}")
        t = raw.size // per
        cube = raw.reshape(n, reps, len(channels), t)
        for i, sid in enumerate(stim_ids):
            for r in range(reps):
                recordings.append(BrainRecording(
                    subject_id=subj, stimulus_id=sid, repetition_index=r,
                    channels=channels,
                    sample_rate_hz=float(brain["sample_rate_hz"]),
                    samples=cube[i, r].astype(np.float64),
                    window_ms=tuple(brain["window_ms"])))
    return recordings


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def preprocess(recordings: list[BrainRecording],
               spec: PreprocSpec) -> dict[tuple[str, str], np.ndarray]:
    """Channel selection, time cropping, optional repetition averaging.

    Returns a (subject_id, stimulus_id) -> (R, C', T') map; R collapses to 1
    when averaging is enabled. Channel order follows the requested subset,
    time cropping
    uses floor(t * rate) with exclusive end.
    """
    if not recordings:
        raise EmptyGroupError("no recordings to preprocess")
    groups: dict[tuple[str, str], list[BrainRecording]] = {}
    for r in recordings:
        groups.setdefault((r.subject_id, r.stimulus_id), []).append(r)
    out: dict[tuple[str, str], np.ndarray] = {}
    for key, recs in groups.items():
        recs.sort(key=lambda r: r.repetition_index)
        ref = recs[0]
        wanted = spec.resolve_channels(ref.channels)
        index = {c: i for i, c in enumerate(ref.channels)}
        missing = [c for c in wanted if c not in index]
        if missing:
            raise MissingChannelError(
                f"channel {missing[0]!r} not present for subject "
                f"{ref.subject_id}")
        rows = [index[c] for c in wanted]
        rate = ref.sample_rate_hz
        ws, we = ref.window_ms
        t_total = ref.samples.shape[1]
        if spec.window_ms is None:
            lo, hi = 0, t_total
        else:
            t0, t1 = spec.window_ms
            if not (ws <= t0 < t1 <= we):
                raise ContractError(
                    f"window {spec.window_ms} outside recording bounds "
                    f"[{ws}, {we}]")
            lo = int(np.floor((t0 - ws) / 1000.0 * rate))
            hi = int(np.floor((t1 - ws) / 1000.0 * rate))
        stack = np.stack([r.samples[rows, lo:hi] for r in recs])
        if spec.average_repetitions:
            stack = stack.mean(axis=0, keepdims=True)
        out[key] = stack
    return out


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def generate_synthetic(spec: SynthSpec) -> tuple[EmbeddingBank,
                                                 list[BrainRecording],
                                                 np.ndarray]:
    """Draw a shared latent per stimulus; branches and brain signals are fixed
    random linear images of it, so fusion and retrieval have a ground truth.

    Returns (bank, recordings, latents) where latents is (N, latent_dim).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_train_stimuli + spec.num_test_stimuli
    u = rng.standard_normal((n, spec.latent_dim))

    branches, payload = [], {}
    for k, (dim, w) in enumerate(zip(spec.branch_dims, spec.branch_info_weights)):
        mix = rng.standard_normal((spec.latent_dim, dim)) / np.sqrt(spec.latent_dim)
        emb = w * (u @ mix)
        emb = emb + spec.branch_noise_sigma * rng.standard_normal(emb.shape)
        kind = "pixel" if k == spec.pixel_branch_index else "semantic"
        branches.append(Branch(f"b{k}", f"synth_branch_{k}", dim, kind))
        payload[f"b{k}"] = emb.astype(np.float32)

    c, t = spec.num_channels, spec.num_timepoints
    if c == 17:
        channels = list(O_PLUS_P_CHANNELS)
    else:
        channels = [f"CH{i:03d}" for i in range(c)]
    # 1-second window: sample rate equals the number of timepoints.
    recordings = []
    for s in range(spec.num_subjects):
        subj = f"subj{s + 1:02d}"
        mix = rng.standard_normal((spec.latent_dim, c * t)) / np.sqrt(spec.latent_dim)
        clean = u @ mix
        for i in range(n):
            for rep in range(spec.num_repetitions):
                sig = clean[i] + spec.noise_sigma * rng.standard_normal(c * t)
                recordings.append(BrainRecording(
                    subject_id=subj, stimulus_id=f"s{i:05d}",
                    repetition_index=rep, channels=channels,
                    sample_rate_hz=float(t),
                    samples=sig.reshape(c, t).astype(np.float32).astype(np.float64),
                    window_ms=(0.0, 1000.0)))

    bank = EmbeddingBank(
        num_stimuli=n,
        branches=branches,
        stimulus_ids=[f"s{i:05d}" for i in range(n)],
        concept_labels=[f"c{i:05d}" for i in range(n)],
        splits=["train"] * spec.num_train_stimuli + ["test"] * spec.num_test_stimuli,
        payload=payload,
        latents=u.astype(np.float32),
    )
    bank.validate()
    return bank, recordings, u.astype(np.float32).astype(np.float64)
