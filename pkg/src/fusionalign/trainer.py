"""Training orchestration: prior pretraining (stage i), brain-fusion
alignment (stage ii), plain retrieval alignment, checkpoint I/O, seeding,
and freeze-flag enforcement via per-epoch checksums."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .align import TemperatureParam, infonce_loss, similarity
from .brainproj import LinearBackbone, MbpParams, flatten_signals
from .databank import EmbeddingBank, BrainRecording, PreprocSpec, preprocess
from .errors import (
    CheckpointVersionError,
    ContractError,
    CorruptCheckpointError,
    NumericError,
    ShapeError,
)
from .fusion import BranchMask, HvfParams, hvf_forward
from .ndgrad import Tape, Tensor, backward
from .optim import AdamWState, LrSchedule, adamw_step, lr_at
from .prior import DiffusionSchedule, ProjectorParams, ToyDenoiser, prior_loss, project_condition

CHECKPOINT_MAGIC = b"FUSIONALIGN-CKPT v1\n"
CHECKPOINT_VERSION = 1

STAGES = ("align_retrieval", "prior_pretrain", "brain_fusion_align")


@dataclass
class RunConfig:
    stage: str = "align_retrieval"
    epochs: int = 25
    batch_size: int = 1024
    peak_lr: float = 5e-4
    warmup_steps: int = 10
    seed: int = 0
    d: int = 1024
    d_hidden: int = 1024
    d_c: int = 4096
    denoiser_width: int = 128
    diffusion_steps: int = 50
    weight_decay: float = 0.01
    drop_last: bool = True
    tau_init: float = 0.07
    channel_subset: str | list[str] = "all"
    window_ms: tuple[float, float] | None = None
    average_repetitions: bool = True
    branch_mask: list[bool] | None = None
    holdout_subject: str | None = None
    dataset: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}; one of {STAGES}")

    def preproc_spec(self) -> PreprocSpec:
        return PreprocSpec(channel_subset=self.channel_subset,
                           window_ms=tuple(self.window_ms) if self.window_ms else None,
                           average_repetitions=self.average_repetitions)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_config(**overrides) -> RunConfig:
    """Small-dimension config so full runs finish in seconds on one core."""
    base = dict(epochs=30, batch_size=64, d=64, d_hidden=64, d_c=128,
                denoiser_width=64, diffusion_steps=20)
    base.update(overrides)
    return RunConfig(**base)


@dataclass
class Model:
    d: int
    branch_dims: list[int]
    hvf: HvfParams | None = None
    brain: object | None = None  # any BrainBackbone; MbpParams by default
    temp: TemperatureParam | None = None
    projector: ProjectorParams | None = None
    denoiser: ToyDenoiser | None = None
    signal_len: int | None = None
    x_dim: int | None = None
    frozen: set = field(default_factory=set)  # group names

    def groups(self) -> dict[str, dict[str, Tensor]]:
        out = {}
        if self.hvf is not None:
            out["hvf"] = self.hvf.tensors()
        if self.brain is not None:
            out["brain"] = self.brain.tensors()
        if self.temp is not None:
            out["temp"] = self.temp.tensors()
        if self.projector is not None:
            out["projector"] = self.projector.tensors()
        if self.denoiser is not None:
            tens = self.denoiser.tensors()
            out["denoiser"] = {k: v for k, v in tens.items()
                               if not k.startswith("denoiser.backbone")}
            out["backbone"] = {k: v for k, v in tens.items()
                               if k.startswith("denoiser.backbone")}
        return out

    def trainable(self) -> dict[str, Tensor]:
        params = {}
        for group, tens in self.groups().items():
            if group in self.frozen or group == "backbone":
                continue
            params.update(tens)
        return params

    def frozen_tensors(self) -> dict[str, Tensor]:
        params = {}
        for group, tens in self.groups().items():
            if group in self.frozen or group == "backbone":
                params.update(tens)
        return params


def checksum(t: Tensor) -> str:
    return hashlib.sha256(t.data.tobytes()).hexdigest()


@dataclass
class Checkpoint:
    meta: dict
    sections: dict[str, dict[str, np.ndarray]]

    def require(self, section: str) -> dict[str, np.ndarray]:
        if section not in self.sections:
            raise CorruptCheckpointError(
                f"checkpoint is missing required section {section!r}")
        return self.sections[section]


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------


def build_model(config: RunConfig, branch_dims: list[int],
                signal_len: int | None = None,
                x_dim: int | None = None) -> Model:
    rng = np.random.default_rng([config.seed, 0])
    model = Model(d=config.d, branch_dims=list(branch_dims),
                  signal_len=signal_len, x_dim=x_dim)
    model.hvf = HvfParams.init(rng, branch_dims, d=config.d,
                               d_hidden=config.d_hidden)
    if config.stage in ("align_retrieval", "brain_fusion_align"):
        if signal_len is None:
            raise ContractError("alignment stages need the brain signal length")
        model.brain = MbpParams.init(rng, signal_len, d=config.d,
                                     d_hidden=config.d_hidden)
        model.temp = TemperatureParam.init(config.tau_init)
    if config.stage in ("prior_pretrain", "brain_fusion_align"):
        if x_dim is None:
            raise ContractError("prior stages need the diffusion latent dim")
        model.projector = ProjectorParams.init(rng, d=config.d,
                                               d_hidden=config.d_c)
        model.denoiser = ToyDenoiser.init(rng, x_dim, config.d,
                                          width=config.denoiser_width)
    if config.stage == "brain_fusion_align":
        model.frozen = {"hvf", "projector", "denoiser"}
    return model


def model_to_checkpoint(model: Model, config: RunConfig, step: int,
                        opt: AdamWState | None = None) -> Checkpoint:
    sections: dict[str, dict[str, np.ndarray]] = {}
    for group, tens in model.groups().items():
        target = "denoiser" if group == "backbone" else group
        sections.setdefault(target, {})
        for name, t in tens.items():
            sections[target][name] = t.data.copy()
    if opt is not None:
        optsec = {}
        for name, arr in opt.m.items():
            optsec[f"m/{name}"] = arr.copy()
        for name, arr in opt.v.items():
            optsec[f"v/{name}"] = arr.copy()
        sections["optim"] = optsec
    meta = {
        "version": CHECKPOINT_VERSION,
        "stage": config.stage,
        "seed": config.seed,
        "step": step,
        "d": model.d,
        "branch_dims": model.branch_dims,
        "signal_len": model.signal_len,
        "x_dim": model.x_dim,
        "frozen": sorted(model.frozen),
        "config": asdict(config),
        "opt_t": opt.t if opt is not None else 0,
        "fingerprint": config.fingerprint(),
    }
    return Checkpoint(meta=meta, sections=sections)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Model, RunConfig]:
    cfg_dict = dict(ckpt.meta["config"])
    if cfg_dict.get("window_ms"):
        cfg_dict["window_ms"] = tuple(cfg_dict["window_ms"])
    config = RunConfig(**cfg_dict)
    model = build_model(config, ckpt.meta["branch_dims"],
                        signal_len=ckpt.meta["signal_len"],
                        x_dim=ckpt.meta["x_dim"])
    model.frozen = set(ckpt.meta.get("frozen", []))
    for group, tens in model.groups().items():
        section = "denoiser" if group == "backbone" else group
        stored = ckpt.require(section)
        for name, t in tens.items():
            if name not in stored:
                raise CorruptCheckpointError(
                    f"section {section!r} missing tensor {name!r}")
            arr = stored[name]
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"section {section!r}: tensor {name!r} has shape "
                    f"{arr.shape}, expected {t.data.shape}")
            t.data = arr.copy()
    return model, config


# ---------------------------------------------------------------------------
# checkpoint serialization: text header + float64 LE payload
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries = []
    arrays = []
    for section in sorted(ckpt.sections):
        for key in sorted(ckpt.sections[section]):
            # np.ascontiguousarray would promote 0-d arrays to shape (1,)
            arr = np.asarray(ckpt.sections[section][key], dtype="<f8", order="C")
            entries.append({"section": section, "key": key,
                            "shape": list(arr.shape)})
            arrays.append(arr)
    header = json.dumps({"meta": ckpt.meta, "entries": entries},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(f"{len(header)}\n".encode())
        f.write(header)
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpointError(f"{path}: bad magic")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header_len = int(rest[:nl])
    header = json.loads(rest[nl + 1: nl + 1 + header_len])
    meta = header["meta"]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {meta.get('version')!r}")
    payload = rest[nl + 1 + header_len:]
    sections: dict[str, dict[str, np.ndarray]] = {}
    offset = 0
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        nbytes = count * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(
                f"truncated payload in section {e['section']!r} "
                f"(tensor {e['key']!r})")
        arr = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
        sections.setdefault(e["section"], {})[e["key"]] = arr
        offset += nbytes
    return Checkpoint(meta=meta, sections=sections)


def optimizer_from_checkpoint(ckpt: Checkpoint, config: RunConfig,
                              model: Model) -> AdamWState:
    opt = AdamWState(weight_decay=config.weight_decay,
                     no_decay={"temp.log_tau"})
    opt.t = int(ckpt.meta.get("opt_t", 0))
    for key, arr in ckpt.sections.get("optim", {}).items():
        kind, name = key.split("/", 1)
        getattr(opt, kind)[name] = arr.copy()
    return opt


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def prepare_alignment_data(config: RunConfig, bank: EmbeddingBank,
                           recordings: list[BrainRecording], split: str,
                           exclude_subjects: set[str] | None = None,
                           only_subjects: set[str] | None = None):
    """Paired (signals, bank rows, subjects) for one split, ordered
    deterministically by (subject, stimulus, repetition)."""
    proc = preprocess(recordings, config.preproc_spec())
    row_of = {sid: i for i, sid in enumerate(bank.stimulus_ids)}
    in_split = {sid for sid, s in zip(bank.stimulus_ids, bank.splits)
                if s == split}
    signals, rows, subjects = [], [], []
    for (subj, stim) in sorted(proc):
        if stim not in in_split:
            continue
        if exclude_subjects and subj in exclude_subjects:
            continue
        if only_subjects and subj not in only_subjects:
            continue
        for rep in proc[(subj, stim)]:
            signals.append(rep.reshape(-1))
            rows.append(row_of[stim])
            subjects.append(subj)
    if not signals:
        raise ContractError(f"no paired data for split {split!r}")
    return np.array(signals), np.array(rows, dtype=np.int64), subjects


def _batches(n: int, batch_size: int, rng: np.random.Generator,
             drop_last: bool):
    perm = rng.permutation(n)
    if n <= batch_size:
        yield perm
        return
    stop = n - (n % batch_size) if drop_last else n
    for lo in range(0, stop, batch_size):
        yield perm[lo:lo + batch_size]


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def _check_frozen(before: dict[str, str], model: Model, where: str) -> None:
    for name, t in model.frozen_tensors().items():
        if checksum(t) != before[name]:
            raise ContractError(
                f"frozen tensor {name!r} changed during {where}")


def train_alignment(config: RunConfig, bank: EmbeddingBank,
                    recordings: list[BrainRecording],
                    init_checkpoint: Checkpoint | None = None,
                    model: Model | None = None):
    """InfoNCE alignment of brain embeddings to fused visual embeddings.

    stage align_retrieval trains HVF+MBP+temperature jointly; stage
    brain_fusion_align loads the stage-i prior and updates the brain side
    (and temperature) only. Returns (checkpoint, loss_trace).
    """
    if config.stage not in ("align_retrieval", "brain_fusion_align"):
        raise ContractError(f"train_alignment got stage {config.stage!r}")
    exclude = {config.holdout_subject} if config.holdout_subject else None
    signals, rows, _ = prepare_alignment_data(config, bank, recordings,
                                              "train", exclude_subjects=exclude)
    branch_mats = [bank.branch_matrix(b.branch_id) for b in bank.branches]
    if model is None:
        if config.stage == "brain_fusion_align":
            if init_checkpoint is None:
                raise ContractError(
                    "brain_fusion_align requires a stage-i checkpoint")
            init_checkpoint.require("projector")
            prior_model, _ = model_from_checkpoint(init_checkpoint)
            model = build_model(config,
                                [b.dim for b in bank.branches],
                                signal_len=signals.shape[1],
                                x_dim=init_checkpoint.meta["x_dim"])
            # adopt the pretrained visual-side tensors, then freeze them
            for group in ("hvf", "projector", "denoiser", "backbone"):
                src = prior_model.groups().get(group, {})
                dst = model.groups().get(group, {})
                for name, t in dst.items():
                    t.data = src[name].data.copy()
            model.frozen = {"hvf", "projector", "denoiser"}
        else:
            model = build_model(config, [b.dim for b in bank.branches],
                                signal_len=signals.shape[1])
    if signals.shape[1] != model.signal_len:
        raise ShapeError(
            f"preprocessed signal length {signals.shape[1]} != model "
            f"signal_len {model.signal_len}")
    mask = BranchMask(config.branch_mask) if config.branch_mask else None

    n = signals.shape[0]
    steps_per_epoch = max(1, n // config.batch_size) if config.drop_last \
        else int(np.ceil(n / config.batch_size))
    if n <= config.batch_size:
        steps_per_epoch = 1
    total_steps = config.epochs * steps_per_epoch
    schedule = LrSchedule(peak_lr=config.peak_lr,
                          warmup_steps=min(config.warmup_steps, total_steps - 1),
                          total_steps=total_steps)
    opt = AdamWState(weight_decay=config.weight_decay,
                     no_decay={"temp.log_tau"})
    shuffle_rng = np.random.default_rng([config.seed, 1])
    frozen_before = {k: checksum(t) for k, t in model.frozen_tensors().items()}
    trace = []
    step = 0
    for epoch in range(config.epochs):
        for batch in _batches(n, config.batch_size, shuffle_rng,
                              config.drop_last):
            lr = lr_at(schedule, step)
            with Tape() as tape:
                branches = [Tensor(m[batch]) for m in branch_mats]
                zf = hvf_forward(model.hvf, branches, mask)
                zb = model.brain.forward(Tensor(signals[batch]))
                sim = similarity(zb, zf, model.temp)
                try:
                    loss = infonce_loss(sim)
                except NumericError as e:
                    raise NumericError(f"non-finite loss at step {step}") from e
                backward(loss, tape)
            adamw_step(model.trainable(), opt, lr)
            model.temp.clamp()
            trace.append((step, lr, loss.item()))
            step += 1
        _check_frozen(frozen_before, model, f"epoch {epoch}")
    return model_to_checkpoint(model, config, step, opt), trace


def _prior_x0(bank: EmbeddingBank) -> np.ndarray:
    """Diffusion target per stimulus: the pixel-kind branch latent when
    declared, otherwise the synthetic ground-truth latent."""
    for b in bank.branches:
        if b.kind == "pixel":
            return bank.branch_matrix(b.branch_id)
    if bank.latents is not None:
        return bank.latents.astype(np.float64)
    raise ContractError(
        "prior pretraining needs a pixel-kind branch or stored latents")


def train_prior(config: RunConfig, bank: EmbeddingBank,
                model: Model | None = None):
    """Stage i: train HVF + projector + toy denoiser on the noise-prediction
    loss with the backbone mixing weights frozen. Returns (ckpt, trace)."""
    if config.stage != "prior_pretrain":
        raise ContractError(f"train_prior got stage {config.stage!r}")
    rows = bank.indices("train")
    x0_all = _prior_x0(bank)[rows]
    branch_mats = [bank.branch_matrix(b.branch_id, rows) for b in bank.branches]
    if model is None:
        model = build_model(config, [b.dim for b in bank.branches],
                            x_dim=x0_all.shape[1])
    schedule_d = DiffusionSchedule.linear(num_steps=config.diffusion_steps)
    n = len(rows)
    steps_per_epoch = max(1, n // config.batch_size) if config.drop_last else \
        int(np.ceil(n / config.batch_size))
    if n <= config.batch_size:
        steps_per_epoch = 1
    total_steps = config.epochs * steps_per_epoch
    lrs = LrSchedule(peak_lr=config.peak_lr,
                     warmup_steps=min(config.warmup_steps, total_steps - 1),
                     total_steps=total_steps)
    opt = AdamWState(weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    frozen_before = {k: checksum(t) for k, t in model.frozen_tensors().items()}
    trace = []
    step = 0
    for epoch in range(config.epochs):
        for batch in _batches(n, config.batch_size, shuffle_rng,
                              config.drop_last):
            lr = lr_at(lrs, step)
            with Tape() as tape:
                branches = [Tensor(m[batch]) for m in branch_mats]
                zf = hvf_forward(model.hvf, branches)
                zc = project_condition(model.projector, zf)
                try:
                    loss = prior_loss(model.denoiser, schedule_d,
                                      x0_all[batch], zc, noise_rng)
                except NumericError as e:
                    raise NumericError(f"non-finite loss at step {step}") from e
                backward(loss, tape)
            adamw_step(model.trainable(), opt, lr)
            trace.append((step, lr, loss.item()))
            step += 1
        _check_frozen(frozen_before, model, f"epoch {epoch}")
    return model_to_checkpoint(model, config, step, opt), trace


def write_trace(trace, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("step,lr,loss\n")
        for step, lr, loss in trace:
            f.write(f"{step},{lr!r},{loss!r}\n")
