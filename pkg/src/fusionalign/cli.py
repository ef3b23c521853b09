"""Command-line entry point covering the full lifecycle: dataset generation,
training stages, evaluation, ablation, export, and self-verification.

Exit codes: 0 ok, 2 usage, 3 data/format, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import databank, evalsuite, prior, trainer
from .errors import ContractError, DataFormatError, FusionAlignError, NumericError
from .fusion import BranchMask

log = logging.getLogger("fusionalign")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _parse_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _parse_mask(text: str) -> list[bool]:
    return [bool(int(x)) for x in text.split(",") if x]


def _parse_window(text: str) -> tuple[float, float]:
    lo, hi = text.split(":")
    return float(lo), float(hi)


def _load_config(args, stage: str) -> trainer.RunConfig:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(json.loads(Path(args.config).read_text()))
    cfg["stage"] = stage
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size,
        "seed": args.seed, "d": args.d, "peak_lr": args.peak_lr,
        "channel_subset": args.channels,
        "window_ms": _parse_window(args.window_ms) if args.window_ms else None,
        "branch_mask": _parse_mask(args.mask) if args.mask else None,
        "holdout_subject": args.holdout_subject,
        "dataset": args.dataset,
        "d_hidden": args.d_hidden, "d_c": args.d_c,
        "denoiser_width": args.denoiser_width,
        "diffusion_steps": args.diffusion_steps,
    }
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    if cfg.get("window_ms"):
        cfg["window_ms"] = tuple(cfg["window_ms"])
    return trainer.RunConfig(**cfg)


def _announce(config: trainer.RunConfig) -> None:
    print(f"config fingerprint: {config.fingerprint()}  seed: {config.seed}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--d-hidden", dest="d_hidden", type=int)
    p.add_argument("--d-c", dest="d_c", type=int)
    p.add_argument("--denoiser-width", dest="denoiser_width", type=int)
    p.add_argument("--diffusion-steps", dest="diffusion_steps", type=int)
    p.add_argument("--mask", help="comma 0/1 per branch, e.g. 1,1,0")
    p.add_argument("--channels", help="channel subset name or CSV list")
    p.add_argument("--window-ms", dest="window_ms", help="t0:t1 in ms")
    p.add_argument("--holdout-subject", dest="holdout_subject")
    p.add_argument("--threads", type=int, default=1,
                   help="batch-shard parallelism; 1 = bit-reproducible")


def _check_threads(args) -> None:
    threads = getattr(args, "threads", 1)
    if threads < 1:
        raise ContractError(f"--threads must be >= 1, got {threads}")
    if threads > 1:
        log.warning("--threads > 1 requested; shards execute sequentially "
                    "in this build, results identical to --threads 1")


def cmd_gen_synth(args) -> int:
    spec = databank.SynthSpec(
        seed=args.seed, num_train_stimuli=args.train,
        num_test_stimuli=args.test,
        branch_dims=_parse_ints(args.branch_dims),
        num_channels=args.channels, num_timepoints=args.timepoints,
        noise_sigma=args.noise_sigma, latent_dim=args.latent_dim,
        branch_info_weights=_parse_floats(args.info_weights)
        if args.info_weights else [1.0] * len(_parse_ints(args.branch_dims)),
        branch_noise_sigma=args.branch_noise_sigma,
        num_subjects=args.subjects, num_repetitions=args.reps,
        pixel_branch_index=args.pixel_branch)
    bank, recordings, _ = databank.generate_synthetic(spec)
    databank.save_bank(bank, args.out, recordings)
    print(f"wrote synthetic dataset to {args.out}  seed: {spec.seed}")
    return 0


def cmd_train_align(args, stage: str) -> int:
    config = _load_config(args, stage)
    _check_threads(args)
    _announce(config)
    bank = databank.load_bank(args.dataset or config.dataset)
    recordings = databank.load_recordings(args.dataset or config.dataset)
    init_ckpt = None
    if stage == "brain_fusion_align":
        if not args.init_checkpoint:
            raise ContractError("align-brain requires --init-checkpoint")
        init_ckpt = trainer.load_checkpoint(args.init_checkpoint)
    ckpt, trace = trainer.train_alignment(config, bank, recordings,
                                          init_checkpoint=init_ckpt)
    out = Path(args.out)
    trainer.save_checkpoint(ckpt, out / "checkpoint.ckpt")
    trainer.write_trace(trace, out / "trace.csv")
    print(f"final loss: {trace[-1][2]:.6f}  steps: {len(trace)}")
    return 0


def cmd_train_prior(args) -> int:
    config = _load_config(args, "prior_pretrain")
    _check_threads(args)
    _announce(config)
    bank = databank.load_bank(args.dataset or config.dataset)
    ckpt, trace = trainer.train_prior(config, bank)
    out = Path(args.out)
    trainer.save_checkpoint(ckpt, out / "checkpoint.ckpt")
    trainer.write_trace(trace, out / "trace.csv")
    print(f"final loss: {trace[-1][2]:.6f}  steps: {len(trace)}")
    return 0


def cmd_eval_retrieval(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    bank = databank.load_bank(args.dataset)
    recordings = databank.load_recordings(args.dataset)
    mask = BranchMask(_parse_mask(args.mask)) if args.mask else None
    report = evalsuite.evaluate_retrieval(ckpt, bank, recordings,
                                          k_way=args.kway, mask=mask,
                                          seed=args.seed or 0)
    _print_report(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / "report.csv", "w") as f:
            f.write("subject,top1,top5\n")
            f.write(f"all,{report.top1},{report.top5}\n")
            for subj, acc in report.per_subject.items():
                f.write(f"{subj},{acc['top1']},{acc['top5']}\n")
    return 0


def _print_report(report: evalsuite.RetrievalReport) -> None:
    print(f"{report.k_way}-way zero-shot retrieval "
          f"({report.num_queries} queries)")
    print(f"{'subject':<12} {'top-1':>8} {'top-5':>8}")
    print(f"{'all':<12} {report.top1:>7.1f}% {report.top5:>7.1f}%")
    for subj, acc in sorted(report.per_subject.items()):
        print(f"{subj:<12} {acc['top1']:>7.1f}% {acc['top5']:>7.1f}%")
    if report.caveat:
        print(f"note: {report.caveat}")


def cmd_ablate(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint) if args.checkpoint else None
    bank = databank.load_bank(args.dataset)
    recordings = databank.load_recordings(args.dataset)
    if ckpt is not None:
        base_config = trainer.RunConfig(**ckpt.meta["config"])
    else:
        base_config = _load_config(args, "align_retrieval")
    cells = []
    k = len(bank.branches)
    if args.mask_cells:
        for spec in args.mask_cells.split(";"):
            cells.append(evalsuite.AblationCellSpec(
                name=f"mask={spec}", mask=_parse_mask(spec)))
    if args.channel_cells:
        for name in args.channel_cells.split(";"):
            cells.append(evalsuite.AblationCellSpec(
                name=f"channels={name}", channel_subset=name))
    if args.window_cells:
        for spec in args.window_cells.split(";"):
            cells.append(evalsuite.AblationCellSpec(
                name=f"window={spec}", window_ms=_parse_window(spec)))
    if args.branch_cells:
        for spec in args.branch_cells.split(";"):
            cells.append(evalsuite.AblationCellSpec(
                name=f"branches={spec}", branch_subset=_parse_ints(spec)))
    if not cells:
        cells = [evalsuite.AblationCellSpec(name="full",
                                            mask=[True] * k)]
    grid = evalsuite.run_ablation(base_config, bank, recordings, cells,
                                  trained=ckpt, k_way=args.kway,
                                  seed=args.seed or 0)
    print(f"{'cell':<28} {'top-1':>8} {'top-5':>8}")
    rows = []
    for cell, report in grid.cells:
        print(f"{cell.name:<28} {report.top1:>7.1f}% {report.top5:>7.1f}%")
        rows.append((cell.name, report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w") as f:
            f.write("cell,top1,top5\n")
            for name, report in rows:
                f.write(f"{name},{report.top1},{report.top5}\n")
    return 0


def cmd_export_conditions(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    ckpt.require("projector")
    bank = databank.load_bank(args.dataset)
    model, config = trainer.model_from_checkpoint(ckpt)
    rows = bank.indices(args.split)
    from .ndgrad import Tensor
    from .fusion import hvf_forward
    if model.brain is not None and args.source == "brain":
        recordings = databank.load_recordings(args.dataset)
        signals, _, _ = trainer.prepare_alignment_data(config, bank,
                                                       recordings, args.split)
        z = model.brain.forward(Tensor(signals))
    else:
        branches = [Tensor(bank.branch_matrix(b.branch_id, rows))
                    for b in bank.branches]
        z = hvf_forward(model.hvf, branches)
    z_c = prior.project_condition(model.projector, z)
    prior.export_conditions(z_c.data, args.out, stage=ckpt.meta["stage"])
    print(f"exported {z_c.shape[0]} condition vectors (dim {z_c.shape[1]}) "
          f"to {args.out}")
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    bank = databank.load_bank(args.dataset)
    recordings = databank.load_recordings(args.dataset)
    manifest = evalsuite.export_embeddings(ckpt, bank, recordings, args.out)
    print(f"exported embeddings for {len(manifest['gallery_stimuli'])} "
          f"gallery stimuli to {args.out}")
    return 0


def _gradient_suite(seed: int = 0) -> float:
    """Finite-difference checks over every operator and both full models."""
    from . import ndgrad as ng
    from .align import TemperatureParam, infonce_loss, similarity
    from .brainproj import MbpParams
    from .fusion import HvfParams, hvf_forward
    from .gradcheck import check_gradients
    from .ndgrad import Tensor
    from .prior import (DiffusionSchedule, ProjectorParams, ToyDenoiser,
                        prior_loss, project_condition)

    rng = np.random.default_rng(seed)
    worst = 0.0

    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = Tensor(rng.standard_normal(4), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    cases = {
        "matmul": (lambda: ng.sum_all(ng.matmul(x, w)), {"x": x, "w": w}),
        "layer_norm": (lambda: ng.sum_all(ng.mul(
            ln := ng.layer_norm(x, g, b), ln)), {"x": x, "g": g, "b": b}),
        "gelu": (lambda: ng.sum_all(ng.gelu(x)), {"x": x}),
        "l2_normalize": (lambda: ng.sum_all(ng.mul(
            z := ng.l2_normalize(x), Tensor(np.arange(12.).reshape(3, 4)))),
            {"x": x}),
    }
    for name, (fn, params) in cases.items():
        err = check_gradients(fn, params, seed=seed)
        log.info("gradcheck %s: %.3e", name, err)
        worst = max(worst, err)

    # full alignment model: HVF + MBP + InfoNCE
    hvf = HvfParams.init(rng, [5, 3], d=6, d_hidden=6)
    mbp = MbpParams.init(rng, 8, d=6, d_hidden=6)
    temp = TemperatureParam.init()
    b1 = Tensor(rng.standard_normal((4, 5)))
    b2 = Tensor(rng.standard_normal((4, 3)))
    sig = Tensor(rng.standard_normal((4, 8)))

    def align_loss():
        zf = hvf_forward(hvf, [b1, b2])
        zb = mbp.forward(sig)
        return infonce_loss(similarity(zb, zf, temp))

    params = {}
    params.update(hvf.tensors())
    params.update(mbp.tensors())
    params.update(temp.tensors())
    err = check_gradients(align_loss, params, num_points=20, seed=seed)
    log.info("gradcheck alignment model: %.3e", err)
    worst = max(worst, err)

    # full prior model: projector + toy denoiser + noise-prediction loss
    proj = ProjectorParams.init(rng, d=6, d_hidden=8)
    den = ToyDenoiser.init(rng, x_dim=5, cond_dim=6, width=8)
    sched = DiffusionSchedule.linear(num_steps=10)
    zf_in = Tensor(rng.standard_normal((4, 6)))
    x0 = rng.standard_normal((4, 5))
    t_draw = np.array([1, 4, 7, 10])
    eps_draw = rng.standard_normal((4, 5))

    def prior_loss_fixed():
        zc = project_condition(proj, zf_in)
        abar = sched.alpha_bars[t_draw - 1][:, None]
        x_t = Tensor(np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps_draw)
        eps_hat = den.forward(x_t, t_draw, zc, sched.num_steps)
        d = ng.sub(eps_hat, Tensor(eps_draw))
        return ng.scale(ng.sum_all(ng.mul(d, d)), 1.0 / 4)

    params = {}
    params.update(proj.tensors())
    params.update({k: v for k, v in den.tensors().items()
                   if "backbone" not in k})
    err = check_gradients(prior_loss_fixed, params, num_points=20, seed=seed)
    log.info("gradcheck prior model: %.3e", err)
    worst = max(worst, err)
    return worst


def cmd_gradcheck(args) -> int:
    worst = _gradient_suite(seed=args.seed or 0)
    print(f"gradcheck worst relative error: {worst:.3e}")
    if worst >= 1e-4:
        print("GRADCHECK-FAILED")
        return EXIT_NUMERIC
    print("gradcheck OK")
    return 0


def cmd_selftest(args) -> int:
    from .align import infonce_loss
    from .evalsuite import pixcorr, rank_queries, ssim
    from .ndgrad import Tensor

    worst = _gradient_suite(seed=args.seed or 0)
    if worst >= 1e-4:
        print("SELFTEST-FAILED gradients")
        return EXIT_NUMERIC
    rng = np.random.default_rng(args.seed or 0)
    checks = []
    checks.append(("infonce N=1",
                   infonce_loss(Tensor([[3.0]])).item() == 0.0))
    val = infonce_loss(Tensor(np.eye(2))).item()
    checks.append(("infonce N=2 identity",
                   abs(val - (-np.log(np.e / (np.e + 1)))) < 1e-6))
    q = rng.standard_normal((50, 8))
    gal = rng.standard_normal((20, 8))
    order, sims = rank_queries(q, gal)
    brute = np.array([sorted(range(20), key=lambda j: (-sims[i, j], j))
                      for i in range(50)])
    checks.append(("retrieval rank oracle", np.array_equal(order, brute)))
    a = rng.random((32, 32))
    checks.append(("pixcorr identity", abs(pixcorr(a, a) - 1.0) < 1e-9))
    checks.append(("ssim identity", abs(ssim(a, a) - 1.0) < 1e-9))
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        ok = ok and passed
    if not ok:
        print("SELFTEST-FAILED")
        return EXIT_NUMERIC
    print("selftest OK")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionalign",
        description="Brain-vision alignment: fusion, contrastive training, "
                    "fusion prior, retrieval evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--branch-dims", dest="branch_dims", default="32,24,64")
    p.add_argument("--channels", type=int, default=17)
    p.add_argument("--timepoints", type=int, default=50)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.0)
    p.add_argument("--branch-noise-sigma", dest="branch_noise_sigma",
                   type=float, default=0.05)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=16)
    p.add_argument("--info-weights", dest="info_weights")
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--reps", type=int, default=4)
    p.add_argument("--pixel-branch", dest="pixel_branch", type=int)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-align", help="stage: joint retrieval alignment")
    _add_train_flags(p)
    p.set_defaults(func=lambda a: cmd_train_align(a, "align_retrieval"))

    p = sub.add_parser("train-prior", help="stage i: fusion prior pretraining")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("align-brain",
                       help="stage ii: brain alignment to a frozen prior")
    _add_train_flags(p)
    p.add_argument("--init-checkpoint", dest="init_checkpoint", required=True)
    p.set_defaults(func=lambda a: cmd_train_align(a, "brain_fusion_align"))

    p = sub.add_parser("eval-retrieval", help="k-way zero-shot retrieval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--kway", type=int)
    p.add_argument("--mask")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--kway", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-cells", dest="mask_cells",
                   help="semicolon-separated masks, e.g. '1,1,0;1,0,1'")
    p.add_argument("--channel-cells", dest="channel_cells",
                   help="semicolon-separated channel-set names")
    p.add_argument("--window-cells", dest="window_cells",
                   help="semicolon-separated t0:t1 windows in ms")
    p.add_argument("--branch-cells", dest="branch_cells",
                   help="semicolon-separated branch index CSVs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--d-hidden", dest="d_hidden", type=int)
    p.add_argument("--d-c", dest="d_c", type=int)
    p.add_argument("--denoiser-width", dest="denoiser_width", type=int)
    p.add_argument("--diffusion-steps", dest="diffusion_steps", type=int)
    p.add_argument("--mask")
    p.add_argument("--channels")
    p.add_argument("--window-ms", dest="window_ms")
    p.add_argument("--holdout-subject", dest="holdout_subject")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-conditions",
                       help="project embeddings to condition vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--source", default="visual", choices=["visual", "brain"])
    p.set_defaults(func=cmd_export_conditions)

    p = sub.add_parser("export-embeddings",
                       help="dump z_b/z_f/similarity for external analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="gradient + oracle self-verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FUSIONALIGN_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataFormatError as e:
        print(f"ERROR data-format: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"ERROR numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, FusionAlignError) as e:
        print(f"ERROR contract: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"ERROR io: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
