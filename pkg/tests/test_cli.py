import hashlib
from pathlib import Path

import numpy as np
import pytest

from fusionalign.cli import EXIT_DATA, EXIT_IO, EXIT_USAGE, main

GEN = ["--train", "60", "--test", "40", "--branch-dims", "12,8,16",
       "--channels", "6", "--timepoints", "10", "--noise-sigma", "0",
       "--branch-noise-sigma", "0", "--latent-dim", "8", "--reps", "2"]

SMALL = ["--d", "64", "--d-hidden", "64", "--d-c", "128",
         "--denoiser-width", "64", "--diffusion-steps", "20",
         "--batch-size", "32", "--peak-lr", "0.001", "--seed", "3"]


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-synth", "--out", str(data), "--seed", "1"] + GEN) == 0
    run = root / "run"
    assert main(["train-align", "--dataset", str(data), "--out", str(run),
                 "--epochs", "60"] + SMALL) == 0
    return data, run


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "selftest OK" in out
    assert "FAIL" not in out


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "gradcheck OK" in capsys.readouterr().out


def test_gen_synth_deterministic(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, seed in ((a, "1"), (b, "1"), (c, "2")):
        assert main(["gen-synth", "--out", str(out), "--seed", seed] + GEN) == 0
    assert _tree_hash(a) == _tree_hash(b)
    assert _tree_hash(a) != _tree_hash(c)


def test_train_align_prints_fingerprint_and_artifacts(workspace, capsys):
    data, run = workspace
    assert (run / "checkpoint.ckpt").exists()
    trace = (run / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,lr,loss"
    assert len(trace) > 1


def test_train_align_deterministic(workspace, tmp_path):
    data, _ = workspace
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["train-align", "--dataset", str(data), "--out", str(out),
                     "--epochs", "3"] + SMALL) == 0
        outs.append((out / "checkpoint.ckpt").read_bytes())
    assert outs[0] == outs[1]


def test_eval_retrieval_noiseless_perfect(workspace, capsys, tmp_path):
    data, run = workspace
    out = tmp_path / "report"
    assert main(["eval-retrieval", "--checkpoint", str(run / "checkpoint.ckpt"),
                 "--dataset", str(data), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "100.0%" in printed
    assert "40-way" in printed
    csv = (out / "report.csv").read_text().splitlines()
    assert csv[1] == "all,100.0,100.0"


def test_prior_and_condition_export(workspace, tmp_path, capsys):
    data, _ = workspace
    run = tmp_path / "prior"
    assert main(["train-prior", "--dataset", str(data), "--out", str(run),
                 "--epochs", "3"] + SMALL) == 0
    cond = tmp_path / "cond"
    assert main(["export-conditions", "--checkpoint",
                 str(run / "checkpoint.ckpt"), "--dataset", str(data),
                 "--out", str(cond)]) == 0
    raw = np.fromfile(cond / "conditions.f32", dtype="<f4")
    assert raw.size == 40 * 64  # test gallery x shared dim


def test_export_embeddings_cmd(workspace, tmp_path):
    data, run = workspace
    out = tmp_path / "emb"
    assert main(["export-embeddings", "--checkpoint",
                 str(run / "checkpoint.ckpt"), "--dataset", str(data),
                 "--out", str(out)]) == 0
    assert (out / "similarity.f32").stat().st_size == 40 * 40 * 4


def test_ablate_masks(workspace, capsys, tmp_path):
    data, run = workspace
    out = tmp_path / "abl"
    assert main(["ablate", "--checkpoint", str(run / "checkpoint.ckpt"),
                 "--dataset", str(data), "--out", str(out),
                 "--mask-cells", "1,1,1;1,1,0"]) == 0
    csv = (out / "ablation.csv").read_text().splitlines()
    assert csv[0] == "cell,top1,top5"
    assert csv[1].startswith('"mask=1,1,1",100.0') or \
        csv[1].startswith("mask=1,1,1,100.0")


def test_unknown_flag_exits_two(workspace):
    data, _ = workspace
    with pytest.raises(SystemExit) as exc:
        main(["gen-synth", "--out", "x", "--bogus-flag", "1"])
    assert exc.value.code == 2


def test_missing_checkpoint_is_io_error(workspace, capsys):
    data, _ = workspace
    code = main(["eval-retrieval", "--checkpoint", "/nonexistent.ckpt",
                 "--dataset", str(data)])
    assert code == EXIT_IO


def test_corrupt_dataset_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text('{"bank_version": 99}')
    code = main(["eval-retrieval", "--checkpoint", "/nonexistent.ckpt",
                 "--dataset", str(bad)])
    assert code == EXIT_IO  # checkpoint read fails first
    code = main(["train-align", "--dataset", str(bad), "--out",
                 str(tmp_path / "o")] + SMALL)
    assert code == EXIT_DATA


def test_bad_threads_is_usage_error(workspace, tmp_path):
    data, _ = workspace
    code = main(["train-align", "--dataset", str(data), "--out",
                 str(tmp_path / "o"), "--threads", "0", "--epochs", "1"]
                + SMALL)
    assert code == EXIT_USAGE


def test_align_brain_requires_init_checkpoint(workspace, tmp_path):
    data, _ = workspace
    with pytest.raises(SystemExit) as exc:
        main(["align-brain", "--dataset", str(data), "--out",
              str(tmp_path / "o")] + SMALL)
    assert exc.value.code == 2
