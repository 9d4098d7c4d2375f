import csv

import numpy as np
import pytest
from PIL import Image

from biphasic import cli
from biphasic.autodiff import GradCase
from biphasic.autodiff import gradcheck as gc
from biphasic.autodiff.ops import _make, as_tensor
from biphasic.checkpoint import load_bundle
from biphasic.metrics import clas_error
from biphasic.toydata import to_uint8
from conftest import TINY_CONFIG

PRETRAIN_FILES = {"phi.ckpt", "duv.ckpt", "da.ckpt", "clas.ckpt", "pretrain_metrics.csv", "config.txt", "runinfo.json"}


def files_in(d):
    return {p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file()}


def contents(d, skip=("runinfo.json",)):
    return {name: (d / name).read_bytes() for name in files_in(d) if name.rsplit("/", 1)[-1] not in skip}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert cli.main(["pretrain", "--config", str(root / "tiny.cfg"), "--out", str(root / "pre")]) == 0
    args = ["train", "--config", str(root / "tiny.cfg"), "--pretrained", str(root / "pre"), "--out", str(root / "run")]
    assert cli.main(args) == 0
    return root


def write_inputs(workdir, n=3):
    from biphasic.config import load_config
    from biphasic.trainer import make_splits

    test = make_splits(load_config(workdir / "tiny.cfg")).test
    d = workdir / f"inputs{n}"
    d.mkdir(exist_ok=True)
    for i in range(n):
        Image.fromarray(to_uint8(test.images[i])).save(d / f"face_{i}.png")
    return d, test


# -- usage errors --------------------------------------------------------------------------


def test_missing_config_exits_2_and_names_the_path(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    assert cli.main(["pretrain", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert "absent.cfg" in capsys.readouterr().err


def test_bad_config_key_is_line_anchored(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.seed = 1\ntrain.sead = 2\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "bad.cfg:2:" in capsys.readouterr().err


def test_mine_mode_reports_not_implemented(tmp_path, capsys):
    assert cli.main(["train", "--mode", "mine", "--out", str(tmp_path / "o")]) == 2
    assert "not implemented" in capsys.readouterr().err


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    assert "biphasic" in capsys.readouterr().out


# -- pretrain / train --------------------------------------------------------------------------


def test_pretrain_writes_exactly_the_declared_files(workdir):
    assert files_in(workdir / "pre") == PRETRAIN_FILES
    assert read_rows(workdir / "pre" / "pretrain_metrics.csv")[0] == ["network", "steps", "final_loss", "heldout_metric", "heldout_value"]


def test_pretrain_rerun_is_byte_identical(workdir):
    out = workdir / "pre_again"
    assert cli.main(["pretrain", "--config", str(workdir / "tiny.cfg"), "--out", str(out)]) == 0
    assert contents(out) == contents(workdir / "pre")


def test_train_writes_checkpoints_metrics_and_snapshot(workdir):
    run = workdir / "run"
    assert files_in(run) == {
        "config.txt",
        "runinfo.json",
        "metrics.csv",
        "checkpoints/initial.ckpt",
        "checkpoints/enhancing.ckpt",
        *(f"pretrain/{name}" for name in PRETRAIN_FILES - {"config.txt", "runinfo.json"}),
    }
    header = read_rows(run / "metrics.csv")[0]
    assert ",".join(header) == "step,phase,L_adv_G,L_adv_D,L_mp,L_geom_G,L_attr_G,L_geom_Duv,L_attr_Da,fid,ms_ssim,clas_err,mi_hat"
    assert "train.steps_initial = 4" in (run / "config.txt").read_text()
    assert "runinfo" not in (run / "metrics.csv").read_text()


def test_train_rerun_is_byte_identical(workdir):
    out = workdir / "run_again"
    args = ["train", "--config", str(workdir / "tiny.cfg"), "--pretrained", str(workdir / "pre"), "--out", str(out)]
    assert cli.main(args) == 0
    assert contents(out) == contents(workdir / "run")


def test_single_phase_produces_one_checkpoint(workdir):
    out = workdir / "single"
    args = ["train", "--config", str(workdir / "tiny.cfg"), "--pretrained", str(workdir / "pre"), "--mode", "single_phase", "--out", str(out)]
    assert cli.main(args) == 0
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["final.ckpt"]


def test_train_without_pretrained_dir_pretrains_inline(workdir):
    out = workdir / "inline"
    assert cli.main(["train", "--config", str(workdir / "tiny.cfg"), "--out", str(out)]) == 0
    assert contents(out / "pretrain") == contents(workdir / "run" / "pretrain")


# -- generate ---------------------------------------------------------------------------------


def test_generate_counts_determinism_and_panels(workdir, capsys):
    inputs, _ = write_inputs(workdir)
    ckpt = str(workdir / "run" / "checkpoints" / "enhancing.ckpt")
    a, b = workdir / "gen_a", workdir / "gen_b"
    assert cli.main(["generate", "--ckpt", ckpt, "--input", str(inputs), "--target-label", "blond,makeup", "--out", str(a), "--panel"]) == 0
    assert cli.main(["generate", "--ckpt", ckpt, "--input", str(inputs), "--target-label", "0 1 0 1 0", "--out", str(b), "--panel"]) == 0
    assert sorted(p.name for p in a.glob("face_?.png")) == ["face_0.png", "face_1.png", "face_2.png"]
    assert contents(a) == contents(b)
    panel = np.asarray(Image.open(a / "face_0_panel.png"))
    assert panel.shape == (32, 64, 3)


def test_generate_with_the_source_label_still_writes(workdir):
    inputs, test = write_inputs(workdir, 1)
    src = " ".join(str(int(v)) for v in test.labels[0])
    out = workdir / "gen_same"
    ckpt = str(workdir / "run" / "checkpoints" / "initial.ckpt")
    assert cli.main(["generate", "--ckpt", ckpt, "--input", str(inputs / "face_0.png"), "--target-label", src, "--out", str(out)]) == 0
    assert (out / "face_0.png").is_file()


@pytest.mark.parametrize("label", ["0 1 0 1", "blond,black", "purple"])
def test_generate_rejects_bad_labels(workdir, label, capsys):
    inputs, _ = write_inputs(workdir, 1)
    ckpt = str(workdir / "run" / "checkpoints" / "enhancing.ckpt")
    assert cli.main(["generate", "--ckpt", ckpt, "--input", str(inputs), "--target-label", label, "--out", str(workdir / "x")]) == 2
    assert "DomainSpec(color={black|blond|brown}, makeup, age)" in capsys.readouterr().err


def test_generate_rejects_wrong_image_size(workdir, tmp_path):
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "small.png")
    ckpt = str(workdir / "run" / "checkpoints" / "enhancing.ckpt")
    assert cli.main(["generate", "--ckpt", ckpt, "--input", str(tmp_path), "--target-label", "blond", "--out", str(tmp_path / "o")]) == 2


# -- eval ---------------------------------------------------------------------------------------


def test_eval_writes_one_row_and_is_repeatable(workdir):
    ckpt = str(workdir / "run" / "checkpoints" / "enhancing.ckpt")
    a, b = workdir / "eval_a.csv", workdir / "eval_b.csv"
    assert cli.main(["eval", "--ckpt", ckpt, "--out", str(a)]) == 0
    assert cli.main(["eval", "--ckpt", ckpt, "--out", str(b)]) == 0
    rows = read_rows(a)
    assert rows[0] == list(cli.EVAL_COLUMNS) and len(rows) == 2
    assert a.read_bytes() == b.read_bytes()


def test_eval_self_comparison(workdir):
    ckpt = workdir / "run" / "checkpoints" / "enhancing.ckpt"
    out = workdir / "eval_self.csv"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--out", str(out), "--self-compare"]) == 0
    row = dict(zip(*read_rows(out)))
    assert float(row["fid"]) < 1e-6
    assert float(row["ms_ssim"]) == 1.0

    from biphasic.config import load_config
    from biphasic.trainer import make_splits

    test = make_splits(load_config(workdir / "tiny.cfg")).test
    _, nets = load_bundle(workdir / "run" / "pretrain" / "clas.ckpt")
    assert float(row["clas_err"]) == pytest.approx(clas_error(test.images, test.labels, nets["clas"], test.spec), abs=1e-12)


def test_eval_on_exported_data(workdir):
    out = workdir / "export"
    assert cli.main(["export-data", "--config", str(workdir / "tiny.cfg"), "--split", "test", "--out", str(out)]) == 0
    assert (out / "test" / "manifest.csv").is_file()
    ckpt = str(workdir / "run" / "checkpoints" / "enhancing.ckpt")
    assert cli.main(["eval", "--ckpt", ckpt, "--data", str(out / "test"), "--out", str(workdir / "eval_exp.csv")]) == 0
    assert read_rows(workdir / "eval_exp.csv")[1][4] == "16"


def test_eval_missing_classifier(workdir, tmp_path, capsys):
    ckpt = str(workdir / "run" / "checkpoints" / "enhancing.ckpt")
    assert cli.main(["eval", "--ckpt", ckpt, "--classifier", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "e.csv")]) == 2
    assert "classifier" in capsys.readouterr().err


# -- gradcheck -----------------------------------------------------------------------------------


def test_gradcheck_subset_passes_and_reports_errors(capsys):
    assert cli.main(["gradcheck", "--ops", "exp,matmul", "--trials", "10"]) == 0
    out = capsys.readouterr().out
    assert "exp" in out and "PASS" in out and "max_rel_err=" in out
    assert "2/2 cases passed" in out


def test_gradcheck_detects_a_corrupted_gradient(monkeypatch, capsys):
    def bad_square(a):
        a = as_tensor(a)
        return _make(a.data**2, (a,), lambda g: (g * 2.0 * a.data * 1.001,), "square")

    registry = dict(gc.REGISTRY)
    registry["bad_square"] = GradCase("bad_square", bad_square, lambda r: {"a": r.uniform(-2, 2, size=5)})
    monkeypatch.setattr(gc, "REGISTRY", registry)
    assert cli.main(["gradcheck", "--ops", "exp,bad_square", "--trials", "5"]) == 1
    out = capsys.readouterr().out
    assert "bad_square  FAIL" in out and "1/2 cases passed" in out


def test_gradcheck_unknown_op(capsys):
    assert cli.main(["gradcheck", "--ops", "no_such_op"]) == 2
    assert "no_such_op" in capsys.readouterr().err
