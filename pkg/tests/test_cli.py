import pytest

from irdistill import cli
from irdistill.checkpoint import Checkpoint
from irdistill.data import Manifest
from irdistill.gradcheck import CheckResult
from irdistill.models import init_student
from irdistill.pipeline import student_checkpoint

SMALL = ["--n-scenes", "20", "--label-fraction", "0.25", "--teacher-epochs", "1", "--student-epochs", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    root = str(d / "data")
    assert cli.main(["gen-data", "--data-root", root] + SMALL) == 0
    return d, root


def test_full_flow(workspace, capsys):
    d, root = workspace
    common = ["--data-root", root] + SMALL
    t = str(d / "teacher.ckpt")
    assert cli.main(["train-teacher", "--manifest", f"{root}/train.tsv", "--val", f"{root}/val.tsv",
                     "--out", t, "--log", str(d / "t.csv")] + common) == 0
    assert (d / "t.csv").read_text().startswith("epoch,L_total")
    assert cli.main(["gen-pseudo", "--teacher", t, "--manifest", f"{root}/train.tsv"] + common) == 0
    pseudo = Manifest.read(f"{root}/pseudo.tsv")
    assert len(pseudo) == 16 and all(e.provenance == "pseudo" for e in pseudo.entries)
    s = str(d / "student.ckpt")
    assert cli.main(["train-student", "--manifest", f"{root}/pseudo.tsv", "--out", s] + common) == 0
    assert Checkpoint.load(s).prefixed("student.")
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", s, "--manifest", f"{root}/val.tsv",
                     "--train-manifest", f"{root}/train.tsv", "--run-id", "cli"] + common) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("cli,val,")


def test_eval_overlap_exits_one(workspace, capsys):
    d, root = workspace
    ck = d / "zero.ckpt"
    student_checkpoint(init_student(0, 16)).save(ck)
    code = cli.main(["eval", "--ckpt", str(ck), "--manifest", f"{root}/val.tsv",
                     "--train-manifest", f"{root}/val.tsv", "--data-root", root])
    assert code == 1 and "overlaps" in capsys.readouterr().err


def test_missing_file_exits_one(tmp_path, capsys):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--manifest", str(tmp_path / "m.tsv")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_config_file_with_flag_override(workspace, tmp_path):
    _, root = workspace
    (tmp_path / "run.cfg").write_text(f"data_root = {root}\nsplit_seed = 4\nlabel_fraction = 0.5\n")
    assert cli.main(["split", "--config", str(tmp_path / "run.cfg"), "--label-fraction", "0.25",
                     "--out", str(tmp_path / "s")]) == 0
    train = Manifest.read(tmp_path / "s" / "train.tsv")
    assert train.split_seed == 4 and len(train.labeled) == 4


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--scope", "losses", "--seeds", "1"]) == 0
    assert capsys.readouterr().out.count(" pass") == 4
    monkeypatch.setattr(cli, "run_gradcheck", lambda scope, seeds: [CheckResult("conv2d", 0.5, False)])
    assert cli.main(["gradcheck"]) == 2
    assert capsys.readouterr().out == "conv2d 5.000e-01 fail\n"


def test_bad_config_value_exits_one(workspace):
    _, root = workspace
    assert cli.main(["split", "--data-root", root, "--insertion", "middle"]) == 1
