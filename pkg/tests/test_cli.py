import json
import shutil
from pathlib import Path

import pytest

from oodcl.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from oodcl.metrics import compute_metrics
from oodcl.trainer import TrainedModel, model_scores
from oodcl.data import read_dataset

MINI = Path(__file__).parent / "data" / "mini.conf"


def setup_run(root: Path) -> Path:
    conf = root / "mini.conf"
    shutil.copy(MINI, conf)
    return conf


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen-data plus two trained variants, shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("cli")
    conf = setup_run(root)
    assert main(["gen-data", "--config", str(conf)]) == EXIT_OK
    for v in ("psupcon", "opsupcon-r"):
        assert main(["train", "--config", str(conf), "--variant", v]) == EXIT_OK
    return conf


def test_gen_data_writes_six_files(run, capsys):
    files = sorted(p.name for p in (run.parent / "mini-data").iterdir())
    assert files == ["aux-ood.csv", "ood-interpolated.csv", "ood-shell.csv", "ood-uniform.csv",
                     "test.csv", "train.csv"]


def test_gen_data_byte_identical(run, tmp_path, capsys):
    conf = setup_run(tmp_path)
    assert main(["gen-data", "--config", str(conf)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6 and out[0].endswith("train.csv\t80")
    for p in (run.parent / "mini-data").iterdir():
        assert p.read_bytes() == (tmp_path / "mini-data" / p.name).read_bytes()


def test_seed_flag_changes_data(run, tmp_path):
    conf = setup_run(tmp_path)
    assert main(["gen-data", "--config", str(conf), "--seed", "8"]) == EXIT_OK
    a = (run.parent / "mini-data" / "train.csv").read_bytes()
    assert a != (tmp_path / "mini-data" / "train.csv").read_bytes()


def test_train_outputs(run):
    out = run.parent / "mini-runs"
    for v in ("psupcon", "opsupcon-r"):
        assert (out / f"{v}.ckpt").exists()
        assert (out / f"{v}.history.tsv").exists()
    psup = (out / "psupcon.history.tsv").read_text().splitlines()
    assert all(line.startswith("pretrain") for line in psup[1:]) and len(psup) == 6
    assert (out / "opsupcon-r.history.tsv").read_text().count("finetune") == 2


def test_eval_report_matches_metrics(run, tmp_path):
    report = tmp_path / "r.json"
    ckpt = run.parent / "mini-runs" / "psupcon.ckpt"
    assert main(["eval", "--config", str(run), str(ckpt), "--score", "msp", "--report", str(report)]) == EXIT_OK
    rep = json.loads(report.read_text())
    assert list(rep) == ["variant", "score", "temperature", "accuracy", "n_id_test", "sets"]
    assert list(rep["sets"]) == ["shell", "uniform", "interpolated", "average"]
    model = TrainedModel.load(ckpt)
    data = run.parent / "mini-data"
    ids = model_scores(model, read_dataset(data / "test.csv").inputs, "msp")
    shell = compute_metrics(ids, model_scores(model, read_dataset(data / "ood-shell.csv").inputs, "msp"))
    assert rep["sets"]["shell"]["auroc"] == round(shell.auroc, 6)
    assert rep["sets"]["shell"]["fpr95"] == round(shell.fpr_at_95, 6)


def test_compare_table_shape(run, capsys):
    assert main(["compare", "--config", str(run), "--variants", "psupcon,opsupcon-r"]) == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    rows = [line for line in table if line.split("|")[0].strip() in ("shell", "uniform", "interpolated", "average")]
    assert len(rows) == 4
    assert all(len(r.split("|")[1].split()) + len(r.split("|")[2].split()) == 6 for r in rows)
    out = run.parent / "mini-runs"
    first = (out / "compare.maxlogit.txt").read_bytes()
    both = json.loads((out / "compare.maxlogit.json").read_text())
    assert main(["compare", "--config", str(run), "--variants", "psupcon,opsupcon-r"]) == EXIT_OK
    assert (out / "compare.maxlogit.txt").read_bytes() == first
    # the same numbers as a standalone eval
    assert main(["eval", "--config", str(run), str(out / "opsupcon-r.ckpt")]) == EXIT_OK
    single = json.loads((out / "opsupcon-r.maxlogit.json").read_text())
    assert both["opsupcon-r"] == single


def test_bad_data_dir_exit_2(tmp_path, capsys):
    conf = setup_run(tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    conf.write_text(conf.read_text().replace("data.dir=mini-data", f"data.dir={blocker}/sub"))
    assert main(["gen-data", "--config", str(conf)]) == EXIT_USAGE
    assert "data.dir" in capsys.readouterr().err


def test_unknown_key_and_missing_config(tmp_path, capsys):
    conf = setup_run(tmp_path)
    conf.write_text(conf.read_text() + "train.bogus=1\n")
    assert main(["gen-data", "--config", str(conf)]) == EXIT_USAGE
    assert "train.bogus" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "none.conf")]) == EXIT_USAGE


def test_unknown_score_lists_valid_names(run, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--config", str(run), "x.ckpt", "--score", "bogus"])
    assert exc.value.code == EXIT_USAGE
    assert "maxlogit" in capsys.readouterr().err
    assert main(["eval", "--config", str(run), "x.ckpt"]) == EXIT_USAGE


def test_missing_aux_exit_2(tmp_path, capsys):
    conf = setup_run(tmp_path)
    assert main(["gen-data", "--config", str(conf)]) == EXIT_OK
    (tmp_path / "mini-data" / "aux-ood.csv").unlink()
    capsys.readouterr()
    assert main(["train", "--config", str(conf), "--variant", "opsupcon-r"]) == EXIT_USAGE
    assert "aux-ood" in capsys.readouterr().err
    # pseudo-OOD finetuning does not need the auxiliary set
    assert main(["train", "--config", str(conf), "--variant", "opsupcon-p"]) == EXIT_OK


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exit_3(tmp_path, capsys):
    conf = setup_run(tmp_path)
    assert main(["gen-data", "--config", str(conf)]) == EXIT_OK
    conf.write_text(conf.read_text() + "train.base_lr=1e300\n")
    assert main(["train", "--config", str(conf), "--variant", "psupcon"]) == EXIT_RUNTIME
    assert "runtime error" in capsys.readouterr().err


@pytest.mark.parametrize("variant", ["opsupcon-p", "opsupcon-m", "ce", "energy"])
def test_other_variants_train(run, tmp_path, variant):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(run), "--variant", variant, "--out", str(out)]) == EXIT_OK
    model = TrainedModel.load(out / f"{variant}.ckpt")
    assert model.kind == variant
    assert main(["eval", "--config", str(run), str(out / f"{variant}.ckpt"), "--out", str(out),
                 "--score", "energy"]) == EXIT_OK
