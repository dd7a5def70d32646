"""End-to-end CLI flows."""

import numpy as np
import pytest

from peerkd import data
from peerkd.cli import main


@pytest.fixture()
def run_dir(tmp_path):
    out = tmp_path / "run"
    code = main([
        "train", "--method", "afd", "--archs", "tiny-a,tiny-a",
        "--num-classes", "3", "--epochs", "1", "--batch-size", "16",
        "--per-class-train", "8", "--per-class-test", "4",
        "--image-size", "16", "--seed", "0", "--out-dir", str(out),
    ])
    assert code == 0
    return out


def test_train_writes_metrics_and_checkpoint(run_dir, capsys):
    assert (run_dir / "metrics.csv").exists()
    assert (run_dir / "checkpoint_final.afdk").exists()
    header = (run_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,net_id,split,loss_ce,loss_kl,loss_g,loss_d,top1,ens_top1,lr_logit,lr_adv"


def _common_flags(run_dir):
    return ["--method", "afd", "--archs", "tiny-a,tiny-a", "--num-classes", "3",
            "--batch-size", "16", "--per-class-train", "8", "--per-class-test", "4",
            "--image-size", "16", "--seed", "0",
            "--checkpoint", str(run_dir / "checkpoint_final.afdk")]


def test_eval_prints_accuracies(run_dir, capsys):
    assert main(["eval"] + _common_flags(run_dir)) == 0
    out = capsys.readouterr().out
    assert "net0 top1" in out and "net1 top1" in out and "ensemble top1" in out


def test_analyze_prints_csv_row(run_dir, capsys):
    assert main(["analyze"] + _common_flags(run_dir)) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "method,pair,l1,l2,cosine,n"
    fields = lines[1].split(",")
    assert fields[0] == "afd" and fields[1] == "0-1"
    l1, l2, cos = map(float, fields[2:5])
    assert l1 >= 0 and l2 >= 0 and -1 <= cos <= 1
    assert int(fields[5]) == 12  # 3 classes x 4 per class

def test_gradcam_writes_pgm(run_dir, tmp_path, capsys):
    out_file = tmp_path / "cam.pgm"
    assert main(["gradcam"] + _common_flags(run_dir)
                + ["--index", "1", "--net", "0", "--out", str(out_file)]) == 0
    assert out_file.read_bytes().startswith(b"P5\n")


def test_synth_data_round_trips(tmp_path, capsys):
    img = tmp_path / "train.images.idx"
    lbl = tmp_path / "train.labels.idx"
    assert main(["synth-data", "--num-classes", "4", "--per-class", "5",
                 "--image-size", "12", "--noise-std", "0.2", "--seed", "3",
                 "--images", str(img), "--labels", str(lbl)]) == 0
    ds = data.load_idx(img, lbl)
    assert ds.n == 20
    assert ds.images.shape == (20, 1, 12, 12)
    assert sorted(np.unique(ds.labels)) == [0, 1, 2, 3]


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "method = vanilla\n"
        "archs = tiny-a\n"
        "num_classes = 3\n"
        "epochs = 2   # overridden below\n"
        "batch_size = 16\n"
        "per_class_train = 8\n"
        "per_class_test = 4\n"
        "image_size = 16\n"
        f"out_dir = {tmp_path / 'cfg_run'}\n"
    )
    assert main(["train", "--config", str(cfg), "--epochs", "0"]) == 0
    lines = (tmp_path / "cfg_run" / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 2  # header plus the epoch-0 eval row


def test_idx_training_path(tmp_path):
    img = tmp_path / "d.images.idx"
    lbl = tmp_path / "d.labels.idx"
    assert main(["synth-data", "--num-classes", "3", "--per-class", "8",
                 "--image-size", "16", "--seed", "1",
                 "--images", str(img), "--labels", str(lbl)]) == 0
    assert main(["train", "--method", "vanilla", "--archs", "tiny-a",
                 "--num-classes", "3", "--epochs", "1", "--batch-size", "8",
                 "--data-source", "idx",
                 "--train-images", str(img), "--train-labels", str(lbl),
                 "--test-images", str(img), "--test-labels", str(lbl),
                 "--out-dir", str(tmp_path / "idx_run")]) == 0


def test_error_exit_code(tmp_path, capsys):
    code = main(["train", "--method", "bogus", "--out-dir", str(tmp_path / "x")])
    assert code == 2
    assert "error:" in capsys.readouterr().err
