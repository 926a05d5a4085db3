import os
import subprocess
import sys

import numpy as np
import pytest

from dfnet import cli
from dfnet.flowviz import read_pnm


def run(tmp_path, *args, sub="out"):
    return cli.run([*args, "--out", str(tmp_path / sub)])


def files_under(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


def test_gradcheck_passes(tmp_path, capsys):
    assert run(tmp_path, "gradcheck", "--seeds", "3") == 0
    out = capsys.readouterr().out
    assert "max_rel_error" in out and "pass" in out
    assert (tmp_path / "out" / "gradcheck.txt").exists()


def test_train_twice_identical_logs(tmp_path):
    for name in ("a", "b"):
        code = cli.run(["train", "--task", "steerable", "--iterations", "200", "--seed", "7",
                        "--out", str(tmp_path / name)])
        assert code == 0
    a = (tmp_path / "a" / "metrics.tsv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.tsv").read_bytes()
    assert a.count(b"\n") == 200
    assert (tmp_path / "a" / "model.dfn").read_bytes() == (tmp_path / "b" / "model.dfn").read_bytes()


def test_eval_without_checkpoint_fails(tmp_path, capsys):
    assert run(tmp_path, "eval", "--task", "mnist", "--checkpoint", "none") != 0
    assert "checkpoint" in capsys.readouterr().err
    assert run(tmp_path, "eval", "--task", "mnist", "--checkpoint", str(tmp_path / "nope.dfn")) == 2


def test_unknown_key_and_missing_command(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("task = steerable\nlearning_rate = 0.1\n")
    assert run(tmp_path, "train", "--config", str(cfg)) == 1
    err = capsys.readouterr().err
    assert "c.txt:2" in err and "learning_rate" in err
    assert cli.run([]) == 1
    assert cli.run(["train", "--bogus", "1"]) == 1
    assert cli.run(["train", "--task", "nope"]) == 1
    assert cli.run(["count-params"]) == 1


def test_config_parsing_rules():
    vals = cli.parse_config_text("# comment\n task = mnist  # trailing\nbatch=4\n\nteacher-forcing = on\n")
    assert vals == {"task": "mnist", "batch": 4, "teacher_forcing": True}
    with pytest.raises(cli.UsageError, match="duplicate"):
        cli.parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(cli.UsageError, match=":1:"):
        cli.parse_config_text("just words\n")
    with pytest.raises(cli.UsageError, match="bad value"):
        cli.parse_config_text("batch = many\n")


def test_flags_override_file_and_config_echo_round_trips(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("task = steerable\niterations = 50\nseed = 3\nhidden_sizes = 8\n")
    assert run(tmp_path, "train", "--config", str(cfg), "--iterations", "4") == 0
    echoed = (tmp_path / "out" / "config.txt").read_text()
    assert "iterations = 4" in echoed and "seed = 3" in echoed
    assert (tmp_path / "out" / "metrics.tsv").read_text().count("\n") == 4
    # the echo is itself a valid config that reproduces the run
    (tmp_path / "echo.txt").write_text(echoed.replace(str(tmp_path / "out"), str(tmp_path / "again")))
    assert cli.run(["train", "--config", str(tmp_path / "echo.txt")]) == 0
    assert (tmp_path / "again" / "metrics.tsv").read_bytes() == (tmp_path / "out" / "metrics.tsv").read_bytes()


def test_incompatible_loss_rejected(tmp_path):
    assert run(tmp_path, "train", "--task", "stereo", "--loss", "bce", "--iterations", "1") == 1


def test_commands_write_only_inside_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    common = ["--task", "driving", "--height", "16", "--width", "16", "--enc-channels", "4",
              "--hidden-channels", "8", "--batch", "2"]
    assert cli.run(["train", *common, "--iterations", "2", "--out", "t"]) == 0
    ck = str(tmp_path / "t" / "model.dfn")
    assert cli.run(["eval", *common, "--checkpoint", ck, "--count", "4", "--out", "e"]) == 0
    assert cli.run(["predict", *common, "--checkpoint", ck, "--count", "2", "--out", "p"]) == 0
    assert cli.run(["viz-flow", *common, "--checkpoint", ck, "--count", "2", "--out", "v"]) == 0
    assert cli.run(["gen-data", *common, "--count", "2", "--out", "g"]) == 0
    assert cli.run(["count-params", *common, "--out", "c"]) == 0
    assert sorted(os.listdir(tmp_path)) == ["c", "e", "g", "p", "t", "v"]
    assert all(f.endswith((".pgm", ".ppm", ".txt", ".tsv", ".dfn", ".npz"))
               for d in "cegptv" for f in files_under(tmp_path / d))
    eval_txt = (tmp_path / "e" / "eval.txt").read_text()
    assert "euclidean" in eval_txt
    pgm = [f for f in files_under(tmp_path / "p") if f.endswith(".pgm")]
    assert pgm and read_pnm(tmp_path / "p" / pgm[0]).channels == 1
    ppm = [f for f in files_under(tmp_path / "v") if f.endswith(".ppm")]
    assert ppm and read_pnm(tmp_path / "v" / ppm[0]).channels == 3


def test_checkpoint_task_mismatch(tmp_path):
    assert cli.run(["train", "--task", "steerable", "--iterations", "1", "--hidden-sizes", "4",
                    "--out", str(tmp_path / "s")]) == 0
    code = cli.run(["eval", "--task", "stereo", "--checkpoint", str(tmp_path / "s" / "model.dfn"),
                    "--out", str(tmp_path / "e")])
    assert code == 1


def test_count_params_reports_total(tmp_path, capsys):
    assert run(tmp_path, "count-params", "--task", "mnist") == 0
    assert "189,969" in capsys.readouterr().out


def test_gen_data_mnist_from_idx(tmp_path):
    from dfnet.datagen import write_idx_images

    idx = tmp_path / "digits.idx"
    write_idx_images(np.random.default_rng(0).integers(0, 256, (40, 28, 28)), idx)
    assert run(tmp_path, "gen-data", "--task", "mnist", "--mnist-path", str(idx), "--count", "2") == 0
    data = np.load(tmp_path / "out" / "mnist.npz")
    assert data["frames"].shape == (2, 20, 1, 64, 64)
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x08\x01" + bytes(12))
    assert run(tmp_path, "gen-data", "--task", "mnist", "--mnist-path", str(tmp_path / "bad.idx")) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dfnet", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("dfnet ")
    proc = subprocess.run([sys.executable, "-m", "dfnet", "eval", "--task", "mnist", "--checkpoint", "none",
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr and not proc.stdout
