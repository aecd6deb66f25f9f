import subprocess
import sys

import pytest

from cyclenet import pathfinder as pf
from cyclenet.checkpoint import load_checkpoint
from cyclenet.cli import main

GEN = """width = 16
path_length = 2
distractor_factor = 0
dash_length = 2
dash_gap = 1
circle_radius = 1
n_train = 16
n_test = 8
seed = 4
"""


def net_cfg(data_stem):
    return f"""input_shape = 16,16,1
first_features = 2
first_kernel = 3
cycles = 4,4
kind = orthogonal
kernel_size = 3
head = global_pool
train_data = {data_stem}.train.pfds
test_data = {data_stem}.test.pfds
epochs = 2
batch_size = 8
lr = 0.01
seed = 3
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "gen.cfg").write_text(GEN)
    assert main(["gen-pathfinder", "--config", str(tmp_path / "gen.cfg"), "--out", str(tmp_path / "d")]) == 0
    (tmp_path / "net.cfg").write_text(net_cfg("d"))
    return tmp_path


def test_gen_pathfinder_outputs(workspace, capsys):
    imgs, labels = pf.read_pfds(workspace / "d.train.pfds")
    assert imgs.shape == (16, 16, 16) and labels.sum() == 8
    assert len(pf.read_pfds(workspace / "d.test.pfds")[1]) == 8
    # --seed overrides the config seed
    assert main(["gen-pathfinder", "--config", str(workspace / "gen.cfg"), "--out", str(workspace / "e"),
                 "--seed", "4"]) == 0
    assert (workspace / "e.train.pfds").read_bytes() == (workspace / "d.train.pfds").read_bytes()
    assert main(["gen-pathfinder", "--config", str(workspace / "gen.cfg"), "--out", str(workspace / "f"),
                 "--seed", "5"]) == 0
    assert (workspace / "f.train.pfds").read_bytes() != (workspace / "d.train.pfds").read_bytes()


def test_train_eval_profile(workspace, capsys):
    ck, met = workspace / "m.cyck", workspace / "m.csv"
    assert main(["train", "--config", str(workspace / "net.cfg"), "--out", str(ck), "--metrics", str(met)]) == 0
    lines = met.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,eval_loss,eval_acc,lr" and len(lines) == 3
    assert load_checkpoint(ck).epoch == 2
    ck2, met2 = workspace / "m2.cyck", workspace / "m2.csv"
    assert main(["train", "--config", str(workspace / "net.cfg"), "--out", str(ck2), "--metrics", str(met2)]) == 0
    assert ck2.read_bytes() == ck.read_bytes() and met2.read_bytes() == met.read_bytes()

    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ck), "--data", str(workspace / "d.test.pfds")]) == 0
    out = capsys.readouterr().out.split()
    assert out[0] == "accuracy" and 0 <= float(out[1]) <= 1 and out[2] == "loss"

    prof = workspace / "rf.csv"
    assert main(["rf-profile", "--ckpt", str(ck), "--data", str(workspace / "d.test.pfds"), "--out", str(prof),
                 "--samples", "6"]) == 0
    rows = prof.read_text().splitlines()
    assert rows[0] == "depth,layers,mean_norm_rf,std_norm_rf,n_samples"
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "1", "2"]


def test_param_count(workspace, capsys):
    assert main(["param-count", "--config", str(workspace / "net.cfg")]) == 0
    out = capsys.readouterr().out
    assert "kernel" in out.lower()


def test_cycle_equiv_check(capsys):
    assert main(["cycle-equiv-check", "--size", "2", "--trials", "2"]) == 0
    assert capsys.readouterr().out.startswith("16 cases")


def test_exit_codes(workspace, capsys):
    # validation errors -> 1
    assert main(["cycle-equiv-check", "--size", "0"]) == 1
    assert main(["cycle-equiv-check", "--size", "1", "--seed", "-1"]) == 1
    assert main(["cycle-equiv-check", "--size", "1", "--seed", str(2 ** 64)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config"])
    assert exc.value.code == 1
    bad = workspace / "bad.cfg"
    bad.write_text("cycles = 2\nkind = triangle\n")
    assert main(["param-count", "--config", str(bad)]) == 1
    (workspace / "junk.cyck").write_bytes(b"CYCK\x01")
    assert main(["eval", "--ckpt", str(workspace / "junk.cyck"), "--data", str(workspace / "d.test.pfds")]) == 1
    (workspace / "junk.pfds").write_bytes(b"PFDS")
    ck = workspace / "m.cyck"
    assert main(["train", "--config", str(workspace / "net.cfg"), "--out", str(ck)]) == 0
    assert main(["eval", "--ckpt", str(ck), "--data", str(workspace / "junk.pfds")]) == 1
    # I/O errors -> 2
    assert main(["param-count", "--config", str(workspace / "missing.cfg")]) == 2
    assert main(["eval", "--ckpt", str(workspace / "missing.cyck"), "--data", str(workspace / "d.test.pfds")]) == 2
    assert main(["gen-pathfinder", "--config", str(workspace / "gen.cfg"),
                 "--out", str(workspace / "no" / "dir" / "x")]) == 2
    err = capsys.readouterr().err
    assert "missing.cfg" in err


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cyclenet.cli", "cycle-equiv-check", "--size", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "ok" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "cyclenet.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1
