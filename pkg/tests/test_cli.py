import json

import pytest

from ifa.cli import main

CONFIG = """
[data]
num_requests = 30
num_users = 40
num_items = 120
n = 32
m = 16
impression_budget = 4

[model]
attn_dim = 4
hidden = 8
item_dims = 2, 2, 2, 2

[train]
lr = 0.01
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "c.ini").write_text(CONFIG)
    assert main(["generate", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "d.jsonl")]) == 0
    return tmp_path


def _train(d, name, *extra):
    return main(["train", "--config", str(d / "c.ini"), "--data", str(d / "d.jsonl"), "--ckpt", str(d / name), *extra])


def test_generate_writes_requests(workdir):
    assert len((workdir / "d.jsonl").read_text().splitlines()) == 30


def test_train_writes_checkpoint_sidecar_and_log(workdir):
    assert _train(workdir, "a.ckpt") == 0
    assert (workdir / "a.ckpt").read_bytes()[:4] == b"IFA1"
    assert "[model]" in (workdir / "a.ckpt.cfg").read_text()
    lines = (workdir / "a.ckpt.log").read_text().splitlines()
    assert len(lines) == 30 and lines[0].startswith("step=1 ")


def test_training_twice_gives_identical_checkpoints(workdir):
    assert _train(workdir, "a.ckpt") == 0
    assert _train(workdir, "b.ckpt") == 0
    assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()
    # log is rewritten, not appended, on a rerun
    assert _train(workdir, "a.ckpt") == 0
    assert len((workdir / "a.ckpt.log").read_text().splitlines()) == 30


def test_lr_zero_then_eval_twice_is_identical(workdir, capsys):
    assert _train(workdir, "z.ckpt", "--lr", "0") == 0
    capsys.readouterr()
    args = ["eval", "--ckpt", str(workdir / "z.ckpt"), "--data", str(workdir / "d.jsonl")]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first and "auc_cli=" in first


def test_eval_rejects_mismatched_sidecar(workdir, capsys):
    assert _train(workdir, "a.ckpt") == 0
    cfg = workdir / "a.ckpt.cfg"
    cfg.write_text(cfg.read_text().replace("seed = 0", "seed = 5"))
    assert main(["eval", "--ckpt", str(workdir / "a.ckpt"), "--data", str(workdir / "d.jsonl")]) == 2
    assert "digest" in capsys.readouterr().err


def test_ablate_has_three_rows(workdir, capsys):
    assert main(["ablate", "--config", str(workdir / "c.ini"), "--data", str(workdir / "d.jsonl")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["model", "auc_imp", "auc_cli"]
    assert [line.split()[0] for line in lines[1:]] == ["IFA", "IFA-RAM", "IFA-FSM-RAM"]


def test_compare_lists_baselines(workdir, capsys):
    assert main(["compare", "--config", str(workdir / "c.ini"), "--data", str(workdir / "d.jsonl")]) == 0
    names = [line.split()[0] for line in capsys.readouterr().out.strip().splitlines()[1:]]
    assert names == ["IFA", "SIM-hard", "DIN", "AvgPooling"]


def test_check_passes_and_fault_fails(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6
    assert main(["check", "--fault", "skip_norm"]) == 1
    out = capsys.readouterr().out
    assert any(line.startswith("equivalence") and "FAIL" in line for line in out.splitlines())


def test_bench_writes_records(tmp_path, capsys):
    out = tmp_path / "b.jsonl"
    assert main(["bench", "--grid", "s=16..64", "--kind", "linear", "--out", str(out), "--d", "4"]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["m"] for r in recs] == [16, 32, 64] and all(r["reps"] >= 5 for r in recs)
    assert "loglog slope vs s" in capsys.readouterr().out


def test_exit_codes(tmp_path, workdir):
    assert main(["bench", "--grid", "s=9..x", "--kind", "linear", "--out", str(tmp_path / "b")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--data", str(workdir / "d.jsonl")]) == 3
    assert main(["generate", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "x")]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2
