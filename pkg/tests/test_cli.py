import json

import pytest

from blkrew import modelfile
from blkrew.cli import main

TRAIN_CFG = """\
task = synthetic
seed = 2
lr = 0.05
epochs = 10
classes = 3
features = 8
samples = 120
hidden = 12
"""

PRUNE_CFG = TRAIN_CFG + """\
lambda = 5e-4
epsilon_scale = 1e-2
block = 4x4
T = 2
epochs_per_iteration = 2
tau = 0.2
retrain_epochs = 3
"""


def _run(tmp_path, *argv):
    reports = tmp_path / "reports"
    before = set(reports.glob("*.json")) if reports.exists() else set()
    code = main([*argv, "--report-dir", str(reports)])
    new = sorted(set(reports.glob("*.json")) - before) if reports.exists() else []
    return code, (json.loads(new[-1].read_text()) if new else None)


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "train.cfg").write_text(TRAIN_CFG)
    (tmp_path / "prune.cfg").write_text(PRUNE_CFG)
    return tmp_path


def _train(workdir, name="dense.blk"):
    return _run(workdir, "train", "--config", str(workdir / "train.cfg"),
                "--out", str(workdir / name))


def test_missing_lr_exits_2_naming_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TRAIN_CFG.replace("lr = 0.05\n", ""))
    code, _ = _run(tmp_path, "train", "--config", str(cfg), "--out", str(tmp_path / "m.blk"))
    assert code == 2
    assert "'lr'" in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TRAIN_CFG + "learning_rate = 1\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "bad.cfg:9" in capsys.readouterr().err


def test_train_is_byte_identical_per_seed(workdir):
    code, rep = _train(workdir, "a.blk")
    assert code == 0 and rep["accuracy"] > 0.5
    _train(workdir, "b.blk")
    assert (workdir / "a.blk").read_bytes() == (workdir / "b.blk").read_bytes()


def test_corrupt_checkpoint_exits_1(workdir):
    _train(workdir)
    raw = bytearray((workdir / "dense.blk").read_bytes())
    raw[40] ^= 0xFF
    (workdir / "bad.blk").write_bytes(bytes(raw))
    code, _ = _run(workdir, "prune", "--config", str(workdir / "prune.cfg"),
                   "--checkpoint", str(workdir / "bad.blk"))
    assert code == 1


def test_prune_reorder_infer_chain(workdir):
    _train(workdir)
    pcfg = str(workdir / "prune.cfg")
    code, rep = _run(workdir, "prune", "--config", pcfg, "--checkpoint",
                     str(workdir / "dense.blk"), "--out", str(workdir / "pruned.blk"))
    assert code == 0 and rep["compression_rate"] >= 1.0
    assert {"base_accuracy", "pruned_accuracy", "layers", "critical_weights"} <= set(rep)

    code, inf = _run(workdir, "infer", "--config", pcfg, "--checkpoint", str(workdir / "pruned.blk"))
    assert code == 0 and inf["accuracy"] == rep["pruned_accuracy"]

    code, _ = _run(workdir, "reorder", "--config", pcfg, "--checkpoint",
                   str(workdir / "pruned.blk"), "--out", str(workdir / "r1.blk"))
    assert code == 0
    assert set(modelfile.load(workdir / "r1.blk").representation(i) for i in range(2)) == {"reordered"}
    accs = []
    for w in (1, 2, 4, 8):
        code, inf = _run(workdir, "infer", "--config", pcfg, "--checkpoint",
                         str(workdir / "r1.blk"), "--workers", str(w))
        accs.append(inf["accuracy"])
    assert accs == [rep["pruned_accuracy"]] * 4

    _run(workdir, "reorder", "--config", pcfg, "--checkpoint", str(workdir / "r1.blk"),
         "--out", str(workdir / "r2.blk"))
    assert (workdir / "r1.blk").read_bytes() == (workdir / "r2.blk").read_bytes()


def test_inert_prune_keeps_everything(workdir):
    _train(workdir)
    cfg = workdir / "inert.cfg"
    cfg.write_text(PRUNE_CFG.replace("lambda = 5e-4", "lambda = 0").replace("tau = 0.2", "tau = 1e-12"))
    code, rep = _run(workdir, "prune", "--config", str(cfg), "--checkpoint", str(workdir / "dense.blk"))
    assert code == 0 and rep["compression_rate"] == 1.0


def test_dense_model_reorder_warns(workdir, caplog):
    _train(workdir)
    with caplog.at_level("WARNING"):
        code, rep = _run(workdir, "reorder", "--checkpoint", str(workdir / "dense.blk"),
                         "--out", str(workdir / "r.blk"))
    assert code == 0 and "no mask" in caplog.text
    assert all(layer["groups"] == 1 for layer in rep["layers"])


def test_bench_and_report(workdir, capsys):
    cfg = workdir / "bench.cfg"
    cfg.write_text("bench_shapes = 32x48x8\nrepeats = 3\n")
    code, rep = _run(workdir, "bench", "--config", str(cfg), "--workers", "2")
    assert code == 0
    row = rep["bench"][0]
    for variant in ("dense", "naive_sparse", "reordered"):
        assert {"median_ms", "min_ms", "max_ms"} <= set(row[variant])
    path = next((workdir / "reports").glob("bench-*.json"))
    capsys.readouterr()
    assert main(["report", str(path)]) == 0
    assert "bench 32x48x8" in capsys.readouterr().out
    assert main(["report", str(workdir / "missing.json")]) == 2


def test_prune_without_checkpoint_is_usage_error(workdir):
    code, _ = _run(workdir, "prune", "--config", str(workdir / "prune.cfg"))
    assert code == 2
