import json
import time

import numpy as np
import pytest

from dmf.cli import main
from dmf.model import load_checkpoint

SMALL = ["--set", "users=40", "--set", "items=120", "--set", "examples_per_user=15"]
TINY_MODEL = ["--preset", "amazon", "--set", "d=8", "--set", "d_h=8", "--set", "heads=2", "--set",
              "pred_hidden=[8, 4]", "--set", "buckets=5"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--out", str(out), "--seed", "3", *SMALL]) == 0
    return out


def test_gen_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        code, rep = run(capsys, "gen", "--out", str(tmp_path / name), "--seed", "1", *SMALL)
        assert code == 0 and rep["train"] + rep["test"] == 40 * 15
    for f in ("train.jsonl", "test.jsonl", "items.mmf", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_without_out_fails_cleanly(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _ = run(capsys, "gen", *SMALL)
    assert code == 2
    assert list(tmp_path.iterdir()) == []


def test_unknown_config_key_rejected(tmp_path, capsys, data_dir):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[train]\nlearning_rat = 0.1\n")
    assert run(capsys, "train", "--config", str(cfg), "--data", str(data_dir))[0] == 2
    cfg.write_text("[trian]\nepochs = 1\n")
    assert run(capsys, "train", "--config", str(cfg), "--data", str(data_dir))[0] == 2


def test_flags_override_config(tmp_path, capsys, data_dir):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 5\n[train]\nepochs = 4\nstrategy = \"ta\"\nd = 8\nd_h = 8\nheads = 2\n"
                   "pred_hidden = [8, 4]\n")
    code, rep = run(capsys, "train", "--config", str(cfg), "--data", str(data_dir), "--epochs", "1")
    assert code == 0
    assert rep["epochs"] == 1 and rep["strategy"] == "ta"


def test_train_dmf_alpha_zero_and_eval(tmp_path, capsys, data_dir):
    ckpt = tmp_path / "m.dmf"
    code, rep = run(capsys, "train", "--data", str(data_dir), "--strategy", "dmf", "--alpha", "0", "--epochs", "1",
                    "--checkpoint", str(ckpt), *TINY_MODEL)
    assert code == 0 and rep["alpha"] == 0.0
    params, *_ = load_checkpoint(ckpt)
    assert params.config.alpha == 0.0 and params.config.strategy == "dmf"
    code, ev = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data_dir))
    assert code == 0 and set(ev) == {"auc", "gauc", "n_users_skipped"}
    assert ev["auc"] == pytest.approx(rep["auc"], abs=1e-12)


def test_alpha_sweep_reports_tuned_value(tmp_path, capsys, data_dir):
    code, rep = run(capsys, "train", "--data", str(data_dir), "--alpha", "0,1", "--epochs", "1",
                    "--checkpoint", str(tmp_path / "s.dmf"), *TINY_MODEL)
    assert code == 0 and rep["tuned_alpha"] in (0.0, 1.0)
    assert (tmp_path / "s.dmf.alpha0").exists() and (tmp_path / "s.dmf.alpha1").exists()


def test_resume_matches_continuous_training(tmp_path, capsys, data_dir):
    base = ["train", "--data", str(data_dir), "--strategy", "decoupled", *TINY_MODEL]
    assert run(capsys, *base, "--epochs", "2", "--checkpoint", str(tmp_path / "full.dmf"))[0] == 0
    assert run(capsys, *base, "--epochs", "1", "--checkpoint", str(tmp_path / "half.dmf"))[0] == 0
    code, rep = run(capsys, *base, "--epochs", "1", "--resume", str(tmp_path / "half.dmf"),
                    "--checkpoint", str(tmp_path / "resumed.dmf"))
    assert code == 0 and rep["epochs"] == 2
    full, *_ = load_checkpoint(tmp_path / "full.dmf")
    resumed, *_ = load_checkpoint(tmp_path / "resumed.dmf")
    for k, v in full.tensors.items():
        np.testing.assert_array_equal(resumed.tensors[k], v)


def test_verify_passes_and_fault_fails(capsys):
    code, rep = run(capsys, "verify", "--trials", "5")
    assert code == 0 and rep["passed"]
    code, rep = run(capsys, "verify", "--trials", "5", "--inject-fault")
    assert code == 1 and not rep["passed"]


def test_bench_flops_only_is_fast(capsys):
    t0 = time.perf_counter()
    code, rep = run(capsys, "bench", "--flops-only", "--b", "1000", "--l", "400", "--d-h", "128")
    assert time.perf_counter() - t0 < 1.0
    assert code == 0 and "qps" not in rep
    cells = {(r["strategy"], r["reuse"]): r["kv_flops"] for r in rep["flops"]}
    assert cells[("early", True)] == 13_209_600_000 and cells[("decoupled", True)] == 115_507_200


def test_bench_respects_thread_cap(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DMF_THREADS", "1")
    csv_path = tmp_path / "q.csv"
    code, rep = run(capsys, "bench", "--strategies", "decoupled", "--b", "20", "--l", "10", "--d-h", "16",
                    "--duration", "1", "--workers", "3", "--csv", str(csv_path))
    assert code == 0
    assert rep["qps"][0]["config"]["workers"] == 1
    assert csv_path.read_text().startswith("strategy,")
    monkeypatch.setenv("DMF_THREADS", "zero")
    assert run(capsys, "bench", "--strategies", "decoupled", "--b", "2", "--l", "2", "--d-h", "8",
               "--duration", "1")[0] == 2


def test_bench_rejects_unknown_preset_and_strategy(capsys):
    assert run(capsys, "bench", "--flops-only", "--preset", "nope")[0] == 2
    assert run(capsys, "bench", "--flops-only", "--strategies", "warp")[0] == 2
