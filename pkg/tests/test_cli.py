import copy
import csv
import json
import time

import numpy as np
import pytest

from cdtm import autodiff
from cdtm.checkpoint import load_checkpoint
from cdtm.cli import main
from cdtm.config import load_config
from cdtm.model import build_models

TINY = {
    "schema": {"domains": [
        {"name": "S", "domain_id": 1, "n_rows": 3000, "base_ctr": 0.2,
         "fields": [{"field_id": 0, "kind": "transferable", "global_field_id": 0, "vocab_size": 20},
                    {"field_id": 1, "kind": "transferable", "global_field_id": 1, "vocab_size": 20},
                    {"field_id": 5, "kind": "nontransferable", "vocab_size": 5}]},
        {"name": "T", "domain_id": 0, "n_rows": 1000, "base_ctr": 0.2,
         "fields": [{"field_id": 0, "kind": "transferable", "global_field_id": 0, "vocab_size": 20},
                    {"field_id": 1, "kind": "transferable", "global_field_id": 1, "vocab_size": 20},
                    {"field_id": 6, "kind": "nontransferable", "vocab_size": 5}]}]},
    "model": {"embedding_dim": 4, "attention_hidden": 4, "hidden_sizes": [8, 4]},
    "train": {"steps": 60, "batch_size": 32, "checkpoint_every": 25},
    "experiment": {"sources": ["S"], "targets": ["T"], "seeds": [0], "eval_every": 20},
}


def write_config(path, **overrides):
    cfg = copy.deepcopy(TINY)
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    path.write_text(json.dumps(cfg, indent=1))
    return str(path)


@pytest.fixture
def tiny(tmp_path):
    cfg = write_config(tmp_path / "tiny.json")
    data = tmp_path / "data"
    assert main(["gen-data", "--config", cfg, "--out-dir", str(data)]) == 0
    return tmp_path, cfg, data


def read_metrics(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.reader(lines[1:]))


# -- gen-data -------------------------------------------------------------

def test_gen_data_table1_preset(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--config", "preset:table1", "--out-dir", str(out)]) == 0
    files = sorted(p.name for p in out.glob("*.cdtmds"))
    assert files == sorted(f"{n}.cdtmds" for n in ("H", "J", "F1", "F2", "F3", "F4"))
    manifest = json.loads((out / "manifest.json").read_text())
    assert sorted(manifest["files"]) == ["F1", "F2", "F3", "F4", "H", "J"]
    assert manifest["config_fingerprint"] == load_config("preset:table1").fingerprint
    assert (out / "ground_truth.json").is_file()


def test_gen_data_rerun_identical(tiny):
    tmp, cfg, data = tiny
    other = tmp / "again"
    assert main(["gen-data", "--config", cfg, "--out-dir", str(other)]) == 0
    assert (data / "manifest.json").read_bytes() == (other / "manifest.json").read_bytes()
    for p in data.iterdir():
        assert p.read_bytes() == (other / p.name).read_bytes(), p.name


def test_gen_data_seed_changes_stamp_and_data(tiny):
    tmp, cfg, data = tiny
    other = tmp / "s7"
    assert main(["gen-data", "--config", cfg, "--out-dir", str(other), "--seed", "7"]) == 0
    a = json.loads((data / "manifest.json").read_text())
    b = json.loads((other / "manifest.json").read_text())
    assert b["seed"] == 7 and a["seed"] == 0
    assert a["data_fingerprint"] != b["data_fingerprint"]
    assert a["files"]["T"]["sha256"] != b["files"]["T"]["sha256"]


def test_gen_data_bad_split_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", split={"train_frac": 1.5})
    assert main(["gen-data", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2
    assert "train_frac" in capsys.readouterr().err


def test_config_diagnostics_name_line_and_field(tmp_path, capsys):
    bad = tmp_path / "broken.json"
    bad.write_text('{\n "schema": {\n  "domains": [,]\n }\n}\n')
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err
    cfg = write_config(tmp_path / "unknown.json", train={"stepz": 3})
    assert main(["gen-data", "--config", cfg]) == 2
    assert "stepz" in capsys.readouterr().err


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["experiment", "--task", "5", "--config", "x.json"]) == 2
    assert main(["nonsense"]) == 2


# -- train ----------------------------------------------------------------

def run_train(cfg, data, out, *extra):
    return main(["train", "--config", cfg, "--data-dir", str(data), "--out-dir", str(out), *extra])


def test_train_outputs_and_summary(tiny, capsys):
    tmp, cfg, data = tiny
    capsys.readouterr()
    assert run_train(cfg, data, tmp / "run") == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    fp = load_config(cfg).fingerprint
    assert line.startswith("trained 60 steps; valid AUC S=") and f"config={fp} seed=0" in line
    stamp, rows = read_metrics(tmp / "run" / "metrics.csv")
    assert stamp == f"# config={fp} seed=0"
    assert rows[0] == ["step", "domain", "loss", "aux", "align_dist"]
    assert [int(r[0]) for r in rows[1:]] == list(range(60))
    ck = load_checkpoint(tmp / "run" / "checkpoint.ckpt")
    assert ck.header["config_fingerprint"] == fp and ck.state.step == 60


def test_train_zero_steps_equals_init(tiny):
    tmp, cfg, data = tiny
    assert run_train(cfg, data, tmp / "z", "--steps", "0", "--seed", "3") == 0
    ck = load_checkpoint(tmp / "z" / "checkpoint.ckpt")
    rc = load_config(cfg)
    shared, models = build_models(rc.schema, rc.model, 3, with_shared=True)
    assert np.array_equal(ck.shared.W_g.data, shared.W_g.data)
    for n, m in models.items():
        for p, t in m.params.items():
            assert np.array_equal(ck.models[n][p].data, t.data), (n, p)


def test_train_base_mode_leaves_shared_rows_at_init(tmp_path):
    cfg = write_config(tmp_path / "base.json", train={"mode": "base"})
    data = tmp_path / "data"
    assert main(["gen-data", "--config", cfg, "--out-dir", str(data)]) == 0
    assert run_train(cfg, data, tmp_path / "run") == 0
    ck = load_checkpoint(tmp_path / "run" / "checkpoint.ckpt")
    rc = load_config(cfg)
    shared, models = build_models(rc.schema, rc.model, 0, with_shared=True)
    assert np.array_equal(ck.shared.W_g.data, shared.W_g.data)
    assert not np.array_equal(ck.models["T"]["W"].data, models["T"]["W"].data)


def test_train_resume_matches_uninterrupted(tiny):
    tmp, cfg, data = tiny
    assert run_train(cfg, data, tmp / "full") == 0
    assert run_train(cfg, data, tmp / "part", "--steps", "35") == 0
    assert load_checkpoint(tmp / "part" / "checkpoint.ckpt").state.step == 35
    assert run_train(cfg, data, tmp / "part", "--resume") == 0
    for name in ("metrics.csv", "checkpoint.ckpt"):
        assert (tmp / "full" / name).read_bytes() == (tmp / "part" / name).read_bytes(), name


def test_train_resume_from_stale_metrics(tiny):
    # an interruption after the checkpoint leaves metric rows beyond it; resume drops them
    tmp, cfg, data = tiny
    assert run_train(cfg, data, tmp / "full") == 0
    assert run_train(cfg, data, tmp / "part", "--steps", "25") == 0
    full_metrics = (tmp / "full" / "metrics.csv").read_text().splitlines()
    (tmp / "part" / "metrics.csv").write_text("\n".join(full_metrics[:40]) + "\n")
    assert run_train(cfg, data, tmp / "part", "--resume") == 0
    assert (tmp / "full" / "metrics.csv").read_bytes() == (tmp / "part" / "metrics.csv").read_bytes()


def test_train_resume_other_seed_is_fingerprint_error(tiny):
    tmp, cfg, data = tiny
    assert run_train(cfg, data, tmp / "r", "--steps", "10") == 0
    assert run_train(cfg, data, tmp / "r", "--resume", "--seed", "4") == 3


def test_train_data_fingerprint_mismatch(tiny, tmp_path):
    _, _, data = tiny
    other = write_config(tmp_path / "other.json", generator={"seed": 9})
    assert run_train(other, data, tmp_path / "x") == 3


def test_train_tampered_dataset_is_fingerprint_error(tiny):
    tmp, cfg, data = tiny
    p = data / "T.cdtmds"
    buf = bytearray(p.read_bytes())
    buf[-1] ^= 1
    p.write_bytes(bytes(buf))
    assert run_train(cfg, data, tmp / "x") == 3


def test_train_missing_data(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert run_train(cfg, tmp_path / "nowhere", tmp_path / "x") == 4


# -- experiment and report ------------------------------------------------

def test_experiment_missing_data_exit_4(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["experiment", "--task", "1", "--config", cfg, "--data-dir", str(tmp_path / "none")]) == 4


def test_experiment_bad_plan_is_config_error(tiny):
    tmp, cfg, data = tiny
    # the tiny config has a single source, which task 2 rejects
    assert main(["experiment", "--task", "2", "--config", cfg, "--data-dir", str(data)]) == 2


def test_experiment_task3_columns_and_report(tiny, capsys):
    tmp, cfg, data = tiny
    out = tmp / "rep"
    rc = main(["experiment", "--task", "3", "--config", cfg, "--data-dir", str(data), "--out-dir", str(out),
               "--steps", "40", "--stamp", "t"])
    assert rc == 0
    printed = capsys.readouterr().out.split()
    names = [p.rsplit("/", 1)[-1] for p in printed]
    assert names == ["task3_t.csv", "task3_t.json", "task3_t_auc.png", "task3_t_loss.png", "task3_t_align.png"]
    lines = (out / "task3_t.csv").read_text().splitlines()
    assert lines[0] == f"# config={load_config(cfg).fingerprint} seeds=0 task=3"
    assert lines[1] == "Flight,Base AUC,Base Imp,CDTM-DA AUC,CDTM-DA Imp,CDTM AUC,CDTM Imp"
    assert lines[2].startswith("T,")

    again = tmp / "rep2"
    assert main(["report", "--input", str(out / "task3_t.json"), "--out-dir", str(again), "--stamp", "t"]) == 0
    for name in names:
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_report_missing_input(tmp_path):
    assert main(["report", "--input", str(tmp_path / "nope.json")]) == 4


# -- selftest -------------------------------------------------------------

def test_selftest_passes_quickly(capsys):
    t0 = time.perf_counter()
    assert main(["selftest"]) == 0
    assert time.perf_counter() - t0 < 60
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.strip().endswith("selftest passed")


def test_selftest_catches_sigmoid_sign_flip(monkeypatch, capsys):
    real = autodiff._sigmoid_backward
    monkeypatch.setattr(autodiff, "_sigmoid_backward", lambda s, g: -real(s, g))
    assert main(["selftest"]) == 1
    fails = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("FAIL")]
    assert fails and "gradient" in fails[0]
