import json
from pathlib import Path

import pytest

from vdmini import cli

GOLDEN = Path(__file__).parent / "golden" / "plan.json"

FAST = {
    "data": {"n_train": 4, "n_eval": 4, "frames": 2},
    "model": {"widths": [4, 6, 8], "emb_dim": 8},
    "schedule": {"n_levels": 4},
    "train_teacher": {"steps": 2, "batch": 2},
    "profile": {"sample_steps": 1, "latency_reps": 3},
    "distill": {"steps": 2, "batch": 2},
    "eval": {"sample_steps": 1, "latency_reps": 0},
}


def _cfg_file(tmp_path, extra=None):
    cfg = json.loads(json.dumps(FAST))
    if extra:
        cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(args, capsys=None):
    return cli.main(args)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def test_fmt6_is_locale_independent_6_sig_digits():
    assert cli.fmt6(3.14159265) == "3.14159"
    assert cli.fmt6(1234567.0) == "1.23457e+06"
    assert cli.fmt6(42) == "42"
    assert cli.fmt6(0.000123456789) == "0.000123457"


def test_config_hash_ignores_out_dir_and_orders_keys():
    a = cli.load_config(None, seed=1, out="runA")
    b = cli.load_config(None, seed=1, out="runB")
    c = cli.load_config(None, seed=2, out="runA")
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash(c)


def test_env_overrides_nested_keys():
    env = {"VDMINI_DATA__N_TRAIN": "7", "VDMINI_SEED": "5",
           "VDMINI_EVAL__CHECKPOINT": "teacher", "OTHER": "1"}
    cfg = cli.load_config(None, None, None, environ=env)
    assert cfg["data"]["n_train"] == 7
    assert cfg["seed"] == 5
    assert cfg["eval"]["checkpoint"] == "teacher"


def test_unknown_config_keys_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"no_such_section": {}}))
    rc = _run(["plan", "--config", str(path), "--out", str(tmp_path / "r")])
    assert rc == cli.EXIT_CONFIG


def test_unparseable_config_is_exit_2_with_error_record(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    rc = _run(["plan", "--config", str(path), "--out", str(tmp_path / "r")])
    assert rc == cli.EXIT_CONFIG
    err = capsys.readouterr().err.strip()
    record = json.loads(err.splitlines()[-1])
    assert record["code"] == cli.EXIT_CONFIG
    assert "config" in record["error"]


def test_stage_seed_is_stable_and_distinct():
    a = cli.stage_seed(0, "gen-data")
    assert a == cli.stage_seed(0, "gen-data")
    assert a != cli.stage_seed(0, "distill")
    assert a != cli.stage_seed(1, "gen-data")
    assert 0 <= a < 2 ** 64


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def test_plan_matches_golden_file(tmp_path):
    out = tmp_path / "run"
    # the golden plan is pinned for the default (full-count) architecture
    rc = _run(["plan", "--out", str(out)])
    assert rc == cli.EXIT_OK
    doc = json.loads((out / "plan.json").read_text())
    golden = json.loads(GOLDEN.read_text())
    for key, value in golden.items():
        assert doc[key] == value


def test_gen_data_is_deterministic(tmp_path):
    cfg = _cfg_file(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert _run(["gen-data", "--config", cfg, "--out", str(out_a)]) == cli.EXIT_OK
    assert _run(["gen-data", "--config", cfg, "--out", str(out_b)]) == cli.EXIT_OK
    for name in ("train.vdds", "eval.vdds"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_distill_without_plan_is_missing_prerequisite(tmp_path, capsys):
    cfg = _cfg_file(tmp_path)
    out = tmp_path / "run"
    rc = _run(["distill", "--config", cfg, "--out", str(out)])
    assert rc == cli.EXIT_MISSING
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["message"] == "missing prerequisite: pruning plan"


def test_unknown_subcommand_fails(capsys):
    with pytest.raises(SystemExit):
        cli.main(["no-such-command"])


def test_seed_flag_equivalent_to_env_override(tmp_path):
    cfg_flag = cli.load_config(None, seed=9, out=None)
    cfg_env = cli.load_config(None, None, None, environ={"VDMINI_SEED": "9"})
    assert cli.config_hash(cfg_flag) == cli.config_hash(cfg_env)


def test_report_refuses_mismatched_hashes_unless_forced(tmp_path, capsys):
    cfg = _cfg_file(tmp_path)
    out = tmp_path / "run"
    assert _run(["plan", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    # an artifact produced under a different config hash
    cli.write_json_artifact(out / "stray.json", {"x": 1}, "deadbeefdeadbeef")
    rc = _run(["report", "--config", cfg, "--out", str(out)])
    assert rc == cli.EXIT_CONFIG
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "hash" in record["message"]
    assert _run(["report", "--config", cfg, "--out", str(out), "--force"]) == cli.EXIT_OK
    assert (out / "summary.csv").exists()
    assert (out / "summary.txt").exists()


def test_eval_requires_artifacts(tmp_path):
    cfg = _cfg_file(tmp_path)
    rc = _run(["eval", "--config", cfg, "--out", str(tmp_path / "empty")])
    assert rc == cli.EXIT_MISSING


def test_artifacts_embed_config_hash(tmp_path):
    cfg = _cfg_file(tmp_path)
    out = tmp_path / "run"
    assert _run(["plan", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    doc = json.loads((out / "plan.json").read_text())
    expected = cli.config_hash(cli.load_config(cfg, None, str(out)))
    assert doc["config_hash"] == expected


def test_no_tmp_files_left_behind(tmp_path):
    cfg = _cfg_file(tmp_path)
    out = tmp_path / "run"
    assert _run(["gen-data", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    assert _run(["plan", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    assert not list(out.glob("*.tmp"))
