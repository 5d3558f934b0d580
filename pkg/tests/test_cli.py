import json
import os
import subprocess
import sys

import numpy as np
import pytest

from edfa_gainlab import cli
from edfa_gainlab.evaluation import read_summary_csv, read_tl_matrix_csv
from edfa_gainlab.model import FeatureMode, load_model
from edfa_gainlab.simulator import load_device, load_manifest

FAST = ["--pretrain-epochs", "2", "--train-epochs", "2", "--transfer-epochs", "3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Default fleet generated once, with fast base models for two devices."""
    root = tmp_path_factory.mktemp("run")
    assert run("generate", "--output-dir", root) == 0
    for dev in ("booster-0", "preamp-0"):
        assert run("train", "--output-dir", root, "--device", dev, *FAST) == 0
    return root


def file_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# --- generate ---

def test_generate_default_fleet(workdir):
    manifest = load_manifest(workdir / "data")
    ids = [d["device_id"] for d in manifest["devices"]]
    assert ids == ["booster-0", "booster-1", "preamp-0", "preamp-1"]
    for dev in ids:
        assert (workdir / "data" / f"{dev}.jsonl").is_file()
    _, ds = load_device(workdir / "data", "preamp-1")
    assert len(ds.unlabeled) == 512 and len(ds.test_goalpost) == 270


def test_generate_rerun_byte_identical(workdir, tmp_path):
    assert run("generate", "--output-dir", tmp_path) == 0
    again = file_bytes(tmp_path / "data")
    assert again == file_bytes(workdir / "data")


def test_generate_seed_changes_data(tmp_path):
    assert run("generate", "--output-dir", tmp_path / "a", "--seed", "1") == 0
    assert run("generate", "--output-dir", tmp_path / "b", "--seed", "2") == 0
    assert (tmp_path / "a/data/booster-0.jsonl").read_bytes() != \
        (tmp_path / "b/data/booster-0.jsonl").read_bytes()


def test_generate_unwritable_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("generate", "--output-dir", blocker / "sub") == 2
    assert str(blocker / "sub") in capsys.readouterr().err


def test_env_seed_and_flag_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    args = cli.build_parser().parse_args(["generate"])
    assert cli.resolve_config(args).seed == 7
    args = cli.build_parser().parse_args(["generate", "--seed", "3"])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 3 and cfg.train.seed == 3 and cfg.dataset.seed == 3


def test_env_seed_bad_value(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "seven")
    assert run("generate", "--output-dir", tmp_path) == 2


def test_env_seed_changes_output(tmp_path, monkeypatch):
    assert run("generate", "--output-dir", tmp_path / "a") == 0
    monkeypatch.setenv(cli.SEED_ENV, "5")
    assert run("generate", "--output-dir", tmp_path / "b") == 0
    assert load_manifest(tmp_path / "b/data")["spec"]["seed"] == 5
    assert (tmp_path / "a/data/booster-0.jsonl").read_bytes() != \
        (tmp_path / "b/data/booster-0.jsonl").read_bytes()


# --- config file ---

def test_config_file_and_overrides(tmp_path):
    doc = {"seed": 4, "fleet": {"boosters": 1, "preamps": 0},
           "dataset": {"random_count": 20, "goalpost_count": 5, "unlabeled_count": 8},
           "train": {"epochs": 9}, "output_dir": str(tmp_path / "cfgrun")}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(doc))
    args = cli.build_parser().parse_args(["generate", "--config", str(path),
                                          "--train-epochs", "11"])
    cfg = cli.resolve_config(args, environ={})
    assert cfg.seed == 4 and cfg.train.epochs == 11 and cfg.pretrain.epochs == 300
    assert run("generate", "--config", path) == 0
    manifest = load_manifest(tmp_path / "cfgrun/data")
    assert [d["device_id"] for d in manifest["devices"]] == ["booster-0"]


def test_config_round_trips():
    cfg = cli.ExperimentConfig()
    again = cli.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"train": {"epochz": 3}},
                                 {"feature_mode": "sideways"},
                                 {"transfer": {"layer_decay_factor": 2.0}}])
def test_config_rejects_bad_documents(tmp_path, doc):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert run("generate", "--config", path, "--output-dir", tmp_path) == 2


def test_config_not_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    assert run("generate", "--config", path) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_paper_budgets_flag():
    args = cli.build_parser().parse_args(["matrix", "--paper-budgets"])
    cfg = cli.resolve_config(args, environ={})
    assert (cfg.pretrain.epochs, cfg.train.epochs, cfg.transfer.epochs) == (1800, 1200, 10000)


def test_negative_epochs_rejected(tmp_path):
    assert run("generate", "--output-dir", tmp_path, "--train-epochs", "-1") == 2


# --- train ---

def test_train_model_loads_back(workdir):
    model = load_model(workdir / "models" / "booster-0__with_internal.json")
    assert model.n_inputs == 196
    assert model.metadata["device_id"] == "booster-0"
    assert model.metadata["input_layer_init"] == "dae"
    assert (workdir / "curves" / "loss_curve_booster-0_train.csv").is_file()
    assert (workdir / "curves" / "loss_curve_booster-0_pretrain.csv").is_file()


def test_train_without_internal(workdir):
    assert run("train", "--output-dir", workdir, "--device", "booster-1",
               "--feature-mode", "without_internal", *FAST) == 0
    model = load_model(workdir / "models" / "booster-1__without_internal.json")
    assert model.n_inputs == 193
    assert model.feature_mode is FeatureMode.WITHOUT_INTERNAL


def test_train_skip_pretrain(workdir):
    assert run("train", "--output-dir", workdir, "--device", "preamp-1", "--skip-pretrain",
               *FAST) == 0
    model = load_model(workdir / "models" / "preamp-1__with_internal.json")
    assert model.metadata["input_layer_init"] == "random"
    assert model.metadata["pretrain_epochs"] == 0


def test_train_missing_dataset(tmp_path, capsys):
    assert run("train", "--output-dir", tmp_path, "--device", "booster-0") == 2
    assert "generate" in capsys.readouterr().err


def test_train_unknown_device(workdir):
    assert run("train", "--output-dir", workdir, "--device", "roadm-9", *FAST) == 2


def test_train_idempotent(workdir):
    model = workdir / "models" / "booster-0__with_internal.json"
    first = model.read_bytes()
    assert run("train", "--output-dir", workdir, "--device", "booster-0", *FAST) == 0
    assert model.read_bytes() == first


# --- transfer ---

def test_transfer_same_type_provenance(workdir):
    src = workdir / "models" / "booster-0__with_internal.json"
    out = workdir / "transfers" / "b0_b1.json"
    assert run("transfer", "--output-dir", workdir, "--source", src, "--target", "booster-1",
               "--output", out, *FAST) == 0
    md = load_model(out).metadata
    _, ds = load_device(workdir / "data", "booster-1")
    first = next(m for m in ds.train if m.loading_kind == "random")
    assert md["source_device_id"] == "booster-0"
    assert md["target_device_id"] == "booster-1"
    assert md["target_measurement_ids"] == [first.measurement_id]
    assert md["transfer_epochs"] == 3


def test_transfer_zero_epochs_matches_source(workdir):
    src = workdir / "models" / "booster-0__with_internal.json"
    assert run("transfer", "--output-dir", workdir, "--source", src, "--target", "preamp-0",
               "--epochs", "0", *FAST[:4]) == 0
    out = workdir / "transfers" / "booster-0__to__preamp-0__with_internal.json"
    _, ds = load_device(workdir / "data", "preamp-0")
    assert np.array_equal(load_model(out).predict_gains(ds.test),
                          load_model(src).predict_gains(ds.test))


def test_transfer_cross_type_default_flags(workdir):
    src = workdir / "models" / "preamp-0__with_internal.json"
    assert run("transfer", "--output-dir", workdir, "--source", src, "--target", "booster-0",
               "--transfer-epochs", "2") == 0
    assert (workdir / "curves" / "loss_curve_preamp-0__to__booster-0_transfer.csv").is_file()


def test_transfer_feature_mode_mismatch(workdir, capsys):
    src = workdir / "models" / "booster-0__with_internal.json"
    code = run("transfer", "--output-dir", workdir, "--source", src, "--target", "booster-1",
               "--feature-mode", "without_internal", *FAST)
    assert code == 2
    assert "feature-mode mismatch" in capsys.readouterr().err


def test_transfer_missing_source(workdir):
    assert run("transfer", "--output-dir", workdir, "--source", workdir / "nope.json",
               "--target", "booster-1") == 2


def test_transfer_corrupt_source(workdir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 99}')
    assert run("transfer", "--output-dir", workdir, "--source", bad, "--target", "booster-1") == 2


# --- evaluate ---

def test_evaluate_writes_summary(workdir):
    src = workdir / "models" / "booster-0__with_internal.json"
    assert run("evaluate", "--output-dir", workdir, "--model", src, "--device", "booster-0") == 0
    rows = read_summary_csv(workdir / "reports" / "summary.csv")
    assert [r["group"].split("/")[0] for r in rows] == ["loading=random", "loading=goalpost"]
    assert rows[0]["count"] == 220 and rows[1]["count"] == 270
    assert all(r["min"] <= r["q1"] <= r["median"] <= r["q3"] <= r["max"] for r in rows)


def test_evaluate_goalpost_only(workdir, tmp_path):
    src = workdir / "models" / "booster-0__with_internal.json"
    out = tmp_path / "gp.csv"
    assert run("evaluate", "--output-dir", workdir, "--model", src, "--device", "booster-0",
               "--loading", "goalpost", "--output", out) == 0
    rows = read_summary_csv(out)
    assert len(rows) == 1 and rows[0]["group"].startswith("loading=goalpost")


def test_evaluate_oracle_stub_zeros(workdir, tmp_path, monkeypatch):
    class Stub:
        feature_mode = FeatureMode.WITH_INTERNAL

        def predict_gains(self, ms):
            return np.stack([np.nan_to_num(m.channel_gain_db) for m in ms])

    monkeypatch.setattr(cli, "load_model", lambda path: Stub())
    out = tmp_path / "zeros.csv"
    assert run("evaluate", "--output-dir", workdir, "--model", "stub", "--device", "preamp-0",
               "--output", out) == 0
    for r in read_summary_csv(out):
        assert r["mean"] == r["median"] == r["q1"] == r["q3"] == r["min"] == r["max"] == 0.0


def test_evaluate_missing_model(workdir):
    assert run("evaluate", "--output-dir", workdir, "--model", workdir / "missing.json",
               "--device", "booster-0") == 2


# --- matrix ---

def test_matrix_four_by_four(tmp_path):
    root = tmp_path / "m"
    assert run("generate", "--output-dir", root) == 0
    out = root / "reports" / "tl_matrix.csv"
    assert run("matrix", "--output-dir", root, "--jobs", "2", *FAST) == 0
    m = read_tl_matrix_csv(out)
    assert m.device_ids == ["booster-0", "booster-1", "preamp-0", "preamp-1"]
    assert m.values.shape == (4, 4) and (m.values >= 0).all()
    header = out.read_text(encoding="utf-8").splitlines()[0]
    assert header == "source\\target,booster-0,booster-1,preamp-0,preamp-1"
    # second run reuses the base models and reproduces the CSV
    stamp = {p: p.stat().st_mtime_ns for p in (root / "models").iterdir()}
    first = out.read_bytes()
    assert run("matrix", "--output-dir", root, *FAST) == 0
    assert out.read_bytes() == first
    assert {p: p.stat().st_mtime_ns for p in (root / "models").iterdir()} == stamp


def test_matrix_retrains_stale_models(tmp_path):
    root = tmp_path / "s"
    assert run("generate", "--output-dir", root) == 0
    assert run("train", "--output-dir", root, "--device", "booster-0", *FAST) == 0
    path = root / "models" / "booster-0__with_internal.json"
    before = path.read_bytes()
    cfg = cli.resolve_config(cli.build_parser().parse_args(
        ["matrix", "--output-dir", str(root), "--train-epochs", "3", *FAST[:2],
         "--transfer-epochs", "1"]), environ={})
    cli.ensure_base_models(cfg)
    assert path.read_bytes() != before


def test_matrix_missing_dataset(tmp_path):
    assert run("matrix", "--output-dir", tmp_path) == 2


def test_matrix_bad_jobs(workdir):
    assert run("matrix", "--output-dir", workdir, "--jobs", "0") == 2


# --- argument handling ---

@pytest.mark.parametrize("sub,flags", [
    ("generate", []),
    ("train", ["--device", "--skip-pretrain"]),
    ("transfer", ["--source", "--target", "--epochs", "--output"]),
    ("evaluate", ["--model", "--device", "--loading", "--output"]),
    ("matrix", ["--jobs", "--output"]),
])
def test_help_lists_flags(sub, flags, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([sub, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    common = ["--config", "--output-dir", "--seed", "--feature-mode", "--paper-budgets",
              "--pretrain-epochs", "--train-epochs", "--transfer-epochs", "--verbose"]
    for flag in common + flags:
        assert flag in text


def test_unknown_flag_is_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate", "--frobnicate"])
    assert exc.value.code == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_internal_error_exit_one(tmp_path, monkeypatch):
    def boom(cfg):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "cmd_generate", boom)
    assert run("generate", "--output-dir", tmp_path) == 1


def test_module_entry_point(tmp_path):
    env = dict(os.environ)
    env.pop(cli.SEED_ENV, None)
    proc = subprocess.run([sys.executable, "-m", "edfa_gainlab", "--version"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and proc.stdout.strip()
