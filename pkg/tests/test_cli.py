import json

import pytest
import torch

import poisonforge.cli as cli_mod
from conftest import random_dataset
from poisonforge.cli import RunManifest, main
from poisonforge.data import save_dataset
from poisonforge.errors import NumericError
from poisonforge.perturb import load_poison, read_poison_header

CONFIG_TEXT = """
[attack]
variant = tp
epochs = 1
batch_size = 8
pgd_steps_sl = 1
pgd_steps_cl = 1
arch = small_cnn
embed_dim = 16
seed = 3

[victim]
epochs = 2
pretrain_epochs = 2
probe_epochs = 2
arch = small_cnn
embed_dim = 16
batch_size = 8
batch_size_pretrain = 8
seed = 4
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv("POISONFORGE_DATA_ROOT", raising=False)
    data_root = tmp_path / "data"
    train = random_dataset(n=24, classes=3, hw=16, seed=0, split="train")
    test = random_dataset(n=12, classes=3, hw=16, seed=1, split="test")
    save_dataset(train, data_root)
    save_dataset(test, data_root)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CONFIG_TEXT)
    return tmp_path, data_root, cfg


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# poison


def test_poison_writes_artifact_and_manifest(workdir):
    tmp, data_root, cfg = workdir
    out = tmp / "runs" / "p.pf"
    assert run_cli("poison", "--config", cfg, "--data", data_root, "--out", out) == 0
    assert out.is_file()

    pset = load_poison(out)
    assert pset.attack == "tp"
    assert pset.max_abs() <= pset.budget_bound()

    manifest = RunManifest.read(out.parent / "p.pf.manifest.json")
    assert manifest.command == "poison"
    assert str(out) in manifest.artifacts
    assert manifest.extra["variant"] == "tp"
    assert manifest.extra["max_abs_delta"] == pset.max_abs()
    assert manifest.dataset_fingerprint == pset.dataset_fingerprint


def test_poison_cli_overrides_take_precedence(workdir):
    tmp, data_root, cfg = workdir
    out = tmp / "em.pf"
    code = run_cli(
        "poison", "--config", cfg, "--data", data_root, "--out", out,
        "--variant", "em", "--epsilon", "4/255", "--seed", "9", "--epochs", "2",
    )
    assert code == 0
    header = read_poison_header(out)
    assert header["attack"] == "em"
    assert header["epsilon"] == pytest.approx(4 / 255)
    assert header["seed"] == 9


def test_poison_runs_are_byte_identical(workdir):
    tmp, data_root, cfg = workdir
    a, b = tmp / "a.pf", tmp / "b.pf"
    assert run_cli("poison", "--config", cfg, "--data", data_root, "--out", a) == 0
    assert run_cli("poison", "--config", cfg, "--data", data_root, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_data_root_env_fallback(workdir, monkeypatch):
    tmp, data_root, cfg = workdir
    monkeypatch.setenv("POISONFORGE_DATA_ROOT", str(data_root))
    out = tmp / "env.pf"
    assert run_cli("poison", "--config", cfg, "--out", out) == 0
    assert out.is_file()


def test_missing_data_root_is_exit_2(workdir, capsys):
    tmp, _, cfg = workdir
    assert run_cli("poison", "--config", cfg, "--out", tmp / "x.pf") == 2
    assert "data root" in capsys.readouterr().err


def test_missing_config_file_is_exit_2(workdir, capsys):
    tmp, data_root, _ = workdir
    code = run_cli(
        "poison", "--config", tmp / "absent.cfg", "--data", data_root, "--out", tmp / "x.pf"
    )
    assert code == 2
    assert "config" in capsys.readouterr().err


def test_numeric_failure_is_exit_3(workdir, monkeypatch, capsys):
    tmp, data_root, cfg = workdir

    def explode(dataset, cfg, observer=None):
        raise NumericError("non-finite loss at epoch 0 phase sl_model batch 0")

    monkeypatch.setattr(cli_mod, "run_attack", explode)
    assert run_cli("poison", "--config", cfg, "--data", data_root, "--out", tmp / "x.pf") == 3
    assert "numeric failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train-victim


def test_clean_victim_run_writes_run_directory(workdir):
    tmp, data_root, cfg = workdir
    run_dir = tmp / "clean_sl"
    code = run_cli(
        "train-victim", "--learner", "sl", "--config", cfg, "--data", data_root,
        "--out", run_dir,
    )
    assert code == 0
    assert (run_dir / "checkpoint.pt").is_file()
    assert (run_dir / "curves.csv").is_file()
    manifest = RunManifest.read(run_dir / "manifest.json")
    assert manifest.command == "train-victim"
    assert manifest.extra["attack"] == "clean"
    assert manifest.extra["epsilon"] == 0.0
    assert 0.0 <= manifest.extra["final_test_acc"] <= 100.0


def test_poisoned_contrastive_victim_records_pretrain_losses(workdir):
    tmp, data_root, cfg = workdir
    poison = tmp / "p.pf"
    assert run_cli("poison", "--config", cfg, "--data", data_root, "--out", poison) == 0
    run_dir = tmp / "tp_simclr"
    code = run_cli(
        "train-victim", "--learner", "simclr", "--poison", poison, "--config", cfg,
        "--data", data_root, "--out", run_dir,
    )
    assert code == 0
    assert (run_dir / "pretrain_loss.csv").is_file()
    lines = (run_dir / "pretrain_loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss"
    assert len(lines) == 3  # two pretraining epochs
    manifest = RunManifest.read(run_dir / "manifest.json")
    assert manifest.extra["attack"] == "tp"
    assert manifest.extra["poison_ratio"] == 1.0


def test_partial_poison_ratio_is_recorded(workdir):
    tmp, data_root, cfg = workdir
    poison = tmp / "p.pf"
    run_cli("poison", "--config", cfg, "--data", data_root, "--out", poison)
    run_dir = tmp / "half"
    code = run_cli(
        "train-victim", "--learner", "sl", "--poison", poison, "--ratio", "0.5",
        "--config", cfg, "--data", data_root, "--out", run_dir,
    )
    assert code == 0
    assert RunManifest.read(run_dir / "manifest.json").extra["poison_ratio"] == 0.5


def test_poison_for_wrong_dataset_is_exit_2(workdir, tmp_path, capsys):
    tmp, data_root, cfg = workdir
    other_root = tmp_path / "other_data"
    save_dataset(random_dataset(n=24, classes=3, hw=16, seed=7, split="train"), other_root)
    save_dataset(random_dataset(n=12, classes=3, hw=16, seed=8, split="test"), other_root)
    poison = tmp / "p.pf"
    run_cli("poison", "--config", cfg, "--data", data_root, "--out", poison)
    code = run_cli(
        "train-victim", "--learner", "sl", "--poison", poison, "--config", cfg,
        "--data", other_root, "--out", tmp / "bad",
    )
    assert code == 2
    assert "fingerprint" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# report


def test_report_aggregates_victim_runs(workdir, capsys):
    tmp, data_root, cfg = workdir
    clean_dir, tp_dir = tmp / "r_clean", tmp / "r_tp"
    poison = tmp / "p.pf"
    run_cli("poison", "--config", cfg, "--data", data_root, "--out", poison)
    run_cli("train-victim", "--learner", "sl", "--config", cfg, "--data", data_root, "--out", clean_dir)
    run_cli(
        "train-victim", "--learner", "sl", "--poison", poison, "--config", cfg,
        "--data", data_root, "--out", tp_dir,
    )
    out = tmp / "report.csv"
    assert run_cli("report", "--runs", clean_dir, tp_dir, "--out", out) == 0
    text = out.read_text()
    assert text.startswith("attack,learner,accuracy,seed,dataset,epsilon")
    assert "clean,sl" in text and "tp,sl" in text
    table = capsys.readouterr().out
    assert "worst" in table
    assert (tmp / "report.txt").is_file()


def test_report_rejects_non_victim_directories(workdir, capsys):
    tmp, data_root, cfg = workdir
    poison = tmp / "p.pf"
    run_cli("poison", "--config", cfg, "--data", data_root, "--out", poison)
    # a poison manifest is not a victim run manifest
    bad_dir = tmp / "fake_run"
    bad_dir.mkdir()
    (bad_dir / "manifest.json").write_text((tmp / "p.pf.manifest.json").read_text())
    assert run_cli("report", "--runs", bad_dir, "--out", tmp / "r.csv") == 2
    assert "not a victim run" in capsys.readouterr().err
    assert run_cli("report", "--runs", tmp / "absent", "--out", tmp / "r.csv") == 2


# ---------------------------------------------------------------------------
# sweep


def test_sweep_writes_points_and_csv(workdir):
    tmp, data_root, cfg = workdir
    out = tmp / "sweep"
    code = run_cli(
        "sweep", "--axis", "epochs", "--values", "1,2", "--config", cfg,
        "--data", data_root, "--out", out, "--learners", "sl",
    )
    assert code == 0
    assert (out / "poison_epochs_1.pf").is_file()
    assert (out / "poison_epochs_2.pf").is_file()
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "axis,value,mode,learner,accuracy,seed,dataset,epsilon"
    assert len(lines) == 3
    manifest = RunManifest.read(out / "manifest.json")
    assert manifest.extra["axis"] == "epochs"


def test_sweep_rejects_unknown_learner(workdir, capsys):
    tmp, data_root, cfg = workdir
    code = run_cli(
        "sweep", "--axis", "epochs", "--values", "1", "--config", cfg,
        "--data", data_root, "--out", tmp / "s", "--learners", "bogus",
    )
    assert code == 2
    assert "learner" in capsys.readouterr().err


def test_sweep_value_tags_are_filesystem_safe(workdir):
    tmp, data_root, cfg = workdir
    out = tmp / "sweep_budget"
    code = run_cli(
        "sweep", "--axis", "budget", "--values", "4/255", "--config", cfg,
        "--data", data_root, "--out", out, "--learners", "sl",
    )
    assert code == 0
    written = list(out.glob("poison_budget_*.pf"))
    assert len(written) == 1
    assert "/" not in written[0].name


# ---------------------------------------------------------------------------
# export-noise


def test_export_noise_writes_image_triples(workdir):
    tmp, data_root, cfg = workdir
    poison = tmp / "p.pf"
    run_cli("poison", "--config", cfg, "--data", data_root, "--out", poison)
    out = tmp / "noise"
    code = run_cli(
        "export-noise", "--poison", poison, "--config", cfg, "--data", data_root,
        "--out", out, "--per-class", "2",
    )
    assert code == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 3 * 3 * 2  # tags * classes * per_class
    assert any(name.startswith("noise_c0_") for name in pngs)
    manifest = RunManifest.read(out / "manifest.json")
    assert manifest.extra["images"] == 18


# ---------------------------------------------------------------------------
# parser plumbing


def test_version_flag_prints_and_exits(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "poisonforge" in capsys.readouterr().out


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_manifest_roundtrip_ignores_unknown_fields(tmp_path):
    manifest = RunManifest(
        command="poison", argv=["x"], seed=1, config={}, started_at="t0", finished_at="t1",
    )
    path = manifest.write(tmp_path / "m.json")
    payload = json.loads(path.read_text())
    payload["future_field"] = True
    path.write_text(json.dumps(payload))
    back = RunManifest.read(path)
    assert back.command == "poison"
    assert back.seed == 1
    assert not hasattr(back, "future_field")
