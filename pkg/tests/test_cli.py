import json

import pytest

from metacvr import cli
from metacvr.trainer import load_checkpoint

TINY_CFG = """# small end-to-end run
n_users = 60
n_items = 48
clicks_per_day = 80
base_cvr = 0.05
seq_len = 6
epochs_base = 1
epochs_meta = 1
epochs_finetune = 1
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data, models = root / "data", root / "models"
    assert run("simulate", "--config", cfg, "--out", data, "--quiet") == 0
    assert run("train-base", "--config", cfg, "--data", data, "--out", models, "--quiet") == 0
    s1 = models / "stage1.ckpt"
    assert run("finetune-base", "--config", cfg, "--data", data, "--checkpoint", s1, "--out", models, "--quiet") == 0
    assert run("build-prototypes", "--config", cfg, "--data", data, "--checkpoint", s1, "--out", models,
               "--quiet") == 0
    assert run("train-meta", "--config", cfg, "--data", data, "--checkpoint", s1,
               "--prototypes", models / "prototypes.ckpt", "--out", models, "--quiet") == 0
    return root, cfg, data, models


def test_pipeline_artifacts(pipeline):
    _, _, data, models = pipeline
    for name in ("train.tsv", "recent.tsv", "valid.tsv", "schema.json", "calendar.json", "simulate.manifest.json"):
        assert (data / name).exists()
    for name in ("stage1.ckpt", "basef.ckpt", "prototypes.ckpt", "stage2.ckpt"):
        assert (models / name).exists()
    s2 = load_checkpoint(models / "stage2.ckpt")
    assert s2.metadata["stage"] == "2"
    assert s2.metadata["stage1_id"] == load_checkpoint(models / "stage1.ckpt").checkpoint_id()


def test_manifest_records_hashes(pipeline):
    _, cfg, data, models = pipeline
    m = json.loads((models / "train-meta.manifest.json").read_text())
    assert m["command"] == "train-meta" and m["config_path"] == str(cfg)
    assert m["outputs"]["stage2.ckpt"] == cli.sha256_file(models / "stage2.ckpt")
    assert m["inputs"][str(models / "stage1.ckpt")] == cli.sha256_file(models / "stage1.ckpt")
    assert str(models / "prototypes.ckpt") in m["inputs"]


def test_evaluate_and_analysis_commands(pipeline, tmp_path, capsys):
    _, cfg, data, models = pipeline
    out = tmp_path / "rep"
    assert run("evaluate", "--config", cfg, "--data", data, "--checkpoint", models / "stage1.ckpt",
               "--checkpoint", models / "basef.ckpt", "--checkpoint", models / "stage2.ckpt", "--out", out) == 0
    text = (out / "report.txt").read_text()
    assert "BASE-F" in text and "MetaCVR" in text
    assert (out / "report.csv").read_text().count("\n") == 4
    assert "MetaCVR" in capsys.readouterr().out
    assert run("proto-sim", "--config", cfg, "--data", data, "--checkpoint", models / "stage1.ckpt",
               "--out", out, "--quiet") == 0
    assert "diagonal dominant" in (out / "proto_sim.txt").read_text()
    assert (out / "proto_sim.csv").read_text().count("\n") == 33


def test_ablation_command(pipeline, tmp_path):
    _, cfg, data, models = pipeline
    assert run("ablate-metrics", "--config", cfg, "--data", data, "--checkpoint", models / "stage1.ckpt",
               "--out", tmp_path, "--quiet") == 0
    for kind in ("cosine", "euclidean", "spdm", "nndm"):
        assert (tmp_path / f"stage2-{kind}.ckpt").exists()
    assert (tmp_path / "ablation.csv").read_text().count("\n") == 5


def test_usage_errors_exit_2(pipeline, tmp_path, capsys):
    _, cfg, data, models = pipeline
    assert run("frobnicate") == 2
    assert run("train-base", "--config", cfg, "--out", tmp_path) == 2
    assert "requires --data" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("batchsize=3\nbatch_size=0\n")
    assert run("simulate", "--config", bad, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "did you mean 'batch_size'" in err and "batch_size must be ≥ 1" in err and ":2:" in err
    assert run("simulate", "--metric", "l1", "--out", tmp_path) == 2


def test_tampered_input_exits_3(pipeline, tmp_path):
    _, cfg, data, models = pipeline
    copy = tmp_path / "models"
    copy.mkdir()
    for f in models.iterdir():
        (copy / f.name).write_bytes(f.read_bytes())
    blob = bytearray((copy / "stage1.ckpt").read_bytes())
    blob[-1] ^= 1
    (copy / "stage1.ckpt").write_bytes(bytes(blob))
    assert run("finetune-base", "--config", cfg, "--data", data, "--checkpoint", copy / "stage1.ckpt",
               "--out", tmp_path / "o", "--quiet") == 3


def test_wrong_stage_exits_3(pipeline, tmp_path):
    _, cfg, data, models = pipeline
    assert run("train-meta", "--config", cfg, "--data", data, "--checkpoint", models / "stage2.ckpt",
               "--out", tmp_path, "--quiet") == 3


def test_schema_mismatch_exits_3(pipeline, tmp_path):
    _, cfg, data, models = pipeline
    other = tmp_path / "cfg"
    other.write_text(TINY_CFG.replace("seq_len = 6", "seq_len = 5"))
    assert run("simulate", "--config", other, "--out", tmp_path / "d", "--quiet") == 0
    assert run("finetune-base", "--config", other, "--data", tmp_path / "d", "--checkpoint",
               models / "stage1.ckpt", "--out", tmp_path / "o", "--quiet") == 3


def test_corrupt_checkpoint_exits_1(tmp_path, pipeline):
    _, cfg, data, _ = pipeline
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"NOPE0000")
    assert run("evaluate", "--config", cfg, "--data", data, "--checkpoint", bad, "--out", tmp_path,
               "--quiet") == 1


def test_missing_input_exits_2(tmp_path, pipeline):
    _, cfg, data, _ = pipeline
    assert run("evaluate", "--config", cfg, "--data", data, "--checkpoint", tmp_path / "none.ckpt",
               "--out", tmp_path, "--quiet") == 2


def test_help_exits_0(capsys):
    assert run("--help") == 0
    assert "batch_size" in capsys.readouterr().out
