"""CLI: exit codes, wire formats, manifests, rerun reproducibility."""

import json

import pytest

from vlpert.cli import dispatch

SMALL_TRAIN_CONFIG = {
    "train.epochs": 1,
    "train.batch_size": 6,
    "encoder.image_side": 16,
    "encoder.num_regions": 4,
    "encoder.embed_dim": 16,
    "encoder.subword_dim": 16,
    "encoder.conv_channels": [4, 8, 16],
}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert dispatch(["gen-data", "--n", "18", "--side", "16", "--seed", "4", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def train_run(tmp_path_factory, data_dir):
    run = tmp_path_factory.mktemp("run")
    config = run / "config.json"
    config.write_text(json.dumps(SMALL_TRAIN_CONFIG))
    code = dispatch(
        ["train", "--config", str(config), "--data", str(data_dir), "--out", str(run), "--seed", "9"]
    )
    assert code == 0
    return run


def test_unknown_subcommand_usage_error(capsys):
    assert dispatch(["frobnicate"]) == 1


def test_no_subcommand_usage_error():
    assert dispatch([]) == 1


def test_missing_config_is_usage_error(tmp_path):
    code = dispatch(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)])
    assert code == 1


def test_unknown_config_key_is_usage_error(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"train.warp_speed": 9}))
    assert dispatch(["train", "--config", str(config), "--out", str(tmp_path)]) == 1


def test_gen_data_outputs(data_dir):
    assert (data_dir / "corpus.jsonl").is_file()
    assert (data_dir / "manifest.json").is_file()
    rows = [json.loads(l) for l in (data_dir / "corpus.jsonl").read_text().splitlines()]
    assert len(rows) == 18
    for row in rows:
        assert (data_dir / row["image_file"]).is_file()


def test_gen_data_rerun_from_manifest_is_bit_identical(data_dir, tmp_path):
    rerun = tmp_path / "rerun"
    code = dispatch(["gen-data", "--config", str(data_dir / "manifest.json"), "--out", str(rerun)])
    assert code == 0
    assert (rerun / "corpus.jsonl").read_bytes() == (data_dir / "corpus.jsonl").read_bytes()
    sample = json.loads((data_dir / "corpus.jsonl").read_text().splitlines()[0])["image_file"]
    assert (rerun / sample).read_bytes() == (data_dir / sample).read_bytes()


def test_perturb_stdout(tmp_path, capsys):
    reports = tmp_path / "reports.txt"
    reports.write_text("The lungs are clear.\nthere is no pleural effusion\n")
    assert dispatch(["perturb", "--in", str(reports), "--seed", "7"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(lines) == 2
    for line in lines:
        row = json.loads(line)
        assert set(row) == {"original", "variants"}
        assert len(row["variants"]) == 9
        for variant in row["variants"]:
            assert set(variant) == {"rule", "text", "degenerate"}


def test_perturb_deterministic_across_invocations(tmp_path, capsys):
    reports = tmp_path / "reports.txt"
    reports.write_text("the heart is enlarged\n")
    dispatch(["perturb", "--in", str(reports), "--seed", "3"])
    first = capsys.readouterr().out
    dispatch(["perturb", "--in", str(reports), "--seed", "3"])
    assert capsys.readouterr().out == first


def test_perturb_missing_input_usage_error(tmp_path):
    assert dispatch(["perturb", "--in", str(tmp_path / "nope.txt")]) == 1


def test_train_outputs(train_run):
    assert (train_run / "metrics.jsonl").is_file()
    assert (train_run / "checkpoints" / "final.json").is_file()
    manifest = json.loads((train_run / "manifest.json").read_text())
    assert manifest["subcommand"] == "train"
    assert manifest["config"]["train.epochs"] == 1
    assert manifest["config"]["seeds.data"] == 9
    rows = [json.loads(l) for l in (train_run / "metrics.jsonl").read_text().splitlines()]
    assert rows and set(rows[0]) == {"epoch", "step", "global", "local", "pert", "total"}


def test_train_rerun_from_manifest_matches(train_run, data_dir, tmp_path):
    rerun = tmp_path / "rerun"
    code = dispatch(
        [
            "train",
            "--config",
            str(train_run / "manifest.json"),
            "--data",
            str(data_dir),
            "--out",
            str(rerun),
        ]
    )
    assert code == 0
    assert (rerun / "metrics.jsonl").read_bytes() == (train_run / "metrics.jsonl").read_bytes()


def test_eval_structure_cli(train_run, data_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    code = dispatch(
        [
            "eval-structure",
            "--checkpoint",
            str(train_run / "checkpoints" / "final.json"),
            "--data",
            str(data_dir),
            "--seed",
            "2",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    results = json.loads((out / "results.json").read_text())
    assert set(results) >= {"accuracy", "n_samples", "n_correct", "rule_confusions"}
    assert (out / "results.csv").read_text().startswith("metric,value")


def test_eval_retrieval_cli(train_run, data_dir, tmp_path):
    out = tmp_path / "eval"
    code = dispatch(
        [
            "eval-retrieval",
            "--checkpoint",
            str(train_run / "checkpoints" / "final.json"),
            "--data",
            str(data_dir),
            "--k",
            "1,5",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    results = json.loads((out / "results.json").read_text())
    assert set(results) == {"image_to_text", "text_to_image"}
    assert set(results["image_to_text"]) == {"1", "5"}


def test_probe_cli(train_run, data_dir, tmp_path):
    out = tmp_path / "probe"
    code = dispatch(
        [
            "probe",
            "--checkpoint",
            str(train_run / "checkpoints" / "final.json"),
            "--data",
            str(data_dir),
            "--seed",
            "3",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    results = json.loads((out / "results.json").read_text())
    assert len(results["finding_accuracy"]) == 4


def test_eval_missing_checkpoint_usage_error(data_dir):
    assert dispatch(["eval-structure", "--data", str(data_dir)]) == 1


def test_gradcheck_cli(tmp_path, capsys):
    out = tmp_path / "gc"
    assert dispatch(["gradcheck", "--seeds", "2", "--out", str(out)]) == 0
    report = json.loads((out / "results.json").read_text())
    assert report["passed"] is True
    assert set(report["worst_errors"]) == {"global", "local", "pert", "total"}
    printed = capsys.readouterr().out
    assert "max relative error" in printed


def test_gradcheck_violation_exits_nonzero(capsys):
    assert dispatch(["gradcheck", "--seeds", "1", "--tol", "1e-18"]) == 2


def test_help_documents_defaults(capsys):
    assert dispatch(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for needle in ("150", "64", "0.0015", "0.1", "0.07", "--alpha", "--beta", "--tau"):
        assert needle in text
    assert dispatch(["gen-data", "--help"]) == 0
    assert "--seed" in capsys.readouterr().out


def test_env_var_default_corpus(train_run, data_dir, monkeypatch, tmp_path):
    monkeypatch.setenv("ARTIFACT_DATA_DIR", str(data_dir))
    out = tmp_path / "eval"
    code = dispatch(
        [
            "eval-retrieval",
            "--checkpoint",
            str(train_run / "checkpoints" / "final.json"),
            "--k",
            "1",
            "--out",
            str(out),
        ]
    )
    assert code == 0
