import json

import numpy as np
import pytest

from pointseq.cli import main
from pointseq.config import micro_config, save_config


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["gen-data", "--classes", "2", "--per-class", "5", "--out", str(data),
               "--frames", "12", "--points", "32", "--seed", "0"])
    assert rc == 0
    cfg = micro_config()
    cfg.epochs = 1
    config_path = root / "config.json"
    save_config(cfg, config_path)
    return root, data, config_path


def test_gen_data_wrote_files(cli_workspace):
    _, data, _ = cli_workspace
    assert len(list(data.glob("*.pcsq"))) == 10
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest) == 10
    assert {e["split"] for e in manifest} == {"train", "val"}


def test_pretrain_probe_inspect_roundtrip(cli_workspace, capsys):
    root, data, config_path = cli_workspace
    out = root / "run"
    assert main(["pretrain", "--config", str(config_path), "--data", str(data),
                 "--out", str(out)]) == 0
    assert (out / "ckpt-final.cpr").exists()
    assert (out / "metrics.csv").exists()
    capsys.readouterr()

    assert main(["probe", "--ckpt", str(out / "ckpt-final.cpr"), "--data", str(data),
                 "--epochs", "3"]) == 0
    probe_out = capsys.readouterr().out
    assert "val_accuracy" in probe_out

    assert main(["inspect-ckpt", str(out / "ckpt-final.cpr")]) == 0
    inspect_out = capsys.readouterr().out
    assert "step: 4" in inspect_out
    assert "encoder.spatial.w1" in inspect_out


def test_config_error_exit_code(cli_workspace, tmp_path):
    root, data, _ = cli_workspace
    missing = tmp_path / "nope.json"
    assert main(["pretrain", "--config", str(missing), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"T": 10, "S": 3}))
    assert main(["pretrain", "--config", str(bad), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"warp_factor": 9}))
    assert main(["pretrain", "--config", str(unknown), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2


def test_data_error_exit_code(cli_workspace, tmp_path):
    _, _, config_path = cli_workspace
    assert main(["pretrain", "--config", str(config_path), "--data",
                 str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    assert main(["probe", "--ckpt", str(tmp_path / "missing.cpr"), "--data",
                 str(tmp_path)]) == 3


def test_probe_checkpoint_format_error(cli_workspace, tmp_path):
    _, data, _ = cli_workspace
    junk = tmp_path / "junk.cpr"
    junk.write_bytes(b"JUNKJUNKJUNK")
    assert main(["probe", "--ckpt", str(junk), "--data", str(data)]) == 3


def test_lambda_key_accepted(cli_workspace, tmp_path):
    root, data, _ = cli_workspace
    cfg = micro_config()
    cfg.epochs = 0
    d = cfg.to_json_dict()
    assert "lambda" in d and "lambda_" not in d
    path = tmp_path / "lam.json"
    path.write_text(json.dumps(d))
    assert main(["pretrain", "--config", str(path), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 0


def test_partial_config_merges_defaults(cli_workspace, tmp_path):
    _, data, _ = cli_workspace
    partial = tmp_path / "partial.json"
    micro = micro_config().to_json_dict()
    micro["epochs"] = 0
    partial.write_text(json.dumps(micro))
    assert main(["pretrain", "--config", str(partial), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 0


def test_ablate_cli(cli_workspace, tmp_path):
    root, data, config_path = cli_workspace
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config_path), "--toggles", "local",
                 "--data", str(data), "--out", str(out), "--probe-epochs", "2"]) == 0
    assert (out / "ablate.csv").exists()


def test_probe_checkpoint_written_by_cli_matches_probe_fn(cli_workspace, capsys):
    # probe twice: same value both times (determinism through the CLI path)
    root, data, config_path = cli_workspace
    ckpt = root / "run" / "ckpt-final.cpr"
    assert main(["probe", "--ckpt", str(ckpt), "--data", str(data), "--epochs", "3"]) == 0
    first = capsys.readouterr().out
    assert main(["probe", "--ckpt", str(ckpt), "--data", str(data), "--epochs", "3"]) == 0
    second = capsys.readouterr().out
    assert first == second
