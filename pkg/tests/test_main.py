import json

import pytest

from main import build_parser, main


@pytest.fixture
def config(tmp_path, write_tiny_config, monkeypatch):
    for name in ("MTEVC_CONFIG", "MTEVC_SEED", "MTEVC_OUT_DIR"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
    return str(write_tiny_config(tmp_path / "run.toml", tmp_path / "out"))


def test_parser_knows_every_command():
    parser = build_parser()
    for argv in (
        ["synth-dataset"],
        ["prepare", "m.json"],
        ["train-conversion", "m.json", "--baseline"],
        ["train-vocoder", "m.json", "--kind", "flowavenet"],
        ["convert", "--ckpt", "c.ckpt", "--all-eval", "m.json"],
        ["synthesize", "a.wav", "--output", "b.wav"],
        ["evaluate"],
        ["gradcheck"],
    ):
        assert parser.parse_args(argv).command == argv[0]


@pytest.mark.parametrize("argv", [[], ["dance"], ["train-vocoder", "m.json"], ["prepare", "m.json", "--seed", "x"]])
def test_usage_errors_exit_1(argv, config, capsys):
    assert main(argv) == 1
    assert "❌" in capsys.readouterr().out


def test_missing_config_exits_1(tmp_path):
    assert main(["gradcheck", "--config", str(tmp_path / "absent.toml")]) == 1


def test_convert_needs_inputs(config, capsys):
    assert main(["convert", "--ckpt", "c.ckpt", "--config", config]) == 1
    assert "--wav" in capsys.readouterr().out


def test_missing_manifest_exits_2(config, tmp_path):
    assert main(["prepare", str(tmp_path / "absent.json"), "--config", config]) == 2


def test_malformed_pairs_exit_2(config, tmp_path):
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps({"not": "a list"}))
    assert main(["evaluate", str(pairs), "--config", config]) == 2


def test_synth_then_prepare(config, tmp_path):
    assert main(["synth-dataset", "--config", config, "--out", str(tmp_path / "elsewhere")]) == 0
    manifest = tmp_path / "elsewhere" / "corpus" / "manifest.json"
    assert manifest.exists()
    assert main(["prepare", str(manifest), "--config", config, "--strict"]) == 0
    assert (tmp_path / "out" / "features" / "index.json").exists()


def test_gradcheck_succeeds(config):
    assert main(["gradcheck", "--config", config]) == 0
