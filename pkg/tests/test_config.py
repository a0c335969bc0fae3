import pytest

from config import RunConfig, feature_fingerprint, load_config, validate_config, write_config
from errors import UsageError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    for name in ("MTEVC_CONFIG", "MTEVC_SEED", "MTEVC_OUT_DIR"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def _write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return str(path)


def test_defaults_without_a_file():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.features.hop_length == 256
    assert cfg.wavenet.upsample_strides == (16, 16)


def test_file_values_override_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, "[run]\nseed = 9\n[training]\nconversion_steps = 12\n[synthetic]\nemotions = ['a', 'b']\n"))
    assert cfg.seed == 9
    assert cfg.training.conversion_steps == 12
    assert cfg.synthetic.emotions == ("a", "b")


def test_config_path_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MTEVC_CONFIG", _write(tmp_path, "[run]\nseed = 3\n"))
    assert load_config().seed == 3


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("MTEVC_SEED", "77")
    monkeypatch.setenv("MTEVC_OUT_DIR", str(tmp_path / "elsewhere"))
    cfg = load_config(_write(tmp_path, "[run]\nseed = 3\n"))
    assert cfg.seed == 77
    assert cfg.out_path == tmp_path / "elsewhere"


def test_bad_seed_override(monkeypatch):
    monkeypatch.setenv("MTEVC_SEED", "abc")
    with pytest.raises(UsageError, match="MTEVC_SEED"):
        load_config()


def test_missing_explicit_file(tmp_path):
    with pytest.raises(UsageError, match="does not exist"):
        load_config(str(tmp_path / "absent.toml"))


@pytest.mark.parametrize(
    "text, message",
    [
        ("[colour]\nred = 1\n", "unknown config section"),
        ("[run]\nspeed = 1\n", "unknown key 'speed'"),
        ("[wavenet]\nlayerz = 3\n", "unknown key 'layerz'"),
        ("[run]\ndtype = 'float16'\n", "dtype"),
        ("[wavenet]\nupsample_strides = [4, 4]\n", "multiply to the hop"),
        ("[conversion]\nmel_dim = 40\n", "mel_dim"),
        ("[training]\ncrop_length = 1000\n", "crop_length"),
        ("[features]\nmcep_order = 80\n", "mcep_order"),
        ("[features]\nfmax = 9000.0\n", "fmax"),
        ("[synthesis]\nmode = 'turbo'\n", "synthesis mode"),
        ("[run\nseed = 1\n", "cannot parse"),
    ],
)
def test_rejects_bad_files(tmp_path, text, message):
    with pytest.raises(UsageError, match=message):
        load_config(_write(tmp_path, text))


def test_written_config_loads_back(tmp_path):
    cfg = load_config(_write(tmp_path, "[run]\nseed = 5\ndtype = 'float64'\n[wavenet]\nlayers = 12\ncycles = 2\n"))
    path = write_config(cfg, tmp_path / "out" / "config.toml")
    assert load_config(str(path)) == cfg


class TestFingerprints:
    def test_stable(self):
        assert RunConfig().model_fingerprint("wavenet") == RunConfig().model_fingerprint("wavenet")
        assert len(RunConfig().model_fingerprint("conversion")) == 64

    def test_sections_are_independent(self, tmp_path):
        base = RunConfig()
        changed = load_config(_write(tmp_path, "[wavenet]\nlayers = 12\ncycles = 2\n"))
        assert changed.model_fingerprint("wavenet") != base.model_fingerprint("wavenet")
        assert changed.model_fingerprint("conversion") == base.model_fingerprint("conversion")
        assert changed.model_fingerprint("flowavenet") == base.model_fingerprint("flowavenet")

    def test_features_touch_every_model(self, tmp_path):
        base = RunConfig()
        changed = load_config(_write(tmp_path, "[features]\ngriffin_lim_iters = 10\n"))
        for kind in ("conversion", "wavenet", "flowavenet"):
            assert changed.model_fingerprint(kind) != base.model_fingerprint(kind)
        assert feature_fingerprint(changed.features) != feature_fingerprint(base.features)

    def test_run_dtype_counts(self):
        cfg = RunConfig()
        before = cfg.model_fingerprint("flowavenet")
        cfg.dtype = "float64"
        assert cfg.model_fingerprint("flowavenet") != before
        assert cfg.model_config("flowavenet").dtype == "float64"

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            RunConfig().model_fingerprint("tacotron")


def test_validate_returns_config():
    cfg = RunConfig()
    assert validate_config(cfg) is cfg
