import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from dsp_utils import Waveform  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the overfit experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_tone(freq_hz: float, seconds: float = 1.0, sample_rate: int = 16000, amplitude: float = 0.5) -> Waveform:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq_hz * t), sample_rate)


@pytest.fixture
def tone():
    return make_tone


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_RUN = """
[run]
seed = 0
out_dir = "{out_dir}"

[features]
fft_size = 256
win_length = 256
hop_length = 64
num_mels = 20
mcep_order = 8
griffin_lim_iters = 5

[conversion]
mel_dim = 20
ppg_dim = 12
num_emotions = 3
emotion_embed_dim = 3
dense_layers = 1
dense_units = 8
blstm_layers = 1
blstm_units = 8
lr = 0.01

[wavenet]
layers = 4
cycles = 2
residual_channels = 4
gate_channels = 4
skip_channels = 4
mel_dim = 20
num_speakers = 2
num_emotions = 3
speaker_embed_dim = 2
emotion_embed_dim = 2
upsample_strides = [8, 8]

[flowavenet]
blocks = 2
flows = 2
layers = 2
residual_channels = 4
gate_channels = 4
skip_channels = 4
mel_dim = 20
num_speakers = 2
num_emotions = 3
speaker_embed_dim = 2
emotion_embed_dim = 2
upsample_strides = [8, 8]

[training]
conversion_steps = 4
vocoder_steps = 3
crop_length = 256
checkpoint_every = 2
keep_last = 2
validate_every = 2
source_emotion = "neutral"

[synthetic]
num_speakers = 2
emotions = ["happy", "sad", "neutral"]
utterances = 3
min_duration = 0.25
max_duration = 0.35
"""


@pytest.fixture(scope="session")
def write_tiny_config():
    """Writes a run config small enough to train every model in seconds."""

    def write(path: Path, out_dir: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(TINY_RUN.format(out_dir=Path(out_dir).as_posix()))
        return path

    return write
