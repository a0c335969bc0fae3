"""Signal-processing front end: analysis, Griffin-Lim synthesis, mu-law companding, DTW.

Every function here is a pure function of its arguments. Matrices are laid out
frames x features, waveforms are float64 arrays in [-1, 1].
"""

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import librosa
import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.signal import get_window
from scipy.spatial.distance import cdist

from errors import InvalidInputError

MU = 255
NUM_CLASSES = MU + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise InvalidInputError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def normalized(self, peak: float = 1.0) -> "Waveform":
        top = np.max(np.abs(self.samples)) if len(self) else 0.0
        if top == 0.0:
            return Waveform(self.samples.copy(), self.sample_rate)
        return Waveform(self.samples * (peak / top), self.sample_rate)


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16000
    fft_size: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    num_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def validate(self) -> "SpectrogramConfig":
        if not 0 < self.hop_length <= self.win_length <= self.fft_size:
            raise InvalidInputError(
                f"need 0 < hop_length ({self.hop_length}) <= win_length ({self.win_length}) "
                f"<= fft_size ({self.fft_size})"
            )
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise InvalidInputError(
                f"need 0 <= fmin ({self.fmin}) < fmax ({self.fmax}) <= sample_rate/2"
            )
        if self.num_mels < 1:
            raise InvalidInputError(f"num_mels must be >= 1, got {self.num_mels}")
        if self.log_floor <= 0:
            raise InvalidInputError(f"log_floor must be positive, got {self.log_floor}")
        return self

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class MelSpectrogram:
    values: np.ndarray
    config: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def hop_length(self) -> int:
        return self.config.hop_length


@dataclass
class MelCepstrum:
    values: np.ndarray
    order: int = 13


@dataclass
class F0Contour:
    f0_hz: np.ndarray
    voiced: np.ndarray

    @property
    def frames(self) -> int:
        return self.f0_hz.shape[0]


@dataclass
class DtwPath:
    pairs: List[Tuple[int, int]]
    total_cost: float


# ---------------------------------------------------------------------------
# STFT / Mel analysis
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def analysis_window(cfg: SpectrogramConfig) -> np.ndarray:
    window = get_window("hann", cfg.win_length, fftbins=True)
    return librosa.util.pad_center(window, size=cfg.fft_size)


@lru_cache(maxsize=16)
def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Slaney-style, area-normalized triangular filters, shape (num_mels, num_bins)."""
    return librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.fft_size,
        n_mels=cfg.num_mels,
        fmin=cfg.fmin,
        fmax=cfg.fmax,
        htk=False,
        norm="slaney",
    ).astype(np.float64)


@lru_cache(maxsize=16)
def _mel_pseudo_inverse(cfg: SpectrogramConfig) -> np.ndarray:
    return np.linalg.pinv(mel_filterbank(cfg))


def num_frames(num_samples: int, hop_length: int) -> int:
    return num_samples // hop_length + 1


def stft(w: Waveform, cfg: SpectrogramConfig) -> np.ndarray:
    """Centered, Hann-windowed STFT. Returns complex frames x (fft_size/2 + 1)."""
    cfg.validate()
    if len(w) == 0:
        raise InvalidInputError("cannot analyse an empty waveform")
    pad = cfg.fft_size // 2
    padded = np.pad(w.samples, (pad, pad))
    count = num_frames(len(w), cfg.hop_length)
    frames = sliding_window_view(padded, cfg.fft_size)[:: cfg.hop_length][:count]
    return np.fft.rfft(frames * analysis_window(cfg), axis=1)


def istft(spectrum: np.ndarray, cfg: SpectrogramConfig, length: int) -> np.ndarray:
    """Least-squares inverse of stft() (weighted overlap-add), trimmed to `length` samples."""
    window = analysis_window(cfg)
    frames = np.fft.irfft(spectrum, n=cfg.fft_size, axis=1) * window
    total = cfg.fft_size + cfg.hop_length * (frames.shape[0] - 1)
    signal = np.zeros(total)
    weight = np.zeros(total)
    squared = window**2
    for i, frame in enumerate(frames):
        start = i * cfg.hop_length
        signal[start : start + cfg.fft_size] += frame
        weight[start : start + cfg.fft_size] += squared
    covered = weight > 1e-11
    signal[covered] /= weight[covered]
    signal[~covered] = 0.0
    pad = cfg.fft_size // 2
    out = signal[pad : pad + length]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out


def mel_spectrogram(w: Waveform, cfg: SpectrogramConfig) -> MelSpectrogram:
    magnitude = np.abs(stft(w, cfg))
    energies = magnitude @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(energies, cfg.log_floor)), cfg)


def mel_to_linear(m: MelSpectrogram) -> np.ndarray:
    """Nonnegative pseudo-inverse of the filterbank. Entries sitting on the log floor count as silence."""
    cfg = m.config
    energies = np.exp(m.values)
    energies[m.values <= np.log(cfg.log_floor) + 1e-9] = 0.0
    return np.maximum(energies @ _mel_pseudo_inverse(cfg).T, 0.0)


# ---------------------------------------------------------------------------
# Griffin-Lim
# ---------------------------------------------------------------------------

def _bin_weights(cfg: SpectrogramConfig) -> np.ndarray:
    # DC and Nyquist appear once in the full spectrum, every other rfft bin twice
    weights = np.full(cfg.num_bins, 2.0)
    weights[0] = 1.0
    if cfg.fft_size % 2 == 0:
        weights[-1] = 1.0
    return weights


def spectral_convergence(target: np.ndarray, rebuilt: np.ndarray, cfg: SpectrogramConfig) -> float:
    weights = _bin_weights(cfg)
    reference = np.sqrt(np.sum(weights * target**2))
    if reference == 0.0:
        return float(np.sqrt(np.sum(weights * np.abs(rebuilt) ** 2)))
    return float(np.sqrt(np.sum(weights * (target - np.abs(rebuilt)) ** 2)) / reference)


def reconstruct_phase(
    magnitude: np.ndarray,
    cfg: SpectrogramConfig,
    iters: int = 60,
    length: Optional[int] = None,
    seed: int = 0,
) -> Tuple[np.ndarray, List[float]]:
    """Griffin-Lim on a linear magnitude (frames x bins).

    Returns the samples and the spectral-convergence error measured after each iteration.
    """
    if iters < 1:
        raise InvalidInputError(f"griffin-lim needs at least one iteration, got {iters}")
    if magnitude.ndim != 2 or magnitude.shape[1] != cfg.num_bins:
        raise InvalidInputError(f"magnitude must be frames x {cfg.num_bins}, got {magnitude.shape}")
    if length is None:
        length = (magnitude.shape[0] - 1) * cfg.hop_length
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(magnitude.shape))
    history = []
    for _ in range(iters):
        samples = istft(magnitude * angles, cfg, length)
        rebuilt = stft(Waveform(samples, cfg.sample_rate), cfg)
        history.append(spectral_convergence(magnitude, rebuilt, cfg))
        angles = rebuilt / np.maximum(np.abs(rebuilt), 1e-16)
    return istft(magnitude * angles, cfg, length), history


def griffin_lim(m: MelSpectrogram, iters: int = 60, seed: int = 0) -> Waveform:
    cfg = m.config
    samples, _ = reconstruct_phase(mel_to_linear(m), cfg, iters=iters, seed=seed)
    return Waveform(np.clip(samples, -1.0, 1.0), cfg.sample_rate)


# ---------------------------------------------------------------------------
# mu-law
# ---------------------------------------------------------------------------

def mu_law_compand(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)


def mu_law_encode(w) -> np.ndarray:
    """Floor-binned 8-bit mu-law classes in [0, 255]; accepts a Waveform or an array."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if np.any(np.abs(x) > 1.0):
        raise InvalidInputError("mu-law input must lie in [-1, 1]; normalize first")
    companded = mu_law_compand(x)
    classes = np.floor((companded + 1.0) / 2.0 * NUM_CLASSES).astype(np.int64)
    return np.minimum(classes, NUM_CLASSES - 1)


def mu_law_decode(classes, sample_rate: int = 16000) -> Waveform:
    """Inverse companding evaluated at bin centers."""
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() > NUM_CLASSES - 1):
        raise InvalidInputError(f"mu-law classes must lie in [0, {NUM_CLASSES - 1}]")
    companded = (classes.astype(np.float64) + 0.5) / NUM_CLASSES * 2.0 - 1.0
    samples = np.sign(companded) * np.expm1(np.abs(companded) * np.log1p(MU)) / MU
    return Waveform(samples, sample_rate)


# ---------------------------------------------------------------------------
# Cepstra and F0
# ---------------------------------------------------------------------------

def mel_cepstrum(m: MelSpectrogram, order: int = 13) -> MelCepstrum:
    """Orthonormal DCT-II of each log-Mel frame, keeping coefficients 1..order.

    order == num_mels keeps every coefficient, c0 included, so idct(values, norm="ortho")
    rebuilds the log-Mel frames.
    """
    num_mels = m.values.shape[1]
    if order < 1 or order > num_mels:
        raise InvalidInputError(f"cepstral order must be in [1, {num_mels}], got {order}")
    coefficients = dct(m.values, type=2, norm="ortho", axis=1)
    if order == num_mels:
        return MelCepstrum(coefficients, order)
    return MelCepstrum(coefficients[:, 1 : order + 1], order)


def estimate_f0(
    w: Waveform,
    frame_hop: int = 256,
    frame_ms: float = 40.0,
    fmin: float = 60.0,
    fmax: float = 400.0,
    voicing_threshold: float = 0.3,
    silence_ratio: float = 1e-4,
) -> F0Contour:
    """Normalized-autocorrelation pitch tracker.

    Frames are centered on multiples of `frame_hop`, on the same timeline as the Mel
    frames; frames running past the end of the signal are dropped.
    """
    sr = w.sample_rate
    frame_len = int(round(sr * frame_ms / 1000.0))
    padded = np.pad(w.samples, (frame_len // 2, 0))
    if padded.shape[0] < frame_len:
        return F0Contour(np.zeros(0), np.zeros(0, dtype=bool))
    count = 1 + (padded.shape[0] - frame_len) // frame_hop
    frames = sliding_window_view(padded, frame_len)[::frame_hop][:count]
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt(np.mean(frames**2, axis=1))

    min_lag = int(np.floor(sr / fmax))
    max_lag = int(np.ceil(sr / fmin))
    lags = np.arange(min_lag - 1, max_lag + 2)
    corr = np.zeros((count, lags.shape[0]))
    for idx, lag in enumerate(lags):
        head = frames[:, : frame_len - lag]
        tail = frames[:, lag:]
        norm = np.sqrt(np.sum(head * head, axis=1) * np.sum(tail * tail, axis=1))
        corr[:, idx] = np.sum(head * tail, axis=1) / np.maximum(norm, 1e-20)

    f0 = np.zeros(count)
    voiced = np.zeros(count, dtype=bool)
    loud_enough = rms > silence_ratio * (rms.max() if count else 0.0)
    for t in range(count):
        if not loud_enough[t]:
            continue
        r = corr[t]
        inner = np.arange(1, r.shape[0] - 1)
        peaks = inner[(r[inner] >= r[inner - 1]) & (r[inner] > r[inner + 1])]
        if peaks.size == 0:
            continue
        best = r[peaks].max()
        if best <= voicing_threshold:
            continue
        # smallest lag whose peak is close to the best one: the fundamental, not a multiple
        i = peaks[r[peaks] >= 0.9 * best][0]
        denom = r[i - 1] - 2.0 * r[i] + r[i + 1]
        shift = 0.5 * (r[i - 1] - r[i + 1]) / denom if denom != 0 else 0.0
        f0[t] = np.clip(sr / (lags[i] + shift), fmin, fmax)
        voiced[t] = True
    return F0Contour(f0, voiced)


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------

def _as_frames(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim <= 1:
        return x.reshape(-1, 1)
    if x.ndim > 2:
        raise InvalidInputError(f"DTW inputs must be frames x features, got shape {x.shape}")
    return x


def dtw_align(a: np.ndarray, b: np.ndarray, distance: str = "sqeuclidean") -> DtwPath:
    """Minimal-cost monotone alignment under the step set {(1,0), (0,1), (1,1)}.

    Ties during backtracking prefer the diagonal, then (i-1, j), then (i, j-1).
    A 1-D input is a sequence of scalar frames.
    """
    a, b = _as_frames(a), _as_frames(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidInputError("dtw_align needs two nonempty sequences")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if distance != "sqeuclidean":
        raise InvalidInputError(f"unsupported DTW distance '{distance}'")

    cost = cdist(a, b, "sqeuclidean")
    rows, cols = cost.shape
    acc = np.full((rows, cols), np.inf)
    acc[0, 0] = cost[0, 0]
    # cells on one anti-diagonal only depend on the previous two
    for k in range(1, rows + cols - 1):
        i = np.arange(max(0, k - cols + 1), min(rows - 1, k) + 1)
        j = k - i
        best = np.full(i.shape[0], np.inf)
        m = (i > 0) & (j > 0)
        best[m] = acc[i[m] - 1, j[m] - 1]
        m = i > 0
        best[m] = np.minimum(best[m], acc[i[m] - 1, j[m]])
        m = j > 0
        best[m] = np.minimum(best[m], acc[i[m], j[m] - 1])
        acc[i, j] = cost[i, j] + best

    i, j = rows - 1, cols - 1
    pairs = [(i, j)]
    while i > 0 or j > 0:
        candidates = []
        if i > 0 and j > 0:
            candidates.append((i - 1, j - 1))
        if i > 0:
            candidates.append((i - 1, j))
        if j > 0:
            candidates.append((i, j - 1))
        i, j = min(candidates, key=lambda p: acc[p])
        pairs.append((i, j))
    pairs.reverse()
    return DtwPath([(int(p), int(q)) for p, q in pairs], float(acc[-1, -1]))


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path, expected_rate: int = 16000) -> Waveform:
    """Read 16-bit PCM mono WAV; any other layout is rejected naming the offending field."""
    path = Path(path)
    try:
        info = sf.info(str(path))
    except Exception as e:
        raise InvalidInputError(f"{path.name}: unreadable audio file ({e})") from e
    checks = [
        ("format", info.format, "WAV"),
        ("subtype", info.subtype, "PCM_16"),
        ("channels", info.channels, 1),
        ("samplerate", info.samplerate, expected_rate),
    ]
    for name, got, want in checks:
        if got != want:
            raise InvalidInputError(f"{path.name}: {name}={got}, expected {want}")
    samples, rate = sf.read(str(path), dtype="float64")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(w.samples, -1.0, 1.0), w.sample_rate, subtype="PCM_16", format="WAV")
    return path
