"""Conditional flow vocoder: context blocks of squeeze followed by flows of
ActNorm -> affine coupling -> change order, trained by exact likelihood and
sampled in parallel through the inverse transforms."""

from dataclasses import dataclass
from math import gcd
from typing import List, Optional, Tuple

import numpy as np

from autodiff import Tensor, concat, gaussian_nll, no_grad
from dsp_utils import MelSpectrogram, Waveform
from errors import ShapeError, SingularityError, UsageError
from layers import Model, ParamFactory, embedding, pointwise
from optimizer import AdamState, adam_step
from wavenet_vocoder import GlobalConditioning, MelUpsampler, ResidualStack, set_mel_normalization

DDI_STD_FLOOR = 1e-6


@dataclass
class FlowConfig:
    blocks: int = 8
    flows: int = 6
    layers: int = 2
    kernel_size: int = 3
    residual_channels: int = 256
    gate_channels: int = 256
    skip_channels: int = 256
    mel_dim: int = 80
    num_speakers: int = 4
    num_emotions: int = 6
    speaker_embed_dim: int = 16
    emotion_embed_dim: int = 16
    upsample_strides: Tuple[int, ...] = (16, 16)
    dtype: str = "float32"

    @property
    def segment(self) -> int:
        """Audio lengths must be multiples of this."""
        return 2**self.blocks

    @property
    def hop_length(self) -> int:
        return int(np.prod(self.upsample_strides))

    def validate(self) -> "FlowConfig":
        if self.blocks < 1 or self.flows < 1 or self.layers < 1:
            raise UsageError("[flowavenet] blocks, flows and layers must be positive")
        if self.kernel_size < 1:
            raise UsageError("[flowavenet] kernel_size must be positive")
        return self


# ---------------------------------------------------------------------------
# Volume-preserving reshapes
# ---------------------------------------------------------------------------

def squeeze(x: Tensor) -> Tensor:
    """[C, T] -> [2C, T/2]; channel 2c holds x[c, 0::2], channel 2c+1 holds x[c, 1::2]."""
    channels, steps = x.shape
    if steps % 2:
        raise ShapeError(f"squeeze needs an even length, got {steps}")
    return x.reshape(channels, steps // 2, 2).transpose(0, 2, 1).reshape(2 * channels, steps // 2)


def unsqueeze(x: Tensor) -> Tensor:
    channels, steps = x.shape
    if channels % 2:
        raise ShapeError(f"unsqueeze needs an even channel count, got {channels}")
    return x.reshape(channels // 2, 2, steps).transpose(0, 2, 1).reshape(channels // 2, 2 * steps)


def change_order(x: Tensor) -> Tensor:
    """Swap the two channel halves; an involution with zero log-determinant."""
    half = _half(x)
    return concat([x[half:], x[:half]], axis=0)


def _half(x: Tensor) -> int:
    if x.shape[0] % 2:
        raise ShapeError(f"flow layers need an even channel count, got {x.shape[0]}")
    return x.shape[0] // 2


# ---------------------------------------------------------------------------
# ActNorm
# ---------------------------------------------------------------------------

def actnorm_forward(x: Tensor, scale: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    """y = scale * x + bias per channel; logdet = T * sum(ln|scale|)."""
    if np.any(scale.data == 0):
        raise SingularityError("ActNorm scale has a zero entry")
    y = x * scale.reshape(-1, 1) + bias.reshape(-1, 1)
    logdet = scale.abs().log().sum() * float(x.shape[1])
    return y, logdet


def actnorm_inverse(y: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    if np.any(scale.data == 0):
        raise SingularityError("ActNorm scale has a zero entry")
    return (y - bias.reshape(-1, 1)) / scale.reshape(-1, 1)


class ActNorm:
    def __init__(self, factory: ParamFactory, prefix: str, channels: int):
        self.scale = factory.constant(f"{prefix}.scale", (channels,), 1.0)
        self.bias = factory.zeros(f"{prefix}.bias", (channels,))

    def initialize(self, x: np.ndarray):
        """Data-dependent init: post-transform per-channel mean 0 and variance 1 on x."""
        mean = x.mean(axis=1)
        std = np.maximum(x.std(axis=1), DDI_STD_FLOOR)
        self.scale.data = (1.0 / std).astype(self.scale.dtype)
        self.bias.data = (-mean / std).astype(self.bias.dtype)

    def forward(self, x: Tensor, initialize: bool = False) -> Tuple[Tensor, Tensor]:
        if initialize:
            self.initialize(x.data)
        return actnorm_forward(x, self.scale, self.bias)

    def inverse(self, y: Tensor) -> Tensor:
        return actnorm_inverse(y, self.scale, self.bias)


# ---------------------------------------------------------------------------
# Affine coupling
# ---------------------------------------------------------------------------

def affine_forward(x_b: Tensor, log_s: Tensor, m: Tensor) -> Tensor:
    return x_b * log_s.exp() + m


def affine_inverse(y_b: Tensor, log_s: Tensor, m: Tensor) -> Tensor:
    return (y_b - m) * (-log_s).exp()


class AffineCoupling:
    """First channel half passes through; a non-causal WaveNet over it gives log-scale
    and shift for the second half. The output head starts at zero (identity flow)."""

    def __init__(self, factory: ParamFactory, prefix: str, channels: int, cond_dim: int, cfg: FlowConfig):
        f = factory
        half = channels // 2
        R, S = cfg.residual_channels, cfg.skip_channels
        self.front_W = f.xavier(f"{prefix}.front.W", (R, half), half, R)
        self.front_b = f.zeros(f"{prefix}.front.b", (R,))
        self.stack = ResidualStack(
            f,
            f"{prefix}.wn",
            [2**i for i in range(cfg.layers)],
            cfg.kernel_size,
            R,
            cfg.gate_channels,
            S,
            cond_dim,
            (cfg.speaker_embed_dim, cfg.emotion_embed_dim),
            causal=False,
        )
        self.head1_W = f.xavier(f"{prefix}.head1.W", (S, S), S, S)
        self.head1_b = f.zeros(f"{prefix}.head1.b", (S,))
        self.head2_W = f.zeros(f"{prefix}.head2.W", (channels, S))
        self.head2_b = f.zeros(f"{prefix}.head2.b", (channels,))

    def shift_and_scale(self, x_a: Tensor, cond: Tensor, globals_) -> Tuple[Tensor, Tensor]:
        h = pointwise(x_a, self.front_W, self.front_b)
        skips = self.stack.forward(h, cond, globals_)
        out = pointwise(skips.relu(), self.head1_W, self.head1_b).relu()
        out = pointwise(out, self.head2_W, self.head2_b)
        half = x_a.shape[0]
        return out[:half], out[half:]

    def forward(self, x: Tensor, cond: Tensor, globals_) -> Tuple[Tensor, Tensor]:
        half = _half(x)
        x_a, x_b = x[:half], x[half:]
        log_s, m = self.shift_and_scale(x_a, cond, globals_)
        y = concat([x_a, affine_forward(x_b, log_s, m)], axis=0)
        return y, log_s.sum()

    def inverse(self, y: Tensor, cond: Tensor, globals_) -> Tensor:
        half = _half(y)
        y_a, y_b = y[:half], y[half:]
        log_s, m = self.shift_and_scale(y_a, cond, globals_)
        return concat([y_a, affine_inverse(y_b, log_s, m)], axis=0)


@dataclass
class FlowSample:
    waveform: Waveform
    z: np.ndarray
    samples: np.ndarray


class FloWaveNetVocoder(Model):
    def __init__(self, cfg: FlowConfig, seed: int = 0):
        super().__init__(seed, cfg.dtype)
        self.cfg = cfg.validate()
        f = self.factory
        self.upsampler = MelUpsampler(f, "upsample", cfg.mel_dim, cfg.upsample_strides)
        self.speaker_table = f.normal("speaker.table", (cfg.num_speakers, cfg.speaker_embed_dim), 0.1)
        self.emotion_table = f.normal("emotion.table", (cfg.num_emotions, cfg.emotion_embed_dim), 0.1)
        self.blocks: List[List[Tuple[ActNorm, AffineCoupling]]] = []
        for k in range(1, cfg.blocks + 1):
            channels = 2**k
            cond_dim = cfg.mel_dim * 2**k
            flows = []
            for j in range(cfg.flows):
                prefix = f"block{k - 1}.flow{j}"
                flows.append(
                    (
                        ActNorm(f, f"{prefix}.actnorm", channels),
                        AffineCoupling(f, f"{prefix}.coupling", channels, cond_dim, cfg),
                    )
                )
            self.blocks.append(flows)
        self.buffers["mel_mean"] = np.zeros(cfg.mel_dim)
        self.buffers["mel_std"] = np.ones(cfg.mel_dim)
        self.buffers["actnorm_initialized"] = np.zeros(1, dtype=np.uint8)

    @property
    def initialized(self) -> bool:
        return bool(self.buffers["actnorm_initialized"][0])

    def set_normalization(self, mean: np.ndarray, std: np.ndarray):
        set_mel_normalization(self.buffers, self.cfg.mel_dim, mean, std)

    # -- conditioning -------------------------------------------------------
    def upsample_conditions(self, mel) -> Tensor:
        values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        if values.ndim != 2 or values.shape[1] != self.cfg.mel_dim:
            raise ShapeError(f"expected [frames, {self.cfg.mel_dim}] Mel, got {values.shape}")
        normalized = (values - self.buffers["mel_mean"]) / self.buffers["mel_std"]
        return self.upsampler(Tensor(normalized.T.astype(self.dtype)))

    def conditioning_pyramid(self, cond: Tensor) -> List[Tensor]:
        """Block k conditioning: [mel_dim * 2^k, T / 2^k], squeezed in lockstep with the audio."""
        pyramid = []
        c = cond
        for _ in self.blocks:
            c = squeeze(c)
            pyramid.append(c)
        return pyramid

    def _globals(self, g: GlobalConditioning):
        g.check(self.cfg.num_speakers, self.cfg.num_emotions)
        return embedding(g.speaker, self.speaker_table), embedding(g.emotion, self.emotion_table)

    def _check_length(self, steps: int):
        if steps % self.cfg.segment:
            raise ShapeError(f"audio length {steps} is not a multiple of {self.cfg.segment}")

    # -- transforms ---------------------------------------------------------
    def forward(self, x: Tensor, cond: Tensor, g: GlobalConditioning, initialize: bool = False) -> Tuple[Tensor, Tensor]:
        """x [1, T] -> (z [2^n, T / 2^n], total logdet)."""
        self._check_length(x.shape[1])
        if cond.shape[1] != x.shape[1]:
            raise ShapeError(f"conditioning has {cond.shape[1]} steps for {x.shape[1]} samples")
        globals_ = self._globals(g)
        h = x
        logdet = None
        for flows, c in zip(self.blocks, self.conditioning_pyramid(cond)):
            h = squeeze(h)
            for actnorm, coupling in flows:
                h, ld_norm = actnorm.forward(h, initialize)
                h, ld_coupling = coupling.forward(h, c, globals_)
                h = change_order(h)
                step = ld_norm + ld_coupling
                logdet = step if logdet is None else logdet + step
        if initialize:
            self.buffers["actnorm_initialized"][0] = 1
        return h, logdet

    def inverse(self, z: Tensor, cond: Tensor, g: GlobalConditioning) -> Tensor:
        globals_ = self._globals(g)
        pyramid = self.conditioning_pyramid(cond)
        h = z
        for flows, c in zip(reversed(self.blocks), reversed(pyramid)):
            for actnorm, coupling in reversed(flows):
                h = change_order(h)
                h = coupling.inverse(h, c, globals_)
                h = actnorm.inverse(h)
            h = unsqueeze(h)
        return h

    def log_likelihood(self, x: Tensor, cond: Tensor, g: GlobalConditioning, initialize: bool = False) -> Tensor:
        """log N(z; 0, I) + sum of ActNorm and coupling log-determinants."""
        z, logdet = self.forward(x, cond, g, initialize)
        return logdet - gaussian_nll(z)

    def nll_per_sample(self, wav: Waveform, mel: MelSpectrogram, g: GlobalConditioning) -> float:
        samples, mel_values = self._crop(wav, mel, None, None)
        with no_grad():
            return self.loss(samples, mel_values, g).item()

    # -- training -----------------------------------------------------------
    def _crop(self, wav: Waveform, mel: MelSpectrogram, crop_length: Optional[int], rng):
        hop = self.cfg.hop_length
        frames = min(mel.frames, len(wav) // hop)
        if frames == 0:
            raise ShapeError("utterance shorter than one frame")
        crop_frames = frames if not crop_length else min(frames, max(crop_length // hop, 1))
        # whole segments only
        per_segment = self.cfg.segment // gcd(self.cfg.segment, hop)
        crop_frames -= crop_frames % per_segment
        if crop_frames == 0:
            raise ShapeError(f"utterance shorter than one {self.cfg.segment}-sample segment")
        start = 0 if rng is None or crop_frames == frames else int(rng.integers(0, frames - crop_frames + 1))
        return wav.samples[start * hop : (start + crop_frames) * hop], mel.values[start : start + crop_frames]

    def loss(self, samples: np.ndarray, mel_values: np.ndarray, g: GlobalConditioning, initialize: bool = False) -> Tensor:
        cond = self.upsample_conditions(mel_values)
        x = Tensor(samples[None, :].astype(self.dtype))
        return self.log_likelihood(x, cond, g, initialize) * (-1.0 / samples.shape[0])

    def train_step(
        self,
        wav: Waveform,
        mel: MelSpectrogram,
        g: GlobalConditioning,
        state: AdamState,
        rng: Optional[np.random.Generator] = None,
        crop_length: Optional[int] = 4096,
    ) -> float:
        """-log p(x)/T on a random crop, one Adam update; the first call runs ActNorm init."""
        samples, mel_values = self._crop(wav, mel, crop_length, rng)
        self.zero_grad()
        loss = self.loss(samples, mel_values, g, initialize=not self.initialized)
        loss.backward()
        adam_step(self.params, state)
        return loss.item()

    def new_optimizer(self, lr: float = 1e-3, decay_period: Optional[int] = 100_000, decay_factor: float = 0.5) -> AdamState:
        return AdamState(lr=lr, decay_period=decay_period, decay_factor=decay_factor)

    # -- generation ---------------------------------------------------------
    def generate(self, mel, g: GlobalConditioning, seed: int = 0, prior_scale: float = 0.8) -> FlowSample:
        """z ~ N(0, prior_scale^2 I) through every inverse transform; length frames * hop."""
        if prior_scale <= 0:
            raise UsageError("prior_scale must be positive")
        rng = np.random.default_rng(seed)
        with no_grad():
            cond = self.upsample_conditions(mel)
            length = cond.shape[1]
            padded = -(-length // self.cfg.segment) * self.cfg.segment
            if padded != length:
                cond = Tensor(np.pad(cond.data, ((0, 0), (0, padded - length))))
            channels = self.cfg.segment
            z = (rng.standard_normal((channels, padded // channels)) * prior_scale).astype(self.dtype)
            x = self.inverse(Tensor(z), cond, g).data[0, :length]
        return FlowSample(Waveform(np.clip(x, -1.0, 1.0)), z, x)

    def sample(self, mel, g: GlobalConditioning, seed: int = 0, prior_scale: float = 0.8) -> Waveform:
        return self.generate(mel, g, seed, prior_scale).waveform
