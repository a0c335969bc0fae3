"""Conditional WaveNet vocoder over 8-bit mu-law classes.

Local conditioning is the Mel spectrogram upsampled to sample rate by transposed
convolutions; global conditioning is a speaker and an emotion embedding, each
projected per layer and added to the dilated convolution output before gating.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from autodiff import Tensor, cross_entropy_with_logits, gated_activation, no_grad, softmax_numpy
from dsp_utils import NUM_CLASSES, MelSpectrogram, Waveform, mu_law_decode, mu_law_encode
from errors import ShapeError, UnknownCodeError, UsageError
from layers import Model, ParamFactory, conv1d, embedding, embedding_lookup, pointwise, transposed_conv1d
from optimizer import AdamState, adam_step

GO_CLASS = NUM_CLASSES // 2
STD_FLOOR = 1e-2


@dataclass
class WaveNetConfig:
    layers: int = 24
    cycles: int = 4
    kernel_size: int = 2
    residual_channels: int = 256
    gate_channels: int = 256
    skip_channels: int = 256
    classes: int = NUM_CLASSES
    mel_dim: int = 80
    num_speakers: int = 4
    num_emotions: int = 6
    speaker_embed_dim: int = 16
    emotion_embed_dim: int = 16
    upsample_strides: Tuple[int, ...] = (16, 16)
    dtype: str = "float32"

    @property
    def dilations(self) -> List[int]:
        per_cycle = self.layers // self.cycles
        return [2 ** (i % per_cycle) for i in range(self.layers)]

    @property
    def receptive_field(self) -> int:
        return (self.kernel_size - 1) * sum(self.dilations) + 1

    @property
    def hop_length(self) -> int:
        return int(np.prod(self.upsample_strides))

    def validate(self) -> "WaveNetConfig":
        if self.cycles < 1 or self.layers % self.cycles:
            raise UsageError(f"[wavenet] layers ({self.layers}) must be a multiple of cycles ({self.cycles})")
        if self.kernel_size < 2:
            raise UsageError("[wavenet] causal kernel_size must be >= 2")
        if self.classes != NUM_CLASSES:
            raise UsageError(f"[wavenet] classes must be {NUM_CLASSES} for 8-bit mu-law")
        if any(s < 1 for s in self.upsample_strides):
            raise UsageError("[wavenet] upsample strides must be positive")
        return self


@dataclass(frozen=True)
class GlobalConditioning:
    speaker: int
    emotion: int

    def check(self, num_speakers: int, num_emotions: int) -> "GlobalConditioning":
        if not 0 <= self.speaker < num_speakers:
            raise UnknownCodeError(f"speaker id {self.speaker} outside [0, {num_speakers - 1}]")
        if not 0 <= self.emotion < num_emotions:
            raise UnknownCodeError(f"emotion id {self.emotion} outside [0, {num_emotions - 1}]")
        return self


def set_mel_normalization(buffers: dict, mel_dim: int, mean, std):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (mel_dim,) or std.shape != (mel_dim,):
        raise ShapeError(f"normalization stats must be {mel_dim}-dim, got {mean.shape} and {std.shape}")
    buffers["mel_mean"] = mean
    buffers["mel_std"] = np.maximum(std, STD_FLOOR)


class MelUpsampler:
    """Stacked transposed convolutions, kernel width = stride, initialized to repeat each frame."""

    def __init__(self, factory: ParamFactory, prefix: str, mel_dim: int, strides: Sequence[int]):
        self.strides = tuple(strides)
        self.layers = []
        for i, stride in enumerate(self.strides):
            kernel = np.repeat(np.eye(mel_dim)[:, :, None], stride, axis=2)
            W = factory.array(f"{prefix}.{i}.W", kernel)
            b = factory.zeros(f"{prefix}.{i}.b", (mel_dim,))
            self.layers.append((W, b, stride))

    def __call__(self, mel: Tensor) -> Tensor:
        """[mel_dim, frames] -> [mel_dim, frames * prod(strides)]."""
        if mel.ndim != 2 or mel.shape[1] == 0:
            raise ShapeError(f"upsampler expects a nonempty [mel_dim, frames] input, got {mel.shape}")
        h = mel
        for W, b, stride in self.layers:
            h = transposed_conv1d(h, W, stride, b)
        return h


class ResidualStack:
    """Gated residual layers with local and global conditioning; returns the summed skips."""

    def __init__(
        self,
        factory: ParamFactory,
        prefix: str,
        dilations: Sequence[int],
        kernel_size: int,
        residual: int,
        gate: int,
        skip: int,
        cond_dim: int,
        global_dims: Sequence[int],
        causal: bool = True,
    ):
        f = factory
        self.dilations = list(dilations)
        self.kernel_size = kernel_size
        self.gate = gate
        self.causal = causal
        self.layers = []
        for i, _ in enumerate(self.dilations):
            last = i == len(self.dilations) - 1
            p = f"{prefix}.{i}"
            layer = {
                "dil.W": f.xavier(f"{p}.dil.W", (2 * gate, residual, kernel_size), residual * kernel_size, 2 * gate * kernel_size),
                "dil.b": f.zeros(f"{p}.dil.b", (2 * gate,)),
                "cond.W": f.xavier(f"{p}.cond.W", (2 * gate, cond_dim), cond_dim, 2 * gate),
                "global.W": [
                    f.xavier(f"{p}.global{j}.W", (2 * gate, dim), dim, 2 * gate) for j, dim in enumerate(global_dims)
                ],
                "skip.W": f.xavier(f"{p}.skip.W", (skip, gate), gate, skip),
                "skip.b": f.zeros(f"{p}.skip.b", (skip,)),
            }
            if not last:
                layer["res.W"] = f.xavier(f"{p}.res.W", (residual, gate), gate, residual)
                layer["res.b"] = f.zeros(f"{p}.res.b", (residual,))
            self.layers.append(layer)

    def forward(self, h: Tensor, cond: Tensor, globals_: Sequence[Tensor]) -> Tensor:
        if cond.shape[1] != h.shape[1]:
            raise ShapeError(f"conditioning has {cond.shape[1]} steps, input has {h.shape[1]}")
        skips = None
        for layer, dilation in zip(self.layers, self.dilations):
            a = conv1d(h, layer["dil.W"], layer["dil.b"], dilation, self.causal)
            a = a + pointwise(cond, layer["cond.W"])
            for W, g in zip(layer["global.W"], globals_):
                a = a + W @ g.reshape(-1, 1)
            z = gated_activation(a, self.gate)
            s = pointwise(z, layer["skip.W"], layer["skip.b"])
            skips = s if skips is None else skips + s
            if "res.W" in layer:
                h = h + pointwise(z, layer["res.W"], layer["res.b"])
        return skips


@dataclass
class SamplingState:
    """Per-layer ring buffers of the last (K-1)*d layer inputs."""

    buffers: List[np.ndarray]
    step: int = 0

    @classmethod
    def initial(cls, channels: int, dilations: Sequence[int], kernel_size: int, dtype) -> "SamplingState":
        return cls([np.zeros((channels, (kernel_size - 1) * d), dtype=dtype) for d in dilations])


@dataclass
class GenerationResult:
    classes: np.ndarray
    logits: Optional[np.ndarray] = None
    waveform: Optional[Waveform] = None


def draw_class(logits: np.ndarray, u: float, temperature: float = 1.0) -> int:
    """Inverse-CDF draw from softmax(logits / temperature) with a uniform variate u."""
    probs = softmax_numpy(logits.astype(np.float64) / temperature)
    return int(min(np.searchsorted(np.cumsum(probs), u, side="right"), probs.shape[0] - 1))


class WaveNetVocoder(Model):
    def __init__(self, cfg: WaveNetConfig, seed: int = 0):
        super().__init__(seed, cfg.dtype)
        self.cfg = cfg.validate()
        f = self.factory
        R, S = cfg.residual_channels, cfg.skip_channels
        self.upsampler = MelUpsampler(f, "upsample", cfg.mel_dim, cfg.upsample_strides)
        self.input_table = f.xavier("input.table", (cfg.classes, R), cfg.classes, R)
        self.speaker_table = f.normal("speaker.table", (cfg.num_speakers, cfg.speaker_embed_dim), 0.1)
        self.emotion_table = f.normal("emotion.table", (cfg.num_emotions, cfg.emotion_embed_dim), 0.1)
        self.stack = ResidualStack(
            f,
            "layer",
            cfg.dilations,
            cfg.kernel_size,
            R,
            cfg.gate_channels,
            S,
            cfg.mel_dim,
            (cfg.speaker_embed_dim, cfg.emotion_embed_dim),
            causal=True,
        )
        self.head1_W = f.xavier("head1.W", (S, S), S, S)
        self.head1_b = f.zeros("head1.b", (S,))
        # small output layer keeps the initial softmax near uniform
        self.head2_W = f.xavier("head2.W", (cfg.classes, S), S, cfg.classes, gain=0.01)
        self.head2_b = f.zeros("head2.b", (cfg.classes,))
        self.buffers["mel_mean"] = np.zeros(cfg.mel_dim)
        self.buffers["mel_std"] = np.ones(cfg.mel_dim)

    # -- conditioning -------------------------------------------------------
    def set_normalization(self, mean: np.ndarray, std: np.ndarray):
        """Per-bin Mel statistics, usually the feature store's stats.json."""
        set_mel_normalization(self.buffers, self.cfg.mel_dim, mean, std)

    def _mel_tensor(self, mel) -> Tensor:
        values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        if values.ndim != 2 or values.shape[1] != self.cfg.mel_dim:
            raise ShapeError(f"expected [frames, {self.cfg.mel_dim}] Mel, got {values.shape}")
        normalized = (values - self.buffers["mel_mean"]) / self.buffers["mel_std"]
        return Tensor(normalized.T.astype(self.dtype))

    def upsample_conditions(self, mel) -> Tensor:
        """Per-sample conditioning [mel_dim, frames * hop]."""
        return self.upsampler(self._mel_tensor(mel))

    def _globals(self, g: GlobalConditioning):
        g.check(self.cfg.num_speakers, self.cfg.num_emotions)
        return embedding(g.speaker, self.speaker_table), embedding(g.emotion, self.emotion_table)

    # -- teacher forcing ----------------------------------------------------
    def shift_inputs(self, classes: np.ndarray) -> np.ndarray:
        classes = np.asarray(classes, dtype=np.int64)
        return np.concatenate([[GO_CLASS], classes[:-1]]).astype(np.int64)

    def logits_from_inputs(self, inputs: np.ndarray, cond: Tensor, g: GlobalConditioning) -> Tensor:
        if cond.shape[1] != len(inputs):
            raise ShapeError(f"conditioning has {cond.shape[1]} steps for {len(inputs)} samples")
        h = embedding_lookup(inputs, self.input_table).T
        skips = self.stack.forward(h, cond, self._globals(g))
        out = pointwise(skips.relu(), self.head1_W, self.head1_b).relu()
        return pointwise(out, self.head2_W, self.head2_b).T

    def forward_teacher_forced(self, classes: np.ndarray, cond: Tensor, g: GlobalConditioning) -> Tensor:
        """Logits [T, classes]; row t sees classes < t and conditioning only."""
        return self.logits_from_inputs(self.shift_inputs(classes), cond, g)

    def _crop(self, wav: Waveform, mel: MelSpectrogram, crop_length: Optional[int], rng):
        hop = self.cfg.hop_length
        frames = min(mel.frames, len(wav) // hop)
        if frames == 0:
            raise ShapeError("utterance shorter than one frame")
        crop_frames = frames if not crop_length else min(frames, max(crop_length // hop, 1))
        start = 0 if rng is None or crop_frames == frames else int(rng.integers(0, frames - crop_frames + 1))
        samples = wav.samples[start * hop : (start + crop_frames) * hop]
        return mu_law_encode(samples), mel.values[start : start + crop_frames]

    def loss(self, classes: np.ndarray, mel_values: np.ndarray, g: GlobalConditioning) -> Tensor:
        cond = self.upsample_conditions(mel_values)
        return cross_entropy_with_logits(self.forward_teacher_forced(classes, cond, g), classes)

    def train_step(
        self,
        wav: Waveform,
        mel: MelSpectrogram,
        g: GlobalConditioning,
        state: AdamState,
        rng: Optional[np.random.Generator] = None,
        crop_length: Optional[int] = 4096,
    ) -> float:
        """Cross-entropy on a random frame-aligned crop, one Adam update; pre-update loss."""
        classes, mel_values = self._crop(wav, mel, crop_length, rng)
        self.zero_grad()
        loss = self.loss(classes, mel_values, g)
        loss.backward()
        adam_step(self.params, state)
        return loss.item()

    def teacher_forced_accuracy(self, wav: Waveform, mel: MelSpectrogram, g: GlobalConditioning) -> float:
        classes, mel_values = self._crop(wav, mel, None, None)
        with no_grad():
            cond = self.upsample_conditions(mel_values)
            logits = self.forward_teacher_forced(classes, cond, g).data
        return float(np.mean(np.argmax(logits, axis=1) == classes))

    def new_optimizer(self, lr: float = 1e-3, decay_period: Optional[int] = 100_000, decay_factor: float = 0.5) -> AdamState:
        return AdamState(lr=lr, decay_period=decay_period, decay_factor=decay_factor)

    # -- generation ---------------------------------------------------------
    def generate(
        self,
        mel,
        g: GlobalConditioning,
        mode: str = "fast",
        seed: int = 0,
        temperature: float = 1.0,
        return_logits: bool = False,
        num_samples: Optional[int] = None,
        progress: bool = False,
    ) -> GenerationResult:
        """Autoregressive sampling, by full recomputation ("naive") or ring buffers ("fast").

        Both modes consume the same uniform variates, so equal seeds give equal classes.
        """
        if mode not in ("naive", "fast"):
            raise UsageError(f"sampling mode must be naive or fast, got {mode}")
        if temperature <= 0:
            raise UsageError("temperature must be positive")
        with no_grad():
            cond = self.upsample_conditions(mel)
            spk, emo = (t.data for t in self._globals(g))
        total = cond.shape[1] if num_samples is None else min(num_samples, cond.shape[1])
        rng = np.random.default_rng(seed)
        steps = self._naive_steps(cond, g) if mode == "naive" else self._fast_steps(cond, spk, emo)
        classes = np.zeros(total, dtype=np.int64)
        logits = np.zeros((total, self.cfg.classes)) if return_logits else None
        for t in tqdm(range(total), desc=f"🔍 WaveNet {mode}", disable=not progress, leave=False):
            row = next(steps) if t == 0 else steps.send(int(classes[t - 1]))
            classes[t] = draw_class(row, rng.random(), temperature)
            if logits is not None:
                logits[t] = row
        steps.close()
        return GenerationResult(classes, logits, mu_law_decode(classes))

    def sample(self, mel, g: GlobalConditioning, mode: str = "fast", seed: int = 0, temperature: float = 1.0) -> Waveform:
        return self.generate(mel, g, mode, seed, temperature).waveform

    def _naive_steps(self, cond: Tensor, g: GlobalConditioning):
        """Yields logits for step t, then receives the class drawn at t."""
        window = self.cfg.receptive_field
        inputs = [GO_CLASS]
        while True:
            t = len(inputs) - 1
            start = max(0, t - window + 1)
            with no_grad():
                sub = Tensor(cond.data[:, start : t + 1])
                out = self.logits_from_inputs(np.asarray(inputs[start:], dtype=np.int64), sub, g)
            inputs.append((yield out.data[-1]))

    def _fast_steps(self, cond: Tensor, spk: np.ndarray, emo: np.ndarray):
        cfg = self.cfg
        K = cfg.kernel_size
        G = cfg.gate_channels
        layers = self.stack.layers
        dilations = self.stack.dilations
        state = SamplingState.initial(cfg.residual_channels, dilations, K, self.dtype)
        global_bias = [
            layer["dil.b"].data + layer["global.W"][0].data @ spk + layer["global.W"][1].data @ emo for layer in layers
        ]
        table = self.input_table.data
        cond_values = cond.data
        previous = GO_CLASS
        while True:
            t = state.step
            h = table[previous]
            skips = np.zeros(cfg.skip_channels, dtype=self.dtype)
            for l, layer in enumerate(layers):
                d = dilations[l]
                buf = state.buffers[l]
                size = buf.shape[1]
                W = layer["dil.W"].data
                a = W[:, :, K - 1] @ h + layer["cond.W"].data @ cond_values[:, t] + global_bias[l]
                for k in range(K - 1):
                    lag = (K - 1 - k) * d
                    a = a + W[:, :, k] @ buf[:, (t - lag) % size]
                buf[:, t % size] = h
                z = np.tanh(a[:G]) * expit(a[G:])
                skips = skips + layer["skip.W"].data @ z + layer["skip.b"].data
                if "res.W" in layer:
                    h = h + layer["res.W"].data @ z + layer["res.b"].data
            out = np.maximum(skips, 0.0)
            out = np.maximum(self.head1_W.data @ out + self.head1_b.data, 0.0)
            state.step += 1
            previous = yield self.head2_W.data @ out + self.head2_b.data
