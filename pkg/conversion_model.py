"""DBLSTM Mel-to-Mel conversion model with emotion-code conditioning.

The proposed variant reads Mel + PPG frames, the baseline reads Mel only; both
receive the target emotion code. Training pairs are built by warping the source
onto the target timeline with DTW, so targets stay untouched ground truth.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from autodiff import Tensor, broadcast_to, concat, l1_loss, no_grad
from dsp_utils import MelSpectrogram, SpectrogramConfig, Waveform, dtw_align, mel_spectrogram
from errors import AlignmentError, InvalidInputError, ShapeError, UnknownCodeError, UsageError
from layers import Model, add_lstm_params, bilstm, dense, embedding
from optimizer import AdamState, adam_step, clip_grad_norm

PPG_ROW_TOLERANCE = 1e-4
PPG_FRAME_TOLERANCE = 2
STD_FLOOR = 1e-2


@dataclass
class ConversionConfig:
    mel_dim: int = 80
    ppg_dim: int = 131
    use_ppg: bool = True
    num_emotions: int = 6
    emotion_embed_dim: int = 16
    dense_layers: int = 2
    dense_units: int = 256
    blstm_layers: int = 4
    blstm_units: int = 256
    lr: float = 1e-3
    clip_norm: float = 5.0
    dtype: str = "float32"

    @property
    def input_dim(self) -> int:
        return self.mel_dim + (self.ppg_dim if self.use_ppg else 0)

    def validate(self) -> "ConversionConfig":
        for name in ("mel_dim", "ppg_dim", "num_emotions", "emotion_embed_dim", "dense_units", "blstm_units"):
            if getattr(self, name) < 1:
                raise UsageError(f"[conversion] {name} must be positive")
        if self.dense_layers < 1 or self.blstm_layers < 1:
            raise UsageError("[conversion] needs at least one dense and one BLSTM layer")
        return self


@dataclass(frozen=True)
class EmotionCode:
    id: int
    num_emotions: int = 6

    def __post_init__(self):
        if not 0 <= self.id < self.num_emotions:
            raise UnknownCodeError(f"emotion id {self.id} outside [0, {self.num_emotions - 1}]")

    def one_hot(self) -> np.ndarray:
        vec = np.zeros(self.num_emotions)
        vec[self.id] = 1.0
        return vec


@dataclass
class PpgMatrix:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError(f"PPG must be frames x classes, got shape {self.values.shape}")
        if self.values.size:
            if self.values.min() < -1e-6 or self.values.max() > 1.0 + 1e-6:
                raise InvalidInputError("PPG entries must lie in [0, 1]")
            worst = np.abs(self.values.sum(axis=1) - 1.0).max()
            if worst > PPG_ROW_TOLERANCE:
                raise InvalidInputError(f"PPG rows must sum to 1 (worst deviation {worst:.2e})")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class TrainingPair:
    inputs: np.ndarray
    target: np.ndarray
    emotion: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.target.shape[0]:
            raise AlignmentError(
                f"pair has {self.inputs.shape[0]} input frames but {self.target.shape[0]} target frames"
            )


def _emotion_id(code: Union[int, EmotionCode]) -> int:
    return code.id if isinstance(code, EmotionCode) else int(code)


def resample_ppg(ppg: PpgMatrix, frames: int) -> PpgMatrix:
    """Nearest-frame lookup onto a `frames`-long timeline, rows renormalized."""
    if ppg.frames == 0:
        raise InvalidInputError("cannot resample an empty PPG")
    if ppg.frames == frames:
        return ppg
    index = np.minimum(np.floor((np.arange(frames) + 0.5) * ppg.frames / frames).astype(np.int64), ppg.frames - 1)
    rows = ppg.values[index]
    return PpgMatrix(rows / rows.sum(axis=1, keepdims=True))


def warp_indices(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """For each target frame, the lowest source frame DTW pairs with it."""
    path = np.asarray(dtw_align(src, tgt).pairs)
    mapping = np.full(tgt.shape[0], src.shape[0], dtype=np.int64)
    np.minimum.at(mapping, path[:, 1], path[:, 0])
    return mapping


def prepare_pairs(
    src: MelSpectrogram,
    src_ppg: Optional[PpgMatrix],
    tgt: MelSpectrogram,
    emotion: Union[int, EmotionCode],
) -> TrainingPair:
    """Warp source Mel (and PPG when given) onto the target timeline."""
    src_values = src.values
    ppg_values = None
    if src_ppg is not None:
        if abs(src_ppg.frames - src.frames) > PPG_FRAME_TOLERANCE:
            raise AlignmentError(
                f"PPG has {src_ppg.frames} frames but the Mel has {src.frames} "
                f"(tolerance {PPG_FRAME_TOLERANCE})"
            )
        n = min(src_ppg.frames, src.frames)
        src_values = src_values[:n]
        ppg_values = src_ppg.values[:n]
    mapping = warp_indices(src_values, tgt.values)
    inputs = src_values[mapping]
    if ppg_values is not None:
        inputs = np.concatenate([inputs, ppg_values[mapping]], axis=1)
    return TrainingPair(inputs, tgt.values.copy(), _emotion_id(emotion))


def build_inputs(mel: np.ndarray, ppg: Optional[PpgMatrix], use_ppg: bool) -> np.ndarray:
    if not use_ppg:
        return mel
    if ppg is None:
        raise InvalidInputError("the PPG-conditioned model needs a PPG for every utterance")
    ppg = resample_ppg(ppg, mel.shape[0])
    return np.concatenate([mel, ppg.values], axis=1)


class ConversionModel(Model):
    """emotion -> embedding -> dense+softsign, broadcast and concatenated with the
    frame inputs, then dense tanh layers, a BiLSTM stack and a linear projection."""

    def __init__(self, cfg: ConversionConfig, seed: int = 0):
        super().__init__(seed, cfg.dtype)
        self.cfg = cfg.validate()
        f = self.factory
        e = cfg.emotion_embed_dim
        self.emotion_table = f.normal("emotion.table", (cfg.num_emotions, e), 0.1)
        self.emotion_W = f.xavier("emotion.dense.W", (e, e), e, e)
        self.emotion_b = f.zeros("emotion.dense.b", (e,))

        self.dense = []
        width = cfg.input_dim + e
        for i in range(cfg.dense_layers):
            W = f.xavier(f"dense{i}.W", (width, cfg.dense_units), width, cfg.dense_units)
            b = f.zeros(f"dense{i}.b", (cfg.dense_units,))
            self.dense.append((W, b))
            width = cfg.dense_units

        self.blstm = []
        for i in range(cfg.blstm_layers):
            fwd = add_lstm_params(f, f"blstm{i}.fwd", width, cfg.blstm_units)
            bwd = add_lstm_params(f, f"blstm{i}.bwd", width, cfg.blstm_units)
            self.blstm.append((fwd, bwd))
            width = 2 * cfg.blstm_units

        self.proj_W = f.xavier("proj.W", (width, cfg.mel_dim), width, cfg.mel_dim)
        self.proj_b = f.zeros("proj.b", (cfg.mel_dim,))

        self.buffers["input_mean"] = np.zeros(cfg.input_dim)
        self.buffers["input_std"] = np.ones(cfg.input_dim)
        self.buffers["target_mean"] = np.zeros(cfg.mel_dim)
        self.buffers["target_std"] = np.ones(cfg.mel_dim)

    # -- normalization ------------------------------------------------------
    def fit_normalization(self, pairs: Iterable[TrainingPair]):
        """Per-dimension z-score statistics over every frame of the training pairs."""
        pairs = list(pairs)
        inputs = np.concatenate([p.inputs for p in pairs], axis=0)
        targets = np.concatenate([p.target for p in pairs], axis=0)
        self.buffers["input_mean"] = inputs.mean(axis=0)
        self.buffers["input_std"] = np.maximum(inputs.std(axis=0), STD_FLOOR)
        self.buffers["target_mean"] = targets.mean(axis=0)
        self.buffers["target_std"] = np.maximum(targets.std(axis=0), STD_FLOOR)

    def normalize_inputs(self, inputs: np.ndarray) -> np.ndarray:
        return ((inputs - self.buffers["input_mean"]) / self.buffers["input_std"]).astype(self.dtype)

    def normalize_target(self, target: np.ndarray) -> np.ndarray:
        return ((target - self.buffers["target_mean"]) / self.buffers["target_std"]).astype(self.dtype)

    def denormalize_target(self, values: np.ndarray) -> np.ndarray:
        return values.astype(np.float64) * self.buffers["target_std"] + self.buffers["target_mean"]

    # -- graph --------------------------------------------------------------
    def forward(self, x: Tensor, emotion: Union[int, EmotionCode]) -> Tensor:
        """Normalized [T, input_dim] frames -> normalized [T, mel_dim] prediction."""
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ShapeError(f"conversion model expects [T, {self.cfg.input_dim}] inputs, got {x.shape}")
        code = _emotion_id(emotion)
        emo = embedding(code, self.emotion_table).reshape(1, -1)
        emo = dense(emo, self.emotion_W, self.emotion_b).softsign()
        emo = broadcast_to(emo, (x.shape[0], emo.shape[1]))
        h = concat([x, emo], axis=1)
        for W, b in self.dense:
            h = dense(h, W, b).tanh()
        for fwd, bwd in self.blstm:
            h = bilstm(h, fwd, bwd)
        return dense(h, self.proj_W, self.proj_b)

    def predict(self, inputs: np.ndarray, emotion: Union[int, EmotionCode]) -> np.ndarray:
        with no_grad():
            out = self.forward(Tensor(self.normalize_inputs(inputs)), emotion)
        return self.denormalize_target(out.data)

    def pair_loss(self, pair: TrainingPair) -> Tensor:
        x = Tensor(self.normalize_inputs(pair.inputs))
        return l1_loss(self.forward(x, pair.emotion), self.normalize_target(pair.target))

    def validation_l1(self, pairs: Iterable[TrainingPair]) -> float:
        with no_grad():
            losses = [self.pair_loss(p).item() for p in pairs]
        return float(np.mean(losses)) if losses else float("nan")

    def train_step(self, pair: TrainingPair, state: AdamState) -> float:
        """One L1 update; returns the loss measured before the update."""
        self.zero_grad()
        loss = self.pair_loss(pair)
        loss.backward()
        clip_grad_norm(self.params.values(), self.cfg.clip_norm)
        adam_step(self.params, state)
        return loss.item()

    def new_optimizer(self) -> AdamState:
        # constant learning rate: the decay schedule applies to the vocoders only
        return AdamState(lr=self.cfg.lr)


def convert_utterance(
    src_wav: Waveform,
    src_ppg: Optional[PpgMatrix],
    emotion: Union[int, EmotionCode],
    model: ConversionModel,
    features: SpectrogramConfig,
) -> MelSpectrogram:
    """Analysis -> forward -> converted Mel on the source's frame count."""
    mel = mel_spectrogram(src_wav, features)
    if mel.values.shape[1] != model.cfg.mel_dim:
        raise ShapeError(f"analysis gives {mel.values.shape[1]} Mel bins, model expects {model.cfg.mel_dim}")
    inputs = build_inputs(mel.values, src_ppg, model.cfg.use_ppg)
    values = model.predict(inputs, emotion)
    return MelSpectrogram(np.maximum(values, np.log(features.log_floor)), features)
