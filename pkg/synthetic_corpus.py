"""Deterministic parallel multi-speaker, multi-emotion corpus of harmonic tones.

Every sentence has fixed "content": a sequence of phone ids with relative
durations and per-phone harmonic envelopes. Emotions change only prosody
(F0 level, vibrato, spectral tilt, tempo and energy), speakers change the base
F0. Pseudo-PPGs follow the phone sequence on a normalized time axis, so parallel
utterances share PPG trajectories up to a duration warp.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from tqdm import tqdm

from dsp_utils import Waveform, num_frames, write_wav
from errors import StorageError, UsageError
from feature_store import Manifest, ManifestEntry, write_ppg

DEFAULT_EMOTIONS = ("happy", "sad", "angry", "surprise", "fear", "neutral")


@dataclass(frozen=True)
class EmotionProsody:
    f0_multiplier: float
    vibrato_hz: float
    vibrato_depth: float
    tilt_db_per_octave: float
    tempo: float
    energy: float


EMOTION_PROSODY: Dict[str, EmotionProsody] = {
    "neutral": EmotionProsody(1.00, 0.0, 0.000, -6.0, 1.00, 0.55),
    "happy": EmotionProsody(1.30, 5.0, 0.030, -4.0, 0.90, 0.70),
    "sad": EmotionProsody(0.85, 2.0, 0.010, -10.0, 1.25, 0.35),
    "angry": EmotionProsody(1.20, 7.0, 0.020, -2.0, 0.85, 0.85),
    "surprise": EmotionProsody(1.45, 4.0, 0.050, -5.0, 0.95, 0.65),
    "fear": EmotionProsody(1.15, 9.0, 0.060, -8.0, 1.10, 0.45),
}


def prosody_for(name: str, index: int) -> EmotionProsody:
    """Known emotions use the table; other names get a deterministic variation."""
    if name in EMOTION_PROSODY:
        return EMOTION_PROSODY[name]
    return EmotionProsody(1.0 + 0.1 * index, 3.0 + index, 0.02, -6.0 + index, 1.0, 0.6)


@dataclass
class SyntheticCorpusSpec:
    num_speakers: int = 2
    emotions: Tuple[str, ...] = DEFAULT_EMOTIONS
    utterances: int = 5
    min_duration: float = 0.8
    max_duration: float = 1.6
    sample_rate: int = 16000
    hop_length: int = 256
    speaker_f0_low: float = 110.0
    speaker_f0_step: float = 55.0
    harmonics: int = 16
    ppg_dim: int = 131
    phones_per_second: float = 8.0
    ppg_peak: float = 0.9
    seed: int = 0

    def validate(self) -> "SyntheticCorpusSpec":
        if self.num_speakers < 1 or self.utterances < 1:
            raise UsageError("[synthetic] needs at least one speaker and one utterance")
        if len(self.emotions) < 2 or len(set(self.emotions)) != len(self.emotions):
            raise UsageError("[synthetic] needs at least two distinct emotions")
        if not 0 < self.min_duration <= self.max_duration:
            raise UsageError("[synthetic] need 0 < min_duration <= max_duration")
        if self.ppg_dim < 3 or not 0 < self.ppg_peak <= 1:
            raise UsageError("[synthetic] ppg_dim must be >= 3 and ppg_peak in (0, 1]")
        top_f0 = self.speaker_f0(self.num_speakers - 1) * max(
            prosody_for(e, i).f0_multiplier for i, e in enumerate(self.emotions)
        )
        if top_f0 > 400.0:
            raise UsageError(f"[synthetic] highest F0 {top_f0:.0f} Hz exceeds the 400 Hz tracker range")
        return self

    def speaker_f0(self, speaker: int) -> float:
        return self.speaker_f0_low + self.speaker_f0_step * speaker


@dataclass
class SentenceContent:
    phones: np.ndarray       # phone ids
    boundaries: np.ndarray   # cumulative normalized end positions, last = 1
    envelopes: np.ndarray    # phones x harmonics amplitude
    base_duration: float


def sentence_content(spec: SyntheticCorpusSpec, sentence: int) -> SentenceContent:
    rng = np.random.default_rng([spec.seed, sentence])
    duration = rng.uniform(spec.min_duration, spec.max_duration)
    count = max(2, int(round(duration * spec.phones_per_second)))
    phones = rng.integers(0, spec.ppg_dim, size=count)
    weights = rng.uniform(0.6, 1.4, size=count)
    boundaries = np.cumsum(weights) / weights.sum()
    envelopes = rng.uniform(0.2, 1.0, size=(count, spec.harmonics))
    return SentenceContent(phones, boundaries, envelopes, duration)


def phone_index(content: SentenceContent, positions: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(content.boundaries, positions, side="right"), len(content.phones) - 1)


def render_utterance(spec: SyntheticCorpusSpec, content: SentenceContent, speaker: int, emotion: str, emotion_index: int) -> Waveform:
    prosody = prosody_for(emotion, emotion_index)
    sr = spec.sample_rate
    length = int(round(content.base_duration * prosody.tempo * sr))
    t = np.arange(length) / sr
    position = t / (length / sr)
    f0 = spec.speaker_f0(speaker) * prosody.f0_multiplier
    contour = f0 * (1.0 + prosody.vibrato_depth * np.sin(2 * np.pi * prosody.vibrato_hz * t))
    # gentle declination over the sentence
    contour = contour * (1.05 - 0.1 * position)
    phase = 2 * np.pi * np.cumsum(contour) / sr

    phone = phone_index(content, position)
    signal = np.zeros(length)
    for h in range(1, spec.harmonics + 1):
        audible = h * contour < sr / 2
        tilt = 10 ** (prosody.tilt_db_per_octave * np.log2(h) / 20.0)
        signal += audible * tilt * content.envelopes[phone, h - 1] * np.sin(h * phase)

    fade = min(int(0.01 * sr), length // 2)
    if fade:
        ramp = np.linspace(0.0, 1.0, fade)
        signal[:fade] *= ramp
        signal[-fade:] *= ramp[::-1]
    peak = np.max(np.abs(signal))
    if peak > 0:
        signal = signal * (prosody.energy / peak)
    return Waveform(signal, sr)


def pseudo_ppg(spec: SyntheticCorpusSpec, content: SentenceContent, num_samples: int) -> np.ndarray:
    """Row-stochastic frames x ppg_dim: peak on the current phone, the rest on its neighbours."""
    frames = num_frames(num_samples, spec.hop_length)
    position = np.minimum(np.arange(frames) * spec.hop_length / max(num_samples, 1), 1.0)
    phone = content.phones[phone_index(content, position)]
    ppg = np.zeros((frames, spec.ppg_dim))
    rows = np.arange(frames)
    side = (1.0 - spec.ppg_peak) / 2.0
    ppg[rows, phone] += spec.ppg_peak
    ppg[rows, (phone - 1) % spec.ppg_dim] += side
    ppg[rows, (phone + 1) % spec.ppg_dim] += side
    return ppg


def utterance_id(speaker: int, emotion: str, sentence: int) -> str:
    return f"spk{speaker}_{emotion}_{sentence:03d}"


def sentence_text(sentence: int) -> str:
    return f"sentence {sentence:03d}"


def synth_dataset(spec: SyntheticCorpusSpec, out_dir) -> Manifest:
    """Write WAVs, PPG records and manifest.json for every speaker x emotion x sentence."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
        (out_dir / "ppg").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create corpus directory {out_dir}: {e}") from e

    entries = []
    cells = [(s, u) for s in range(spec.num_speakers) for u in range(spec.utterances)]
    for speaker, sentence in tqdm(cells, desc="🔍 Synthesizing corpus", leave=False):
        content = sentence_content(spec, sentence)
        for emotion_id, emotion in enumerate(spec.emotions):
            uid = utterance_id(speaker, emotion, sentence)
            wav = render_utterance(spec, content, speaker, emotion, emotion_id)
            wav_rel = Path("wavs") / f"{uid}.wav"
            ppg_rel = Path("ppg") / f"{uid}.ppgf"
            try:
                write_wav(out_dir / wav_rel, wav)
            except OSError as e:
                raise StorageError(f"cannot write {out_dir / wav_rel}: {e}") from e
            write_ppg(out_dir / ppg_rel, pseudo_ppg(spec, content, len(wav)))
            entries.append(
                ManifestEntry(uid, wav_rel.as_posix(), speaker, emotion_id, ppg_rel.as_posix(), sentence_text(sentence))
            )

    manifest = Manifest(
        entries,
        {s: f"speaker{s}" for s in range(spec.num_speakers)},
        dict(enumerate(spec.emotions)),
        out_dir,
    )
    path = manifest.save(out_dir / "manifest.json")
    print(f"✅ Saved synthetic corpus: {len(entries)} utterances, manifest {path}")
    return manifest
