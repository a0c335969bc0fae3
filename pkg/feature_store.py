"""Dataset manifests, binary feature records and the cached feature preparation step.

Feature records are little-endian: 4-byte magic ("MELF" or "PPGF"), uint32 frame
count, uint32 dimension, then row-major float32 values.
"""

import asyncio
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from dsp_utils import MelSpectrogram, SpectrogramConfig, mel_spectrogram, read_wav
from errors import DataError, MtevcError, StorageError

MEL_MAGIC = b"MELF"
PPG_MAGIC = b"PPGF"
STD_FLOOR = 1e-2


# ---------------------------------------------------------------------------
# Feature records
# ---------------------------------------------------------------------------

def write_matrix(path, values: np.ndarray, magic: bytes) -> Path:
    path = Path(path)
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {values.shape}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(magic)
            f.write(struct.pack("<II", *values.shape))
            f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def read_matrix(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    if raw[:4] != magic:
        raise DataError(f"{path.name} is not a {magic.decode()} record")
    if len(raw) < 12:
        raise DataError(f"{path.name} is truncated")
    frames, dim = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * frames * dim:
        raise DataError(f"{path.name} holds {len(raw) - 12} value bytes, header promises {4 * frames * dim}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(frames, dim).astype(np.float64)


def write_mel(path, values: np.ndarray) -> Path:
    return write_matrix(path, values, MEL_MAGIC)


def read_mel(path) -> np.ndarray:
    return read_matrix(path, MEL_MAGIC)


def write_ppg(path, values: np.ndarray) -> Path:
    return write_matrix(path, values, PPG_MAGIC)


def read_ppg(path) -> np.ndarray:
    return read_matrix(path, PPG_MAGIC)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    utterance_id: str
    wav_path: str
    speaker_id: int
    emotion_id: int
    ppg_path: Optional[str] = None
    text: Optional[str] = None


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    speakers: Dict[int, str]
    emotions: Dict[int, str]
    root: Path = field(default_factory=Path)

    def resolve(self, relative: Optional[str]) -> Optional[Path]:
        if relative is None:
            return None
        path = Path(relative)
        return path if path.is_absolute() else self.root / path

    def emotion_id(self, name: str) -> int:
        for emotion_id, emotion_name in self.emotions.items():
            if emotion_name == name:
                return emotion_id
        raise DataError(f"emotion '{name}' not in manifest emotions {sorted(self.emotions.values())}")

    def validate(self, check_files: bool = True) -> "Manifest":
        """Dense ids, in-range references, unique utterance ids and existing files."""
        for table, label in ((self.speakers, "speaker"), (self.emotions, "emotion")):
            if sorted(table) != list(range(len(table))):
                raise DataError(f"{label} ids must be dense from 0, got {sorted(table)}")
        seen = set()
        for entry in self.entries:
            if entry.utterance_id in seen:
                raise DataError(f"duplicate utterance id '{entry.utterance_id}'")
            seen.add(entry.utterance_id)
            if entry.speaker_id not in self.speakers:
                raise DataError(f"entry '{entry.utterance_id}' has unknown speaker id {entry.speaker_id}")
            if entry.emotion_id not in self.emotions:
                raise DataError(f"entry '{entry.utterance_id}' has unknown emotion id {entry.emotion_id}")
            if check_files:
                for path in (self.resolve(entry.wav_path), self.resolve(entry.ppg_path)):
                    if path is not None and not path.exists():
                        raise DataError(f"entry '{entry.utterance_id}' references missing file {path}")
        return self

    def to_json(self) -> dict:
        return {
            "speakers": {str(k): v for k, v in sorted(self.speakers.items())},
            "emotions": {str(k): v for k, v in sorted(self.emotions.items())},
            "entries": [{k: v for k, v in asdict(e).items() if v is not None} for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.to_json(), f, indent=2)
        except OSError as e:
            raise StorageError(f"cannot write manifest {path}: {e}") from e
        return path


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise StorageError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    try:
        entries = [ManifestEntry(**item) for item in raw["entries"]]
        speakers = {int(k): v for k, v in raw["speakers"].items()}
        emotions = {int(k): v for k, v in raw["emotions"].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"manifest {path} is malformed: {e}") from e
    return Manifest(entries, speakers, emotions, path.parent).validate(check_files)


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

@dataclass
class PrepareResult:
    computed: List[str] = field(default_factory=list)
    cached: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)


class FeatureStore:
    """Mel records under <out>/features keyed by utterance id, with an index of source
    mtimes and the feature-config fingerprint used for cache hits."""

    def __init__(self, directory, features: SpectrogramConfig, fingerprint: str):
        self.directory = Path(directory)
        self.features = features
        self.fingerprint = fingerprint
        self.index_path = self.directory / "index.json"
        self.stats_path = self.directory / "stats.json"
        self.index: Dict[str, dict] = {}
        if self.index_path.exists():
            with open(self.index_path, encoding="utf-8") as f:
                self.index = json.load(f)

    def mel_path(self, utterance_id: str) -> Path:
        return self.directory / "mel" / f"{utterance_id}.melf"

    def is_fresh(self, utterance_id: str, wav_path: Path) -> bool:
        record = self.index.get(utterance_id)
        return (
            record is not None
            and record.get("fingerprint") == self.fingerprint
            and record.get("wav_mtime") == wav_path.stat().st_mtime_ns
            and self.mel_path(utterance_id).exists()
        )

    def compute(self, utterance_id: str, wav_path: Path) -> np.ndarray:
        mel = mel_spectrogram(read_wav(wav_path, self.features.sample_rate), self.features)
        write_mel(self.mel_path(utterance_id), mel.values)
        self.index[utterance_id] = {
            "fingerprint": self.fingerprint,
            "wav_mtime": wav_path.stat().st_mtime_ns,
            "frames": mel.frames,
        }
        return mel.values

    def load(self, utterance_id: str) -> MelSpectrogram:
        path = self.mel_path(utterance_id)
        if not path.exists():
            raise DataError(f"no cached features for '{utterance_id}'; run the prepare command first")
        return MelSpectrogram(read_mel(path), self.features)

    def save_index(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(self.index_path, "w", encoding="utf-8") as f:
            json.dump(self.index, f, indent=2, sort_keys=True)

    def write_stats(self, utterance_ids: List[str]) -> dict:
        """Per-dimension mean/std over every cached frame of the given utterances."""
        frames = np.concatenate([self.load(u).values for u in utterance_ids], axis=0)
        stats = {"mean": frames.mean(axis=0).tolist(), "std": np.maximum(frames.std(axis=0), STD_FLOOR).tolist()}
        with open(self.stats_path, "w", encoding="utf-8") as f:
            json.dump(stats, f)
        return stats

    def load_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        """(mean, std) written by the last prepare run."""
        if not self.stats_path.exists():
            raise DataError(f"{self.stats_path} not found; run the prepare command first")
        try:
            with open(self.stats_path, encoding="utf-8") as f:
                raw = json.load(f)
            mean = np.asarray(raw["mean"], dtype=np.float64)
            std = np.asarray(raw["std"], dtype=np.float64)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"cannot read normalization stats {self.stats_path}: {e}") from e
        if mean.shape != (self.features.num_mels,) or std.shape != mean.shape:
            raise DataError(
                f"{self.stats_path} holds {mean.shape[0] if mean.ndim else 0}-dim stats, "
                f"features have {self.features.num_mels} Mel bins; rerun prepare"
            )
        return mean, std

    async def _prepare_one(self, entry: ManifestEntry, manifest: Manifest, result: PrepareResult):
        wav_path = manifest.resolve(entry.wav_path)
        try:
            if self.is_fresh(entry.utterance_id, wav_path):
                result.cached.append(entry.utterance_id)
                return
            await asyncio.to_thread(self.compute, entry.utterance_id, wav_path)
            result.computed.append(entry.utterance_id)
        except (MtevcError, OSError) as e:
            result.failed[entry.utterance_id] = str(e)
            print(f"❌ Failed to analyse {entry.utterance_id}: {e}")

    async def prepare(self, manifest: Manifest) -> PrepareResult:
        result = PrepareResult()
        print(f"📂 Found {len(manifest.entries)} utterances to analyse.")
        await asyncio.gather(*(self._prepare_one(e, manifest, result) for e in manifest.entries))
        self.save_index()
        ok = sorted(result.computed + result.cached)
        if ok:
            self.write_stats(ok)
        if result.cached:
            print(f"⏩ {len(result.cached)} utterances already cached")
        print(f"📊 Summary: Total = {len(manifest.entries)}, Computed = {len(result.computed)}, "
              f"Cached = {len(result.cached)}, Failed = {len(result.failed)}")
        return result


def prepare_features(manifest: Manifest, features: SpectrogramConfig, directory, fingerprint: str) -> PrepareResult:
    return asyncio.run(FeatureStore(directory, features, fingerprint).prepare(manifest))
