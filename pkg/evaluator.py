"""Objective metrics: Mel cepstral distortion and LogF0 mean squared error.

Both metrics share one DTW path computed on Mel-cepstra, so converted audio
with source timing is compared frame-by-frame against the target recording.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from dsp_utils import (
    F0Contour,
    SpectrogramConfig,
    Waveform,
    dtw_align,
    estimate_f0,
    mel_cepstrum,
    mel_spectrogram,
    num_frames,
    read_wav,
)
from errors import InvalidInputError, MtevcError

MCD_CONSTANT = 10.0 / np.log(10.0) * np.sqrt(2.0)


@dataclass
class UtteranceScore:
    mcd_db: float
    logf0_mse: Optional[float]
    voiced_pairs: int

    @property
    def logf0_defined(self) -> bool:
        return self.logf0_mse is not None


def mcd_from_cepstra(converted: np.ndarray, target: np.ndarray, path=None) -> float:
    """Mean over the DTW path of (10/ln 10) * sqrt(2 * sum_i (c_i - t_i)^2)."""
    if path is None:
        path = dtw_align(target, converted).pairs
    pairs = np.asarray(path)
    diff = target[pairs[:, 0]] - converted[pairs[:, 1]]
    return float(np.mean(MCD_CONSTANT * np.sqrt(np.sum(diff * diff, axis=1))))


def _check_pair(converted: Waveform, target: Waveform):
    if len(converted) == 0 or len(target) == 0:
        raise InvalidInputError("cannot score an empty waveform")
    if converted.sample_rate != target.sample_rate:
        raise InvalidInputError(
            f"sample rates differ: converted {converted.sample_rate} Hz, target {target.sample_rate} Hz"
        )


def _cepstra(w: Waveform, features: SpectrogramConfig, order: int) -> np.ndarray:
    return mel_cepstrum(mel_spectrogram(w, features), order).values


def _f0(w: Waveform, features: SpectrogramConfig) -> F0Contour:
    """F0 on the Mel timeline; trailing frames without a full analysis window count as unvoiced."""
    contour = estimate_f0(
        w,
        frame_hop=features.hop_length,
        frame_ms=getattr(features, "f0_frame_ms", 40.0),
        fmin=getattr(features, "f0_min_hz", 60.0),
        fmax=getattr(features, "f0_max_hz", 400.0),
        voicing_threshold=getattr(features, "voicing_threshold", 0.3),
    )
    missing = num_frames(len(w), features.hop_length) - contour.frames
    if missing <= 0:
        return contour
    return F0Contour(np.pad(contour.f0_hz, (0, missing)), np.pad(contour.voiced, (0, missing)))


def logf0_from_contours(converted: F0Contour, target: F0Contour, path) -> Tuple[Optional[float], int]:
    """MSE of ln F0 over path pairs voiced in both contours; None when there are none."""
    pairs = np.asarray(path)
    t_idx, c_idx = pairs[:, 0], pairs[:, 1]
    if t_idx.max() >= target.frames or c_idx.max() >= converted.frames:
        raise InvalidInputError(
            f"alignment path reaches frames ({t_idx.max()}, {c_idx.max()}) but the F0 contours "
            f"have {target.frames} target and {converted.frames} converted frames"
        )
    both = target.voiced[t_idx] & converted.voiced[c_idx]
    count = int(both.sum())
    if count == 0:
        return None, 0
    diff = np.log(target.f0_hz[t_idx[both]]) - np.log(converted.f0_hz[c_idx[both]])
    return float(np.mean(diff * diff)), count


def score_utterance(
    converted: Waveform,
    target: Waveform,
    features: Optional[SpectrogramConfig] = None,
    order: Optional[int] = None,
) -> UtteranceScore:
    features = features or SpectrogramConfig()
    order = order or getattr(features, "mcep_order", 13)
    _check_pair(converted, target)
    cep_t = _cepstra(target, features, order)
    cep_c = _cepstra(converted, features, order)
    path = dtw_align(cep_t, cep_c).pairs
    mcd_db = mcd_from_cepstra(cep_c, cep_t, path)
    logf0, count = logf0_from_contours(_f0(converted, features), _f0(target, features), path)
    return UtteranceScore(mcd_db, logf0, count)


def mcd(converted: Waveform, target: Waveform, features: Optional[SpectrogramConfig] = None) -> float:
    features = features or SpectrogramConfig()
    _check_pair(converted, target)
    order = getattr(features, "mcep_order", 13)
    return mcd_from_cepstra(_cepstra(converted, features, order), _cepstra(target, features, order))


def logf0_mse(converted: Waveform, target: Waveform, features: Optional[SpectrogramConfig] = None) -> Optional[float]:
    """None flags an undefined value (no frame voiced in both signals)."""
    return score_utterance(converted, target, features).logf0_mse


@dataclass
class EvalReport:
    utterances: pd.DataFrame
    summary: Dict[str, Dict[str, Dict[str, float]]]
    missing: List[str] = field(default_factory=list)
    table: str = ""

    def to_json(self) -> dict:
        return {"systems": self.summary, "missing": self.missing}


class Evaluator:
    """Scores sets of (converted, target) WAV pairs grouped by system and emotion."""

    def __init__(self, features: Optional[SpectrogramConfig] = None):
        self.features = features or SpectrogramConfig()

    def evaluate_pair(self, converted_path, target_path) -> UtteranceScore:
        return score_utterance(
            read_wav(converted_path, self.features.sample_rate),
            read_wav(target_path, self.features.sample_rate),
            self.features,
        )

    def evaluate_set(self, pairs: Sequence[dict], report_path=None) -> EvalReport:
        """Each pair: {"converted", "target", "emotion"[, "system", "utterance_id"]}.

        Missing or unreadable files are listed and left out of the means.
        """
        rows, missing = [], []
        for pair in tqdm(pairs, desc="📊 Scoring", leave=False):
            converted, target = Path(pair["converted"]), Path(pair["target"])
            absent = [str(p) for p in (converted, target) if not p.exists()]
            if absent:
                missing.extend(absent)
                print(f"⚠️ Missing file(s) for {pair.get('utterance_id', converted.stem)}: {', '.join(absent)}")
                continue
            try:
                score = self.evaluate_pair(converted, target)
            except MtevcError as e:
                missing.append(str(converted))
                print(f"❌ Failed to score {converted.name}: {e}")
                continue
            rows.append(
                {
                    "system": pair.get("system", "converted"),
                    "emotion": pair["emotion"],
                    "utterance_id": pair.get("utterance_id", converted.stem),
                    "mcd_db": score.mcd_db,
                    "logf0_mse": np.nan if score.logf0_mse is None else score.logf0_mse,
                    "voiced_pairs": score.voiced_pairs,
                }
            )
        frame = pd.DataFrame(rows, columns=["system", "emotion", "utterance_id", "mcd_db", "logf0_mse", "voiced_pairs"])
        report = EvalReport(frame, summarize(frame), missing)
        report.table = format_table(frame)
        if report_path is not None:
            write_report(report, report_path)
        return report


def summarize(frame: pd.DataFrame) -> Dict[str, Dict[str, Dict[str, float]]]:
    summary: Dict[str, Dict[str, Dict[str, float]]] = {}
    if frame.empty:
        return summary
    grouped = frame.groupby(["system", "emotion"], sort=True)
    for (system, emotion), group in grouped:
        logf0 = group["logf0_mse"]
        summary.setdefault(str(system), {})[str(emotion)] = {
            "mcd_db": float(group["mcd_db"].mean()),
            "logf0_mse": float(logf0.mean()) if logf0.notna().any() else None,
            "n_utts": int(len(group)),
            "n_undefined": int(logf0.isna().sum()),
        }
    return summary


def format_table(frame: pd.DataFrame) -> str:
    """One row per system, MCD columns per emotion followed by LogF0-MSE columns."""
    if frame.empty:
        return "(no scored utterances)"
    mcd_table = frame.pivot_table(index="system", columns="emotion", values="mcd_db", aggfunc="mean")
    f0_table = frame.pivot_table(index="system", columns="emotion", values="logf0_mse", aggfunc="mean")
    f0_table = f0_table.reindex(index=mcd_table.index, columns=mcd_table.columns)
    mcd_table.columns = pd.MultiIndex.from_product([["MCD [dB]"], mcd_table.columns])
    f0_table.columns = pd.MultiIndex.from_product([["LogF0-MSE"], f0_table.columns])
    return pd.concat([mcd_table, f0_table], axis=1).to_string(float_format=lambda v: f"{v:.3f}", na_rep="n/a")


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2)
    path.with_suffix(".txt").write_text(report.table + "\n", encoding="utf-8")
    report.utterances.to_csv(path.with_suffix(".csv"), index=False)
    print(f"✅ Saved evaluation report: {path}")
    return path
