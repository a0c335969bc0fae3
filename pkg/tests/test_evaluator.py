import json

import numpy as np
import pytest

from dsp_utils import F0Contour, SpectrogramConfig, Waveform, num_frames, write_wav
from errors import InvalidInputError
from evaluator import (
    MCD_CONSTANT,
    Evaluator,
    _f0,
    logf0_from_contours,
    logf0_mse,
    mcd,
    mcd_from_cepstra,
    score_utterance,
)


def test_constant():
    assert MCD_CONSTANT == pytest.approx(6.1418, abs=1e-4)


def test_identical_audio_has_zero_distortion(tone):
    w = tone(150.0, 0.5)
    assert mcd(w, w) == 0.0
    assert logf0_mse(w, w) == pytest.approx(0.0, abs=1e-20)


def test_offset_in_one_coefficient(rng):
    target = rng.normal(size=(6, 13))
    converted = target.copy()
    converted[:, 4] += 0.1
    path = [(i, i) for i in range(6)]
    assert mcd_from_cepstra(converted, target, path) == pytest.approx(0.6142, abs=1e-4)


def test_dtw_absorbs_timing_differences(rng):
    target = rng.normal(size=(6, 13))
    converted = np.repeat(target, 2, axis=0)
    assert mcd_from_cepstra(converted, target) == pytest.approx(0.0, abs=1e-12)


def test_octave_apart_tones(tone):
    score = score_utterance(tone(100.0, 1.0), tone(200.0, 1.0))
    assert score.logf0_defined
    assert score.voiced_pairs > 50
    assert score.logf0_mse == pytest.approx(np.log(2.0) ** 2, abs=1e-3)
    assert score.mcd_db > 0.0


def test_silence_leaves_logf0_undefined(tone):
    silence = Waveform(np.zeros(8000))
    score = score_utterance(silence, tone(200.0, 0.5))
    assert score.logf0_mse is None
    assert score.voiced_pairs == 0
    assert np.isfinite(score.mcd_db)


def test_rejects_mismatched_rates(tone):
    with pytest.raises(InvalidInputError, match="sample rates"):
        mcd(tone(200.0, 0.2), Waveform(np.zeros(1600), 8000))


def test_rejects_empty(tone):
    with pytest.raises(InvalidInputError):
        mcd(Waveform(np.zeros(0)), tone(200.0, 0.2))


def test_f0_contour_follows_the_mel_timeline(tone):
    features = SpectrogramConfig()
    w = tone(180.0, 0.5)
    contour = _f0(w, features)
    assert contour.frames == num_frames(len(w), features.hop_length)
    assert not contour.voiced[-1]
    assert contour.voiced[2:-3].all()


def test_path_outside_the_contours_is_an_error():
    contour = F0Contour(np.full(4, 120.0), np.ones(4, dtype=bool))
    assert logf0_from_contours(contour, contour, [(i, i) for i in range(4)]) == (0.0, 4)
    with pytest.raises(InvalidInputError, match="alignment path"):
        logf0_from_contours(contour, contour, [(0, 0), (4, 4)])
    with pytest.raises(InvalidInputError, match="alignment path"):
        logf0_from_contours(F0Contour(np.full(2, 120.0), np.ones(2, dtype=bool)), contour, [(0, 0), (3, 3)])


def test_short_signals_score_every_aligned_frame(tone):
    score = score_utterance(tone(150.0, 0.3), tone(150.0, 0.25))
    assert score.logf0_defined
    assert np.isfinite(score.mcd_db)


class TestEvaluateSet:
    @pytest.fixture
    def pairs(self, tmp_path, tone):
        target = write_wav(tmp_path / "target_happy.wav", tone(200.0, 0.5))
        good = write_wav(tmp_path / "conv_happy.wav", tone(190.0, 0.5))
        quiet = write_wav(tmp_path / "conv_sad.wav", Waveform(np.zeros(8000)))
        broken = tmp_path / "broken.wav"
        broken.write_bytes(b"RIFF....garbage")
        return [
            {"system": "P-GL", "emotion": "happy", "utterance_id": "u1", "converted": str(good), "target": str(target)},
            {"system": "P-GL", "emotion": "sad", "utterance_id": "u2", "converted": str(quiet), "target": str(target)},
            {"system": "P-GL", "emotion": "sad", "utterance_id": "u3", "converted": str(tmp_path / "absent.wav"), "target": str(target)},
            {"system": "B-GL", "emotion": "happy", "utterance_id": "u4", "converted": str(broken), "target": str(target)},
        ]

    def test_summary_and_missing(self, pairs, tmp_path, capsys):
        report = Evaluator().evaluate_set(pairs)
        assert len(report.utterances) == 2
        assert sorted(report.missing) == sorted([str(tmp_path / "absent.wav"), str(tmp_path / "broken.wav")])
        happy = report.summary["P-GL"]["happy"]
        assert happy["n_utts"] == 1 and happy["n_undefined"] == 0
        assert happy["logf0_mse"] == pytest.approx(np.log(200.0 / 190.0) ** 2, abs=1e-3)
        sad = report.summary["P-GL"]["sad"]
        assert sad["logf0_mse"] is None and sad["n_undefined"] == 1
        assert "B-GL" not in report.summary
        out = capsys.readouterr().out
        assert "⚠️" in out and "❌" in out

    def test_table_layout(self, pairs):
        table = Evaluator().evaluate_set(pairs).table
        assert "MCD [dB]" in table and "LogF0-MSE" in table
        assert "P-GL" in table
        assert "n/a" in table

    def test_report_files(self, pairs, tmp_path):
        path = tmp_path / "out" / "report.json"
        Evaluator().evaluate_set(pairs, path)
        data = json.loads(path.read_text())
        assert set(data) == {"systems", "missing"}
        assert data["systems"]["P-GL"]["sad"]["logf0_mse"] is None
        assert "MCD [dB]" in path.with_suffix(".txt").read_text()
        csv = path.with_suffix(".csv").read_text().splitlines()
        assert csv[0] == "system,emotion,utterance_id,mcd_db,logf0_mse,voiced_pairs"
        assert len(csv) == 3

    def test_nothing_scored(self, tmp_path):
        report = Evaluator().evaluate_set([{"emotion": "happy", "converted": str(tmp_path / "a.wav"), "target": str(tmp_path / "b.wav")}])
        assert report.summary == {}
        assert report.table == "(no scored utterances)"
        assert len(report.missing) == 2
