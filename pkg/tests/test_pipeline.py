import json
import shutil
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from checkpoint import load_checkpoint, read_fingerprint
from config import load_config
from conversion_model import PpgMatrix, convert_utterance
from dsp_utils import dtw_align, read_wav, write_wav
from errors import CompatibilityError, DataError, UsageError
from feature_store import Manifest, ManifestEntry, read_ppg
from pipeline import Pipeline, parallel_pairs, split_ids, system_label


@pytest.fixture(scope="module")
def run(tmp_path_factory, write_tiny_config):
    """Corpus, features and every model trained once for the whole module."""
    root = tmp_path_factory.mktemp("run")
    cfg = load_config(str(write_tiny_config(root / "run.toml", root / "out")))
    pipeline = Pipeline(cfg)
    manifest = pipeline.synth_dataset()
    manifest_path = manifest.root / "manifest.json"
    pipeline.prepare(manifest_path)
    ckpts = {
        "ppg": pipeline.train_conversion(manifest_path),
        "baseline": pipeline.train_conversion(manifest_path, baseline=True),
        "wavenet": pipeline.train_vocoder(manifest_path, "wavenet"),
        "flowavenet": pipeline.train_vocoder(manifest_path, "flowavenet"),
    }
    return pipeline, manifest, manifest_path, ckpts


def _entry(manifest, uid):
    return next(e for e in manifest.entries if e.utterance_id == uid)


def test_split_sizes():
    ids = [f"u{i}" for i in range(100)]
    splits = split_ids(ids, 0.8, 0.1, seed=3)
    assert len(splits["train"]) == 80
    assert len(splits["validation"]) == 10 and len(splits["evaluation"]) == 10
    assert sorted(sum(splits.values(), [])) == sorted(ids)
    assert split_ids(ids, 0.8, 0.1, seed=3) == splits
    assert split_ids(["a", "b"], 0.87, 0.065, seed=0)["evaluation"] == []


def test_parallel_pairs_need_shared_text(tmp_path):
    manifest = Manifest(
        [ManifestEntry("a", "a.wav", 0, 0, text="one"), ManifestEntry("b", "b.wav", 0, 1, text="two")],
        {0: "s"},
        {0: "neutral", 1: "happy"},
        tmp_path,
    )
    with pytest.raises(DataError, match="no parallel pairs"):
        parallel_pairs(manifest, 0)


def test_system_labels():
    assert system_label(True, "wavenet") == "P-WaveNet"
    assert system_label(False, "griffinlim") == "B-GL"
    assert system_label(True, "flowavenet") == "P-FloWaveNet"


class TestTraining:
    def test_corpus_and_features(self, run):
        pipeline, manifest, manifest_path, _ = run
        assert len(manifest.entries) == 18
        again = pipeline.prepare(manifest_path)
        assert len(again.cached) == 18 and not again.computed
        assert (pipeline.out / "features" / "stats.json").exists()

    def test_splits_partition_the_sources(self, run):
        pipeline, manifest, _, _ = run
        splits = pipeline.load_splits()
        sources = sorted(e.utterance_id for e in manifest.entries if "_neutral_" in e.utterance_id)
        assert sorted(splits["train"] + splits["validation"] + splits["evaluation"]) == sources
        assert len(splits["validation"]) == 1 and len(splits["evaluation"]) == 1

    def test_checkpoint_rotation(self, run):
        pipeline, _, _, ckpts = run
        names = sorted(p.name for p in pipeline.checkpoint_dir.glob("conversion_ppg_*.ckpt"))
        assert names == ["conversion_ppg_00000002.ckpt", "conversion_ppg_00000004.ckpt"]
        assert ckpts["wavenet"].name == "wavenet_00000003.ckpt"
        assert ckpts["flowavenet"].name == "flowavenet_00000003.ckpt"

    def test_variants_have_distinct_fingerprints(self, run):
        pipeline, _, _, ckpts = run
        assert read_fingerprint(ckpts["ppg"]) != read_fingerprint(ckpts["baseline"])
        assert pipeline.resolve_conversion_config(ckpts["ppg"]).use_ppg
        assert not pipeline.resolve_conversion_config(ckpts["baseline"]).use_ppg

    def test_loss_logs(self, run):
        pipeline, _, _, _ = run
        log = pd.read_csv(pipeline.log_dir / "conversion_ppg_loss.csv")
        assert list(log.columns) == ["step", "loss", "lr", "validation_l1"]
        assert list(log["step"]) == [0, 1, 2, 3, 4]
        assert np.isnan(log["loss"][0]) and np.isfinite(log["validation_l1"][0])
        vocoder = pd.read_csv(pipeline.log_dir / "flowavenet_loss.csv")
        assert len(vocoder) == 3 and np.all(np.isfinite(vocoder["loss"]))

    def test_run_config_is_recorded(self, run):
        pipeline, _, _, _ = run
        assert load_config(str(pipeline.out / "config.toml")) == pipeline.cfg

    def test_unknown_vocoder_kind(self, run):
        pipeline, _, manifest_path, _ = run
        with pytest.raises(UsageError):
            pipeline.train_vocoder(manifest_path, "melgan")

    def test_resume_continues_the_step_count(self, run, tmp_path):
        pipeline, _, manifest_path, _ = run
        shutil.copytree(pipeline.out, tmp_path / "out", ignore=shutil.ignore_patterns("corpus"))
        resumed = Pipeline(replace(pipeline.cfg, out_dir=str(tmp_path / "out")))
        path = resumed.train_conversion(manifest_path, steps=6, resume=True)
        assert path.name == "conversion_ppg_00000006.ckpt"
        log = pd.read_csv(resumed.log_dir / "conversion_ppg_loss.csv")
        assert list(log["step"]) == [0, 1, 2, 3, 4, 5, 6]


class TestConversion:
    def test_griffin_lim(self, run, tmp_path):
        pipeline, manifest, _, ckpts = run
        source = _entry(manifest, "spk0_neutral_000")
        out = pipeline.convert(
            manifest.resolve(source.wav_path), 0, ckpts["ppg"], tmp_path / "gl.wav",
            ppg_path=manifest.resolve(source.ppg_path),
        )
        assert len(read_wav(out)) > 0

    def test_baseline_needs_no_ppg(self, run, tmp_path):
        pipeline, manifest, _, ckpts = run
        source = _entry(manifest, "spk1_neutral_001")
        out = pipeline.convert(manifest.resolve(source.wav_path), 1, ckpts["baseline"], tmp_path / "b.wav")
        assert out.exists()

    def test_wavenet_output_length(self, run, tmp_path):
        pipeline, manifest, _, ckpts = run
        source = _entry(manifest, "spk0_neutral_002")
        wav = manifest.resolve(source.wav_path)
        out = pipeline.convert(
            wav, 1, ckpts["baseline"], tmp_path / "wn.wav",
            generator="wavenet", vocoder_ckpt=ckpts["wavenet"], speaker=0,
        )
        frames = len(read_wav(wav)) // 64 + 1
        assert len(read_wav(out)) == frames * 64

    def test_ppg_model_needs_ppg(self, run, tmp_path):
        pipeline, manifest, _, ckpts = run
        source = _entry(manifest, "spk0_neutral_000")
        with pytest.raises(UsageError, match="--ppg"):
            pipeline.convert(manifest.resolve(source.wav_path), 0, ckpts["ppg"], tmp_path / "x.wav")

    def test_neural_generator_needs_speaker(self, run, tmp_path):
        pipeline, manifest, _, ckpts = run
        source = _entry(manifest, "spk0_neutral_000")
        with pytest.raises(UsageError, match="--speaker"):
            pipeline.convert(
                manifest.resolve(source.wav_path), 0, ckpts["baseline"], tmp_path / "x.wav",
                generator="flowavenet", vocoder_ckpt=ckpts["flowavenet"],
            )

    def test_mismatched_checkpoints(self, run, tmp_path):
        pipeline, manifest, _, ckpts = run
        wav = manifest.resolve(_entry(manifest, "spk0_neutral_000").wav_path)
        with pytest.raises(CompatibilityError):
            pipeline.convert(wav, 0, ckpts["baseline"], tmp_path / "x.wav",
                             generator="flowavenet", vocoder_ckpt=ckpts["wavenet"], speaker=0)
        with pytest.raises(CompatibilityError):
            pipeline.convert(wav, 0, ckpts["wavenet"], tmp_path / "x.wav")

    def test_changed_config_rejects_old_vocoder(self, run):
        pipeline, _, _, ckpts = run
        cfg = pipeline.cfg
        changed = Pipeline(replace(cfg, wavenet=replace(cfg.wavenet, layers=2, cycles=1)))
        with pytest.raises(CompatibilityError):
            changed.check_vocoder("wavenet", ckpts["wavenet"])

    def test_synthesis_is_seeded(self, run, tmp_path):
        pipeline, manifest, _, ckpts = run
        record = pipeline.out / "features" / "mel" / "spk1_happy_000.melf"
        kwargs = dict(generator="flowavenet", vocoder_ckpt=ckpts["flowavenet"], speaker=1, emotion=0)
        a = pipeline.synthesize(record, tmp_path / "a.wav", seed=5, **kwargs)
        b = pipeline.synthesize(record, tmp_path / "b.wav", seed=5, **kwargs)
        assert a.read_bytes() == b.read_bytes()


class TestEvaluation:
    def test_all_eval_then_evaluate(self, run):
        pipeline, manifest, manifest_path, ckpts = run
        pipeline.convert_all_eval(manifest_path, ckpts["ppg"])
        pipeline.convert_all_eval(manifest_path, ckpts["baseline"], generator="flowavenet", vocoder_ckpt=ckpts["flowavenet"])
        pairs = json.loads(pipeline.pairs_path.read_text())
        assert sorted({p["system"] for p in pairs}) == ["B-FloWaveNet", "P-GL"]
        assert len(pairs) == 4
        source = pipeline.load_splits()["evaluation"][0]
        assert {p["utterance_id"] for p in pairs} == {source}

        report = pipeline.evaluate()
        assert report.missing == []
        assert set(report.summary) == {"B-FloWaveNet", "P-GL"}
        assert set(report.summary["P-GL"]) == {"happy", "sad"}
        assert all(np.isfinite(row["mcd_db"]) for row in report.summary["P-GL"].values())
        assert pipeline.report_path.exists()

    def test_rerun_replaces_a_system(self, run):
        pipeline, _, manifest_path, ckpts = run
        pipeline.convert_all_eval(manifest_path, ckpts["ppg"])
        pipeline.convert_all_eval(manifest_path, ckpts["ppg"])
        pairs = json.loads(pipeline.pairs_path.read_text())
        assert sum(p["system"] == "P-GL" for p in pairs) == 2

    def test_strict_evaluation(self, run, tmp_path):
        pipeline, manifest, _, _ = run
        target = str(manifest.resolve(_entry(manifest, "spk0_happy_000").wav_path))
        pairs = tmp_path / "pairs.json"
        pairs.write_text(json.dumps([{"converted": str(tmp_path / "gone.wav"), "target": target, "emotion": "happy"}]))
        report = pipeline.evaluate(pairs, tmp_path / "report.json")
        assert report.missing == [str(tmp_path / "gone.wav")]
        with pytest.raises(DataError, match="missing"):
            pipeline.evaluate(pairs, tmp_path / "report.json", strict=True)

    def test_malformed_pairs_file(self, run, tmp_path):
        pipeline, _, _, _ = run
        pairs = tmp_path / "pairs.json"
        pairs.write_text(json.dumps([{"converted": "a.wav"}]))
        with pytest.raises(DataError):
            pipeline.evaluate(pairs)


def test_strict_prepare(tmp_path, tone, write_tiny_config):
    cfg = load_config(str(write_tiny_config(tmp_path / "run.toml", tmp_path / "out")))
    write_wav(tmp_path / "ok.wav", tone(200.0, 0.3))
    (tmp_path / "bad.wav").write_bytes(b"not a wav")
    manifest = Manifest(
        [ManifestEntry("ok", "ok.wav", 0, 0), ManifestEntry("bad", "bad.wav", 0, 1)],
        {0: "s"},
        {0: "neutral", 1: "happy"},
        tmp_path,
    )
    path = manifest.save(tmp_path / "manifest.json")
    pipeline = Pipeline(cfg)
    assert list(pipeline.prepare(path).failed) == ["bad"]
    with pytest.raises(DataError, match="bad"):
        pipeline.prepare(path, strict=True)


def test_gradcheck_reports_every_model(tmp_path, write_tiny_config, capsys):
    cfg = load_config(str(write_tiny_config(tmp_path / "run.toml", tmp_path / "out")))
    reports = Pipeline(cfg).gradcheck()
    assert set(reports) == {"conversion", "wavenet", "flowavenet"}
    assert all(r.passed for r in reports.values())
    assert capsys.readouterr().out.count("✅") == 3


class TestReproducibility:
    @pytest.fixture
    def rerun(self, run, tmp_path):
        pipeline = run[0]
        shutil.copytree(pipeline.out, tmp_path / "out", ignore=shutil.ignore_patterns("corpus", "checkpoints", "logs"))
        return Pipeline(replace(pipeline.cfg, out_dir=str(tmp_path / "out")))

    def test_conversion_checkpoint_is_byte_identical(self, run, rerun):
        pipeline, _, manifest_path, ckpts = run
        again = rerun.train_conversion(manifest_path)
        assert again.name == ckpts["ppg"].name
        assert again.read_bytes() == ckpts["ppg"].read_bytes()

    def test_vocoder_checkpoint_is_byte_identical(self, run, rerun):
        _, _, manifest_path, ckpts = run
        again = rerun.train_vocoder(manifest_path, "wavenet")
        assert again.read_bytes() == ckpts["wavenet"].read_bytes()


@pytest.mark.parametrize("kind", ["wavenet", "flowavenet"])
def test_vocoders_condition_on_the_prepared_stats(run, kind):
    pipeline, _, _, ckpts = run
    mean, std = pipeline.feature_store().load_stats()
    arrays = load_checkpoint(ckpts[kind]).arrays
    np.testing.assert_allclose(arrays["buffer.mel_mean"], mean, rtol=1e-6)
    np.testing.assert_allclose(arrays["buffer.mel_std"], np.maximum(std, 1e-2), rtol=1e-6)


def _aligned_l1(converted: np.ndarray, target: np.ndarray) -> float:
    pairs = np.asarray(dtw_align(converted, target).pairs)
    return float(np.mean(np.abs(converted[pairs[:, 0]] - target[pairs[:, 1]])))


@pytest.mark.slow
def test_held_out_sources_move_toward_the_requested_emotion(tmp_path, write_tiny_config):
    config_path = write_tiny_config(tmp_path / "run.toml", tmp_path / "out")
    text = (
        config_path.read_text()
        .replace("utterances = 3", "utterances = 10")
        .replace("dense_units = 8", "dense_units = 32")
        .replace("blstm_units = 8", "blstm_units = 32")
        .replace("lr = 0.01", "lr = 0.003")
        .replace("checkpoint_every = 2", "checkpoint_every = 500")
        .replace("validate_every = 2", "validate_every = 250")
        .replace("[training]\n", "[training]\ntrain_fraction = 0.6\nvalidation_fraction = 0.1\n")
    )
    config_path.write_text(text)
    cfg = load_config(str(config_path))
    pipeline = Pipeline(cfg)
    manifest = pipeline.synth_dataset()
    manifest_path = manifest.root / "manifest.json"
    pipeline.prepare(manifest_path)
    ckpt = pipeline.train_conversion(manifest_path, steps=1500)

    model = pipeline.load_conversion(ckpt, pipeline.resolve_conversion_config(ckpt))
    store = pipeline.feature_store()
    groups = parallel_pairs(manifest, manifest.emotion_id("neutral"))
    outcomes = []
    for uid in pipeline.load_splits()["evaluation"]:
        source = groups[uid][0][0]
        wav = read_wav(manifest.resolve(source.wav_path), cfg.features.sample_rate)
        ppg = PpgMatrix(read_ppg(manifest.resolve(source.ppg_path)))
        targets = {t.emotion_id: store.load(t.utterance_id).values for _, t in groups[uid]}
        assert set(targets) == {0, 1}
        for code, other in ((0, 1), (1, 0)):
            converted = convert_utterance(wav, ppg, code, model, cfg.features).values
            outcomes.append(_aligned_l1(converted, targets[code]) < _aligned_l1(converted, targets[other]))
    assert len(outcomes) >= 8
    assert np.mean(outcomes) >= 0.8
