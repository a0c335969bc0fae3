"""End-to-end orchestration: corpus, features, training, conversion, synthesis,
evaluation and gradient checks.

Everything a command writes lives under the run's out_dir:

    features/            MELF records, index.json, stats.json
    checkpoints/         <model>_<step>.ckpt, newest `keep_last` kept
    logs/                <model>_loss.csv
    splits.json          train / validation / evaluation source utterance ids
    converted/<system>/  converted WAVs from `convert --all-eval`
    eval_pairs.json      converted/target pairs consumed by `evaluate`
    report.json          evaluation summary (+ .txt table, .csv per utterance)
"""

import json
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from autodiff import Tensor, no_grad
from checkpoint import CheckpointKeeper, load_checkpoint, read_fingerprint
from config import RunConfig, feature_fingerprint, fingerprint, write_config
from conversion_model import ConversionConfig, ConversionModel, PpgMatrix, TrainingPair, convert_utterance, prepare_pairs
from dsp_utils import MelSpectrogram, Waveform, griffin_lim, mel_spectrogram, read_wav, write_wav
from errors import CompatibilityError, DataError, GradientCheckError, StorageError, UnknownCodeError, UsageError
from evaluator import EvalReport, Evaluator
from feature_store import FeatureStore, Manifest, ManifestEntry, PrepareResult, load_manifest, prepare_features, read_mel, read_ppg
from flowavenet_vocoder import FloWaveNetVocoder, FlowConfig
from optimizer import AdamState, GradCheckReport, grad_check
from synthetic_corpus import synth_dataset
from wavenet_vocoder import GlobalConditioning, WaveNetConfig, WaveNetVocoder

GENERATORS = ("griffinlim", "wavenet", "flowavenet")
VOCODERS = {"wavenet": WaveNetVocoder, "flowavenet": FloWaveNetVocoder}
GENERATOR_LABELS = {"griffinlim": "GL", "wavenet": "WaveNet", "flowavenet": "FloWaveNet"}

SourcePairs = Dict[str, List[Tuple[ManifestEntry, ManifestEntry]]]


def system_label(use_ppg: bool, generator: str) -> str:
    """"P-WaveNet" for the PPG model through WaveNet, "B-GL" for the baseline through Griffin-Lim."""
    return f"{'P' if use_ppg else 'B'}-{GENERATOR_LABELS[generator]}"


def conversion_config(cfg: RunConfig, baseline: bool) -> ConversionConfig:
    return replace(cfg.model_config("conversion"), use_ppg=not baseline)


def parallel_pairs(manifest: Manifest, source_emotion: int) -> SourcePairs:
    """Source utterance id -> [(source, target)] for every other emotion of the same
    speaker and sentence text."""
    cells: Dict[Tuple[int, str], Dict[int, ManifestEntry]] = defaultdict(dict)
    for entry in manifest.entries:
        if entry.text is not None:
            cells[(entry.speaker_id, entry.text)][entry.emotion_id] = entry
    pairs: SourcePairs = {}
    for key in sorted(cells):
        cell = cells[key]
        source = cell.get(source_emotion)
        if source is None:
            continue
        targets = [cell[e] for e in sorted(cell) if e != source_emotion]
        if targets:
            pairs[source.utterance_id] = [(source, t) for t in targets]
    if not pairs:
        raise DataError(
            f"no parallel pairs: no sentence text is shared between emotion "
            f"'{manifest.emotions[source_emotion]}' and another emotion of the same speaker"
        )
    return pairs


def split_ids(ids: List[str], train_fraction: float, validation_fraction: float, seed: int) -> Dict[str, List[str]]:
    """Shuffled train / validation / evaluation split; each part non-empty from 3 ids up."""
    ids = sorted(ids)
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    if len(order) < 3:
        return {"train": order, "validation": [], "evaluation": []}
    n = len(order)
    n_val = max(1, int(round(n * validation_fraction)))
    n_eval = max(1, int(round(n * (1.0 - train_fraction - validation_fraction))))
    n_train = max(1, n - n_val - n_eval)
    n_eval = n - n_train - n_val
    return {
        "train": sorted(order[:n_train]),
        "validation": sorted(order[n_train : n_train + n_val]),
        "evaluation": sorted(order[n_train + n_val :]),
    }


class LossLog:
    """Per-step training rows appended to a CSV file."""

    COLUMNS = ["step", "loss", "lr", "validation_l1"]

    def __init__(self, path: Path):
        self.path = Path(path)
        self.rows: List[dict] = []

    def add(self, step: int, loss: float, lr: float, validation_l1: float = np.nan):
        self.rows.append({"step": step, "loss": loss, "lr": lr, "validation_l1": validation_l1})

    def save(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.rows, columns=self.COLUMNS)
        frame.to_csv(self.path, mode="a", header=not self.path.exists(), index=False)
        self.rows = []
        return self.path


class Pipeline:
    """One run directory, one configuration; each public method is a CLI command."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out_path
        self.checkpoint_dir = self.out / "checkpoints"
        self.log_dir = self.out / "logs"
        self.splits_path = self.out / "splits.json"
        self.pairs_path = self.out / "eval_pairs.json"
        self.report_path = self.out / "report.json"

    # -- data ---------------------------------------------------------------
    def synth_dataset(self, out_dir=None) -> Manifest:
        spec = replace(
            self.cfg.synthetic,
            sample_rate=self.cfg.features.sample_rate,
            hop_length=self.cfg.features.hop_length,
            ppg_dim=self.cfg.conversion.ppg_dim,
        )
        return synth_dataset(spec, out_dir or self.out / "corpus")

    def feature_store(self) -> FeatureStore:
        features = self.cfg.features
        return FeatureStore(self.out / "features", features, feature_fingerprint(features))

    def prepare(self, manifest_path, strict: bool = False) -> PrepareResult:
        manifest = load_manifest(manifest_path)
        store = self.feature_store()
        result = prepare_features(manifest, self.cfg.features, store.directory, store.fingerprint)
        if strict and result.failed:
            raise DataError(f"{len(result.failed)} utterance(s) failed analysis: {', '.join(sorted(result.failed))}")
        return result

    def write_splits(self, source_ids: List[str]) -> Dict[str, List[str]]:
        t = self.cfg.training
        splits = split_ids(source_ids, t.train_fraction, t.validation_fraction, self.cfg.seed)
        self.splits_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.splits_path, "w", encoding="utf-8") as f:
            json.dump(splits, f, indent=2)
        print(
            f"📂 Split {len(source_ids)} source utterances: train = {len(splits['train'])}, "
            f"validation = {len(splits['validation'])}, evaluation = {len(splits['evaluation'])}"
        )
        return splits

    def load_splits(self) -> Dict[str, List[str]]:
        if not self.splits_path.exists():
            raise DataError(f"{self.splits_path} not found; run train-conversion first")
        with open(self.splits_path, encoding="utf-8") as f:
            return json.load(f)

    def _source_ppg(self, manifest: Manifest, entry: ManifestEntry, ppg_dim: int) -> PpgMatrix:
        path = manifest.resolve(entry.ppg_path)
        if path is None:
            raise DataError(f"entry '{entry.utterance_id}' has no ppg_path; the PPG model needs one")
        ppg = PpgMatrix(read_ppg(path))
        if ppg.dim != ppg_dim:
            raise DataError(f"entry '{entry.utterance_id}' has a {ppg.dim}-dim PPG, model expects {ppg_dim}")
        return ppg

    def _training_pairs(
        self, manifest: Manifest, store: FeatureStore, groups: SourcePairs, source_ids: List[str], model_cfg: ConversionConfig
    ) -> List[TrainingPair]:
        pairs = []
        for uid in source_ids:
            for source, target in groups[uid]:
                ppg = self._source_ppg(manifest, source, model_cfg.ppg_dim) if model_cfg.use_ppg else None
                pairs.append(prepare_pairs(store.load(source.utterance_id), ppg, store.load(target.utterance_id), target.emotion_id))
        return pairs

    # -- training -----------------------------------------------------------
    def _resume(self, model, keeper: CheckpointKeeper, fp: str, state: AdamState) -> AdamState:
        latest = keeper.latest()
        if latest is None:
            print(f"⚠️ No {keeper.prefix} checkpoint to resume from, starting fresh")
            return state
        ckpt = load_checkpoint(latest, fp)
        model.load_state_arrays(ckpt.arrays)
        restored = ckpt.adam_state(
            beta1=state.beta1,
            beta2=state.beta2,
            eps=state.eps,
            decay_factor=state.decay_factor,
            decay_period=state.decay_period,
        )
        print(f"⏩ Resuming {keeper.prefix} from {latest.name}")
        return restored or state

    def _adam(self, state: AdamState) -> AdamState:
        opt = self.cfg.optimizer
        return replace(state, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)

    def train_conversion(self, manifest_path, baseline: bool = False, steps: Optional[int] = None, resume: bool = False) -> Path:
        """Multi-target training: source emotion -> every other emotion, coded by the target."""
        cfg = self.cfg
        manifest = load_manifest(manifest_path)
        model_cfg = conversion_config(cfg, baseline)
        if len(manifest.emotions) > model_cfg.num_emotions:
            raise UnknownCodeError(
                f"manifest has {len(manifest.emotions)} emotions, [conversion] num_emotions is {model_cfg.num_emotions}"
            )
        groups = parallel_pairs(manifest, manifest.emotion_id(cfg.training.source_emotion))
        splits = self.write_splits(list(groups))
        store = self.feature_store()
        train_pairs = self._training_pairs(manifest, store, groups, splits["train"], model_cfg)
        val_pairs = self._training_pairs(manifest, store, groups, splits["validation"], model_cfg)

        model = ConversionModel(model_cfg, seed=cfg.seed)
        model.fit_normalization(train_pairs)
        prefix = "conversion_baseline" if baseline else "conversion_ppg"
        fp = fingerprint(cfg.features, model_cfg, "conversion")
        keeper = CheckpointKeeper(self.checkpoint_dir, prefix, cfg.training.keep_last)
        state = self._adam(model.new_optimizer())
        log = LossLog(self.log_dir / f"{prefix}_loss.csv")
        if resume:
            state = self._resume(model, keeper, fp, state)
        elif val_pairs:
            untrained = model.validation_l1(val_pairs)
            log.add(0, np.nan, state.lr, untrained)
            print(f"📊 Untrained validation L1: {untrained:.4f}")
        write_config(cfg, self.out / "config.toml")

        total = steps if steps is not None else cfg.training.conversion_steps
        print(f"🔍 Training {prefix}: {len(train_pairs)} pairs, {model.num_parameters()} parameters, {total} steps")
        rng = np.random.default_rng(cfg.seed)
        path = keeper.latest()
        bar = tqdm(range(state.step + 1, total + 1), desc=f"🔍 {prefix}", leave=False)
        for step in bar:
            pair = train_pairs[int(rng.integers(len(train_pairs)))]
            loss = model.train_step(pair, state)
            val = np.nan
            if val_pairs and (step % cfg.training.validate_every == 0 or step == total):
                val = model.validation_l1(val_pairs)
            log.add(step, loss, state.lr, val)
            bar.set_postfix(loss=f"{loss:.4f}")
            if step % cfg.training.checkpoint_every == 0 or step == total:
                path = keeper.save(step, fp, model.state_arrays(), state)
        log.save()
        if path is None:
            raise DataError(f"no {prefix} steps were run and no checkpoint exists")
        print(f"✅ Saved {prefix} checkpoint: {path}")
        return path

    def train_vocoder(self, manifest_path, kind: str, steps: Optional[int] = None, resume: bool = False) -> Path:
        """Joint multi-speaker, multi-emotion vocoder training on every manifest entry."""
        if kind not in VOCODERS:
            raise UsageError(f"unknown vocoder kind '{kind}', expected one of {sorted(VOCODERS)}")
        cfg = self.cfg
        manifest = load_manifest(manifest_path)
        model_cfg = cfg.model_config(kind)
        conditions = [
            GlobalConditioning(e.speaker_id, e.emotion_id).check(model_cfg.num_speakers, model_cfg.num_emotions)
            for e in manifest.entries
        ]
        store = self.feature_store()
        examples = [
            (read_wav(manifest.resolve(e.wav_path), cfg.features.sample_rate), store.load(e.utterance_id), g)
            for e, g in zip(manifest.entries, conditions)
        ]
        if not examples:
            raise DataError("manifest has no entries to train on")

        model = VOCODERS[kind](model_cfg, seed=cfg.seed)
        model.set_normalization(*store.load_stats())
        opt = cfg.optimizer
        state = self._adam(model.new_optimizer(opt.lr, opt.decay_period, opt.decay_factor))
        fp = cfg.model_fingerprint(kind)
        keeper = CheckpointKeeper(self.checkpoint_dir, kind, cfg.training.keep_last)
        if resume:
            state = self._resume(model, keeper, fp, state)
        write_config(cfg, self.out / "config.toml")

        total = steps if steps is not None else cfg.training.vocoder_steps
        print(f"🔍 Training {kind}: {len(examples)} utterances, {model.num_parameters()} parameters, {total} steps")
        log = LossLog(self.log_dir / f"{kind}_loss.csv")
        rng = np.random.default_rng(cfg.seed)
        path = keeper.latest()
        bar = tqdm(range(state.step + 1, total + 1), desc=f"🔍 {kind}", leave=False)
        for step in bar:
            wav, mel, g = examples[int(rng.integers(len(examples)))]
            lr = state.scheduled_lr()
            loss = model.train_step(wav, mel, g, state, rng, cfg.training.crop_length)
            log.add(step, loss, lr)
            bar.set_postfix(loss=f"{loss:.4f}")
            if step % cfg.training.checkpoint_every == 0 or step == total:
                path = keeper.save(step, fp, model.state_arrays(), state)
        log.save()
        if path is None:
            raise DataError(f"no {kind} steps were run and no checkpoint exists")
        print(f"✅ Saved {kind} checkpoint: {path}")
        return path

    # -- checkpoints --------------------------------------------------------
    def resolve_conversion_config(self, path) -> ConversionConfig:
        """The PPG or baseline config whose fingerprint the checkpoint carries."""
        found = read_fingerprint(path)
        for baseline in (False, True):
            model_cfg = conversion_config(self.cfg, baseline)
            if fingerprint(self.cfg.features, model_cfg, "conversion") == found:
                return model_cfg
        raise CompatibilityError(f"{Path(path).name} was trained under config {found[:12]}, which matches neither conversion variant of the current config")

    def check_vocoder(self, generator: str, vocoder_ckpt) -> Optional[str]:
        if generator not in GENERATORS:
            raise UsageError(f"unknown generator '{generator}', expected one of {list(GENERATORS)}")
        if generator == "griffinlim":
            return None
        if vocoder_ckpt is None:
            raise UsageError(f"--generator {generator} needs --vocoder-ckpt")
        expected = self.cfg.model_fingerprint(generator)
        found = read_fingerprint(vocoder_ckpt)
        if found != expected:
            raise CompatibilityError(
                f"{Path(vocoder_ckpt).name} was trained under config {found[:12]}, current [{generator}] config is {expected[:12]}"
            )
        return expected

    def load_conversion(self, path, model_cfg: ConversionConfig) -> ConversionModel:
        model = ConversionModel(model_cfg, seed=self.cfg.seed)
        model.load_state_arrays(load_checkpoint(path, fingerprint(self.cfg.features, model_cfg, "conversion")).arrays)
        return model

    def load_vocoder(self, kind: str, path):
        model = VOCODERS[kind](self.cfg.model_config(kind), seed=self.cfg.seed)
        model.load_state_arrays(load_checkpoint(path, self.cfg.model_fingerprint(kind)).arrays)
        return model

    # -- waveform generation ------------------------------------------------
    def render(self, mel: MelSpectrogram, generator: str, vocoder=None, g: Optional[GlobalConditioning] = None, seed: Optional[int] = None) -> Waveform:
        seed = self.cfg.seed if seed is None else seed
        synthesis = self.cfg.synthesis
        if generator == "griffinlim":
            return griffin_lim(mel, iters=self.cfg.features.griffin_lim_iters, seed=seed)
        if g is None:
            raise UsageError(f"--generator {generator} needs a speaker and an emotion id")
        if generator == "wavenet":
            return vocoder.sample(mel, g, mode=synthesis.mode, seed=seed, temperature=synthesis.temperature)
        return vocoder.sample(mel, g, seed=seed, prior_scale=synthesis.prior_scale)

    def _conditioning(self, generator: str, speaker: Optional[int], emotion: Optional[int]) -> Optional[GlobalConditioning]:
        if generator == "griffinlim":
            return None
        if speaker is None or emotion is None:
            raise UsageError(f"--generator {generator} needs --speaker and --emotion")
        return GlobalConditioning(speaker, emotion)

    def convert(
        self,
        wav_path,
        emotion: int,
        conversion_ckpt,
        out_path,
        generator: str = "griffinlim",
        vocoder_ckpt=None,
        speaker: Optional[int] = None,
        ppg_path=None,
        seed: Optional[int] = None,
    ) -> Path:
        """Source WAV (+ PPG) -> converted Mel for `emotion` -> waveform via `generator`."""
        model_cfg = self.resolve_conversion_config(conversion_ckpt)
        self.check_vocoder(generator, vocoder_ckpt)
        g = self._conditioning(generator, speaker, emotion)
        if model_cfg.use_ppg and ppg_path is None:
            raise UsageError("the PPG conversion model needs --ppg")
        model = self.load_conversion(conversion_ckpt, model_cfg)
        vocoder = self.load_vocoder(generator, vocoder_ckpt) if generator != "griffinlim" else None

        ppg = PpgMatrix(read_ppg(ppg_path)) if model_cfg.use_ppg else None
        wav = read_wav(wav_path, self.cfg.features.sample_rate)
        mel = convert_utterance(wav, ppg, emotion, model, self.cfg.features)
        path = write_wav(out_path, self.render(mel, generator, vocoder, g, seed))
        print(f"✅ Saved converted audio: {path}")
        return path

    def convert_all_eval(
        self,
        manifest_path,
        conversion_ckpt,
        generator: str = "griffinlim",
        vocoder_ckpt=None,
        speaker: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> Path:
        """Convert every held-out source utterance to every other emotion and record
        (converted, target) pairs under this system's label in eval_pairs.json."""
        model_cfg = self.resolve_conversion_config(conversion_ckpt)
        self.check_vocoder(generator, vocoder_ckpt)
        manifest = load_manifest(manifest_path)
        evaluation = self.load_splits()["evaluation"]
        if not evaluation:
            raise DataError("the evaluation split is empty; the corpus needs at least 3 parallel sentences")
        groups = parallel_pairs(manifest, manifest.emotion_id(self.cfg.training.source_emotion))
        model = self.load_conversion(conversion_ckpt, model_cfg)
        vocoder = self.load_vocoder(generator, vocoder_ckpt) if generator != "griffinlim" else None

        system = system_label(model_cfg.use_ppg, generator)
        out_dir = self.out / "converted" / system
        records = []
        jobs = [(uid, source, target) for uid in evaluation for source, target in groups.get(uid, [])]
        for uid, source, target in tqdm(jobs, desc=f"🔍 Converting {system}", leave=False):
            ppg = self._source_ppg(manifest, source, model_cfg.ppg_dim) if model_cfg.use_ppg else None
            wav = read_wav(manifest.resolve(source.wav_path), self.cfg.features.sample_rate)
            mel = convert_utterance(wav, ppg, target.emotion_id, model, self.cfg.features)
            spk = source.speaker_id if speaker is None else speaker
            g = None if generator == "griffinlim" else GlobalConditioning(spk, target.emotion_id)
            emotion = manifest.emotions[target.emotion_id]
            path = write_wav(out_dir / f"{uid}_to_{emotion}.wav", self.render(mel, generator, vocoder, g, seed))
            records.append(
                {
                    "system": system,
                    "emotion": emotion,
                    "utterance_id": uid,
                    "converted": str(path),
                    "target": str(manifest.resolve(target.wav_path)),
                }
            )
        pairs_path = self._merge_pairs(system, records)
        print(f"✅ Saved {len(records)} {system} conversions, pairs listed in {pairs_path}")
        return pairs_path

    def _merge_pairs(self, system: str, records: List[dict]) -> Path:
        existing = self.load_pairs(self.pairs_path) if self.pairs_path.exists() else []
        merged = [p for p in existing if p.get("system") != system] + records
        try:
            self.pairs_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.pairs_path, "w", encoding="utf-8") as f:
                json.dump(merged, f, indent=2)
        except OSError as e:
            raise StorageError(f"cannot write {self.pairs_path}: {e}") from e
        return self.pairs_path

    def synthesize(
        self,
        input_path,
        out_path,
        generator: str = "griffinlim",
        vocoder_ckpt=None,
        speaker: Optional[int] = None,
        emotion: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> Path:
        """Copy synthesis: analysis Mel of a WAV (or a MELF record) straight into a generator."""
        self.check_vocoder(generator, vocoder_ckpt)
        g = self._conditioning(generator, speaker, emotion)
        input_path = Path(input_path)
        if input_path.suffix.lower() == ".melf":
            mel = MelSpectrogram(read_mel(input_path), self.cfg.features)
        else:
            mel = mel_spectrogram(read_wav(input_path, self.cfg.features.sample_rate), self.cfg.features)
        vocoder = self.load_vocoder(generator, vocoder_ckpt) if generator != "griffinlim" else None
        path = write_wav(out_path, self.render(mel, generator, vocoder, g, seed))
        print(f"✅ Saved synthesized audio: {path}")
        return path

    # -- evaluation ---------------------------------------------------------
    @staticmethod
    def load_pairs(path) -> List[dict]:
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as f:
                pairs = json.load(f)
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"{path} is not valid JSON: {e}") from e
        if not isinstance(pairs, list) or any(not {"converted", "target", "emotion"} <= set(p) for p in pairs):
            raise DataError(f"{path} must be a list of {{converted, target, emotion}} objects")
        return pairs

    def evaluate(self, pairs_path=None, report_path=None, strict: bool = False) -> EvalReport:
        pairs = self.load_pairs(pairs_path or self.pairs_path)
        print(f"📂 Found {len(pairs)} converted/target pairs.")
        report = Evaluator(self.cfg.features).evaluate_set(pairs, report_path or self.report_path)
        print(report.table)
        if strict and report.missing:
            raise DataError(f"{len(report.missing)} file(s) missing or unreadable: {', '.join(report.missing[:5])}")
        return report

    # -- gradient checks ----------------------------------------------------
    def gradcheck(self, tolerance: float = 1e-4) -> Dict[str, GradCheckReport]:
        reports = {
            "conversion": tiny_conversion_check(self.cfg.seed, tolerance),
            "wavenet": tiny_wavenet_check(self.cfg.seed, tolerance),
            "flowavenet": tiny_flow_check(self.cfg.seed, tolerance),
        }
        failed = []
        for name, report in reports.items():
            mark = "✅" if report.passed else "❌"
            print(f"{mark} {name}: worst relative error {report.worst:.2e} over {len(report.max_relative_error)} parameters")
            if not report.passed:
                failed.append(name)
                worst = sorted(report.max_relative_error.items(), key=lambda kv: -kv[1])[:3]
                for param, err in worst:
                    print(f"   {param}: {err:.2e}")
        if failed:
            raise GradientCheckError(f"gradient check failed for {', '.join(failed)} (tolerance {tolerance:g})")
        return reports


# ---------------------------------------------------------------------------
# Tiny float64 models for gradient checks
# ---------------------------------------------------------------------------

def tiny_conversion_check(seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    cfg = ConversionConfig(
        mel_dim=3, ppg_dim=2, num_emotions=2, emotion_embed_dim=2, dense_layers=1, dense_units=4,
        blstm_layers=1, blstm_units=3, dtype="float64",
    )
    model = ConversionModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    pair = TrainingPair(rng.standard_normal((5, cfg.input_dim)), rng.standard_normal((5, cfg.mel_dim)), 1)
    return grad_check(lambda: model.pair_loss(pair), model.params, tolerance=tolerance)


def tiny_wavenet_check(seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    cfg = WaveNetConfig(
        layers=4, cycles=2, residual_channels=3, gate_channels=4, skip_channels=3, mel_dim=2,
        num_speakers=2, num_emotions=2, speaker_embed_dim=2, emotion_embed_dim=2,
        upsample_strides=(2,), dtype="float64",
    )
    model = WaveNetVocoder(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    classes = rng.integers(0, cfg.classes, size=8)
    mel = rng.standard_normal((4, cfg.mel_dim))
    g = GlobalConditioning(1, 0)
    return grad_check(lambda: model.loss(classes, mel, g), model.params, tolerance=tolerance)


def tiny_flow_check(seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    cfg = FlowConfig(
        blocks=1, flows=2, layers=2, kernel_size=3, residual_channels=3, gate_channels=4, skip_channels=3,
        mel_dim=2, num_speakers=2, num_emotions=2, speaker_embed_dim=2, emotion_embed_dim=2,
        upsample_strides=(2,), dtype="float64",
    )
    model = FloWaveNetVocoder(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    # non-zero output heads so gradients reach every coupling parameter
    for name, param in model.params.items():
        if ".head2." in name:
            param.data = rng.standard_normal(param.shape) * 0.1
    samples = rng.uniform(-0.5, 0.5, size=8)
    mel = rng.standard_normal((4, cfg.mel_dim))
    g = GlobalConditioning(0, 1)
    with no_grad():
        model.forward(Tensor(samples[None, :]), model.upsample_conditions(mel), g, initialize=True)
    return grad_check(lambda: model.loss(samples, mel, g), model.params, tolerance=tolerance)
