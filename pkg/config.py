import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import toml
from dotenv import load_dotenv

from conversion_model import ConversionConfig
from dsp_utils import SpectrogramConfig
from errors import UsageError
from flowavenet_vocoder import FlowConfig
from synthetic_corpus import SyntheticCorpusSpec
from wavenet_vocoder import WaveNetConfig

DEFAULT_CONFIG_PATH = "config.toml"


@dataclass(frozen=True)
class FeatureConfig(SpectrogramConfig):
    mcep_order: int = 13
    f0_frame_ms: float = 40.0
    f0_min_hz: float = 60.0
    f0_max_hz: float = 400.0
    voicing_threshold: float = 0.3
    griffin_lim_iters: int = 60

    def validate(self) -> "FeatureConfig":
        super().validate()
        if not 1 <= self.mcep_order < self.num_mels:
            raise UsageError(f"mcep_order must be in [1, {self.num_mels - 1}], got {self.mcep_order}")
        if not 0 < self.f0_min_hz < self.f0_max_hz:
            raise UsageError("f0_min_hz must be positive and below f0_max_hz")
        if self.griffin_lim_iters < 1:
            raise UsageError("griffin_lim_iters must be >= 1")
        return self


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.5
    decay_period: int = 100_000


@dataclass
class TrainingConfig:
    conversion_steps: int = 2000
    vocoder_steps: int = 3000
    crop_length: int = 4096
    checkpoint_every: int = 500
    keep_last: int = 3
    validate_every: int = 100
    train_fraction: float = 0.87
    validation_fraction: float = 0.065
    source_emotion: str = "neutral"


@dataclass
class SynthesisConfig:
    mode: str = "fast"
    temperature: float = 1.0
    prior_scale: float = 0.8


@dataclass
class RunConfig:
    seed: int = 1234
    out_dir: str = "runs"
    dtype: str = "float32"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    wavenet: WaveNetConfig = field(default_factory=WaveNetConfig)
    flowavenet: FlowConfig = field(default_factory=FlowConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    synthetic: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def model_config(self, kind: str):
        """Model section with the run-wide dtype applied."""
        if kind not in ("conversion", "wavenet", "flowavenet"):
            raise UsageError(f"unknown model kind '{kind}'")
        return replace(getattr(self, kind), dtype=self.dtype)

    def model_fingerprint(self, kind: str) -> str:
        return fingerprint(self.features, self.model_config(kind), kind)


_SECTIONS = {
    "features": FeatureConfig,
    "conversion": ConversionConfig,
    "wavenet": WaveNetConfig,
    "flowavenet": FlowConfig,
    "optimizer": OptimizerConfig,
    "training": TrainingConfig,
    "synthesis": SynthesisConfig,
    "synthetic": SyntheticCorpusSpec,
}
_RUN_KEYS = {"seed", "out_dir", "dtype"}


def _build_section(cls, raw: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise UsageError(f"unknown key '{unknown[0]}' in [{section}]")
    values = {}
    defaults = cls()
    for key, value in raw.items():
        if isinstance(getattr(defaults, key), tuple):
            value = tuple(value)
        values[key] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid [{section}] section: {e}") from e


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load the TOML run configuration.

    Resolution: explicit path, then MTEVC_CONFIG (a .env file is honoured), then
    ./config.toml; a missing default file means built-in defaults. MTEVC_SEED and
    MTEVC_OUT_DIR override the file.
    """
    load_dotenv()
    explicit = path or os.getenv("MTEVC_CONFIG")
    config_path = Path(explicit or DEFAULT_CONFIG_PATH)
    raw = {}
    if config_path.exists():
        try:
            raw = toml.load(config_path)
        except toml.TomlDecodeError as e:
            raise UsageError(f"cannot parse {config_path}: {e}") from e
    elif explicit:
        raise UsageError(f"config file {config_path} does not exist")

    unknown = sorted(set(raw) - set(_SECTIONS) - {"run"})
    if unknown:
        raise UsageError(f"unknown config section [{unknown[0]}]")
    run = dict(raw.get("run", {}))
    bad = sorted(set(run) - _RUN_KEYS)
    if bad:
        raise UsageError(f"unknown key '{bad[0]}' in [run]")
    sections = {name: _build_section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**run, **sections)

    if os.getenv("MTEVC_SEED"):
        try:
            cfg.seed = int(os.environ["MTEVC_SEED"])
        except ValueError as e:
            raise UsageError(f"MTEVC_SEED must be an integer: {e}") from e
    if os.getenv("MTEVC_OUT_DIR"):
        cfg.out_dir = os.environ["MTEVC_OUT_DIR"]
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> RunConfig:
    if cfg.dtype not in ("float32", "float64"):
        raise UsageError(f"dtype must be float32 or float64, got {cfg.dtype}")
    try:
        cfg.features.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    for kind in ("conversion", "wavenet", "flowavenet"):
        cfg.model_config(kind).validate()
    if cfg.synthesis.mode not in ("naive", "fast"):
        raise UsageError(f"synthesis mode must be naive or fast, got {cfg.synthesis.mode}")
    hop = cfg.features.hop_length
    for kind in ("wavenet", "flowavenet"):
        strides = getattr(cfg, kind).upsample_strides
        if int(_product(strides)) != hop:
            raise UsageError(f"[{kind}] upsample strides {strides} must multiply to the hop length {hop}")
    for kind in ("conversion", "wavenet", "flowavenet"):
        if getattr(cfg, kind).mel_dim != cfg.features.num_mels:
            raise UsageError(f"[{kind}] mel_dim must equal [features] num_mels ({cfg.features.num_mels})")
    if cfg.training.crop_length % hop:
        raise UsageError(f"crop_length must be a multiple of the hop length {hop}")
    return cfg


def _product(values) -> int:
    out = 1
    for v in values:
        out *= int(v)
    return out


def _plain(value):
    if is_dataclass(value):
        value = asdict(value)
    if isinstance(value, dict):
        return {k: _plain(value[k]) for k in sorted(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def canonical_text(sections: dict) -> str:
    """TOML text with sorted sections and keys; equal configs give equal text."""
    return toml.dumps(_plain(sections))


def fingerprint(features: FeatureConfig, model_cfg, section: str) -> str:
    text = canonical_text({"features": features, section: model_cfg})
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def feature_fingerprint(features: FeatureConfig) -> str:
    return hashlib.sha256(canonical_text({"features": features}).encode("utf-8")).hexdigest()


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sections = {"run": {"seed": cfg.seed, "out_dir": cfg.out_dir, "dtype": cfg.dtype}}
    sections.update({name: getattr(cfg, name) for name in _SECTIONS})
    path.write_text(canonical_text(sections))
    return path
