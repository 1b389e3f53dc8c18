"""Run configuration: nested dataclasses loaded from one JSON file."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .embedder import EncoderConfig
from .errors import DataError
from .mining import MiningConfig
from .sampling import StretchConfig


@dataclass
class SynthSettings:
    n_files: int = 50
    phone_inventory_size: int = 8
    out_dir: str | None = None


@dataclass
class VadSettings:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    energy_quantile: float = 0.4
    min_speech_ms: float = 120.0
    min_gap_ms: float = 100.0


@dataclass
class FeatureSettings:
    source: str = "mfcc"  # "mfcc" or "imported"
    n_coeffs: int = 40
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    normalize: bool = True

    def __post_init__(self):
        if self.source not in ("mfcc", "imported"):
            raise ValueError(f"feature source must be 'mfcc' or 'imported', got {self.source!r}")


@dataclass
class EvalSettings:
    max_ngrams: int = 3000
    max_ngram_dur: float = 1.0
    sweep_points: int = 20
    topline_pairs: int = 20000


@dataclass
class RunConfig:
    run_dir: str = "run"
    manifest: str | None = None
    features_dir: str | None = None
    seed: int = 0
    jobs: int = 0  # 0 = all available cores
    n_iters: int = 2
    synth: SynthSettings = field(default_factory=SynthSettings)
    vad: VadSettings = field(default_factory=VadSettings)
    features: FeatureSettings = field(default_factory=FeatureSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stretch: StretchConfig = field(default_factory=StretchConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.synth.out_dir) if self.synth.out_dir else self.run_path / "corpus"

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.corpus_dir / "manifest.json"

    @property
    def features_path(self) -> Path:
        return Path(self.features_dir) if self.features_dir else self.run_path / "features"

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise DataError(f"expected an object for {cls.__name__}, got {data!r}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise DataError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid {cls.__name__}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)
