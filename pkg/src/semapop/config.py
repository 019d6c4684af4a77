"""Experiment configuration: one JSON document with a section per stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from semapop.calibration import DEFAULT_LEVELS
from semapop.counterfactual import DEFAULT_ALPHAS
from semapop.gan import GanTrainingConfig
from semapop.persona import MODES
from semapop.vae import VaeTrainingConfig

BACKBONES = ("gan", "vae")
EMBEDDERS = ("mock", "zero", "external")
TEXT_VARIANTS = ("insertion", "removal", "suppression")


class ConfigError(ValueError):
    pass


def _build(cls, data: dict | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


@dataclass
class DataConfig:
    population: str | None = None
    schema: str | None = None
    toy_n: int = 2000
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    stratum: str | None = None
    sample_fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split must be three non-negative fractions summing to 1")
        if self.population is None and self.toy_n < 1:
            raise ValueError("toy_n must be >= 1")


@dataclass
class PersonaConfig:
    mode: str = "implicit"
    endpoint: str | None = None
    model_name: str = "mock"
    temperature: float = 0.9
    top_p: float = 0.9
    max_new_tokens: int = 512
    max_parallel: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"persona mode must be one of {MODES}")


@dataclass
class EmbedderConfig:
    kind: str = "mock"
    dim: int = 32
    seed: int = 0
    model_name: str | None = None
    last_layers: int = 4

    def __post_init__(self):
        if self.kind not in EMBEDDERS:
            raise ValueError(f"embedder kind must be one of {EMBEDDERS}")
        if self.kind == "external" and not self.model_name:
            raise ValueError("external embedder needs model_name")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")


@dataclass
class CalibrationConfig:
    targets: str | None = None
    attributes: list[str] | None = None
    levels: tuple[int, ...] = DEFAULT_LEVELS
    damping: float = 1.0

    def __post_init__(self):
        self.levels = tuple(int(x) for x in self.levels)
        if not self.levels or any(x < 0 for x in self.levels):
            raise ValueError("levels must be non-negative iteration counts")


@dataclass
class InterventionConfig:
    target: str | None = None
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    probe_lambda: float = 1.0
    text_variants: tuple[str, ...] = TEXT_VARIANTS
    cue: str | None = None

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        self.text_variants = tuple(self.text_variants)
        if not self.alphas:
            raise ValueError("alpha grid is empty")
        bad = [v for v in self.text_variants if v not in TEXT_VARIANTS]
        if bad:
            raise ValueError(f"unknown text variants {bad}")
        if self.probe_lambda <= 0:
            raise ValueError("probe_lambda must be positive")


@dataclass
class ExperimentConfig:
    out: str = "semapop_run"
    seed: int = 0
    backbone: str = "gan"
    data: DataConfig = field(default_factory=DataConfig)
    persona: PersonaConfig = field(default_factory=PersonaConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    gan: dict = field(default_factory=dict)
    vae: dict = field(default_factory=dict)
    generate_n: int | None = None
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        # fail early on malformed backbone sections
        self.gan_config()
        self.vae_config()

    def gan_config(self) -> GanTrainingConfig:
        return _build(GanTrainingConfig, {**self.gan, "seed": self.seed}, "gan")

    def vae_config(self) -> VaeTrainingConfig:
        return _build(VaeTrainingConfig, {**self.vae, "seed": self.seed}, "vae")

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        doc = dict(doc)
        sections = {
            "data": DataConfig,
            "persona": PersonaConfig,
            "embedder": EmbedderConfig,
            "calibration": CalibrationConfig,
            "intervention": InterventionConfig,
        }
        for key, section_cls in sections.items():
            doc[key] = _build(section_cls, doc.get(key), key)
        for key in ("gan", "vae"):
            value = doc.get(key, {})
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be an object")
            value.pop("seed", None)
        return _build(cls, doc, "config")

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
