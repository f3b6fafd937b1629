"""Experiment configuration: desk-scale defaults, validation, digests.

Every run is described by one `RunConfig`. A sha256 digest of the resolved
config is embedded in every artifact the run produces (checkpoints,
reports), and stage handoffs refuse mismatched digests unless forced.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .backbone import corpus_channels
from .data import FINDINGS, SynthSpec
from .errors import ConfigError

CORPUS_MODES = ("before-pcam", "after-pcam:1", "after-pcam:3", "after-pcam:10")


@dataclass
class StageConfig:
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 1.0
    schedule: str = "cosine-warmup"
    warmup: int = 500
    decay_factor: float = 0.1
    decay_points: tuple = (0.5, 0.75)
    steps: int = 2000
    batch: int = 16
    freeze_trunk: bool = False

    def validate(self, name):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"{name}.optimizer must be sgd|adam, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"{name}.lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"{name}.momentum must be in [0,1)")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError(f"{name}: steps and batch must be >= 1")
        if self.schedule not in ("constant", "step-decay", "cosine-warmup"):
            raise ConfigError(f"{name}.schedule unknown: {self.schedule!r}")
        if self.schedule == "cosine-warmup" and not 0 <= self.warmup < self.steps:
            raise ConfigError(f"{name}.warmup must be < steps")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError(f"{name}.clip must be > 0 or null")


@dataclass
class DataConfig:
    source: str = "synth"  # synth | manifest
    n: int = 900
    split: tuple = (2 / 3, 0.0, 1 / 3)
    manifest: str | None = None
    synth: dict = field(default_factory=dict)

    def validate(self):
        if self.source not in ("synth", "manifest"):
            raise ConfigError(f"data.source must be synth|manifest, got {self.source!r}")
        if self.source == "manifest" and not self.manifest:
            raise ConfigError("data.source=manifest requires data.manifest path")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError(f"data.split must be 3 fractions summing to 1, got {self.split}")
        if self.source == "synth" and self.n < 1:
            raise ConfigError("data.n must be >= 1")


@dataclass
class AblateConfig:
    """Reduced budgets for the comparison harness (13 variants share data)."""

    n: int = 200
    pretrain_steps: int = 200
    cls_steps: int = 500
    sev_steps: int = 400
    network_sizes: tuple = ((2, 4), (4, 8), (12, 12))
    network_dim: int = 48  # divisible by every head count above
    image_sizes: tuple = (64, 128)

    def validate(self):
        for layers, heads in self.network_sizes:
            if self.network_dim % heads:
                raise ConfigError(f"ablate.network_dim {self.network_dim} not divisible by {heads} heads")


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 64
    view: str = "all"  # PA | AP | all
    backbone_depth: int = 3
    backbone_channels: int = 64
    findings: tuple = FINDINGS
    encoder_layers: int = 4
    encoder_heads: int = 4
    encoder_dim: int = 64
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    corpus_mode: str = "before-pcam"
    pooling: str = "max"  # max | avg
    backbone_trainable: bool = True
    pretrain: StageConfig = field(
        default_factory=lambda: StageConfig(
            optimizer="adam", lr=1e-4, clip=None, schedule="step-decay", steps=1000, batch=8
        )
    )
    train_cls: StageConfig = field(default_factory=StageConfig)
    train_sev: StageConfig = field(
        default_factory=lambda: StageConfig(
            optimizer="sgd", lr=3e-3, momentum=0.0, clip=None, schedule="constant", steps=1500, batch=4
        )
    )
    data: DataConfig = field(default_factory=DataConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.view not in ("PA", "AP", "all"):
            raise ConfigError(f"view must be PA|AP|all, got {self.view!r}")
        if self.image_size % (1 << self.backbone_depth):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{self.backbone_depth}"
            )
        if self.corpus_mode not in CORPUS_MODES:
            raise ConfigError(f"corpus_mode must be one of {CORPUS_MODES}, got {self.corpus_mode!r}")
        if self.pooling not in ("max", "avg"):
            raise ConfigError(f"pooling must be max|avg, got {self.pooling!r}")
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if self.encoder_dim % self.encoder_heads:
            raise ConfigError(f"encoder_dim {self.encoder_dim} not divisible by {self.encoder_heads} heads")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        corpus_channels(self.corpus_mode, self.backbone_channels, self.findings)
        self.pretrain.validate("pretrain")
        self.train_cls.validate("train_cls")
        self.train_sev.validate("train_sev")
        self.data.validate()
        self.ablate.validate()
        self.synth_spec()  # validates geometry
        return self

    def synth_spec(self) -> SynthSpec:
        spec = SynthSpec(image_size=self.image_size, seed=self.seed, **self.data.synth)
        spec.validate()
        return spec

    def token_grid(self) -> int:
        return self.image_size >> self.backbone_depth

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=_json_default)
        return hashlib.sha256(canonical.encode()).hexdigest()


def _json_default(value):
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not JSON-serializable: {type(value)}")


def _coerce_dataclass(cls, payload, name):
    if not isinstance(payload, dict):
        raise ConfigError(f"{name} must be an object, got {type(payload).__name__}")
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(payload: dict) -> RunConfig:
    payload = dict(payload)
    for key, cls in (("pretrain", StageConfig), ("train_cls", StageConfig), ("train_sev", StageConfig),
                     ("data", DataConfig), ("ablate", AblateConfig)):
        if key in payload:
            payload[key] = _coerce_dataclass(cls, payload[key], key)
    cfg = _coerce_dataclass(RunConfig, payload, "config")
    if isinstance(cfg.findings, list):
        cfg.findings = tuple(cfg.findings)
    return cfg.validate()


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    return from_dict(payload)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `key.path=value` strings; values parse as JSON, else raw strings."""
    payload = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"--set: unknown config path {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"--set: unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(payload)
