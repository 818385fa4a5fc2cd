"""Run configuration: nested dataclasses backed by a shipped JSON schema."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema

from vital.errors import ConfigError

MODES = ("S", "RS", "RST")


@dataclass
class StageConfig:
    scales: list[int] = field(default_factory=lambda: [8, 16, 32])
    K: int = 5
    z_dim: int = 16
    tied_weights: bool = True
    g_ch: int = 32
    d_ch: int = 16

    @property
    def m(self) -> int:
        return len(self.scales)

    def validate(self):
        if self.m < 1:
            raise ConfigError("need at least one stage", field="stage.scales")
        if self.K < 1:
            raise ConfigError("must be >= 1", field="stage.K")
        for a, b in zip(self.scales, self.scales[1:]):
            if b != 2 * a:
                raise ConfigError(f"consecutive scales must double, got {a} -> {b}", field="stage.scales")
        if self.scales[0] < 4 or self.scales[0] & (self.scales[0] - 1):
            raise ConfigError("coarsest scale must be a power of two >= 4", field="stage.scales")


@dataclass
class TextConfig:
    max_len: int = 16
    embed_dim: int = 32
    e_dim: int = 32
    c_dim: int = 16
    cnn_channels: int = 16
    kernel_sizes: list[int] = field(default_factory=lambda: [3, 4, 5])
    t_dim: int = 64
    init_log_sigma: float = 0.0
    # multiplies the default init of the mean projection, raising caption contrast in c
    mu_init_gain: float = 1.0


@dataclass
class VisionConfig:
    d: int = 64
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    share_backbone: bool = True


@dataclass
class FusionConfig:
    h: int = 16


@dataclass
class Phase1Config:
    batch_size: int = 16
    iterations: int = 2000
    lr_D: float = 2e-4
    lr_G: float = 2e-4
    lambda_kl: float = 1.0
    # weight of an extra D term scoring real images with another sample's c as fake; 0 disables
    mismatch_weight: float = 0.0
    # what the conditional D head sees: the sampled c or its mean
    d_condition: str = "c"
    log_every: int = 50
    checkpoint_interval: int = 0


@dataclass
class Phase2Config:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    mode: str = "RST"
    K_synth: int = 5
    freeze_backbone: bool = False


@dataclass
class Seeds:
    data: int = 0
    noise: int = 0
    init: int = 0


@dataclass
class DataConfig:
    test_fraction: float = 0.25
    canvas: int = 32


@dataclass
class RunConfig:
    stage: StageConfig = field(default_factory=StageConfig)
    text: TextConfig = field(default_factory=TextConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    seeds: Seeds = field(default_factory=Seeds)
    data: DataConfig = field(default_factory=DataConfig)
    dtype: str = "float32"

    def validate(self):
        self.stage.validate()
        if self.phase2.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", field="phase2.mode")
        if self.data.canvas != self.stage.scales[-1]:
            raise ConfigError("canvas must equal the finest stage scale", field="data.canvas")
        if not 1 <= self.phase2.K_synth:
            raise ConfigError("must be >= 1", field="phase2.K_synth")
        if self.text.max_len < max(self.text.kernel_sizes):
            raise ConfigError("must be >= largest kernel size", field="text.max_len")
        if self.phase1.d_condition not in ("c", "mu"):
            raise ConfigError("must be 'c' or 'mu'", field="phase1.d_condition")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("must be float32 or float64", field="dtype")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        validate_against_schema(d, "run_config")
        return _build(cls, d).validate()

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"phase1.iterations": 0})``."""
        d = self.to_dict()
        for key, value in dotted.items():
            set_dotted(d, key, value)
        return RunConfig.from_dict(d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, d):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        value = d[f.name]
        sub = f.type if isinstance(f.type, type) else None
        if sub is None:
            sub = {c.__name__: c for c in (StageConfig, TextConfig, VisionConfig, FusionConfig,
                                            Phase1Config, Phase2Config, Seeds, DataConfig)}.get(f.type)
        if sub is not None and dataclasses.is_dataclass(sub):
            value = _build(sub, value)
        kwargs[f.name] = value
    return cls(**kwargs)


def set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def load_schema(name: str) -> dict:
    text = resources.files("vital.data").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_against_schema(instance, name: str):
    """Raise :class:`ConfigError` naming the JSON path of the first violation."""
    validator = jsonschema.Draft7Validator(load_schema(name))
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "required":
            missing = [r for r in err.validator_value if isinstance(err.instance, dict) and r not in err.instance]
            path = ".".join(filter(None, [path, missing[0] if missing else ""]))
        raise ConfigError(err.message, field=path or "<root>")


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", field=str(path)) from exc
    return RunConfig.from_dict(d)
