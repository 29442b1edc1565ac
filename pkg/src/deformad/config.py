"""Experiment configuration: one schema for the CLI, trainer and tests.

Configs serialize to canonical JSON (sorted keys, two-space indent,
trailing newline) so parse -> serialize -> parse is a fixed point and a
run directory's snapshot is byte-comparable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass


class ConfigError(ValueError):
    pass


@dataclass
class ImageSpec:
    channels: int = 1
    height: int = 64
    width: int = 64


@dataclass
class MemorySpec:
    items: int = 10
    depth: int = 32
    reseed_staleness: int = 3


@dataclass
class SkipSpec:
    enabled: bool = True
    reduction: int = 16


@dataclass
class DeformSpec:
    head_resolutions: list = field(default_factory=lambda: [[4, 4], [16, 16]])
    trunk_width: int = 16


@dataclass
class EncoderSpec:
    widths: list = field(default_factory=lambda: [32, 64])


@dataclass
class LossSpec:
    alpha: float = 0.2
    beta: float = 0.25
    gamma1: float = 1.0
    gamma2: float = 0.25
    gamma3: float = 1.0
    lambda_g: float = 1.0


@dataclass
class OptimizerSpec:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"
    epochs: int = 60
    batch_size: int = 8


@dataclass
class ScoreSpec:
    kernel: str = "box"          # box | gaussian
    kernel_size: int = 16
    gaussian_sigma: float = 4.0


@dataclass
class DataSpec:
    root: str = "data"
    seen_classes: list = field(default_factory=lambda: [1, 3, 5, 7, 9])
    train_per_class: int = 120
    test_per_class: int = 30
    holdout_fraction: float = 0.2
    placement_jitter: int = 6
    glyph_size: int = 36
    contamination: float = 0.0


@dataclass
class AblationSpec:
    no_deform: bool = False
    single_head: bool = False
    no_memory: bool = False
    no_background: bool = False
    no_strength: bool = False
    no_smoothness: bool = False


@dataclass
class ExperimentConfig:
    mode: str = "pdm"
    seed: int = 0
    image: ImageSpec = field(default_factory=ImageSpec)
    memory: MemorySpec = field(default_factory=MemorySpec)
    skip: SkipSpec = field(default_factory=SkipSpec)
    deform: DeformSpec = field(default_factory=DeformSpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    score: ScoreSpec = field(default_factory=ScoreSpec)
    data: DataSpec = field(default_factory=DataSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    @classmethod
    def default(cls, mode="pdm"):
        cfg = cls(mode=mode)
        if mode == "ppdm":
            cfg.loss.gamma2 = 1.0
        return cfg

    def validate(self):
        if self.mode not in ("pdm", "ppdm"):
            raise ConfigError(f"mode must be 'pdm' or 'ppdm', got {self.mode!r}")
        img = self.image
        if img.channels < 1 or img.height < 8 or img.width < 8:
            raise ConfigError(f"image geometry too small: {img}")
        if self.memory.items < 1 or self.memory.depth < 1:
            raise ConfigError("memory needs items >= 1 and depth >= 1")
        if self.skip.enabled and self.skip.reduction < 16:
            raise ConfigError(f"skip reduction must be >= 16, got "
                              f"{self.skip.reduction}")
        heads = self.deform.head_resolutions
        if not self.ablation.no_deform:
            if not heads:
                raise ConfigError("need at least one deformation head")
            for (h0, w0), (h1, w1) in zip(heads, heads[1:]):
                if h1 < h0 or w1 < w0:
                    raise ConfigError("head resolutions must be nondecreasing")
        if self.mode == "ppdm" and self.ablation.no_deform:
            raise ConfigError("ppdm mode requires the deformation estimator "
                              "(backward fields); no_deform is incompatible")
        ls = self.loss
        for name in ("alpha", "beta", "gamma1", "gamma2", "gamma3", "lambda_g"):
            if getattr(ls, name) < 0:
                raise ConfigError(f"loss.{name} must be nonnegative")
        if not 0.0 <= self.data.contamination < 0.5:
            raise ConfigError(f"contamination must be in [0, 0.5), got "
                              f"{self.data.contamination}")
        if not 0.0 < self.data.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0, 1)")
        if self.optimizer.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.optimizer.schedule!r}")
        if self.score.kernel not in ("box", "gaussian"):
            raise ConfigError(f"unknown score kernel {self.score.kernel!r}")
        if len(set(self.data.seen_classes)) != len(self.data.seen_classes):
            raise ConfigError("seen_classes contains duplicates")
        return self

    # -- serialization -------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, payload) -> "ExperimentConfig":
        return _build(cls, payload, path="config").validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def override(self, dotted_key: str, raw_value: str) -> None:
        """Apply a command-line override like loss.alpha=0.05."""
        parts = dotted_key.split(".")
        target = self
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise ConfigError(f"unknown config section {dotted_key!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown config key {dotted_key!r}")
        current = getattr(target, leaf)
        setattr(target, leaf, _coerce(raw_value, current, dotted_key))


def _build(cls, payload, path):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must be an object, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path}")
    kwargs = {}
    for name, f in known.items():
        if name not in payload:
            continue
        value = payload[name]
        if is_dataclass(f.type) or (isinstance(f.type, str)
                                    and f.type in _SECTIONS):
            section_cls = _SECTIONS[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _build(section_cls, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {c.__name__: c for c in (
    ImageSpec, MemorySpec, SkipSpec, DeformSpec, EncoderSpec, LossSpec,
    OptimizerSpec, ScoreSpec, DataSpec, AblationSpec)}


def _coerce(raw, current, key):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        value = json.loads(raw)
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a JSON list, got {raw!r}")
        return value
    return raw
