"""Run configuration with strict JSON parsing.

Environment overrides: ``AVB_<SECTION>__<KEY>=<json value>``, for example
``AVB_OPTIM__EPOCHS=5`` or ``AVB_INFER__TDSS=false``. Values that are not valid
JSON are taken as plain strings.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig
from .optim import AUDIO_LR, IMAGE_LR

ENV_PREFIX = "AVB_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data/synth"  # dataset directory (manifest.jsonl inside)
    manifest: str | None = None  # explicit manifest path; overrides root
    n_clips: int = 64
    seed: int = 7
    ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    itd: bool = False
    drift_fraction: float = 0.25
    source: str = "tones"
    duration_s: float = 10.0
    target_rms: float = 0.1

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.root) / "manifest.jsonl"


@dataclass
class OptimConfig:
    image_lr: float = IMAGE_LR
    audio_lr: float = AUDIO_LR
    batch_size: int = 16
    epochs: int = 20
    steps_per_epoch: int = 20  # one "epoch" is this many sampled batches
    val_segments: int = 32  # fixed validation segments scored each epoch
    seed: int = 0
    augment: bool = True


@dataclass
class InferConfig:
    tdss: bool = True
    out_dir: str = "runs/default"
    batch: int = 16
    threads: int = 1
    spectrogram_images: bool = True


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "infer": InferConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            if name == "loss":
                d["shuffle_grid"] = list(d["shuffle_grid"])
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for name, kind in SECTIONS.items():
            section = d.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(kind)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {sorted(bad)}")
            try:
                parts[name] = kind(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from None
        return cls(**parts)


def apply_env_overrides(d: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    d = json.loads(json.dumps(d))
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, _, name = key[len(ENV_PREFIX):].lower().partition("__")
        if section not in SECTIONS:
            raise ConfigError(f"environment override {key}: unknown section {section!r}")
        raw = environ[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        d.setdefault(section, {})[name] = value
    return d


def load_config(path: str | Path | None = None, environ=None) -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(apply_env_overrides(d, environ))
