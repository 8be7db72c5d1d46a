"""Run configuration: strict JSON schema, dotted overrides, config digest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field

from .codec import CodecConfig
from .roi import RoiConfig
from .task import TASKS
from .training import VARIANTS, LossConfig, TrainConfig


class ConfigError(ValueError):
    """Schema violation: unknown key, wrong type or invalid value."""


@dataclass
class DataConfig:
    train_seed: int = 1
    n_train: int = 512
    val_seed: int = 2
    n_val: int = 256


@dataclass
class TaskConfig:
    name: str = "segmentation"
    widths: list = field(default_factory=lambda: [16, 32, 48, 64])
    seed: int = 0
    pretrain_steps: int = 800
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 16
    heldout_seed: int = 7919
    n_heldout: int = 256
    min_miou: float = 0.85
    min_presence_acc: float = 0.95


@dataclass
class CodecSection:
    channels: list = field(default_factory=lambda: [32, 64])
    latent_channels: int = 32
    support: int = 64
    init_scale: float = 8.0
    likelihood_floor: float = 1e-9
    seed: int = 0


@dataclass
class LossSection:
    variant: str = "Task"
    lam: float = 1.0
    alpha: float = 0.5
    position: str = "AuxEnc"
    distill_layers: list = field(default_factory=lambda: ["stage3", "stage4"])
    labels: str = "teacher"
    aux_task_tap: str = "stage2"


@dataclass
class TrainSection:
    epochs: int = 4
    batch_size: int = 16
    lr0: float = 1e-3
    schedule: str = "poly"
    power: float = 1.0
    start_epoch: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    audit_every: int = 100
    debug: bool = False
    entropy_lr_mult: float = 10.0
    aux_width: int = 24
    # shared image-fidelity warm start for every task run (0 disables)
    warm_start_epochs: int = 30
    warm_start_lam: float = 500.0
    warm_start_lr: float = 2e-3


@dataclass
class RoiSection:
    qf: float = 1.4
    mask_source: str = "gt_mask"
    binarize_threshold: float = 0.5
    oracle_rescale: bool = False


@dataclass
class EvalConfig:
    seed: int = 3
    n_images: int = 256
    code: bool = True


@dataclass
class SweepConfig:
    lams: list = field(default_factory=lambda: [2.0, 8.0, 32.0, 128.0])
    variants: list = field(default_factory=lambda: ["Task", "TaskAux"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    codec: CodecSection = field(default_factory=CodecSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    roi: RoiSection = field(default_factory=RoiSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "runs"

    # -- typed views -------------------------------------------------------

    def codec_config(self) -> CodecConfig:
        return CodecConfig(**asdict(self.codec))

    def loss_config(self) -> LossConfig:
        return LossConfig(**asdict(self.loss), task=self.task.name)

    def train_config(self) -> TrainConfig:
        t = asdict(self.train)
        keep = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in t.items() if k in keep})

    def roi_config(self) -> RoiConfig:
        return RoiConfig(**asdict(self.roi))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Short hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def validate(self) -> "RunConfig":
        if self.task.name not in TASKS:
            raise ConfigError(f"task.name must be one of {TASKS}, got {self.task.name!r}")
        for v in self.sweep.variants:
            variant, _, position = v.partition("@")
            if variant not in VARIANTS:
                raise ConfigError(f"sweep.variants: unknown variant {v!r}")
            if position and position not in ("AuxEnc", "AuxDec", "AuxTask", "none"):
                raise ConfigError(f"sweep.variants: unknown position in {v!r}")
        if len(self.sweep.lams) != len(set(self.sweep.lams)):
            raise ConfigError("sweep.lams must be distinct")
        if min(self.data.n_train, self.data.n_val, self.eval.n_images) < 1:
            raise ConfigError("dataset counts must be positive")
        if self.train.batch_size > self.data.n_train:
            raise ConfigError("train.batch_size exceeds data.n_train")
        try:
            self.codec_config()
            self.loss_config()
            self.train_config()
            self.roi_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp) or tp
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return list(value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load(path: str) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"loss.variant": "TaskAux", ...}``; values given as strings are JSON-decoded when possible."""
    data = cfg.to_dict()
    for dotted, raw in overrides.items():
        keys = dotted.split(".")
        node = data
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"override {dotted!r}: unknown section {k!r}")
            node = node[k]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"override {dotted!r}: unknown key {leaf!r}")
        value = _parse_value(raw) if isinstance(raw, str) else raw
        if isinstance(node[leaf], str) and not isinstance(value, str):
            value = raw  # e.g. run names that look numeric
        node[leaf] = value
    return from_dict(data)
