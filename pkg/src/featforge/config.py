"""Experiment configuration: typed dataclasses loaded from a JSON file.

Unknown keys and ill-typed values raise :class:`ConfigError` naming the
offending dotted key path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, get_args, get_origin, get_type_hints


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TaskConfig:
    num_base: int = 8
    num_novel: int = 3
    channels: int = 32
    spatial: tuple[int, int] = (5, 5)
    components: int = 2
    separation: float = 0.2
    spatial_pattern: float = 0.3
    component_spread: float = 0.15
    noise_scale: float = 1.0
    reg_noise: float = 0.05
    shots: int = 10
    seed: int = 0


@dataclass
class HeadConfig:
    hidden: tuple[int, ...] = (64, 64)
    kernel: int = 1


@dataclass
class GeneratorConfig:
    z_dim: int = 100
    trunk_channels: int = 8
    num_layers: int = 5
    kernel: int = 3


@dataclass
class SgdSettings:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class BaseTrainConfig:
    epochs: int = 8
    batch_size: int = 64
    train_per_class: int = 200
    test_per_class: int = 200
    final_lr_scale: float = 0.1
    accuracy_bar: float = 0.95
    sgd: SgdSettings = field(default_factory=lambda: SgdSettings(0.05, 0.9, 5e-5))


@dataclass
class GenTrainConfig:
    iterations: int = 500
    features_per_class: int = 75
    lambda_kl: float = 5.0
    sites: tuple[str, ...] = ("pre_norm", "post_act", "logits", "probs")
    include_probs_in_kl: bool = True
    class_agnostic: bool = False
    grad_clip: float = 5.0  # global L2 norm; 0 disables
    sgd: SgdSettings = field(default_factory=lambda: SgdSettings(1e-3, 0.9, 5e-5))


@dataclass
class FinetuneConfig:
    iterations: int = 300
    head_lr_scale: float = 0.015
    lambda_f: float = 0.1
    lambda_ewc: float = 0.01
    fisher_mode: str = "mean"
    use_generator: bool = True
    fixed_forged: bool = False
    forged_per_class: int = 0  # 0 means "same as shots"
    conf: bool = True
    feat_distill: bool = True
    reg_l1: bool = True
    reg_beta: float = 1.0
    sgd: SgdSettings = field(default_factory=lambda: SgdSettings(0.05, 0.9, 0.0))


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    gen_train: GenTrainConfig = field(default_factory=GenTrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seeds: tuple[int, ...] = (0,)

    def validate(self) -> ExperimentConfig:
        checks = [
            ("task.num_base", self.task.num_base >= 2),
            ("task.num_novel", self.task.num_novel >= 1),
            ("task.shots", self.task.shots >= 1),
            ("task.components", self.task.components >= 1),
            ("head.kernel", self.head.kernel % 2 == 1),
            ("generator.kernel", self.generator.kernel % 2 == 1),
            ("generator.num_layers", self.generator.num_layers >= 1),
            ("base.epochs", self.base.epochs >= 1),
            ("gen_train.iterations", self.gen_train.iterations >= 1),
            ("gen_train.features_per_class", self.gen_train.features_per_class >= 2),
            ("finetune.iterations", self.finetune.iterations >= 1),
            ("finetune.fisher_mode", self.finetune.fisher_mode in ("full", "mean")),
            ("seeds", len(self.seeds) >= 1),
        ]
        for key in ("gen_train.lambda_kl", "gen_train.grad_clip", "finetune.lambda_f", "finetune.lambda_ewc",
                    "finetune.head_lr_scale", "finetune.forged_per_class"):
            section, name = key.split(".")
            checks.append((key, getattr(getattr(self, section), name) >= 0))
        for key, sgd in (("base.sgd", self.base.sgd), ("gen_train.sgd", self.gen_train.sgd),
                         ("finetune.sgd", self.finetune.sgd)):
            checks += [(f"{key}.learning_rate", sgd.learning_rate > 0),
                       (f"{key}.momentum", 0 <= sgd.momentum < 1),
                       (f"{key}.weight_decay", sgd.weight_decay >= 0)]
        bad = set(self.gen_train.sites) - {"pre_norm", "post_act", "logits", "probs"}
        checks.append(("gen_train.sites", not bad and len(self.gen_train.sites) > 0))
        for key, ok in checks:
            if not ok:
                raise ConfigError(key, "value out of range")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **sections) -> ExperimentConfig:
        return dataclasses.replace(self, **sections)


def _coerce(value: Any, tp, key: str):
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, "expected a table")
        return _build(tp, value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, "expected a list")
        args = get_args(tp)
        item_tp = args[0]
        if len(args) == 2 and args[1] is not Ellipsis:
            if len(value) != 2:
                raise ConfigError(key, "expected exactly 2 entries")
        return tuple(_coerce(v, item_tp, f"{key}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, "expected a string")
        return value
    raise ConfigError(key, f"unsupported type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else k
        if k not in names:
            raise ConfigError(key, "unknown key")
        kwargs[k] = _coerce(v, hints[k], key)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("<file>", "top level must be a table")
    return config_from_dict(data)


def paper_shapes(cfg: ExperimentConfig) -> ExperimentConfig:
    """Full-scale tensor shapes (60/20 classes, 1024 x 7 x 7 features); shape tests only."""
    task = dataclasses.replace(cfg.task, num_base=60, num_novel=20, channels=1024, spatial=(7, 7))
    head = dataclasses.replace(cfg.head, hidden=(1024, 1024))
    gen_train = dataclasses.replace(cfg.gen_train, features_per_class=600, iterations=2000)
    return dataclasses.replace(cfg, task=task, head=head, gen_train=gen_train)
