#!/usr/bin/env python3
"""
Run Configuration
Flat `key = value` run configs with defaults, YAML presets, range checks and
a provenance echo
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from core.datakit.dataset import ToySpec
from core.diffnet import DTYPES, NetworkSpec
from core.distill import DistillConfig
from core.errors import ConfigError, ScheduleError
from core.evalharness import EvalConfig
from core.trajstore.schedule import MatchingRangeSchedule

logger = logging.getLogger(__name__)

CONFIG_ENV = "DISTILLFORGE_CONFIG"
PRESETS_PATH = Path(__file__).parent.parent / "config" / "presets.yaml"
PRESET_KEYS = ("N", "M", "T_minus", "T_init", "T_plus", "interval", "syn_batch")


def _key(default, **checks):
    return field(default=default, metadata=checks)


@dataclass
class RunConfig:
    """Every tunable of a run, one config key per field"""
    # toy data
    classes: int = _key(4, min=2)
    per_class: int = _key(100, min=1)
    test_per_class: int = _key(100, min=1)
    channels: int = _key(2, min=1)
    height: int = _key(8, min=1)
    width: int = _key(8, min=1)
    separation: float = _key(3.0, gt=0.0)
    noise: float = _key(1.0, gt=0.0)
    data_seed: int = _key(7, min=0)

    # network
    arch: str = _key("mlp", choices=("mlp", "conv"))
    hidden: str = _key("64")
    activation: str = _key("relu", choices=("relu", "tanh", "sigmoid", "softplus"))

    # experts
    experts: int = _key(5, min=1)
    expert_epochs: int = _key(40, min=1)
    expert_lr: float = _key(0.01, gt=0.0)
    expert_momentum: float = _key(0.9, min=0.0, max=1.0)
    expert_batch: int = _key(64, min=1)
    expert_dir: str = _key("")

    # distillation
    N: int = _key(40, min=1)
    M: int = _key(2, min=1)
    T_minus: int = _key(0, min=0)
    T_init: int = _key(15, min=0)
    T_plus: int = _key(20, min=0)
    interval: int = _key(100, min=1)
    syn_batch: int = _key(0, min=0)
    ipc: int = _key(3, min=1)
    iterations: int = _key(10000, min=1)
    lr_img: float = _key(10.0, min=0.0)
    lr_label: float = _key(5.0, min=0.0)
    lr_alpha: float = _key(1e-4, min=0.0)
    momentum_img: float = _key(0.5, min=0.0, max=1.0)
    label_mode: str = _key("hard", choices=("hard", "soft"))
    per_step_alpha: bool = _key(False)
    precision: str = _key("single", choices=tuple(DTYPES))
    seed: int = _key(0, min=0, max=2 ** 64 - 1)
    checkpoint_every: int = _key(500, min=0)
    log_every: int = _key(100, min=0)
    eval_every: int = _key(0, min=0)

    # evaluation
    eval_epochs: int = _key(100, min=0)
    eval_lr: float = _key(0.01, min=0.0)
    eval_momentum: float = _key(0.9, min=0.0, max=1.0)
    eval_batch: int = _key(64, min=1)
    eval_seeds: int = _key(5, min=1)
    baseline_seeds: int = _key(5, min=1)

    # ablation
    ablate_seeds: int = _key(5, min=1)

    # provenance
    preset: str = _key("")

    def hidden_widths(self) -> Tuple[int, ...]:
        return _parse_hidden(self.hidden)

    def toy_spec(self) -> ToySpec:
        return ToySpec(
            num_classes=self.classes,
            per_class=self.per_class,
            channels=self.channels,
            height=self.height,
            width=self.width,
            separation=self.separation,
            noise=self.noise,
            seed=self.data_seed,
            test_per_class=self.test_per_class,
        )

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            input_dim=self.channels * self.height * self.width,
            num_classes=self.classes,
            hidden=self.hidden_widths(),
            activation=self.activation,
            kind=self.arch,
            image_shape=(self.channels, self.height, self.width) if self.arch == "conv" else None,
        )

    def schedule(self) -> MatchingRangeSchedule:
        return MatchingRangeSchedule(self.T_minus, self.T_init, self.T_plus, self.interval)

    def distill_config(self, expert_dir: str = "") -> DistillConfig:
        return DistillConfig(
            N=self.N,
            M=self.M,
            schedule=self.schedule(),
            iterations=self.iterations,
            syn_batch=self.syn_batch,
            ipc=self.ipc,
            lr_img=self.lr_img,
            lr_label=self.lr_label,
            lr_alpha=self.lr_alpha,
            momentum_img=self.momentum_img,
            label_mode=self.label_mode,
            per_step_alpha=self.per_step_alpha,
            seed=self.seed,
            precision=self.precision,
            expert_dir=expert_dir or self.expert_dir,
            checkpoint_every=self.checkpoint_every,
            log_every=self.log_every,
            eval_every=self.eval_every,
        )

    def eval_config(self, seeds: Optional[int] = None, workers: Optional[int] = None) -> EvalConfig:
        return EvalConfig(
            spec=self.network_spec(),
            epochs=self.eval_epochs,
            lr=self.eval_lr,
            momentum=self.eval_momentum,
            batch_size=self.eval_batch,
            seeds=seeds or self.eval_seeds,
            workers=workers,
        )


KEYS = {f.name: f for f in fields(RunConfig)}


def _parse_hidden(text: str) -> Tuple[int, ...]:
    try:
        widths = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"hidden must be a comma list of integers, got {text!r}")
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"hidden needs at least one positive width, got {text!r}")
    return widths


def _convert(name: str, raw: str, line: int) -> Any:
    spec = KEYS[name]
    kind = spec.type if isinstance(spec.type, type) else type(spec.default)
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            value = lowered == "true"
        elif kind is int:
            value = int(raw)
        elif kind is float:
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{name} expects {kind.__name__}, got {raw!r}", line)
    _check_range(name, value, line)
    return value


def _check_range(name: str, value: Any, line: int = 0):
    checks = KEYS[name].metadata
    if "choices" in checks and value not in checks["choices"]:
        raise ConfigError(f"{name} must be one of {', '.join(checks['choices'])}, got {value!r}", line)
    if "min" in checks and value < checks["min"]:
        raise ConfigError(f"{name} must be >= {checks['min']}, got {value!r}", line)
    if "max" in checks and value > checks["max"]:
        raise ConfigError(f"{name} must be <= {checks['max']}, got {value!r}", line)
    if "gt" in checks and not value > checks["gt"]:
        raise ConfigError(f"{name} must be > {checks['gt']}, got {value!r}", line)
    if name == "hidden":
        try:
            _parse_hidden(value)
        except ConfigError as e:
            raise ConfigError(str(e), line)


def load_presets(path: Union[str, Path] = PRESETS_PATH) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f) or {}


def preset_values(name: str, path: Union[str, Path] = PRESETS_PATH) -> Dict[str, Any]:
    presets = load_presets(path).get("presets", {})
    if name not in presets:
        raise ConfigError(f"Unknown preset {name!r}; available: {', '.join(sorted(presets))}")
    row = presets[name]
    ignored = sorted(set(row) - set(PRESET_KEYS))
    if ignored:
        logger.warning(f"Preset {name}: full-scale values {', '.join(ignored)} are recorded but not applied")
    return {key: row[key] for key in PRESET_KEYS if key in row}


def stage_definitions(path: Union[str, Path] = PRESETS_PATH) -> Tuple[Dict[str, List[int]], int]:
    """Ordered early/medium/late stages and their reference expert length"""
    stages = dict(load_presets(path).get("stages", {}))
    reference = int(stages.pop("reference_epochs", 80))
    if not stages:
        raise ConfigError(f"No matching-range stages defined in {path}")
    return {name: list(bounds) for name, bounds in stages.items()}, reference


class ConfigManager:
    """Parses, validates and writes run configs"""

    @staticmethod
    def parse_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
        values: Dict[str, Any] = {}
        lines: Dict[str, int] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {line!r}", number)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}", number)
            if key in values:
                raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", number)
            values[key] = _convert(key, value, number)
            lines[key] = number

        config = base or RunConfig()
        preset = values.get("preset", config.preset)
        if preset:
            merged = preset_values(preset)
            merged.update(values)
            values = merged
        config = replace(config, **values)
        ConfigManager.validate(config, lines)
        return config

    @staticmethod
    def validate(config: RunConfig, lines: Optional[Dict[str, int]] = None):
        lines = lines or {}
        for name in KEYS:
            _check_range(name, getattr(config, name), lines.get(name, 0))
        try:
            config.schedule()
        except ScheduleError as e:
            line = lines.get("T_init") or lines.get("T_plus") or lines.get("T_minus") or 0
            raise ConfigError(str(e), line)
        if config.classes > config.channels * config.height * config.width:
            raise ConfigError("classes exceed the input dimension", lines.get("classes", 0))

    @staticmethod
    def serialize(config: RunConfig) -> str:
        out = []
        for name in KEYS:
            value = getattr(config, name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            out.append(f"{name} = {text}".rstrip())
        return "\n".join(out) + "\n"

    @staticmethod
    def load_from_file(config_path: Union[str, Path]) -> RunConfig:
        """Parse a config file; omitted keys take their defaults"""
        with open(config_path, 'r', encoding='utf-8') as f:
            return ConfigManager.parse_text(f.read())

    @staticmethod
    def save_to_file(config: RunConfig, config_path: Union[str, Path]) -> Path:
        path = Path(config_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(ConfigManager.serialize(config), encoding='utf-8')
        logger.info(f"Effective configuration saved to {path}")
        return path

    @staticmethod
    def load_from_env() -> RunConfig:
        """Config named by DISTILLFORGE_CONFIG, else defaults"""
        config_path = os.getenv(CONFIG_ENV, "")
        if config_path:
            logger.info(f"Configuration loaded from {config_path} ({CONFIG_ENV})")
            return ConfigManager.load_from_file(config_path)
        return RunConfig()

    @staticmethod
    def apply_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
        """CLI flags on top of the file; None means not given"""
        given = {key: value for key, value in overrides.items() if value is not None}
        for key in given:
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
        if "preset" in given:
            preset = preset_values(given["preset"])
            given = {**preset, **given}
        updated = replace(config, **given)
        ConfigManager.validate(updated)
        return updated


def parse_range(text: str) -> Dict[str, int]:
    """'T_minus:T_init:T_plus' as config values"""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--range expects T_minus:T_init:T_plus, got {text!r}")
    try:
        t_minus, t_init, t_plus = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--range values must be integers, got {text!r}")
    return {"T_minus": t_minus, "T_init": t_init, "T_plus": t_plus}


def parse_config(path: Union[str, Path], echo_path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Parse a run config and optionally echo the effective config beside the outputs"""
    config = ConfigManager.load_from_file(path)
    if echo_path is not None:
        ConfigManager.save_to_file(config, echo_path)
    return config
