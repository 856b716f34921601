import copy
import os
from dataclasses import dataclass, field
from logging import getLogger
from typing import Any, Dict, List, Optional, Sequence

import yaml

from qdistill.core.data import DataConfig
from qdistill.core.distill import KDConfig
from qdistill.core.optim import TrainConfig
from qdistill.exceptions import ConfigurationError

logger = getLogger(__name__)

CONFIG_ENV_VAR = 'QDISTILL_CONFIG'

DEFAULTS: Dict[str, Any] = {
    'data': {
        'num_classes': 8,
        'samples_per_class': None,
        'eval_fraction': 0.25,
        'idx_dir': None,
    },
    'teacher': {
        'dropout_p': 0.5,
        'epochs': None,
    },
    'student': {
        'width_multiplier': 0.5,
        'dropout_p': 0.2,
        'epochs': None,
    },
    'train': {
        'epochs': 60,
        'lr': 0.05,
        'momentum': 0.9,
        'weight_decay': 1e-4,
        'milestones': [21, 30, 45],
        'lr_gamma': 0.2,
        'freeze_epoch': 45,
        'batch_size': 64,
        'imbalanced_sampling': True,
    },
    'kd': {
        'beta': 0.9,
        'temperature': 3.0,
        'literal_eq1': False,
    },
    'paths': {
        'teacher': 'runs/teacher.qdk',
        'student': 'runs/student.qdk',
        'kd_student': 'runs/kd_student.qdk',
        'quantized': 'runs/quantized.qdk',
        'qd_student': 'runs/qd_student.qdk',
    },
    'bench': {
        'iterations': 1000,
        'warmup': 50,
        'threads': 1,
    },
    'sweep': {
        'widths': [0.5, 1.0, 1.5],
        'temperatures': [1, 3, 7, 9],
        'betas': [0.5, 0.6, 0.8, 0.9, 1.0],
        'width_temperature': 5.0,
        'width_beta': 0.7,
        'temperature_beta': 0.7,
        'epochs': 15,
        'workers': 1,
    },
}


@dataclass
class BenchConfig:
    iterations: int = 1000
    warmup: int = 50
    threads: int = 1


@dataclass
class SweepConfig:
    """Sequential width, temperature and teacher-weight studies."""

    widths: List[float] = field(default_factory=lambda: [0.5, 1.0, 1.5])
    temperatures: List[float] = field(default_factory=lambda: [1, 3, 7, 9])
    betas: List[float] = field(default_factory=lambda: [0.5, 0.6, 0.8, 0.9, 1.0])
    width_temperature: float = 5.0
    width_beta: float = 0.7
    temperature_beta: float = 0.7
    epochs: int = 15
    workers: int = 1

    def __post_init__(self):
        if not (self.widths and self.temperatures and self.betas):
            raise ConfigurationError("sweep grids must not be empty")
        if self.workers < 1:
            raise ConfigurationError(f"sweep workers must be positive, got {self.workers}")


@dataclass
class RunConfig:
    """Everything one command needs, assembled from the merged settings."""

    seed: int
    data: DataConfig
    teacher_train: TrainConfig
    student_train: TrainConfig
    kd: KDConfig
    width_multiplier: float
    paths: Dict[str, str]
    bench: BenchConfig
    sweep: SweepConfig


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override_args(args: Sequence[str]) -> Dict[str, str]:
    """Turn ['--train.epochs', '5', '--beta=0.5'] into {'train.epochs': '5', 'beta': '0.5'}."""
    overrides: Dict[str, str] = {}
    items = list(args)
    index = 0
    while index < len(items):
        token = items[index]
        if not token.startswith('--') or len(token) == 2:
            raise ConfigurationError(f"unexpected argument {token!r}; overrides look like --section.key value")
        name = token[2:]
        if '=' in name:
            name, value = name.split('=', 1)
            index += 1
        else:
            if index + 1 >= len(items):
                raise ConfigurationError(f"override {token} has no value")
            value = items[index + 1]
            index += 2
        overrides[name.replace('-', '_')] = value
    return overrides


class Settings:
    """Settings class for qdistill."""

    def __init__(self, config_path: str = None, overrides: Optional[Dict[str, Any]] = None):
        """Initialize settings from config file, then apply command-line overrides."""
        self.config_path = config_path or os.environ.get(CONFIG_ENV_VAR, 'config.yaml')
        self.config = _merge(DEFAULTS, self._load_config())
        if overrides:
            self.apply_overrides(overrides)

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file."""
        try:
            with open(self.config_path, 'r') as f:
                loaded = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logger.warning(f"Config file {self.config_path} not found, using built-in defaults")
            return {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{self.config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{self.config_path}: top level must be a mapping")
        unknown = set(loaded) - set(DEFAULTS) - {'seed'}
        if unknown:
            raise ConfigurationError(f"{self.config_path}: unknown sections {sorted(unknown)}")
        return loaded

    def _resolve(self, name: str):
        if '.' in name:
            section, key = name.split('.', 1)
            if not isinstance(self.config.get(section), dict) or key not in self.config[section]:
                raise ConfigurationError(f"unknown setting {name!r}")
            return section, key
        if name == 'seed':
            return None, 'seed'
        sections = [s for s, values in self.config.items() if isinstance(values, dict) and name in values]
        if not sections:
            raise ConfigurationError(f"unknown setting {name!r}")
        if len(sections) > 1:
            raise ConfigurationError(
                f"setting {name!r} is ambiguous; use one of {', '.join(f'--{s}.{name}' for s in sections)}"
            )
        return sections[0], name

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Set values from {'section.key' or unique 'key': value}; strings are parsed as YAML scalars."""
        for name, value in overrides.items():
            if isinstance(value, str):
                value = yaml.safe_load(value)
            section, key = self._resolve(name)
            if section is None:
                self.config[key] = value
            else:
                self.config[section][key] = value
            logger.debug(f"override {name}={value!r}")

    def get(self, section: str, key: str = None, default: Any = None) -> Any:
        values = self.config.get(section, default)
        if key is None:
            return values
        return values.get(key, default) if isinstance(values, dict) else default

    def _train_config(self, role: str, seed: int) -> TrainConfig:
        values = dict(self.config['train'])
        values['dropout_p'] = self.config[role]['dropout_p']
        if self.config[role].get('epochs') is not None:
            values['epochs'] = self.config[role]['epochs']
        try:
            return TrainConfig(seed=seed, **values)
        except TypeError as e:
            raise ConfigurationError(f"train section: {e}") from e

    def run_config(self) -> RunConfig:
        """Validate the merged settings and build a RunConfig."""
        seed = self.config.get('seed')
        if seed is None:
            raise ConfigurationError("seed is required: set it in the config file or pass --seed")
        seed = int(seed)
        try:
            data = DataConfig(seed=seed, **self.config['data'])
            kd = KDConfig(**self.config['kd'])
            bench = BenchConfig(**self.config['bench'])
            sweep = SweepConfig(**self.config['sweep'])
        except TypeError as e:
            raise ConfigurationError(str(e)) from e
        width = float(self.config['student']['width_multiplier'])
        if not width > 0:
            raise ConfigurationError(f"student.width_multiplier must be positive, got {width}")
        return RunConfig(
            seed=seed,
            data=data,
            teacher_train=self._train_config('teacher', seed),
            student_train=self._train_config('student', seed),
            kd=kd,
            width_multiplier=width,
            paths=dict(self.config['paths']),
            bench=bench,
            sweep=sweep,
        )

    def save_config(self, config: Dict[str, Any] = None) -> None:
        """Save configuration to YAML file."""
        config = config if config is not None else self.config
        with open(self.config_path, 'w') as f:
            yaml.dump(config, f, default_flow_style=False)
        self.config = _merge(DEFAULTS, config)
