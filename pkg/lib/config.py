"""
Run configuration: built-in defaults, a JSON file, environment variables and
dotted-key overrides, merged in that order
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path

from lib.errors import ConfigError
from lib.model import ModelConfig
from lib.scan import DEFAULT_MATERIALIZE_CAP, DEFAULT_PARALLEL_THRESHOLD
from lib.tasks import BYTE_VOCAB, TaskSpec
from lib.training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULTS = {
    'model': {
        'layers': 2,
        'width': 32,
        'vocab_size': 256,
        'glu_expansion': None,
        'lower_bound_mode': 'monotone',
        'use_complex': True,
        'theta_data_dependent': False,
        'tie_input_gate': True,
        'untied_input_weight': 'gate',
        'use_output_gate': True,
        'norm_eps': 1e-5,
        'seq_len_max': 16384,
    },
    'train': {
        'peak_lr': 5e-4,
        'betas': [0.9, 0.98],
        'adam_eps': 1e-8,
        'weight_decay': 0.2,
        'warmup_steps': 400,
        'total_steps': 5000,
        'schedule': 'inverse_sqrt',
        'grad_clip': None,
        'batch_size': 16,
        'seq_len': 256,
        'seed': 0,
        'precision': 'f32',
        'log_interval': 100,
        'val_batches': 4,
    },
    'task': {
        'kind': 'byte_lm',
        'payload_len': 8,
        'vocab_size': 16,
        'corpus': None,
        'stationary_bytes': 65536,
        'stationary_alphabet': 16,
        'split_ratio': 0.9,
        'val_samples': 64,
    },
    'scan': {
        'parallel_threshold': DEFAULT_PARALLEL_THRESHOLD,
        'materialize_cap': DEFAULT_MATERIALIZE_CAP,
        'bench_lengths': [64, 256, 1024, 4096],
        'bench_width': 64,
        'bench_repeats': 5,
        'bench_memory_fraction': 0.5,
    },
    'instrumentation': {
        'extrapolate_lengths': [256, 512, 1024],
        'stats_batches': 4,
        'mixing_dims': [0, 1],
        'mixing_len': 64,
        'gradcheck_tolerance': 1e-4,
    },
    'run': {
        'out_root': 'runs',
        'name': None,
        'ledger': 'ledger.db',
    },
}


def _parse_value(raw):
    try:
        return json.loads(raw)
    except (ValueError, TypeError):
        return raw


# keys whose default is null, with the type a set value must have
NULLABLE_TYPES = {
    'model.glu_expansion': int,
    'train.grad_clip': float,
    'task.corpus': str,
    'run.name': str,
}


def _coerce(key, value, default):
    """Check `value` against the type of the default at `key`"""
    if value is None:
        return value
    if default is None:
        expected = NULLABLE_TYPES.get(key)
        if expected is None:
            return value
        default = expected()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return value
    return value


def _merge(base, update, prefix=''):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}' must be a section")
            _merge(base[key], value, f"{path}.")
        else:
            base[key] = _coerce(path, value, DEFAULTS_FLAT.get(path))


def _flatten(doc, prefix=''):
    out = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[f"{prefix}{key}"] = value
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


@dataclass
class ScanConfig:
    parallel_threshold: int = DEFAULT_PARALLEL_THRESHOLD
    materialize_cap: int = DEFAULT_MATERIALIZE_CAP
    bench_lengths: list = None
    bench_width: int = 64
    bench_repeats: int = 5
    bench_memory_fraction: float = 0.5

    def __post_init__(self):
        if self.parallel_threshold < 0:
            raise ConfigError(f"scan.parallel_threshold must be >= 0, got {self.parallel_threshold}")
        if self.bench_repeats < 1:
            raise ConfigError(f"scan.bench_repeats must be >= 1, got {self.bench_repeats}")
        if not 0.0 < self.bench_memory_fraction <= 1.0:
            raise ConfigError("scan.bench_memory_fraction must lie in (0, 1]")


class Config:
    """Configuration handler with environment variable and override support"""

    def __init__(self, config_path=None, overrides=None):
        self.config_path = Path(config_path) if config_path else None
        self.overrides = list(overrides or [])
        self.config = self._load_config()
        self._apply_env_overrides()
        self._apply_overrides(self.overrides)
        self.validate()

    def _load_config(self):
        """Defaults, then the JSON file when one was given"""
        config = copy.deepcopy(DEFAULTS)
        if self.config_path is None:
            logger.info("No config file given, using built-in defaults")
            return config
        if not self.config_path.exists():
            raise ConfigError(f"config file not found: {self.config_path}")
        try:
            with open(self.config_path, 'r') as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in config file {self.config_path}: {e}")
        if not isinstance(document, dict):
            raise ConfigError(f"config file {self.config_path} must hold a JSON object")
        _merge(config, document)
        logger.info(f"Configuration loaded from {self.config_path}")
        return config

    def _apply_env_overrides(self):
        """Override config with environment variables"""
        if os.getenv('HGRN_OUT_ROOT'):
            self.config['run']['out_root'] = os.getenv('HGRN_OUT_ROOT')
            logger.info(f"Output root from ENV: {self.config['run']['out_root']}")
        if os.getenv('HGRN_PRECISION'):
            self.config['train']['precision'] = os.getenv('HGRN_PRECISION').lower()

    def _apply_overrides(self, overrides):
        for item in overrides:
            if '=' not in item:
                raise ConfigError(f"override '{item}' must look like section.key=value")
            key, raw = item.split('=', 1)
            self.set(key.strip(), _parse_value(raw.strip()))

    def set(self, key, value):
        """Set a leaf value by dotted key; the key must exist in the schema"""
        if key not in DEFAULTS_FLAT:
            raise ConfigError(f"unknown config key '{key}'")
        section, name = key.split('.', 1)
        self.config[section][name] = _coerce(key, value, DEFAULTS_FLAT[key])
        logger.debug(f"Override {key} = {value!r}")

    def get(self, key, default=None):
        """
        Get configuration value using dot notation.
        Example: config.get('train.peak_lr', 5e-4)
        """
        value = self.config
        for k in key.split('.'):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def validate(self):
        """Build every typed view once so bad values fail at load time"""
        model = self.model_config()
        self.train_config()
        spec = self.task_spec()
        self.scan_config()
        if spec.kind == 'byte_lm':
            if model.vocab_size != BYTE_VOCAB:
                raise ConfigError(f"byte_lm needs model.vocab_size={BYTE_VOCAB}, got {model.vocab_size}")
        elif model.vocab_size < spec.vocab_size:
            raise ConfigError(
                f"model.vocab_size ({model.vocab_size}) is smaller than task.vocab_size ({spec.vocab_size})"
            )

    def model_config(self):
        data = dict(self.config['model'])
        data['parallel_threshold'] = self.config['scan']['parallel_threshold']
        return ModelConfig.from_dict(data)

    def train_config(self):
        return TrainConfig.from_dict(dict(self.config['train']))

    def task_spec(self):
        task = self.config['task']
        return TaskSpec(
            kind=task['kind'],
            seq_len=self.config['train']['seq_len'],
            payload_len=task['payload_len'],
            vocab_size=task['vocab_size'],
            seed=self.config['train']['seed'],
        )

    def scan_config(self):
        known = {f.name for f in fields(ScanConfig)}
        return ScanConfig(**{k: v for k, v in self.config['scan'].items() if k in known})

    def derive(self, extra_overrides):
        """A new Config from the same file with further overrides appended"""
        return Config(self.config_path, self.overrides + list(extra_overrides))

    def get_out_root(self):
        out_root = Path(self.get('run.out_root', 'runs'))
        out_root.mkdir(parents=True, exist_ok=True)
        return out_root

    def to_dict(self):
        return copy.deepcopy(self.config)

    def dump(self, path):
        """Write the resolved document; loading it back reproduces this config"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.config, f, indent=2)
            f.write('\n')
        return path

    def reload(self):
        """Reload configuration from file, re-applying env and overrides"""
        self.config = self._load_config()
        self._apply_env_overrides()
        self._apply_overrides(self.overrides)
        self.validate()
        logger.info("Configuration reloaded")
