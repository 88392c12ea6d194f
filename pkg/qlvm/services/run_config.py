"""
运行配置

默认值（settings.QLVM_DEFAULTS）→ 检查点中记录的配置 → --config 文件 → --set 覆盖 → 命令行参数，
逐层合并后按声明的类型解析，未知键直接拒绝。
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from django.conf import settings

from qlvm.exceptions import ConfigError, LatticeError
from qlvm.services.baselines import BaselineConfig
from qlvm.services.data_service import Dataset, load_idx, load_matrix, split, synth_mixture
from qlvm.services.lattice import (
    LatticeRule, PRIOR_KINDS, SAMPLING_MODES, fibonacci_index_for, fibonacci_numbers, fibonacci_rule,
    korobov_rule, korobov_search,
)
from qlvm.services.net import ACTIVATIONS
from qlvm.services.qlvm_service import TrainConfig
from qlvm.utils import parse_key_value_text, render_key_value_text

logger = logging.getLogger(__name__)

MODEL_KINDS = ('qlvm', 'vae', 'iwae')

# 键 -> (类型, 可选值)
CONFIG_SCHEMA: Dict[str, Tuple[str, Optional[Tuple[str, ...]]]] = {
    'dataset': ('choice', ('synth', 'idx', 'matrix')),
    'images_path': ('str', None),
    'labels_path': ('str', None),
    'matrix_path': ('str', None),
    'value_kind': ('choice', ('binary', 'real')),
    'image_shape': ('shape', None),
    'synth_clusters': ('int', None),
    'synth_n': ('int', None),
    'synth_side': ('int', None),
    'synth_sigma': ('optfloat', None),
    'synth_jitter': ('optfloat', None),
    'split_fraction': ('float', None),
    'data_seed': ('int', None),
    'model': ('choice', MODEL_KINDS),
    'latent_dim': ('int', None),
    'lattice': ('choice', ('fibonacci', 'korobov')),
    'fib_index': ('int', None),
    'lattice_m': ('int', None),
    'korobov_a': ('int', None),
    'sampling': ('choice', SAMPLING_MODES),
    'prior': ('choice', PRIOR_KINDS),
    'prior_loc': ('floatlist', None),
    'prior_scale': ('floatlist', None),
    'hidden': ('intlist', None),
    'activation': ('choice', ACTIVATIONS),
    'encoder_hidden': ('intlist', None),
    'likelihood': ('choice', ('bernoulli', 'gaussian')),
    'variance': ('float', None),
    'epochs': ('int', None),
    'batch_size': ('int', None),
    'lr': ('float', None),
    'beta1': ('float', None),
    'beta2': ('float', None),
    'adam_eps': ('float', None),
    'samples': ('int', None),
    'eval_fib_index': ('int', None),
    'n_shifts': ('int', None),
    'seed': ('optint', None),
    'output_dir': ('str', None),
}


def _parse_int_list(text: str) -> Tuple[int, ...]:
    values = tuple(int(part) for part in text.replace(' ', '').split(',') if part)
    if not values:
        raise ValueError("empty list")
    return values


def _parse_float_list(text: str) -> Tuple[float, ...]:
    values = tuple(float(part) for part in text.replace(' ', '').split(',') if part)
    if not values:
        raise ValueError("empty list")
    return values


def _parse_shape(text: str) -> Optional[Tuple[int, int]]:
    if not text:
        return None
    height, width = text.lower().replace(',', 'x').split('x')
    return int(height), int(width)


_PARSERS = {
    'str': str,
    'choice': str,
    'int': int,
    'float': float,
    'optint': lambda text: int(text) if text else None,
    'optfloat': lambda text: float(text) if text else None,
    'intlist': _parse_int_list,
    'floatlist': _parse_float_list,
    'shape': _parse_shape,
}


def _parse_value(key: str, text: str) -> Any:
    if key not in CONFIG_SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind, choices = CONFIG_SCHEMA[key]
    try:
        value = _PARSERS[kind](text.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid value {text!r} for {key} (expected {kind})") from exc
    if choices is not None and value not in choices:
        raise ConfigError(f"invalid value {value!r} for {key}, expected one of {list(choices)}")
    return value


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    """解析 --set key=value 列表"""
    result = {}
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split('=', 1)
        result[key.strip()] = value.strip()
    return result


@dataclass
class RunConfig:
    """一次命令运行的完整配置，raw 保存字符串形式，values 保存解析后的值"""
    raw: Dict[str, str]
    values: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = {key: _parse_value(key, text) for key, text in self.raw.items()}
        missing = set(CONFIG_SCHEMA) - set(self.raw)
        if missing:
            raise ConfigError(f"configuration is missing keys {sorted(missing)}")

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    @classmethod
    def from_sources(cls, config_path: Optional[str] = None, overrides: Iterable[str] = (),
                     seed: Optional[int] = None, output_dir: Optional[str] = None,
                     base: Optional[Dict[str, str]] = None) -> 'RunConfig':
        """按层合并配置

        Args:
            config_path: key=value 配置文件
            overrides: --set 给出的 key=value 列表
            seed: --seed
            output_dir: --output-dir
            base: 检查点中记录的训练配置（seed/output_dir 不继承）

        Returns:
            RunConfig: 解析后的配置
        """
        raw = dict(settings.QLVM_DEFAULTS)
        for key, value in (base or {}).items():
            if key in ('seed', 'output_dir'):
                continue
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r} in checkpoint")
            raw[key] = value

        layers = []
        if config_path:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigError(f"config file {path} does not exist")
            try:
                layers.append(parse_key_value_text(path.read_text(encoding='utf-8')))
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        layers.append(parse_overrides(overrides))
        flags = {}
        if seed is not None:
            flags['seed'] = str(seed)
        if output_dir is not None:
            flags['output_dir'] = str(output_dir)
        layers.append(flags)

        for layer in layers:
            for key, value in layer.items():
                if key not in CONFIG_SCHEMA:
                    raise ConfigError(f"unknown configuration key {key!r}")
                raw[key] = value
        return cls(raw)

    def replace(self, **overrides) -> 'RunConfig':
        raw = dict(self.raw)
        raw.update({key: str(value) for key, value in overrides.items()})
        return RunConfig(raw)

    def resolved_text(self) -> str:
        return render_key_value_text(self.raw)

    def require_seed(self) -> int:
        if self['seed'] is None:
            raise ConfigError("a seed is required (--seed or seed=...)")
        return self['seed']

    def lattice_rule(self) -> LatticeRule:
        """训练格点：二维默认 Fibonacci，其余维度用 Korobov（korobov_a=0 时搜索底数）"""
        d = self['latent_dim']
        if d < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {d}")
        if self['lattice'] == 'fibonacci':
            if d != 2:
                raise LatticeError(f"fibonacci lattices are two-dimensional, latent_dim={d} needs lattice=korobov")
            return fibonacci_rule(self['fib_index'])
        return self._korobov(self['lattice_m'], self['korobov_a'], d)

    def eval_rule(self) -> LatticeRule:
        """评估格点，点数为 Fib(eval_fib_index)"""
        d = self['latent_dim']
        if d == 2:
            return fibonacci_rule(self['eval_fib_index'])
        m, _ = fibonacci_numbers(self['eval_fib_index'])
        return self._korobov(m, 0, d)

    @staticmethod
    def _korobov(m: int, a: int, d: int) -> LatticeRule:
        if m < 3:
            raise LatticeError(f"korobov lattices need lattice_m >= 3, got {m}")
        return korobov_search(m, d) if a == 0 else korobov_rule(m, a, d)

    def with_sample_count(self, m: int) -> 'RunConfig':
        """用于扫描：qlvm 改格点点数，vae/iwae 改每个数据点的样本数"""
        if self['model'] != 'qlvm':
            return self.replace(samples=m)
        index = fibonacci_index_for(m)
        if self['latent_dim'] == 2 and index is not None:
            return self.replace(lattice='fibonacci', fib_index=index)
        return self.replace(lattice='korobov', lattice_m=m, korobov_a=0)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            rule=self.lattice_rule(),
            seed=self.require_seed(),
            sampling=self['sampling'],
            epochs=self['epochs'],
            batch_size=self['batch_size'],
            lr=self['lr'],
            beta1=self['beta1'],
            beta2=self['beta2'],
            adam_eps=self['adam_eps'],
            prior=self['prior'],
            prior_loc=self['prior_loc'],
            prior_scale=self['prior_scale'],
            likelihood=self['likelihood'],
            variance=self['variance'],
            hidden=self['hidden'],
            activation=self['activation'],
        )

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(
            kind=self['model'],
            latent_dim=self['latent_dim'],
            seed=self.require_seed(),
            samples=self['samples'] or None,
            epochs=self['epochs'],
            batch_size=self['batch_size'],
            lr=self['lr'],
            beta1=self['beta1'],
            beta2=self['beta2'],
            adam_eps=self['adam_eps'],
            likelihood=self['likelihood'],
            variance=self['variance'],
            hidden=self['hidden'],
            encoder_hidden=self['encoder_hidden'],
            activation=self['activation'],
        )

    def load_dataset(self) -> Dataset:
        source = self['dataset']
        if source == 'synth':
            return synth_mixture(self['data_seed'], self['synth_clusters'], self['synth_n'], self['synth_side'],
                                 self['synth_sigma'], self['synth_jitter'])
        if source == 'idx':
            if not self['images_path']:
                raise ConfigError("dataset=idx needs images_path")
            return load_idx(self['images_path'], self['labels_path'] or None)
        if not self['matrix_path']:
            raise ConfigError("dataset=matrix needs matrix_path")
        return load_matrix(self['matrix_path'], self['value_kind'], self['image_shape'])

    def split_dataset(self, dataset: Optional[Dataset] = None) -> Tuple[Dataset, Dataset]:
        dataset = dataset if dataset is not None else self.load_dataset()
        return split(dataset, self['split_fraction'], self['data_seed'])
