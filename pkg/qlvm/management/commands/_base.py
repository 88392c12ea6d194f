"""
管理命令公共部分

统一的 --config / --set / --seed / --output-dir 选项、检查点加载、输出目录加锁，
以及领域异常到退出码的映射（配置/数据/检查点错误 -> 1，数值错误 -> 2）。
"""
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import numpy as np
from django.core.management.base import BaseCommand, CommandError

from qlvm.exceptions import ConfigError, NumericalError, QLVMError
from qlvm.services.data_service import Dataset, load_checkpoint
from qlvm.services.export import write_image_strip
from qlvm.services.run_config import RunConfig

logger = logging.getLogger(__name__)

LOCK_NAME = '.lock'
RESOLVED_CONFIG_NAME = 'config.resolved.txt'


def parse_vector(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def parse_int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(',') if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise ConfigError("list must not be empty")
    return values


class QLVMCommand(BaseCommand):
    """所有 qlvm 命令的基类，子类实现 run(config, options)"""
    checkpoint_option = None
    checkpoint_required = True
    requires_seed = False

    def add_arguments(self, parser):
        parser.add_argument('--config', help='key=value 配置文件')
        parser.add_argument('--set', action='append', default=[], dest='overrides', metavar='KEY=VALUE',
                            help='覆盖单个配置项，可重复')
        parser.add_argument('--seed', type=int, help='随机种子')
        parser.add_argument('--output-dir', dest='output_dir', help='输出目录')
        if self.checkpoint_option:
            parser.add_argument(f'--{self.checkpoint_option}', required=self.checkpoint_required,
                                help='训练命令写出的检查点')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            path = options.get(self.checkpoint_option) if self.checkpoint_option else None
            checkpoint = load_checkpoint(path) if path else None
            config = RunConfig.from_sources(
                options['config'], options['overrides'], seed=options['seed'], output_dir=options['output_dir'],
                base=checkpoint.config if checkpoint is not None else None,
            )
            if self.requires_seed:
                config.require_seed()
            self.checkpoint = checkpoint
            self.run(config, options)
        except NumericalError as e:
            logger.error(f"数值错误: {e}")
            raise CommandError(f"numerical failure: {e}", returncode=2) from e
        except (QLVMError, OSError) as e:
            logger.error(f"命令失败: {e}")
            raise CommandError(str(e), returncode=1) from e

    def run(self, config: RunConfig, options: dict):
        raise NotImplementedError

    @contextmanager
    def output_directory(self, config: RunConfig):
        """创建并锁定输出目录，写出最终配置；锁在命令结束后释放"""
        if not config['output_dir']:
            raise ConfigError("an output directory is required (--output-dir or output_dir=...)")
        directory = Path(config['output_dir'])
        directory.mkdir(parents=True, exist_ok=True)
        lock = directory / LOCK_NAME
        try:
            descriptor = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise ConfigError(f"output directory {directory} is locked by another run") from e
        try:
            os.write(descriptor, str(os.getpid()).encode('ascii'))
            os.close(descriptor)
            (directory / RESOLVED_CONFIG_NAME).write_text(config.resolved_text(), encoding='utf-8')
            yield directory
        finally:
            lock.unlink(missing_ok=True)

    def write_images(self, path: Path, images: np.ndarray, dataset: Dataset, columns: Optional[int] = None):
        value_range = (0.0, 1.0) if dataset.value_kind == 'binary' else None
        if write_image_strip(path, images, dataset.image_shape, columns, value_range) is not None:
            self.stdout.write(f"  {path.name}")

    def report(self, message: str):
        self.stdout.write(self.style.SUCCESS(message))


def select_dataset(config: RunConfig, which: str) -> Dataset:
    """all / train / test"""
    if which not in ('all', 'train', 'test'):
        raise ConfigError(f"unknown data split {which!r}, expected all, train or test")
    dataset = config.load_dataset()
    if which == 'all':
        return dataset
    train_set, test_set = config.split_dataset(dataset)
    return train_set if which == 'train' else test_set


def add_split_argument(parser, default: str = 'all'):
    parser.add_argument('--split', default=default, choices=['all', 'train', 'test'], help='使用的数据部分')
