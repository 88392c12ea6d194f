"""
实验编排

把 RunConfig 变成训练好的模型：构建网络、训练（含断点续训）、生成检查点、
在测试集上评估，以及把任意检查点的解码器转成可直接在均匀格点上使用的形式。
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from qlvm.exceptions import CheckpointError, ConfigError
from qlvm.services.analysis import DensityField, aggregate_posterior
from qlvm.services.baselines import (
    GaussianEncoder, evaluate_baseline, qmc_decoder, train_baseline,
)
from qlvm.services.data_service import Checkpoint, Dataset
from qlvm.services.lattice import generate_points
from qlvm.services.net import AdamState, Network, init_network
from qlvm.services.qlvm_service import evaluate_bound, iter_posterior_tables, train
from qlvm.services.run_config import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class FitOutcome:
    kind: str
    networks: Dict[str, Network]
    optimizers: Dict[str, AdamState]
    trace: pd.DataFrame
    epoch: int
    rng: np.random.Generator
    seconds_per_epoch: float

    def checkpoint(self, config: RunConfig) -> Checkpoint:
        return Checkpoint(kind=self.kind, networks=self.networks, optimizers=self.optimizers,
                          config=dict(config.raw), epoch=self.epoch, rng_state=self.rng.bit_generator.state)


@dataclass
class BoundRow:
    estimator: str
    m: int
    n_shifts: int
    mean: float
    std: float


def samples_per_datum(config: RunConfig) -> int:
    """qlvm 为格点点数，vae/iwae 为每个数据点的重要性样本数"""
    if config['model'] == 'qlvm':
        return config.lattice_rule().m
    return config.baseline_config().samples


def fit(config: RunConfig, train_set: Dataset, resume: Optional[Checkpoint] = None,
        on_epoch: Optional[Callable[[int, float], None]] = None) -> FitOutcome:
    """按配置训练 qlvm / vae / iwae，resume 给定时从检查点的 epoch 继续"""
    kind = config['model']
    if resume is not None and resume.kind != kind:
        raise CheckpointError(f"cannot resume a {resume.kind} checkpoint as model={kind}")
    rng = resume.restore_rng() if resume is not None else None
    start_epoch = resume.epoch if resume is not None else 0

    if kind == 'qlvm':
        train_config = config.train_config()
        if resume is not None:
            decoder = resume.networks['decoder']
            optimizer = resume.optimizers.get('decoder')
        else:
            init_seed = np.random.SeedSequence(train_config.seed).spawn(1)[0]
            decoder = init_network(train_config.decoder_spec(train_set.dim), np.random.default_rng(init_seed))
            optimizer = None
        result = train(train_config, train_set, decoder, optimizer, rng, start_epoch, on_epoch)
        return FitOutcome(kind, {'decoder': result.net}, {'decoder': result.optimizer}, result.trace,
                          result.epoch, result.rng, result.seconds_per_epoch)

    baseline_config = config.baseline_config()
    encoder = decoder = optimizers = None
    if resume is not None:
        encoder = GaussianEncoder(resume.networks['encoder'])
        decoder = resume.networks['decoder']
        optimizers = resume.optimizers or None
    result = train_baseline(baseline_config, train_set, encoder, decoder, optimizers, rng, start_epoch, on_epoch)
    return FitOutcome(kind, {'encoder': result.encoder.net, 'decoder': result.decoder}, result.optimizers,
                      result.trace, result.epoch, result.rng, result.seconds_per_epoch)


def lattice_decoder(checkpoint: Checkpoint) -> Network:
    """可直接输入均匀格点的解码器：qlvm 原样返回，基线解码器前接逆正态 CDF"""
    if 'decoder' not in checkpoint.networks:
        raise CheckpointError("checkpoint holds no decoder")
    decoder = checkpoint.networks['decoder']
    return decoder if checkpoint.kind == 'qlvm' else qmc_decoder(decoder)


def check_dimensions(checkpoint: Checkpoint, dataset: Dataset):
    output_dim = checkpoint.networks['decoder'].spec.output_dim
    if dataset.dim != output_dim:
        raise ConfigError(f"dataset {dataset.name} has D={dataset.dim}, checkpoint decoder outputs {output_dim}")


def evaluate_checkpoint(checkpoint: Checkpoint, config: RunConfig, test_set: Dataset,
                        n_shifts: Optional[int] = None, include_qmc: bool = True) -> List[BoundRow]:
    """测试集上的界：QMC 界（基线检查点同时给出自身的 ELBO / IWAE 界）"""
    check_dimensions(checkpoint, test_set)
    n_shifts = n_shifts or config['n_shifts']
    seed = config['seed'] if config['seed'] is not None else 0

    rows = []
    if checkpoint.kind != 'qlvm':
        encoder = GaussianEncoder(checkpoint.networks['encoder'])
        samples = int(config['samples']) or (1 if checkpoint.kind == 'vae' else 10)
        native = evaluate_baseline(checkpoint.kind, encoder, checkpoint.networks['decoder'], test_set, samples, seed)
        rows.append(BoundRow(native.kind, samples, 1, native.mean, 0.0))

    if checkpoint.kind != 'qlvm' and not include_qmc:
        return rows
    rule = config.eval_rule()
    eval_points = generate_points(rule, 'qmc')
    report = evaluate_bound(lattice_decoder(checkpoint), test_set, eval_points, n_shifts, seed,
                            randomize=n_shifts > 1)
    rows.append(BoundRow('qmc', rule.m, report.n_shifts, report.mean, report.std))
    for row in rows:
        logger.info(f"{checkpoint.kind} {row.estimator}(m={row.m}): {row.mean:.6f} ± {row.std:.6f}")
    return rows


def held_out_bound(outcome: FitOutcome, config: RunConfig, test_set: Dataset) -> BoundRow:
    """训练结束后的测试集界：qlvm 用评估格点，基线用自身的界"""
    checkpoint = outcome.checkpoint(config)
    rows = evaluate_checkpoint(checkpoint, config, test_set, n_shifts=1, include_qmc=False)
    return rows[0]


def aggregate_density(checkpoint: Checkpoint, config: RunConfig, dataset: Dataset) -> DensityField:
    """数据集在评估格点上的聚合后验"""
    check_dimensions(checkpoint, dataset)
    eval_points = generate_points(config.eval_rule(), 'qmc')
    return aggregate_posterior(iter_posterior_tables(lattice_decoder(checkpoint), dataset, eval_points))
