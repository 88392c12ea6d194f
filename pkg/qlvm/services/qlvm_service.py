"""
QLVM 服务

格点证据目标（对每个数据点在共享点集上做 log-sum-exp）、逐批随机平移的训练循环、
评估格点上的后验推断以及先验采样。
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from qlvm.exceptions import ConfigError, LatticeError, NumericalError
from qlvm.services.data_service import Dataset
from qlvm.services.lattice import (
    LatticeRule, PointSet, PriorParameter, SAMPLING_MODES, PRIOR_KINDS, generate_points, prior_parameters,
    shift_points,
)
from qlvm.services.net import (
    AdamState, Network, NetworkSpec, adam_step, log_likelihood_matrix, log_likelihood_matrix_vjp,
)
from qlvm.utils import ensure_finite, wrap_unit

logger = logging.getLogger(__name__)

# 评估时每块数据的行数
EVAL_CHUNK = 256

PRIOR_TO_EMBEDDING = {'uniform': 'periodic', 'gaussian': 'gaussian', 'identity': 'identity'}


@dataclass
class QmcEvidence:
    """每个数据点的对数证据估计（nats）"""
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass
class TrainConfig:
    """训练配置

    rule 决定每个数据点使用的隐样本数 m；prior/likelihood 决定解码器的输入嵌入与输出头。
    """
    rule: LatticeRule
    seed: int
    sampling: str = 'rqmc'
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prior: str = 'uniform'
    prior_loc: PriorParameter = 0.0
    prior_scale: PriorParameter = 1.0
    likelihood: str = 'bernoulli'
    variance: float = 0.1
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = 'relu'

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("a seed is mandatory for training")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be positive (got {self.epochs}, {self.batch_size})")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.prior not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior {self.prior!r}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        self.hidden = tuple(int(width) for width in self.hidden)
        self.prior_loc = prior_parameters(self.prior_loc, 'loc')
        self.prior_scale = prior_parameters(self.prior_scale, 'scale')
        for name, values in (('prior_loc', self.prior_loc), ('prior_scale', self.prior_scale)):
            if len(values) not in (1, self.rule.d):
                raise ConfigError(f"{name} needs 1 or {self.rule.d} values, got {len(values)}")

    def decoder_spec(self, output_dim: int) -> NetworkSpec:
        return NetworkSpec(
            latent_dim=self.rule.d,
            widths=self.hidden + (output_dim,),
            embedding=PRIOR_TO_EMBEDDING[self.prior],
            activation=self.activation,
            head=self.likelihood,
            variance=self.variance,
            prior_loc=self.prior_loc,
            prior_scale=self.prior_scale,
        )

    def adam_state(self, net: Network) -> AdamState:
        return AdamState.for_network(net, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass
class TrainResult:
    net: Network
    optimizer: AdamState
    trace: pd.DataFrame
    epoch: int
    rng: np.random.Generator
    wall_seconds: List[float] = field(default_factory=list)

    @property
    def seconds_per_epoch(self) -> float:
        return float(np.mean(self.wall_seconds)) if self.wall_seconds else 0.0


@dataclass
class PosteriorTable:
    """每个数据点在评估点集上的归一化后验权重"""
    points: PointSet
    weights: np.ndarray
    log_weights: np.ndarray


@dataclass
class Embedding:
    """后验的环面均值、众数与集中度"""
    mean: np.ndarray
    mode_index: np.ndarray
    mode: np.ndarray
    resultant: np.ndarray

    @property
    def concentration(self) -> np.ndarray:
        """各坐标合成向量长度的最小值"""
        return self.resultant.min(axis=1)

    def subset(self, rows) -> 'Embedding':
        return Embedding(self.mean[rows], self.mode_index[rows], self.mode[rows], self.resultant[rows])


@dataclass
class BoundReport:
    mean: float
    std: float
    per_shift: np.ndarray
    m: int

    @property
    def n_shifts(self) -> int:
        return len(self.per_shift)


def _as_matrix(dataset: Union[Dataset, np.ndarray]) -> np.ndarray:
    if isinstance(dataset, Dataset):
        return dataset.X
    return np.atleast_2d(np.asarray(dataset, dtype=np.float64))


def _evidence_terms(net: Network, x_batch: np.ndarray, points: PointSet, record: bool):
    if points.m == 0:
        raise LatticeError("empty point set")
    decoded = net.forward(points.points, record=record)
    spec = net.spec
    ll = log_likelihood_matrix(spec.head, decoded, x_batch, spec.variance)
    return decoded, ll


def qmc_log_evidence(net: Network, x_batch: np.ndarray, points: PointSet) -> QmcEvidence:
    """log (1/m) Σ_j p(x_i | z̃_j)，点集被批内所有数据共享

    Args:
        net: 解码器
        x_batch: B x D 数据
        points: 解码器输入域中的 m 个点

    Returns:
        QmcEvidence: 每个数据点的估计
    """
    x_batch = _as_matrix(x_batch)
    _, ll = _evidence_terms(net, x_batch, points, record=False)
    values = logsumexp(ll, axis=1) - np.log(points.m)
    return QmcEvidence(values=ensure_finite(values, 'qmc log evidence'))


def qmc_objective_backward(net: Network, x_batch: np.ndarray, points: PointSet) -> QmcEvidence:
    """计算证据并把 -mean(证据) 的梯度累加进解码器"""
    x_batch = _as_matrix(x_batch)
    decoded, ll = _evidence_terms(net, x_batch, points, record=True)
    lse = logsumexp(ll, axis=1, keepdims=True)
    values = lse[:, 0] - np.log(points.m)
    if not np.all(np.isfinite(values)):
        raise NumericalError("non-finite qmc objective", {'max_logit': float(np.max(np.abs(decoded)))})

    # ∂(-mean LSE)/∂ll_ij = -softmax_j(ll_i)/B
    coefficients = -np.exp(ll - lse) / x_batch.shape[0]
    grad_output = log_likelihood_matrix_vjp(net.spec.head, decoded, x_batch, coefficients, net.spec.variance)
    net.backward(grad_output)
    return QmcEvidence(values=values)


def _max_abs_output(net: Network, points: PointSet) -> float:
    try:
        decoded = net.forward(points.points, record=False)
    except NumericalError:
        return float('nan')
    return float(np.nanmax(np.abs(decoded))) if decoded.size else float('nan')


def train(config: TrainConfig, dataset: Union[Dataset, np.ndarray], net: Network,
          optimizer: Optional[AdamState] = None, rng: Optional[np.random.Generator] = None,
          start_epoch: int = 0, on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """训练 QLVM

    每个小批量抽取一个新的点集（rqmc 下为一次新的随机平移），计算负平均证据，
    反向传播后做一步 Adam。

    Args:
        config: 训练配置
        dataset: 训练数据
        net: 解码器（原地更新）
        optimizer: 续训时的 Adam 状态
        rng: 续训时的随机数发生器
        start_epoch: 已完成的 epoch 数
        on_epoch: 每个 epoch 结束后的回调 (epoch, objective)

    Returns:
        TrainResult: 训练后的网络、优化器状态和逐 epoch 目标值
    """
    X = _as_matrix(dataset)
    n = X.shape[0]
    if n == 0:
        raise ConfigError("training set is empty")
    if X.shape[1] != net.spec.output_dim:
        raise ConfigError(f"data dimension {X.shape[1]} does not match decoder output {net.spec.output_dim}")

    rng = rng if rng is not None else np.random.default_rng(config.seed)
    optimizer = optimizer if optimizer is not None else config.adam_state(net)

    records, wall_seconds = [], []
    epoch = start_epoch
    for epoch in range(start_epoch + 1, config.epochs + 1):
        started = time.monotonic()
        order = rng.permutation(n)
        total = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            batch = X[order[start:start + config.batch_size]]
            points = generate_points(config.rule, config.sampling, rng)
            try:
                evidence = qmc_objective_backward(net, batch, points)
            except NumericalError as exc:
                exc.diagnostics.update({'epoch': epoch, 'batch': batch_index})
                exc.diagnostics.setdefault('max_logit', _max_abs_output(net, points))
                logger.error(f"训练在 epoch {epoch} batch {batch_index} 出现数值错误: {exc}")
                raise
            total -= float(np.sum(evidence.values))
            adam_step(net, optimizer)

        objective = total / n
        elapsed = time.monotonic() - started
        records.append({'epoch': epoch, 'objective': objective})
        wall_seconds.append(elapsed)
        logger.info(f"epoch {epoch}/{config.epochs}: objective={objective:.6f} ({elapsed:.3f}s)")
        if on_epoch is not None:
            on_epoch(epoch, objective)

    trace = pd.DataFrame(records, columns=['epoch', 'objective'])
    return TrainResult(net=net, optimizer=optimizer, trace=trace, epoch=epoch, rng=rng, wall_seconds=wall_seconds)


def posterior_table(net: Network, x_batch: np.ndarray, eval_points: PointSet) -> PosteriorTable:
    """p(z̃_j | x_i) ∝ p(x_i | z̃_j)，在对数域归一化"""
    x_batch = _as_matrix(x_batch)
    _, ll = _evidence_terms(net, x_batch, eval_points, record=False)
    weights, log_weights = normalize_log_weights(ll)
    return PosteriorTable(points=eval_points, weights=weights, log_weights=log_weights)


def normalize_log_weights(ll: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """对数似然矩阵按行归一化为后验权重，返回 (权重, 对数权重)"""
    log_weights = ll - logsumexp(ll, axis=1, keepdims=True)
    weights = np.exp(log_weights)

    row_sums = weights.sum(axis=1)
    if not np.all(np.isfinite(weights)) or np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise NumericalError("posterior rows failed to normalize", {'worst_row_sum': float(np.nanmax(row_sums))})
    return weights, log_weights


def iter_posterior_tables(net: Network, dataset: Union[Dataset, np.ndarray], eval_points: PointSet,
                          chunk: int = EVAL_CHUNK) -> Iterator[PosteriorTable]:
    """按块产生整个数据集的后验表，避免一次性构造 n x m 矩阵"""
    X = _as_matrix(dataset)
    for start in range(0, X.shape[0], chunk):
        yield posterior_table(net, X[start:start + chunk], eval_points)


def embed_dataset(net: Network, dataset: Union[Dataset, np.ndarray], eval_points: PointSet) -> Embedding:
    parts = [embed(table) for table in iter_posterior_tables(net, dataset, eval_points)]
    return Embedding(
        mean=np.concatenate([part.mean for part in parts]),
        mode_index=np.concatenate([part.mode_index for part in parts]),
        mode=np.concatenate([part.mode for part in parts]),
        resultant=np.concatenate([part.resultant for part in parts]),
    )


def embed(table: PosteriorTable) -> Embedding:
    """环面均值（加权圆均值）与众数（最大权重格点，平局取最小下标）"""
    z = table.points.points
    weights = table.weights
    angle = 2.0 * np.pi * z
    cos_sum = weights @ np.cos(angle)
    sin_sum = weights @ np.sin(angle)

    mean = wrap_unit(np.arctan2(sin_sum, cos_sum) / (2.0 * np.pi))
    resultant = np.minimum(np.hypot(cos_sum, sin_sum), 1.0)
    mode_index = np.argmax(weights, axis=1)
    return Embedding(mean=mean, mode_index=mode_index, mode=z[mode_index], resultant=resultant)


def reconstruct(net: Network, embedding: Embedding, use: str = 'mode') -> np.ndarray:
    """解码后验众数或均值"""
    if use not in ('mode', 'mean'):
        raise ConfigError(f"reconstruct uses 'mode' or 'mean', got {use!r}")
    latents = embedding.mode if use == 'mode' else embedding.mean
    return net.predict_mean(latents)


def sample_prior(net: Network, n: int, seed: Optional[int] = None) -> np.ndarray:
    """从先验采样 n 个隐变量并解码（bernoulli 返回概率）"""
    rng = np.random.default_rng(seed)
    latents = rng.random((n, net.spec.latent_dim))
    return net.predict_mean(latents)


def evaluate_bound(net: Network, dataset: Union[Dataset, np.ndarray], eval_points: PointSet,
                   n_shifts: int = 1, seed: Optional[int] = 0, randomize: bool = True) -> BoundReport:
    """测试集上的平均证据下界

    Args:
        net: 解码器
        dataset: 测试数据
        eval_points: 评估格点
        n_shifts: 独立随机平移次数
        seed: 平移的随机种子
        randomize: False 时只在未平移的格点上评估一次

    Returns:
        BoundReport: 各次平移的平均值与标准差
    """
    if n_shifts < 1:
        raise ConfigError(f"n_shifts must be >= 1, got {n_shifts}")
    X = _as_matrix(dataset)
    rng = np.random.default_rng(seed)
    spec = net.spec

    per_shift = []
    for shift_index in range(n_shifts if randomize else 1):
        if randomize:
            points = shift_points(eval_points.points, rng.random(eval_points.d))
        else:
            points = eval_points.points
        decoded = net.forward(points, record=False)
        total = 0.0
        for start in range(0, X.shape[0], EVAL_CHUNK):
            ll = log_likelihood_matrix(spec.head, decoded, X[start:start + EVAL_CHUNK], spec.variance)
            total += float(np.sum(logsumexp(ll, axis=1)))
        value = total / X.shape[0] - np.log(eval_points.m)
        per_shift.append(ensure_finite(value, 'evaluation bound', shift=shift_index))
        logger.debug(f"shift {shift_index}: bound={value:.6f}")

    per_shift = np.asarray(per_shift)
    std = float(np.std(per_shift, ddof=1)) if len(per_shift) > 1 else 0.0
    return BoundReport(mean=float(np.mean(per_shift)), std=std, per_shift=per_shift, m=eval_points.m)
