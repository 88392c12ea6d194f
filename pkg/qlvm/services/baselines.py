"""
VAE / IWAE 基线

高斯编码器 + 与 QLVM 相同隐藏层的解码器（输入层为非周期的 identity 嵌入），
先验为标准正态，重参数化采样，ELBO 与 IWAE 界及其梯度。
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from qlvm.exceptions import ConfigError, NumericalError
from qlvm.services.data_service import Dataset
from qlvm.services.net import (
    AdamState, Network, NetworkSpec, adam_step, init_network, log_likelihood_paired, log_likelihood_paired_vjp,
)
from qlvm.utils import ensure_finite

logger = logging.getLogger(__name__)

MODEL_KINDS = ('vae', 'iwae')
BOUND_KINDS = {'vae': 'elbo', 'iwae': 'iwae'}

LOG_VARIANCE_CLAMP = 10.0
HALF_LOG_TWO_PI = 0.5 * np.log(2.0 * np.pi)
EVAL_CHUNK = 256


@dataclass
class GaussianEncoder:
    """q(z|x) = N(μ(x), diag exp(lv(x)))，网络输出前 d 列为 μ，后 d 列为 lv"""
    net: Network

    @property
    def latent_dim(self) -> int:
        return self.net.spec.output_dim // 2

    def encode(self, x: np.ndarray, record: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """返回 (μ, 夹断后的 lv, 夹断前的 lv)"""
        output = self.net.forward(x, record=record)
        d = self.latent_dim
        raw = output[:, d:]
        return output[:, :d], np.clip(raw, -LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP), raw


@dataclass
class BoundEstimate:
    values: np.ndarray
    kind: str
    m: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def encoder_spec(data_dim: int, latent_dim: int, hidden: Tuple[int, ...] = (64, 64)) -> NetworkSpec:
    return NetworkSpec(latent_dim=data_dim, widths=tuple(hidden) + (2 * latent_dim,),
                       embedding='identity', activation='tanh', head='linear')


def matched_decoder_spec(spec: NetworkSpec) -> NetworkSpec:
    """与给定解码器隐藏层相同、输入为非周期 identity 嵌入的基线解码器"""
    return NetworkSpec(latent_dim=spec.latent_dim, widths=spec.widths, embedding='identity',
                       activation=spec.activation, head=spec.head, variance=spec.variance)


def qmc_decoder(decoder: Network) -> Network:
    """在基线解码器前接逆正态 CDF，使其可以直接用格点（均匀点）评估"""
    return decoder.with_embedding('gaussian', 0.0, 1.0)


def reparameterize(mean: np.ndarray, log_variance: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """z = μ + exp(lv/2)·ε"""
    return np.asarray(mean) + np.exp(0.5 * np.asarray(log_variance)) * np.asarray(noise)


def kl_to_standard_normal(mean: np.ndarray, log_variance: np.ndarray) -> np.ndarray:
    """KL(N(μ, e^lv) || N(0, I))，对最后一维求和"""
    mean = np.asarray(mean, dtype=np.float64)
    log_variance = np.asarray(log_variance, dtype=np.float64)
    return 0.5 * np.sum(np.exp(log_variance) + mean * mean - 1.0 - log_variance, axis=-1)


def _draw_noise(rng: np.random.Generator, batch: int, m: int, d: int) -> np.ndarray:
    return rng.standard_normal((batch, m, d))


def _sample_terms(encoder: GaussianEncoder, decoder: Network, x: np.ndarray, noise: np.ndarray, record: bool):
    mean, log_variance, raw = encoder.encode(x, record=record)
    batch, m, d = noise.shape
    if batch != x.shape[0] or d != encoder.latent_dim:
        raise ConfigError(f"noise shape {noise.shape} does not match batch {x.shape[0]} / latent dim {encoder.latent_dim}")

    z = reparameterize(mean[:, None, :], log_variance[:, None, :], noise)
    decoded = decoder.forward(z.reshape(batch * m, d), record=record)
    x_repeated = np.repeat(x, m, axis=0)
    spec = decoder.spec
    ll = log_likelihood_paired(spec.head, decoded, x_repeated, spec.variance).reshape(batch, m)
    return {
        'mean': mean, 'log_variance': log_variance, 'raw': raw, 'z': z, 'decoded': decoded,
        'x_repeated': x_repeated, 'll': ll,
    }


def log_importance_weights(encoder: GaussianEncoder, decoder: Network, x: np.ndarray,
                           noise: np.ndarray) -> np.ndarray:
    """log w = log p(x|z) + log p(z) - log q(z|x)，形状 B x m"""
    terms = _sample_terms(encoder, decoder, np.atleast_2d(x), noise, record=False)
    return _log_weights(terms, noise)


def _log_weights(terms: dict, noise: np.ndarray) -> np.ndarray:
    z = terms['z']
    log_prior = -np.sum(HALF_LOG_TWO_PI + 0.5 * z * z, axis=2)
    log_posterior = -np.sum(HALF_LOG_TWO_PI + 0.5 * terms['log_variance'][:, None, :] + 0.5 * noise * noise, axis=2)
    return terms['ll'] + log_prior - log_posterior


def _noise_for(x: np.ndarray, encoder: GaussianEncoder, m: int, seed, noise: Optional[np.ndarray]) -> np.ndarray:
    if m < 1:
        raise ConfigError(f"sample count must be >= 1, got {m}")
    if noise is None:
        noise = _draw_noise(np.random.default_rng(seed), x.shape[0], m, encoder.latent_dim)
    return np.asarray(noise, dtype=np.float64)


def elbo(encoder: GaussianEncoder, decoder: Network, x_batch: np.ndarray, m: int = 1,
         seed=None, noise: Optional[np.ndarray] = None) -> BoundEstimate:
    """每个数据点 m 个重参数化样本的平均重构项减去闭式 KL"""
    x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    noise = _noise_for(x, encoder, m, seed, noise)
    terms = _sample_terms(encoder, decoder, x, noise, record=False)
    values = terms['ll'].mean(axis=1) - kl_to_standard_normal(terms['mean'], terms['log_variance'])
    return BoundEstimate(values=ensure_finite(values, 'elbo'), kind='elbo', m=noise.shape[1])


def iwae_bound(encoder: GaussianEncoder, decoder: Network, x_batch: np.ndarray, m: int = 10,
               seed=None, noise: Optional[np.ndarray] = None) -> BoundEstimate:
    """LSE_j(log w_j) - log m，m=1 时就是单样本 ELBO 被积项"""
    x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    noise = _noise_for(x, encoder, m, seed, noise)
    terms = _sample_terms(encoder, decoder, x, noise, record=False)
    values = logsumexp(_log_weights(terms, noise), axis=1) - np.log(noise.shape[1])
    return BoundEstimate(values=ensure_finite(values, 'iwae bound'), kind='iwae', m=noise.shape[1])


def bound_backward(kind: str, encoder: GaussianEncoder, decoder: Network, x_batch: np.ndarray,
                   noise: np.ndarray) -> BoundEstimate:
    """计算界并把 -mean(界) 对编码器、解码器参数的梯度累加进各自的累加器

    Args:
        kind: vae（ELBO）或 iwae
        encoder: 编码器
        decoder: 解码器
        x_batch: B x D 数据
        noise: B x m x d 标准正态噪声

    Returns:
        BoundEstimate: 每个数据点的界
    """
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    noise = np.asarray(noise, dtype=np.float64)
    batch, m, d = noise.shape
    terms = _sample_terms(encoder, decoder, x, noise, record=True)
    mean, log_variance, z = terms['mean'], terms['log_variance'], terms['z']
    spec = decoder.spec

    if kind == 'vae':
        values = terms['ll'].mean(axis=1) - kl_to_standard_normal(mean, log_variance)
        coefficients = np.full(batch * m, -1.0 / (batch * m))
        grad_decoded = log_likelihood_paired_vjp(spec.head, terms['decoded'], terms['x_repeated'], coefficients,
                                                 spec.variance)
        grad_z = decoder.backward(grad_decoded).reshape(batch, m, d)
        grad_mean = grad_z.sum(axis=1) + mean / batch
        grad_log_variance = (np.sum(grad_z * 0.5 * (z - mean[:, None, :]), axis=1)
                             + 0.5 * (np.exp(log_variance) - 1.0) / batch)
    else:
        log_weights = _log_weights(terms, noise)
        values = logsumexp(log_weights, axis=1) - np.log(m)
        normalized = softmax(log_weights, axis=1)
        coefficients = (-normalized / batch).reshape(batch * m)
        grad_decoded = log_likelihood_paired_vjp(spec.head, terms['decoded'], terms['x_repeated'], coefficients,
                                                 spec.variance)
        grad_z = decoder.backward(grad_decoded).reshape(batch, m, d)
        grad_z = grad_z + normalized[:, :, None] * z / batch
        grad_mean = grad_z.sum(axis=1)
        grad_log_variance = np.sum(grad_z * 0.5 * (z - mean[:, None, :]), axis=1) - 0.5 / batch

    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite {BOUND_KINDS[kind]} objective",
                             {'max_logit': float(np.max(np.abs(terms['decoded'])))})

    inside = np.abs(terms['raw']) < LOG_VARIANCE_CLAMP
    encoder.net.backward(np.concatenate([grad_mean, grad_log_variance * inside], axis=1))
    return BoundEstimate(values=values, kind=BOUND_KINDS[kind], m=m)


@dataclass
class BaselineConfig:
    """基线训练配置，vae 默认每个数据点 1 个样本，iwae 默认 10 个"""
    kind: str
    latent_dim: int
    seed: int
    samples: Optional[int] = None
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    likelihood: str = 'bernoulli'
    variance: float = 0.1
    hidden: Tuple[int, ...] = (64, 64)
    encoder_hidden: Tuple[int, ...] = (64, 64)
    activation: str = 'relu'

    def __post_init__(self):
        if self.kind == 'elbo':
            self.kind = 'vae'
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.seed is None:
            raise ConfigError("a seed is mandatory for training")
        if self.samples is None:
            self.samples = 1 if self.kind == 'vae' else 10
        if self.samples < 1 or self.epochs < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("samples, epochs, batch_size and latent_dim must be positive")
        self.hidden = tuple(int(width) for width in self.hidden)
        self.encoder_hidden = tuple(int(width) for width in self.encoder_hidden)

    def decoder_spec(self, output_dim: int) -> NetworkSpec:
        return NetworkSpec(latent_dim=self.latent_dim, widths=self.hidden + (output_dim,), embedding='identity',
                           activation=self.activation, head=self.likelihood, variance=self.variance)

    def encoder_spec(self, data_dim: int) -> NetworkSpec:
        return encoder_spec(data_dim, self.latent_dim, self.encoder_hidden)

    def build(self, data_dim: int) -> Tuple[GaussianEncoder, Network]:
        """按种子初始化编码器与解码器"""
        seeds = np.random.SeedSequence(self.seed).spawn(2)
        encoder = GaussianEncoder(init_network(self.encoder_spec(data_dim), np.random.default_rng(seeds[0])))
        decoder = init_network(self.decoder_spec(data_dim), np.random.default_rng(seeds[1]))
        return encoder, decoder

    def adam_state(self, net: Network) -> AdamState:
        return AdamState.for_network(net, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass
class BaselineResult:
    encoder: GaussianEncoder
    decoder: Network
    optimizers: Dict[str, AdamState]
    trace: pd.DataFrame
    epoch: int
    rng: np.random.Generator
    wall_seconds: List[float] = field(default_factory=list)

    @property
    def seconds_per_epoch(self) -> float:
        return float(np.mean(self.wall_seconds)) if self.wall_seconds else 0.0


def train_baseline(config: BaselineConfig, dataset: Union[Dataset, np.ndarray],
                   encoder: Optional[GaussianEncoder] = None, decoder: Optional[Network] = None,
                   optimizers: Optional[Dict[str, AdamState]] = None, rng: Optional[np.random.Generator] = None,
                   start_epoch: int = 0, on_epoch: Optional[Callable[[int, float], None]] = None) -> BaselineResult:
    """联合训练编码器与解码器，每个 epoch 记录平均负界

    Args:
        config: 基线配置
        dataset: 训练数据
        encoder: 续训时的编码器，None 时按种子初始化
        decoder: 续训时的解码器
        optimizers: {'encoder': AdamState, 'decoder': AdamState}
        rng: 续训时的随机数发生器
        start_epoch: 已完成的 epoch 数
        on_epoch: 每个 epoch 结束后的回调 (epoch, objective)

    Returns:
        BaselineResult: 训练结果
    """
    X = dataset.X if isinstance(dataset, Dataset) else np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise ConfigError("training set is empty")
    if encoder is None or decoder is None:
        encoder, decoder = config.build(X.shape[1])
    if X.shape[1] != decoder.spec.output_dim:
        raise ConfigError(f"data dimension {X.shape[1]} does not match decoder output {decoder.spec.output_dim}")

    rng = rng if rng is not None else np.random.default_rng(config.seed)
    optimizers = optimizers or {'encoder': config.adam_state(encoder.net), 'decoder': config.adam_state(decoder)}

    records, wall_seconds = [], []
    epoch = start_epoch
    for epoch in range(start_epoch + 1, config.epochs + 1):
        started = time.monotonic()
        order = rng.permutation(n)
        total = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            batch = X[order[start:start + config.batch_size]]
            noise = _draw_noise(rng, batch.shape[0], config.samples, config.latent_dim)
            try:
                estimate = bound_backward(config.kind, encoder, decoder, batch, noise)
            except NumericalError as exc:
                exc.diagnostics.update({'epoch': epoch, 'batch': batch_index})
                logger.error(f"{config.kind} 训练在 epoch {epoch} batch {batch_index} 出现数值错误: {exc}")
                raise
            total -= float(np.sum(estimate.values))
            adam_step(encoder.net, optimizers['encoder'])
            adam_step(decoder, optimizers['decoder'])

        objective = total / n
        elapsed = time.monotonic() - started
        records.append({'epoch': epoch, 'objective': objective})
        wall_seconds.append(elapsed)
        logger.info(f"{config.kind} epoch {epoch}/{config.epochs}: objective={objective:.6f} ({elapsed:.3f}s)")
        if on_epoch is not None:
            on_epoch(epoch, objective)

    trace = pd.DataFrame(records, columns=['epoch', 'objective'])
    return BaselineResult(encoder=encoder, decoder=decoder, optimizers=optimizers, trace=trace, epoch=epoch,
                          rng=rng, wall_seconds=wall_seconds)


def evaluate_baseline(kind: str, encoder: GaussianEncoder, decoder: Network, dataset: Union[Dataset, np.ndarray],
                      m: int, seed: Optional[int] = 0) -> BoundEstimate:
    """分块计算整个测试集的原生界（vae 为 ELBO，iwae 为 IWAE 界）"""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    X = dataset.X if isinstance(dataset, Dataset) else np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    rng = np.random.default_rng(seed)
    bound = elbo if kind == 'vae' else iwae_bound
    values = []
    for start in range(0, X.shape[0], EVAL_CHUNK):
        chunk = X[start:start + EVAL_CHUNK]
        noise = _draw_noise(rng, chunk.shape[0], m, encoder.latent_dim)
        values.append(bound(encoder, decoder, chunk, m, noise=noise).values)
    return BoundEstimate(values=np.concatenate(values), kind=BOUND_KINDS[kind], m=m)
