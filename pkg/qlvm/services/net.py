"""
前馈网络引擎

参数以一维 float64 数组存放（每层权重/偏置是它的视图），梯度累加器与之同形。
前向计算记录中间量，反向传播把梯度累加进累加器并返回对隐变量输入的梯度，
Adam 原地更新参数后清零累加器。
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from qlvm.exceptions import ConfigError, DataFormatError, GradientError
from qlvm.services.lattice import (
    PriorParameter, PriorTransform, apply_prior, prior_parameters, prior_transform_derivative,
)
from qlvm.utils import PROB_EPS, ensure_finite, wrap_unit

logger = logging.getLogger(__name__)

EMBEDDINGS = ('periodic', 'identity', 'gaussian')
ACTIVATIONS = ('relu', 'tanh')
HEADS = ('bernoulli', 'gaussian', 'linear')

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class NetworkSpec:
    """网络结构描述

    Args:
        latent_dim: 输入（隐变量）维度 d
        widths: 每个仿射层的输出宽度，最后一个是输出维度
        embedding: periodic（sin/cos 2πz）、identity、gaussian（先逆正态 CDF）
        activation: 隐藏层非线性 relu 或 tanh
        head: bernoulli（输出 logits）、gaussian（输出均值，方差固定）、linear（编码器原始输出）
        variance: gaussian 头的固定方差 σ²
        prior_loc, prior_scale: gaussian 嵌入的位置与尺度，一个数或每个隐坐标一个数
    """
    latent_dim: int
    widths: Tuple[int, ...]
    embedding: str = 'periodic'
    activation: str = 'relu'
    head: str = 'bernoulli'
    variance: float = 0.1
    prior_loc: PriorParameter = 0.0
    prior_scale: PriorParameter = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        object.__setattr__(self, 'prior_loc', prior_parameters(self.prior_loc, 'loc'))
        object.__setattr__(self, 'prior_scale', prior_parameters(self.prior_scale, 'scale'))
        if not self.widths:
            raise ConfigError("network needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"layer widths must be >= 1, got {list(self.widths)}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.embedding not in EMBEDDINGS:
            raise ConfigError(f"unknown embedding {self.embedding!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown output head {self.head!r}")
        if self.head == 'gaussian' and not self.variance > 0:
            raise ConfigError(f"gaussian head variance must be positive, got {self.variance}")
        for name, values in (('prior_loc', self.prior_loc), ('prior_scale', self.prior_scale)):
            if len(values) not in (1, self.latent_dim):
                raise ConfigError(f"{name} needs 1 or {self.latent_dim} values, got {len(values)}")

    @property
    def input_width(self) -> int:
        return 2 * self.latent_dim if self.embedding == 'periodic' else self.latent_dim

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        fan_ins = (self.input_width,) + self.widths[:-1]
        return list(zip(fan_ins, self.widths))

    @property
    def n_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)

    @property
    def prior_transform(self) -> PriorTransform:
        if self.embedding == 'gaussian':
            return PriorTransform('gaussian', self.prior_loc, self.prior_scale)
        if self.embedding == 'identity':
            return PriorTransform('identity')
        return PriorTransform('uniform')

    def to_dict(self) -> Dict[str, str]:
        return {
            'latent_dim': str(self.latent_dim),
            'widths': ','.join(str(w) for w in self.widths),
            'embedding': self.embedding,
            'activation': self.activation,
            'head': self.head,
            'variance': repr(float(self.variance)),
            'prior_loc': ','.join(repr(v) for v in self.prior_loc),
            'prior_scale': ','.join(repr(v) for v in self.prior_scale),
        }

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> 'NetworkSpec':
        return cls(
            latent_dim=int(values['latent_dim']),
            widths=tuple(int(w) for w in values['widths'].split(',')),
            embedding=values['embedding'],
            activation=values['activation'],
            head=values['head'],
            variance=float(values['variance']),
            prior_loc=tuple(float(v) for v in values.get('prior_loc', '0.0').split(',')),
            prior_scale=tuple(float(v) for v in values.get('prior_scale', '1.0').split(',')),
        )


class Network:
    """带梯度累加器的多层感知机"""

    def __init__(self, spec: NetworkSpec, params: Optional[np.ndarray] = None):
        self.spec = spec
        if params is None:
            params = np.zeros(spec.n_params, dtype=np.float64)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (spec.n_params,):
            raise ConfigError(f"expected {spec.n_params} parameters, got shape {params.shape}")
        self.params = params
        self.grads = np.zeros_like(params)
        self._cache = None

    def _views(self, flat: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        views, offset = [], 0
        for fan_in, fan_out in self.spec.layer_shapes:
            weight = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            bias = flat[offset:offset + fan_out]
            offset += fan_out
            views.append((weight, bias))
        return views

    @property
    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """每层 (W, b)，都是 params 的视图"""
        return self._views(self.params)

    @property
    def grad_layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return self._views(self.grads)

    def zero_grad(self):
        self.grads[...] = 0.0

    def copy(self) -> 'Network':
        return Network(self.spec, self.params.copy())

    def with_embedding(self, embedding: str, prior_loc: PriorParameter = 0.0,
                       prior_scale: PriorParameter = 1.0) -> 'Network':
        """换一种输入嵌入，参数与梯度数组共享"""
        spec = replace(self.spec, embedding=embedding, prior_loc=prior_loc, prior_scale=prior_scale)
        if spec.input_width != self.spec.input_width:
            raise ConfigError(f"embedding {embedding!r} changes the input width of this network")
        view = Network(spec, self.params)
        view.grads = self.grads
        return view

    def _embed(self, z: np.ndarray) -> np.ndarray:
        embedding = self.spec.embedding
        if embedding == 'periodic':
            angle = TWO_PI * wrap_unit(z)
            return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)
        if embedding == 'gaussian':
            return apply_prior(z, self.spec.prior_transform)
        return z

    def _embed_backward(self, z: np.ndarray, grad_features: np.ndarray) -> np.ndarray:
        embedding = self.spec.embedding
        d = self.spec.latent_dim
        if embedding == 'periodic':
            angle = TWO_PI * wrap_unit(z)
            return TWO_PI * (grad_features[:, :d] * np.cos(angle) - grad_features[:, d:] * np.sin(angle))
        if embedding == 'gaussian':
            return grad_features * prior_transform_derivative(z, self.spec.prior_transform)
        return grad_features

    def forward(self, z: np.ndarray, record: bool = True) -> np.ndarray:
        """前向计算，返回输出头之前的原始输出（bernoulli 为 logits）

        Args:
            z: n x d 的隐变量
            record: 是否记录中间量供 backward 使用

        Returns:
            np.ndarray: n x D 的输出
        """
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ConfigError(f"expected latent input of shape (n, {self.spec.latent_dim}), got {z.shape}")

        hidden = self._embed(z)
        inputs, activations = [], []
        layers = self.layers
        for index, (weight, bias) in enumerate(layers):
            inputs.append(hidden)
            pre = hidden @ weight + bias
            if index == len(layers) - 1:
                hidden = pre
                break
            hidden = np.maximum(pre, 0.0) if self.spec.activation == 'relu' else np.tanh(pre)
            activations.append(hidden)

        if record:
            self._cache = (z, inputs, activations)
        return hidden

    def predict_mean(self, z: np.ndarray) -> np.ndarray:
        """解码均值：bernoulli 返回 sigmoid 概率，其余返回原始输出"""
        output = self.forward(z, record=False)
        return expit(output) if self.spec.head == 'bernoulli' else output

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        """反向传播，把 ∂loss/∂θ 累加进 grads

        Args:
            grad_output: 损失对原始输出的梯度，形状与最近一次 forward 的输出相同

        Returns:
            np.ndarray: 损失对隐变量输入 z 的梯度
        """
        if self._cache is None:
            raise GradientError("backward called before a recorded forward pass")
        z, inputs, activations = self._cache
        grad = np.asarray(grad_output, dtype=np.float64)

        layers = self.layers
        grad_layers = self.grad_layers
        for index in range(len(layers) - 1, -1, -1):
            weight, _ = layers[index]
            grad_weight, grad_bias = grad_layers[index]
            grad_weight += inputs[index].T @ grad
            grad_bias += grad.sum(axis=0)
            grad = grad @ weight.T
            if index > 0:
                activated = activations[index - 1]
                if self.spec.activation == 'relu':
                    grad = grad * (activated > 0.0)
                else:
                    grad = grad * (1.0 - activated * activated)

        return self._embed_backward(z, grad)


def init_network(spec: NetworkSpec, seed: Optional[int] = None) -> Network:
    """均匀 fan-in/fan-out 初始化，偏置为 0，给定种子时结果确定"""
    if not spec.widths:
        raise ConfigError("network needs at least one layer")
    rng = np.random.default_rng(seed)
    net = Network(spec)
    for (weight, _), (fan_in, fan_out) in zip(net.layers, spec.layer_shapes):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight[...] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    logger.debug(f"初始化网络: {spec.input_width} -> {list(spec.widths)}, 参数 {spec.n_params} 个")
    return net


# ---- 似然头 ----

def bernoulli_probabilities(logits: np.ndarray) -> np.ndarray:
    return np.clip(expit(logits), PROB_EPS, 1.0 - PROB_EPS)


def _check_targets(head: str, decoded: np.ndarray, x: np.ndarray):
    if decoded.shape[-1] != x.shape[-1]:
        raise DataFormatError(f"data dimension {x.shape[-1]} does not match decoder output {decoded.shape[-1]}")
    if head == 'bernoulli' and (np.any(x < 0.0) or np.any(x > 1.0)):
        raise DataFormatError("bernoulli targets must lie in [0, 1]")
    if head not in ('bernoulli', 'gaussian'):
        raise ConfigError(f"head {head!r} has no likelihood")


def log_likelihood_matrix(head: str, decoded: np.ndarray, x: np.ndarray, variance: float = 0.1) -> np.ndarray:
    """所有 (数据, 隐点) 组合的条件对数似然

    Args:
        head: bernoulli 或 gaussian
        decoded: M x D 原始解码输出
        x: B x D 数据
        variance: gaussian 头的 σ²

    Returns:
        np.ndarray: B x M，单位 nats
    """
    decoded = np.asarray(decoded, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_targets(head, decoded, x)

    if head == 'bernoulli':
        probs = bernoulli_probabilities(decoded)
        result = x @ np.log(probs).T + (1.0 - x) @ np.log1p(-probs).T
    else:
        dim = x.shape[1]
        squared = (np.sum(x * x, axis=1)[:, None] - 2.0 * (x @ decoded.T)
                   + np.sum(decoded * decoded, axis=1)[None, :])
        result = -0.5 * dim * np.log(TWO_PI * variance) - np.maximum(squared, 0.0) / (2.0 * variance)
    return ensure_finite(result, 'log likelihood')


def log_likelihood_matrix_vjp(head: str, decoded: np.ndarray, x: np.ndarray, coefficients: np.ndarray,
                              variance: float = 0.1) -> np.ndarray:
    """Σ_ij C_ij · ∂log p(x_i|z_j)/∂decoded_j，返回 M x D"""
    column_mass = coefficients.sum(axis=0)[:, None]
    if head == 'bernoulli':
        probs = expit(decoded)
        inside = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
        return (coefficients.T @ x - column_mass * probs) * inside
    return (coefficients.T @ x - column_mass * decoded) / variance


def log_likelihood_paired(head: str, decoded: np.ndarray, x: np.ndarray, variance: float = 0.1) -> np.ndarray:
    """逐行配对的条件对数似然 log p(x_n | z_n)，返回长度 N 的向量"""
    decoded = np.asarray(decoded, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_targets(head, decoded, x)

    if head == 'bernoulli':
        probs = bernoulli_probabilities(decoded)
        result = np.sum(x * np.log(probs) + (1.0 - x) * np.log1p(-probs), axis=1)
    else:
        residual = x - decoded
        result = np.sum(-0.5 * np.log(TWO_PI * variance) - residual * residual / (2.0 * variance), axis=1)
    return ensure_finite(result, 'log likelihood')


def log_likelihood_paired_vjp(head: str, decoded: np.ndarray, x: np.ndarray, coefficients: np.ndarray,
                              variance: float = 0.1) -> np.ndarray:
    """Σ_n c_n · ∂log p(x_n|z_n)/∂decoded_n，返回 N x D"""
    coefficients = coefficients[:, None]
    if head == 'bernoulli':
        probs = expit(decoded)
        inside = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
        return coefficients * (x - probs) * inside
    return coefficients * (x - decoded) / variance


def log_likelihood(head: str, decoded: np.ndarray, x: np.ndarray, variance: float = 0.1) -> float:
    """单个数据点的条件对数似然（nats）"""
    decoded = np.atleast_2d(np.asarray(decoded, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return float(log_likelihood_paired(head, decoded, x, variance)[0])


# ---- 优化器 ----

@dataclass
class AdamState:
    """Adam 一阶/二阶矩与步数"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    @classmethod
    def for_network(cls, net: Network, **hyperparameters) -> 'AdamState':
        return cls(m=np.zeros_like(net.params), v=np.zeros_like(net.params), **hyperparameters)


def adam_step(net: Network, state: AdamState) -> Tuple[Network, AdamState]:
    """带偏差修正的 Adam 更新，之后清零梯度累加器"""
    if state.m is None:
        state.m = np.zeros_like(net.params)
        state.v = np.zeros_like(net.params)
    state.t += 1

    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    grad = net.grads

    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)

    net.params -= (state.lr / bias1) * state.m / (np.sqrt(state.v / bias2) + state.eps)
    ensure_finite(net.params, 'parameters', step=state.t)
    net.zero_grad()
    return net, state
