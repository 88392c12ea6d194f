"""
格点规则服务

秩 1 格点规则（Fibonacci、Korobov）的构造、随机平移以及先验变换（逆变换法）。
所有函数都是输入（含随机种子）的纯函数。
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erfc

from qlvm.exceptions import LatticeError, NumericalError
from qlvm.utils import PROB_EPS

logger = logging.getLogger(__name__)

SAMPLING_MODES = ('mc', 'qmc', 'rqmc')
PRIOR_KINDS = ('uniform', 'gaussian', 'identity')

SeedLike = Union[int, np.random.Generator, None]
PriorParameter = Union[float, Sequence[float]]


@dataclass(frozen=True)
class LatticeRule:
    """秩 1 格点规则 u_j = j*b/m mod 1"""
    m: int
    generator: Tuple[int, ...]
    kind: str = 'korobov'

    @property
    def d(self) -> int:
        return len(self.generator)

    @property
    def base(self) -> int:
        """Korobov 底数 a（一维规则返回 1）"""
        return self.generator[1] if self.d > 1 else 1


@dataclass
class PointSet:
    """一次实现的隐空间样本集合，坐标都在 [0, 1)"""
    points: np.ndarray
    mode: str
    shift: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class PriorTransform:
    """均匀点到解码器输入的变换

    uniform: 平坦环面，原样返回
    gaussian: 逐坐标逆正态 CDF，loc + scale * Φ⁻¹(u)
    identity: 非周期的原样输入

    loc/scale 可以是一个数（所有坐标共用）或每个坐标一个数。
    """
    kind: str = 'uniform'
    loc: PriorParameter = 0.0
    scale: PriorParameter = 1.0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise LatticeError(f"unknown prior transform {self.kind!r}, expected one of {PRIOR_KINDS}")
        object.__setattr__(self, 'loc', prior_parameters(self.loc, 'loc'))
        object.__setattr__(self, 'scale', prior_parameters(self.scale, 'scale'))
        if self.kind == 'gaussian' and not all(value > 0 for value in self.scale):
            raise LatticeError(f"gaussian prior scale must be positive, got {list(self.scale)}")

    def parameters(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        """按维度 d 展开的 (loc, scale)"""
        for name, values in (('loc', self.loc), ('scale', self.scale)):
            if len(values) not in (1, d):
                raise LatticeError(f"prior {name} has {len(values)} entries, expected 1 or {d}")
        return (np.broadcast_to(np.asarray(self.loc, dtype=np.float64), (d,)),
                np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (d,)))


def prior_parameters(value: PriorParameter, name: str = 'value') -> Tuple[float, ...]:
    """标量或序列统一成浮点元组"""
    values = tuple(float(v) for v in np.atleast_1d(np.asarray(value, dtype=np.float64)).ravel())
    if not values:
        raise LatticeError(f"prior {name} must not be empty")
    return values


def fibonacci_numbers(k: int) -> Tuple[int, int]:
    """返回 (Fib(k), Fib(k-1))，Fib(1) = Fib(2) = 1"""
    previous, current = 0, 1
    for _ in range(k - 1):
        previous, current = current, previous + current
    return current, previous


def fibonacci_rule(k: int) -> LatticeRule:
    """构造二维 Fibonacci 格点规则

    Args:
        k: Fibonacci 下标，至少为 3

    Returns:
        LatticeRule: m = Fib(k)，b = [1, Fib(k-1)]
    """
    if k < 3:
        raise LatticeError(f"fibonacci index must be >= 3 (Fib({k}) <= 1 gives a degenerate lattice)")
    m, a = fibonacci_numbers(k)
    return LatticeRule(m=m, generator=(1, a % m), kind='fibonacci')


def fibonacci_index_for(m: int) -> Optional[int]:
    """若 m 是 Fibonacci 数（且 >= 2）返回其下标，否则返回 None"""
    k = 3
    while True:
        value, _ = fibonacci_numbers(k)
        if value == m:
            return k
        if value > m:
            return None
        k += 1


def nearest_fibonacci_index(m: int) -> int:
    """与 m 最接近的 Fibonacci 数的下标（等距时取较大者）"""
    k = 3
    while fibonacci_numbers(k + 1)[0] <= m:
        k += 1
    lower, upper = fibonacci_numbers(k)[0], fibonacci_numbers(k + 1)[0]
    return k if m - lower < upper - m else k + 1


def korobov_rule(m: int, a: int, d: int) -> LatticeRule:
    """构造 Korobov 规则 b = [1, a, a² mod m, ..., a^(d-1) mod m]"""
    if d < 1:
        raise LatticeError(f"lattice dimension must be >= 1, got {d}")
    if not 2 <= a <= m - 1:
        raise LatticeError(f"korobov base a={a} outside [2, {m - 1}] for m={m}")
    generator = tuple(pow(a, power, m) for power in range(d))
    return LatticeRule(m=m, generator=generator, kind='korobov')


def _min_squared_wrapped_distance(m: int, generator: np.ndarray) -> int:
    """格点间最小环面距离的平方（以 1/m 为单位的整数）

    格点在模 1 加法下构成群，所以两两最小距离等于非零点到原点的最小距离。
    """
    j = np.arange(1, m, dtype=np.int64)[:, None]
    residues = (j * generator[None, :]) % m
    wrapped = np.minimum(residues, m - residues)
    return int(np.min(np.sum(wrapped * wrapped, axis=1)))


def korobov_search(m: int, d: int) -> LatticeRule:
    """穷举搜索 Korobov 底数，使点间最小环面距离最大，平局取最小的 a"""
    if m < 3:
        raise LatticeError(f"korobov search needs m >= 3, got {m}")
    if d < 1:
        raise LatticeError(f"lattice dimension must be >= 1, got {d}")

    best_a, best_score = 2, -1
    for a in range(2, m):
        generator = np.array([pow(a, power, m) for power in range(d)], dtype=np.int64)
        score = _min_squared_wrapped_distance(m, generator)
        if score > best_score:
            best_a, best_score = a, score

    logger.debug(f"korobov_search(m={m}, d={d}) -> a={best_a}, min distance={np.sqrt(best_score) / m:.6f}")
    return korobov_rule(m, best_a, d)


def lattice_points(rule: LatticeRule) -> np.ndarray:
    """未平移的格点 u_j = (j*b mod m)/m，j = 0..m-1（含原点）"""
    j = np.arange(rule.m, dtype=np.int64)[:, None]
    generator = np.asarray(rule.generator, dtype=np.int64)[None, :]
    return ((j * generator) % rule.m).astype(np.float64) / rule.m


def shift_points(points: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """随机平移 z = u + Δ - floor(u + Δ)"""
    shifted = points + np.asarray(shift, dtype=np.float64)[None, :]
    return shifted - np.floor(shifted)


def generate_points(rule: LatticeRule, mode: str = 'rqmc', seed: SeedLike = None,
                    shift: Optional[np.ndarray] = None) -> PointSet:
    """按采样模式生成点集

    Args:
        rule: 格点规则
        mode: mc（独立均匀点）、qmc（固定格点）、rqmc（随机平移格点）
        seed: 整数种子或已有的 Generator；qmc 模式忽略
        shift: 显式给定的平移量，仅 rqmc 模式使用，给定时不消耗随机数

    Returns:
        PointSet: m x d 的点集
    """
    if mode not in SAMPLING_MODES:
        raise LatticeError(f"unknown sampling mode {mode!r}, expected one of {SAMPLING_MODES}")

    if mode == 'qmc':
        return PointSet(points=lattice_points(rule), mode=mode)

    rng = np.random.default_rng(seed)
    if mode == 'mc':
        return PointSet(points=rng.random((rule.m, rule.d)), mode=mode)

    if shift is None:
        shift = rng.random(rule.d)
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != (rule.d,):
        raise LatticeError(f"shift must have {rule.d} coordinates, got shape {shift.shape}")
    return PointSet(points=shift_points(lattice_points(rule), shift), mode=mode, shift=shift)


# Acklam 有理逼近系数
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)
_P_LOW = 0.02425
_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)


def _polyval(coefficients, x):
    result = np.zeros_like(x)
    for c in coefficients:
        result = result * x + c
    return result


def _lower_tail_ppf(q: np.ndarray) -> np.ndarray:
    """q ∈ (0, 0.5] 上的逆正态 CDF（结果 <= 0）"""
    x = np.empty_like(q)

    tail = q < _P_LOW
    if np.any(tail):
        t = np.sqrt(-2.0 * np.log(q[tail]))
        x[tail] = _polyval(_ACKLAM_C, t) / (_polyval(_ACKLAM_D, t) * t + 1.0)

    central = ~tail
    if np.any(central):
        r = q[central] - 0.5
        s = r * r
        x[central] = _polyval(_ACKLAM_A, s) * r / (_polyval(_ACKLAM_B, s) * s + 1.0)

    # 一步牛顿修正：Φ(x) = erfc(-x/√2)/2
    error = 0.5 * erfc(-x / _SQRT2) - q
    density = np.exp(-0.5 * x * x) / _SQRT2PI
    return x - error / density


def norm_ppf(u: np.ndarray) -> np.ndarray:
    """标准正态逆 CDF，对 u=0.5 严格奇对称

    先对 min(u, 1-u) 求下尾，再按对称性取符号；u 需在 (0, 1) 内。
    """
    u = np.asarray(u, dtype=np.float64)
    q = np.minimum(u, 1.0 - u)
    x = _lower_tail_ppf(q)
    return np.where(u > 0.5, -x, x)


def norm_ppf_derivative(u: np.ndarray) -> np.ndarray:
    """dΦ⁻¹/du = 1/φ(Φ⁻¹(u))"""
    x = norm_ppf(u)
    return _SQRT2PI * np.exp(0.5 * x * x)


def apply_prior(points: Union[PointSet, np.ndarray], transform: PriorTransform) -> np.ndarray:
    """把均匀点映射为解码器输入

    Args:
        points: PointSet 或 n x d 数组
        transform: 先验变换

    Returns:
        np.ndarray: 变换后的坐标
    """
    values = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    if transform.kind in ('uniform', 'identity'):
        return values

    loc, scale = transform.parameters(values.shape[-1])
    clamped = np.clip(values, PROB_EPS, 1.0 - PROB_EPS)
    transformed = loc + scale * norm_ppf(clamped)
    if not np.all(np.isfinite(transformed)):
        raise NumericalError("gaussian inverse CDF produced non-finite values")
    return transformed


def prior_transform_derivative(values: np.ndarray, transform: PriorTransform) -> np.ndarray:
    """先验变换逐坐标导数，夹断区域导数为 0"""
    values = np.asarray(values, dtype=np.float64)
    if transform.kind in ('uniform', 'identity'):
        return np.ones_like(values)
    _, scale = transform.parameters(values.shape[-1])
    inside = (values > PROB_EPS) & (values < 1.0 - PROB_EPS)
    clamped = np.clip(values, PROB_EPS, 1.0 - PROB_EPS)
    return np.where(inside, scale * norm_ppf_derivative(clamped), 0.0)
