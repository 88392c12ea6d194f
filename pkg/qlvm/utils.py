import logging
from typing import Any, Dict

import numpy as np

from qlvm.exceptions import NumericalError

logger = logging.getLogger(__name__)

# 概率与逆正态分布共用的截断阈值
PROB_EPS = 1e-7


def wrap_unit(values: np.ndarray) -> np.ndarray:
    """把坐标映射回单位区间 [0, 1)

    np.mod 对极小的负数会返回 1.0，这里把它折回 0。

    Args:
        values: 任意实数数组

    Returns:
        np.ndarray: 取值在 [0, 1) 内的同形数组
    """
    wrapped = np.mod(np.asarray(values, dtype=np.float64), 1.0)
    wrapped[wrapped >= 1.0] = 0.0
    return wrapped


def wrapped_delta(target: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """环面上从 origin 指向 target 的最短位移，每个分量落在 [-0.5, 0.5)"""
    delta = np.asarray(target, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    return delta - np.floor(delta + 0.5)


def ensure_finite(values: Any, what: str, **diagnostics) -> Any:
    """检查数值是否全部有限，否则抛出带诊断信息的 NumericalError

    Args:
        values: 标量或数组
        what: 出错时报告的量名
        **diagnostics: 附加诊断字段（epoch、batch 等）

    Returns:
        原样返回 values
    """
    if not np.all(np.isfinite(values)):
        logger.error(f"{what} 出现非有限数值: {diagnostics}")
        raise NumericalError(f"non-finite {what}", diagnostics)
    return values


def format_float(value: float) -> str:
    """以可无损往返的形式格式化浮点数"""
    return repr(float(value))


def parse_key_value_text(text: str) -> Dict[str, str]:
    """解析 key=value 文本，忽略空行和 # 开头的注释行"""
    result: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ValueError(f"line {line_no}: expected key=value, got {raw!r}")
        key, value = line.split('=', 1)
        result[key.strip()] = value.strip()
    return result


def render_key_value_text(values: Dict[str, Any]) -> str:
    """按键排序输出 key=value 文本"""
    return ''.join(f"{key}={values[key]}\n" for key in sorted(values))
