"""
异常定义

服务层只抛出这里定义的异常，管理命令负责把它们映射为退出码：
配置/数据/检查点错误 -> 1，数值错误 -> 2。
"""
from typing import Dict, Optional


class QLVMError(Exception):
    """所有领域异常的基类"""


class ConfigError(QLVMError, ValueError):
    """配置或用户输入无效"""


class LatticeError(ConfigError):
    """格点规则参数无效"""


class DataFormatError(QLVMError, ValueError):
    """数据文件格式错误"""


class IdxMagicError(DataFormatError):
    """IDX 文件魔数不匹配"""


class IdxTruncatedError(DataFormatError):
    """IDX 文件长度不足"""


class IdxCountMismatchError(DataFormatError):
    """图像与标签数量不一致"""


class CheckpointError(QLVMError):
    """检查点读写错误"""


class CheckpointFormatError(CheckpointError):
    """检查点魔数或结构错误"""


class CheckpointVersionError(CheckpointError):
    """检查点版本不受支持"""


class CheckpointChecksumError(CheckpointError):
    """检查点 CRC32 校验失败"""


class CheckpointTruncatedError(CheckpointError):
    """检查点文件被截断"""


class GradientError(QLVMError, RuntimeError):
    """在没有记录前向计算时调用了反向传播"""


class NumericalError(QLVMError, ArithmeticError):
    """出现非有限数值（NaN/Inf）"""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ', '.join(f"{key}={value}" for key, value in self.diagnostics.items())
        return f"{base} ({details})"
