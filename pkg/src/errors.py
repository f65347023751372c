"""
异常定义模块
图后验网络各组件共享的错误类型
"""
from typing import Optional


class GPNError(Exception):
    """所有库内错误的基类"""


class ShapeError(GPNError, ValueError):
    """张量或数组形状不匹配"""


class ParameterError(GPNError, ValueError):
    """参数取值非法"""


class DomainError(GPNError, ValueError):
    """函数自变量超出定义域"""


class NumericError(GPNError, ArithmeticError):
    """出现非有限数值（NaN / inf）"""


class InputError(GPNError, ValueError):
    """输入数据不满足前置条件"""


class PerturbationError(GPNError):
    """图结构扰动无法完成"""


class DatasetLoadError(GPNError):
    """数据集目录读取失败"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"[{field}] {message}")


class SplitError(GPNError):
    """数据集划分失败"""


class MetricError(GPNError, ValueError):
    """评估指标无法计算"""


class TrainingError(GPNError):
    """训练过程发散或失败"""

    def __init__(self, message: str, epoch: Optional[int] = None):
        self.epoch = epoch
        prefix = f"第 {epoch} 轮: " if epoch is not None else ""
        super().__init__(f"{prefix}{message}")


class CheckpointError(GPNError):
    """模型检查点读写失败"""


class ConfigError(GPNError):
    """配置文件或配置项非法"""
