"""
MeanFlowSE 异常定义

核心数值代码抛出这些类型化异常；编排层（pipeline）负责捕获并转换为
{"success": False, "error": ...} 结果字典。
"""


class MeanFlowError(Exception):
    """所有 MeanFlowSE 异常的基类"""


class ShapeMismatchError(MeanFlowError, ValueError):
    """张量形状不兼容"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: 形状不兼容 {shown}")


class UnsupportedPrimitiveError(MeanFlowError, TypeError):
    """函数中使用了 tensor_core 不支持的原语"""

    def __init__(self, primitive: str):
        self.primitive = primitive
        super().__init__(f"不支持的原语: {primitive}")


class NonScalarLossError(MeanFlowError, ValueError):
    """对非标量求梯度"""


class FrontendError(MeanFlowError, ValueError):
    """波形/频谱前端错误"""


class PathError(MeanFlowError, ValueError):
    """条件路径参数错误"""


class ScheduleError(MeanFlowError, ValueError):
    """采样时间网格错误"""


class NonFiniteError(MeanFlowError, ArithmeticError):
    """出现 NaN/Inf"""


class CorpusError(MeanFlowError, ValueError):
    """语料生成或加载错误"""


class MetricError(MeanFlowError, ValueError):
    """评测指标输入错误"""


class ConfigError(MeanFlowError, ValueError):
    """配置文件或命令行覆盖错误"""


class UnsupportedFieldError(MeanFlowError, ValueError):
    """解析场的参数超出闭式解支持的范围（非对角 A、b 次数过高）"""
