"""
异常模块
所有异常都携带命令行退出码
"""


class DyadProbitError(Exception):
    """引擎异常基类"""

    exit_code = 1


class ValidationError(DyadProbitError):
    """数据、设定或场景校验失败"""

    exit_code = 2

    def __init__(self, message, row=None, key=None):
        self.row = row
        self.key = key
        if row is not None:
            message = f"第 {row} 行: {message}"
        super().__init__(message)


class ConfigError(ValidationError):
    """配置错误，附带键路径"""

    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}", key=key_path)


class InvalidDofError(ValidationError):
    """逆 Wishart 自由度不合法"""


class NumericalError(DyadProbitError):
    """数值计算失败"""

    exit_code = 3


class DecompositionError(NumericalError):
    """Cholesky 分解失败"""

    def __init__(self, pivot, value):
        self.pivot = pivot
        self.value = value
        super().__init__(f"Cholesky 分解失败: 第 {pivot} 个主元为 {value:.3e}，矩阵非正定")


class UndefinedCorrelationError(NumericalError):
    """四分相关无定义（存在空边际）"""
