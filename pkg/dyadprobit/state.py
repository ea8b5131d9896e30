"""
模型状态模块
模型设定、参数状态与潜变量状态
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from dyadprobit.errors import ValidationError
from dyadprobit.levels import LEVEL_ORDER, parse_levels
from dyadprobit.stochastic import corr_matrix, is_positive_definite_corr, n_pairs


@dataclass
class ModelSpec:
    """模型设定：激活层次、先验与抽样控制"""

    R: int
    P: int
    levels: tuple = ("u",)
    prior_beta_variance: float = 100.0
    iw_prior_scale: float = 1.0
    iw_prior_dof: float = 4.0
    n_iterations: int = 5000
    burn_in: int = 1000
    thin: int = 1
    n_chains: int = 2
    target_rejection: tuple = (0.7, 0.8)
    adapt_window: int = 50
    adapt_factor: float = 1.1
    initial_step: float = 0.1
    init_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.levels = parse_levels(self.levels)
        self.target_rejection = tuple(float(x) for x in self.target_rejection)
        self.validate()

    def validate(self):
        """检查设定不变量"""
        if self.R < 1 or self.P < 1:
            raise ValidationError(f"R 与 P 必须为正，实际 R={self.R}, P={self.P}")
        if self.n_iterations < 1:
            raise ValidationError("n_iterations 必须为正", key="n_iterations")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValidationError(f"burn_in={self.burn_in} 必须小于 n_iterations={self.n_iterations}", key="burn_in")
        if self.thin < 1:
            raise ValidationError("thin 必须 >= 1", key="thin")
        if self.n_chains < 1:
            raise ValidationError("n_chains 必须 >= 1", key="n_chains")
        if self.prior_beta_variance <= 0 or self.iw_prior_scale <= 0:
            raise ValidationError("先验方差与逆 Wishart 尺度必须为正")
        if self.iw_prior_dof <= self.R - 1:
            raise ValidationError(f"逆 Wishart 先验自由度必须大于 R-1={self.R - 1}", key="iw_prior_dof")
        low, high = self.target_rejection
        if not 0 < low < high < 1:
            raise ValidationError(f"目标拒绝率区间不合法: {self.target_rejection}", key="target_rejection")
        if self.adapt_window < 1 or self.adapt_factor <= 1 or self.initial_step <= 0:
            raise ValidationError("自适应步长参数不合法")

    @property
    def n_stored(self):
        """保存的抽样数 floor((n_iterations - burn_in) / thin)"""
        return (self.n_iterations - self.burn_in) // self.thin

    def to_dict(self):
        data = asdict(self)
        data["levels"] = list(self.levels)
        data["target_rejection"] = list(self.target_rejection)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def spec_hash(self):
        """设定摘要（不含种子与链数）"""
        data = self.to_dict()
        data.pop("seed")
        data.pop("n_chains")
        payload = json.dumps(data, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class ParameterState:
    """参数状态：系数矩阵 B、随机效应协方差与残差相关向量"""

    B: np.ndarray
    sigma: dict
    rho_e: np.ndarray

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.sigma = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in self.sigma.items()}
        self.rho_e = np.asarray(self.rho_e, dtype=float).ravel()

    @property
    def R(self):
        return self.B.shape[0]

    @property
    def P(self):
        return self.B.shape[1]

    @property
    def levels(self):
        return tuple(k for k in LEVEL_ORDER if k in self.sigma)

    @property
    def sigma_u(self):
        return self.sigma.get("u")

    @property
    def sigma_v(self):
        return self.sigma.get("v")

    @property
    def sigma_w(self):
        return self.sigma.get("w")

    @property
    def sigma_e(self):
        """残差相关矩阵（对角为 1）"""
        return corr_matrix(self.rho_e, self.R)

    def copy(self):
        return ParameterState(self.B.copy(), {k: v.copy() for k, v in self.sigma.items()}, self.rho_e.copy())

    def validate(self):
        """检查残差相关正定与协方差正定"""
        if self.rho_e.size != n_pairs(self.R):
            raise ValidationError(f"rho_e 长度应为 {n_pairs(self.R)}")
        if not is_positive_definite_corr(self.rho_e):
            raise ValidationError("残差相关矩阵不是正定的")
        for key, matrix in self.sigma.items():
            if matrix.shape != (self.R, self.R):
                raise ValidationError(f"Sigma_{key} 维数应为 {self.R}x{self.R}")
            if not np.allclose(matrix, matrix.T, atol=1e-12):
                raise ValidationError(f"Sigma_{key} 不对称")
            if np.linalg.eigvalsh(matrix).min() <= 0:
                raise ValidationError(f"Sigma_{key} 不是正定的")
        return self

    @staticmethod
    def parameter_names(R, P, levels):
        """展平参数的列名：vec(B)、各协方差下三角、rho_e"""
        names = [f"B_{r + 1}_{p + 1}" for r in range(R) for p in range(P)]
        rows, cols = np.tril_indices(R)
        for key in parse_levels(levels):
            names += [f"sigma_{key}_{i + 1}_{j + 1}" for i, j in zip(rows, cols)]
        rows, cols = np.tril_indices(R, -1)
        names += [f"rho_e_{i + 1}_{j + 1}" for i, j in zip(rows, cols)]
        return names

    def to_vector(self):
        """按 parameter_names 的顺序展平"""
        parts = [self.B.ravel()]
        rows, cols = np.tril_indices(self.R)
        for key in self.levels:
            parts.append(self.sigma[key][rows, cols])
        parts.append(self.rho_e)
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vector, R, P, levels):
        """由展平向量还原参数状态"""
        vector = np.asarray(vector, dtype=float)
        B = vector[:R * P].reshape(R, P)
        offset = R * P
        rows, cols = np.tril_indices(R)
        sigma = {}
        for key in parse_levels(levels):
            matrix = np.zeros((R, R))
            matrix[rows, cols] = vector[offset:offset + rows.size]
            matrix[cols, rows] = vector[offset:offset + rows.size]
            sigma[key] = matrix
            offset += rows.size
        rho_e = vector[offset:offset + n_pairs(R)]
        return cls(B, sigma, rho_e)


@dataclass
class LatentState:
    """潜变量状态：潜在响应 y* 与各层随机效应"""

    y_star: np.ndarray
    effects: dict = field(default_factory=dict)

    def copy(self):
        return LatentState(self.y_star.copy(), {k: v.copy() for k, v in self.effects.items()})
