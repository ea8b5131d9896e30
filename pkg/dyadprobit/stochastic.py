"""
随机抽样核心模块
截断正态、截断多元正态、逆 Wishart 抽样，以及 Cholesky 分解与相关矩阵正定判定
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import lapack, solve_triangular
from scipy.special import ndtr, ndtri

from dyadprobit.errors import DecompositionError, InvalidDofError, ValidationError

logger = logging.getLogger(__name__)

# 正定判定的行列式下限（严格正定，边界提案一律拒绝）
PD_FLOOR = 1e-10
# 半正定协方差允许的负特征值容差
PSD_TOLERANCE = 1e-10
# Cholesky 主元容差与一次性对角抖动
PIVOT_FLOOR = 1e-12
CHOLESKY_JITTER = 1e-10
# 区间离均值超过该倍数标准差时改用指数提议拒绝抽样
TAIL_CUTOFF = 6.0
# 不给定起点时截断多元正态的预热扫描次数
FRESH_DRAW_SWEEPS = 10


def n_pairs(k):
    """K 维相关矩阵的非对角元个数"""
    return k * (k - 1) // 2


def dim_from_pairs(n):
    """由相关系数个数反推维数"""
    k = int(round((1 + np.sqrt(1 + 8 * n)) / 2))
    if n_pairs(k) != n:
        raise ValidationError(f"相关向量长度 {n} 不对应任何维数")
    return k


@dataclass
class CorrVector:
    """相关系数向量（下三角按行排列）"""

    entries: np.ndarray
    dim: int
    validated: bool = False

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float).ravel()
        if self.entries.size != n_pairs(self.dim):
            raise ValidationError(f"相关向量长度应为 {n_pairs(self.dim)}，实际为 {self.entries.size}")
        if np.any(np.abs(self.entries) > 1.0):
            raise ValidationError("相关系数必须位于 [-1, 1]")

    @classmethod
    def identity(cls, dim):
        """单位相关矩阵"""
        return cls(np.zeros(n_pairs(dim)), dim, validated=True)

    @classmethod
    def from_matrix(cls, matrix):
        """从相关矩阵提取下三角"""
        matrix = np.asarray(matrix, dtype=float)
        dim = matrix.shape[0]
        return cls(matrix[np.tril_indices(dim, -1)], dim)

    def matrix(self):
        """还原为对称单位对角矩阵"""
        return corr_matrix(self.entries, self.dim)

    def validate(self):
        """完整 Sylvester 检查，通过后打上已验证标记"""
        self.validated = is_positive_definite_corr(self.entries)
        return self.validated


@dataclass
class TruncationBox:
    """截断区域（各分量上下界，可为无穷）"""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(~(self.lower < self.upper)):
            raise ValidationError("截断区域要求 lower < upper")

    @classmethod
    def from_outcomes(cls, y):
        """由二元结果构造象限：y=1 取 (0, inf)，y=0 取 (-inf, 0)"""
        y = np.asarray(y)
        lower = np.where(y == 1, 0.0, -np.inf)
        upper = np.where(y == 1, np.inf, 0.0)
        return cls(lower, upper)


def corr_matrix(entries, dim=None):
    """相关向量转矩阵"""
    entries = np.asarray(entries, dtype=float).ravel()
    if dim is None:
        dim = dim_from_pairs(entries.size)
    m = np.eye(dim)
    rows, cols = np.tril_indices(dim, -1)
    m[rows, cols] = entries
    m[cols, rows] = entries
    return m


def _pivot_value(m, j):
    """第 j 个主元：前 j 阶已正定时的 Schur 补"""
    if j == 0:
        return float(m[0, 0])
    lead, _ = lapack.dpotrf(m[:j, :j], lower=1, clean=1)
    x = solve_triangular(lead, m[:j, j], lower=True)
    return float(m[j, j] - x @ x)


def _cholesky_with_pivots(m):
    """LAPACK dpotrf 分解，返回 (L, 失败或过小主元下标, 主元值)"""
    lower, info = lapack.dpotrf(m, lower=1, clean=1)
    if info < 0:
        raise ValidationError(f"dpotrf 第 {-info} 个参数不合法")
    if info > 0:
        return lower, info - 1, _pivot_value(m, info - 1)
    pivots = np.diag(lower) ** 2
    small = np.flatnonzero(pivots <= PIVOT_FLOOR)
    if small.size:
        return lower, int(small[0]), float(pivots[small[0]])
    return lower, None, None


def cholesky_lower(m):
    """下三角 Cholesky 因子，近奇异时对角加一次抖动"""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    m = (m + m.T) / 2.0
    lower, index, pivot = _cholesky_with_pivots(m)
    if index is None:
        return lower
    if pivot <= 0:
        raise DecompositionError(index, pivot)

    logger.debug("Cholesky 第 %d 个主元 %.3e 过小，加抖动重试", index, pivot)
    lower, index, pivot = _cholesky_with_pivots(m + CHOLESKY_JITTER * np.eye(m.shape[0]))
    if index is not None:
        raise DecompositionError(index, pivot)
    return lower


def _inverse_cdf_draw(a, b, rng):
    """逆分布函数法，a>0 时翻转到下尾以保精度"""
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    p_lo = ndtr(lo)
    p_hi = ndtr(hi)
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=a.shape)
    x = ndtri(p_lo + u * (p_hi - p_lo))
    return np.where(flip, -x, x)


def _tail_draw(a, b, rng):
    """a 位于远右尾时的拒绝抽样：宽区间用指数提议，窄区间用均匀提议"""
    out = np.empty_like(a)
    rate = (a + np.sqrt(a * a + 4.0)) / 2.0
    pending = np.arange(a.size)
    while pending.size:
        aa, bb, lam = a[pending], b[pending], rate[pending]
        narrow = (bb - aa) < 1.0 / aa
        width = np.where(narrow, bb - aa, 0.0)
        proposal = np.where(
            narrow,
            aa + width * rng.random(pending.size),
            aa + rng.exponential(1.0 / lam),
        )
        log_accept = np.where(narrow, (aa * aa - proposal ** 2) / 2.0, -((proposal - lam) ** 2) / 2.0)
        ok = (proposal < bb) & (np.log(rng.random(pending.size)) < log_accept)
        out[pending[ok]] = proposal[ok]
        pending = pending[~ok]
    return out


def standard_truncated_normal(a, b, rng):
    """标准正态在 (a, b) 上的截断抽样（向量化，不做参数检查）"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = np.broadcast(a, b).shape
    a = np.broadcast_to(a, shape).ravel()
    b = np.broadcast_to(b, shape).ravel()
    z = np.empty(a.size)

    right = a > TAIL_CUTOFF
    left = b < -TAIL_CUTOFF
    body = ~(right | left)
    if body.any():
        z[body] = _inverse_cdf_draw(a[body], b[body], rng)
    if right.any():
        z[right] = _tail_draw(a[right], b[right], rng)
    if left.any():
        z[left] = -_tail_draw(-b[left], -a[left], rng)
    return z.reshape(shape)


def _clip_open(x, lower, upper):
    """把浮点误差推到边界上的值拉回开区间内"""
    return np.clip(x, np.nextafter(lower, np.inf), np.nextafter(upper, -np.inf))


def sample_truncated_normal(mean, sd, lower, upper, rng):
    """从 N(mean, sd^2) 在 (lower, upper) 上的截断分布抽样"""
    mean, sd, lower, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mean, sd, lower, upper))
    )
    if np.any(sd <= 0):
        raise ValidationError("截断正态标准差必须为正")
    if np.any(~(lower < upper)):
        raise ValidationError("截断正态要求 lower < upper")

    z = standard_truncated_normal((lower - mean) / sd, (upper - mean) / sd, rng)
    x = _clip_open(mean + sd * z, lower, upper)
    return float(x) if x.ndim == 0 else x


def _ghk_pass(mean, chol, lower, upper, rng):
    """按 Cholesky 逐分量顺序抽样，得到盒内初始点"""
    n, k = mean.shape
    eps = np.zeros((n, k))
    for r in range(k):
        shift = eps[:, :r] @ chol[r, :r]
        lo = (lower[:, r] - mean[:, r] - shift) / chol[r, r]
        hi = (upper[:, r] - mean[:, r] - shift) / chol[r, r]
        eps[:, r] = standard_truncated_normal(lo, hi, rng)
    return mean + eps @ chol.T


def _whitened_sweep(y, mean, chol, lower, upper, rng):
    """在 Cholesky 白化坐标上做一轮分量 Gibbs 扫描"""
    n, k = mean.shape
    eps = solve_triangular(chol, (y - mean).T, lower=True).T
    for r in range(k):
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for j in range(r, k):
            c = chol[j, r]
            if c == 0.0:
                continue
            rest = eps[:, :j + 1] @ chol[j, :j + 1] - c * eps[:, r]
            bound_a = (lower[:, j] - mean[:, j] - rest) / c
            bound_b = (upper[:, j] - mean[:, j] - rest) / c
            if c < 0:
                bound_a, bound_b = bound_b, bound_a
            lo = np.maximum(lo, bound_a)
            hi = np.minimum(hi, bound_b)

        current = eps[:, r]
        # 当前点必在可行区间内
        lo = np.minimum(lo, current)
        hi = np.maximum(hi, current)
        movable = hi > lo
        if movable.any():
            eps[movable, r] = standard_truncated_normal(lo[movable], hi[movable], rng)
    return mean + eps @ chol.T


def sample_truncated_mvn(mean, corr, box, rng, start=None, n_sweeps=None):
    """截断多元正态抽样

    mean 为 (K,) 或 (N, K)；corr 为 CorrVector 或相关矩阵。
    给定 start（盒内当前值）时执行 n_sweeps 轮白化 Gibbs 扫描（默认 1 轮），
    否则先用 Cholesky 顺序抽样得到盒内点，再预热 FRESH_DRAW_SWEEPS 轮。
    """
    mean = np.asarray(mean, dtype=float)
    single = mean.ndim == 1
    mean = np.atleast_2d(mean)
    k = mean.shape[1]
    matrix = corr.matrix() if isinstance(corr, CorrVector) else np.asarray(corr, dtype=float)
    chol = cholesky_lower(matrix)
    lower = np.broadcast_to(box.lower, mean.shape)
    upper = np.broadcast_to(box.upper, mean.shape)

    if start is None:
        y = _clip_open(_ghk_pass(mean, chol, lower, upper, rng), lower, upper)
        sweeps = FRESH_DRAW_SWEEPS if n_sweeps is None else n_sweeps
    else:
        y = np.atleast_2d(np.asarray(start, dtype=float)).copy()
        sweeps = 1 if n_sweeps is None else n_sweeps

    if k > 1 or start is not None:
        for _ in range(sweeps):
            y = _clip_open(_whitened_sweep(y, mean, chol, lower, upper, rng), lower, upper)
    return y[0] if single else y


def sample_multivariate_normal(mean, cov, rng, size=None, method="cholesky"):
    """多元正态抽样

    method="cholesky" 要求 cov 正定；method="eigh" 用特征分解，允许半正定（如全零）协方差。
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if method == "cholesky":
        factor = cholesky_lower(cov)
    elif method == "eigh":
        values, vectors = np.linalg.eigh((cov + cov.T) / 2.0)
        if values.min() < -PSD_TOLERANCE * max(1.0, values.max()):
            raise DecompositionError(int(np.argmin(values)), float(values.min()))
        factor = vectors * np.sqrt(np.clip(values, 0.0, None))
    else:
        raise ValidationError(f"未知的分解方法: {method}")
    shape = (mean.shape[-1],) if size is None else (size, mean.shape[-1])
    z = rng.standard_normal(shape)
    return mean + z @ factor.T


def sample_inverse_wishart(scale, dof, rng):
    """逆 Wishart 抽样 IW(scale, dof)"""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    k = scale.shape[0]
    if dof <= k - 1:
        raise InvalidDofError(f"逆 Wishart 自由度 {dof} 必须大于 K-1={k - 1}")
    draw = stats.invwishart.rvs(df=dof, scale=scale, random_state=rng)
    draw = np.asarray(draw, dtype=float).reshape(k, k)
    return (draw + draw.T) / 2.0


def is_positive_definite_corr(rho, changed=None):
    """相关向量对应矩阵是否（严格）正定

    changed 为单个被修改元素的下标时，假定修改前矩阵正定，只需检查整体行列式；
    否则按 Sylvester 准则检查全部顺序主子式。
    """
    entries = np.asarray(rho, dtype=float).ravel()
    if np.any(np.abs(entries) > 1.0):
        return False
    if entries.size == 0:
        return True
    m = corr_matrix(entries)
    if changed is not None:
        return bool(np.linalg.det(m) > PD_FLOOR)
    for size in range(2, m.shape[0] + 1):
        if np.linalg.det(m[:size, :size]) <= PD_FLOOR:
            return False
    return True


def gaussian_log_likelihood(cross_product, n_obs, corr):
    """残差完整数据对数似然（略去常数）：-n/2 log|S| - 1/2 tr(S^-1 E'E)"""
    chol = cholesky_lower(corr)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    inv_chol = solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    quad = np.sum((inv_chol @ cross_product) * inv_chol)
    return -0.5 * n_obs * log_det - 0.5 * quad
