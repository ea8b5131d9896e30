"""
后验分析模块
调整后的结果间相关及其分量分解、簇内相关、预测边际概率与四分相关
"""

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.optimize import bisect
from scipy.special import ndtr, ndtri

from dyadprobit.chain_store import pooled_states, posterior_mean_state
from dyadprobit.errors import UndefinedCorrelationError, ValidationError
from dyadprobit.levels import LEVEL_ORDER
from dyadprobit.stochastic import sample_multivariate_normal

logger = logging.getLogger(__name__)

COMPONENTS = {
    "e": "residual",
    "u": "individual",
    "v": "couple_fixed",
    "w": "couple_timevarying",
}
RHO_BOUND = 1.0 - 1e-6
BISECTION_TOL = 1e-8


def _covariance(draw, levels, r, s):
    """结果 r 与 s 在潜尺度上的总协方差（残差方差为 1）"""
    total = draw.sigma_e[r, s]
    for key in levels:
        if key in draw.sigma:
            total += draw.sigma[key][r, s]
    return total


def adjusted_correlation(draw, r, s, levels=LEVEL_ORDER):
    """各随机项协方差之和除以总方差几何平均"""
    numerator = _covariance(draw, levels, r, s)
    denominator = np.sqrt(_covariance(draw, levels, r, r) * _covariance(draw, levels, s, s))
    return float(numerator / denominator)


def adjusted_correlation_two_level(draw, r, s):
    """(s_u,rs + s_e,rs) / sqrt((s_u,rr + 1)(s_u,ss + 1))"""
    if r == s:
        raise ValidationError("相关需要两个不同的结果")
    return adjusted_correlation(draw, r, s, levels=("u",))


def adjusted_correlation_three_level(draw, r, s):
    """四项协方差之和 / sqrt(各结果 s_u + s_v + s_w + 1 之积)"""
    if r == s:
        raise ValidationError("相关需要两个不同的结果")
    return adjusted_correlation(draw, r, s, levels=("u", "v", "w"))


def component_correlation(draw, key, r, s):
    """单一分量的相关：e 取残差相关，其余取对应协方差矩阵"""
    if key == "e":
        return float(draw.sigma_e[r, s])
    matrix = draw.sigma[key]
    scale = np.sqrt(matrix[r, r] * matrix[s, s])
    return float(matrix[r, s] / scale) if scale > 0 else float("nan")


def covariance_structure(draw, r):
    """夫妻两期潜响应的协方差结构（结果 r）"""
    var = {key: (draw.sigma[key][r, r] if key in draw.sigma else 0.0) for key in LEVEL_ORDER}
    return {
        "total_variance": var["u"] + var["v"] + var["w"] + 1.0,
        "within_individual": var["v"] + var["u"],
        "between_partner_same_wave": var["v"] + var["w"],
        "between_partner_cross_wave": var["v"],
    }


def intra_cluster_correlations(draw):
    """簇内相关：个体内（跨期）与夫妻间同期，按结果给出

    二层模型只有个体内相关，夫妻间相关为 None。
    """
    structure = [covariance_structure(draw, r) for r in range(draw.R)]
    total = np.array([s["total_variance"] for s in structure])
    within_individual = np.array([s["within_individual"] for s in structure]) / total
    within_couple = None
    if "v" in draw.sigma or "w" in draw.sigma:
        within_couple = np.array([s["between_partner_same_wave"] for s in structure]) / total
    return within_individual, within_couple


def _interval_excludes_zero(values):
    low, high = np.quantile(values, (0.025, 0.975))
    return bool(low > 0 or high < 0)


def correlation_decomposition(stores, outcome_labels=None):
    """逐抽样计算各分量相关与总体调整相关，汇总均值、标准差、区间是否含零及后验均值代入值"""
    states = list(pooled_states(stores))
    if not states:
        raise ValidationError("链中没有任何抽样")
    plug_in = posterior_mean_state(stores)
    R = plug_in.R
    labels = outcome_labels or [f"y_{r + 1}" for r in range(R)]
    keys = ["e"] + [k for k in LEVEL_ORDER if k in plug_in.sigma]

    records = []
    for r, s in combinations(range(R), 2):
        for key in keys + ["overall"]:
            if key == "overall":
                values = np.array([adjusted_correlation(d, r, s) for d in states])
                point = adjusted_correlation(plug_in, r, s)
            else:
                values = np.array([component_correlation(d, key, r, s) for d in states])
                point = component_correlation(plug_in, key, r, s)
            records.append({
                "pair": f"{labels[r]}:{labels[s]}",
                "component": COMPONENTS.get(key, key),
                "mean": values.mean(),
                "sd": values.std(ddof=1) if values.size > 1 else 0.0,
                "excludes_zero": _interval_excludes_zero(values),
                "plug_in": point,
            })
    return pd.DataFrame(records)


def intra_cluster_summary(stores, outcome_labels=None):
    """簇内相关的逐抽样后验均值与标准差"""
    states = list(pooled_states(stores))
    if not states:
        raise ValidationError("链中没有任何抽样")
    labels = outcome_labels or [f"y_{r + 1}" for r in range(states[0].R)]
    pairs = [intra_cluster_correlations(d) for d in states]
    within_individual = np.array([p[0] for p in pairs])
    records = []
    for r, label in enumerate(labels):
        record = {
            "outcome": label,
            "within_individual_mean": within_individual[:, r].mean(),
            "within_individual_sd": within_individual[:, r].std(ddof=1) if len(states) > 1 else 0.0,
        }
        if pairs[0][1] is not None:
            within_couple = np.array([p[1] for p in pairs])
            record["within_couple_mean"] = within_couple[:, r].mean()
            record["within_couple_sd"] = within_couple[:, r].std(ddof=1) if len(states) > 1 else 0.0
        records.append(record)
    return pd.DataFrame(records)


def total_random_variance(params):
    """各结果潜尺度总方差：sum(s_k,rr) + 1"""
    total = np.ones(params.R)
    for matrix in params.sigma.values():
        total += np.diag(matrix)
    return total


def marginal_probabilities(params, X):
    """随机效应解析积分后的平均预测概率 Phi(B x / sqrt(总方差))"""
    index = X @ params.B.T
    return ndtr(index / np.sqrt(total_random_variance(params))).mean(axis=0)


def marginal_probabilities_monte_carlo(params, X, rng, n_draws=1_000_000, batch=100_000):
    """蒙特卡罗积分版本，用于核对解析缩放"""
    index = X @ params.B.T
    cov = params.sigma_e.copy()
    for matrix in params.sigma.values():
        cov = cov + matrix
    hits = np.zeros(params.R)
    done = 0
    while done < n_draws:
        size = min(batch, n_draws - done)
        rows = rng.integers(0, X.shape[0], size=size)
        noise = sample_multivariate_normal(np.zeros(params.R), cov, rng, size=size)
        hits += (index[rows] + noise > 0).sum(axis=0)
        done += size
    return hits / n_draws


def _design_at(dataset, covariate, value):
    k = dataset.covariate_index(covariate)
    X = dataset.X.copy()
    X[:, k] = value
    return X


def predicted_marginal_probabilities(stores, dataset, covariate, value):
    """把协变量固定为 value、其余保持观测值，用后验均值参数计算平均预测概率"""
    X = _design_at(dataset, covariate, value)
    return marginal_probabilities(posterior_mean_state(stores), X)


def predicted_marginals_draw_wise(stores, dataset, covariate, value):
    """逐抽样计算预测边际概率，返回 (后验均值, 后验标准差)"""
    X = _design_at(dataset, covariate, value)
    values = np.array([marginal_probabilities(d, X) for d in pooled_states(stores)])
    if values.size == 0:
        raise ValidationError("链中没有任何抽样")
    sd = values.std(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(values.shape[1])
    return values.mean(axis=0), sd


def bivariate_normal_cdf(h, k, rho):
    """二元标准正态分布函数：Phi(h)Phi(k) + 对相关系数积分的密度"""
    base = ndtr(h) * ndtr(k)
    if rho == 0:
        return float(base)

    def density(r):
        det = 1.0 - r * r
        return np.exp(-(h * h - 2.0 * r * h * k + k * k) / (2.0 * det)) / (2.0 * np.pi * np.sqrt(det))

    extra, _ = quad(density, 0.0, rho, epsabs=1e-14, epsrel=1e-12, limit=200)
    return float(base + extra)


def bivariate_normal_density(h, k, rho):
    det = 1.0 - rho * rho
    return float(np.exp(-(h * h - 2.0 * rho * h * k + k * k) / (2.0 * det)) / (2.0 * np.pi * np.sqrt(det)))


@dataclass
class TetrachoricResult:
    """四分相关估计"""

    rho: float
    se: float
    boundary: bool
    n: int


def tetrachoric_correlation(table):
    """2x2 列联表的四分相关（阈值取自边际比例，对相关系数二分求根）

    标准误只取 rho 的 Fisher 信息，两个阈值视为已知，未计入其估计误差。
    """
    table = np.asarray(table, dtype=float)
    if table.shape != (2, 2) or np.any(table < 0):
        raise ValidationError("四分相关需要非负的 2x2 频数表")
    n = table.sum()
    if n <= 0:
        raise ValidationError("频数表总数必须为正")

    p_x0 = table[0].sum() / n
    p_y0 = table[:, 0].sum() / n
    if p_x0 in (0.0, 1.0) or p_y0 in (0.0, 1.0):
        raise UndefinedCorrelationError("存在空边际，四分相关无定义")
    tau_x, tau_y = ndtri(p_x0), ndtri(p_y0)
    target = table[0, 0] / n

    def gap(rho):
        return bivariate_normal_cdf(tau_x, tau_y, rho) - target

    boundary = False
    if gap(RHO_BOUND) <= 0:
        rho, boundary = RHO_BOUND, True
    elif gap(-RHO_BOUND) >= 0:
        rho, boundary = -RHO_BOUND, True
    else:
        rho = bisect(gap, -RHO_BOUND, RHO_BOUND, xtol=BISECTION_TOL)

    if boundary:
        logger.warning("四分相关落在边界，截断为 %.6f", rho)
        return TetrachoricResult(float(rho), float("nan"), True, int(n))

    p00 = bivariate_normal_cdf(tau_x, tau_y, rho)
    cells = np.array([p00, p_x0 - p00, p_y0 - p00, 1.0 - p_x0 - p_y0 + p00])
    # 在极大似然点处观测信息 = n * phi2^2 * sum(1/p)
    info = n * bivariate_normal_density(tau_x, tau_y, rho) ** 2 * np.sum(1.0 / cells)
    return TetrachoricResult(float(rho), float(1.0 / np.sqrt(info)), False, int(n))


def contingency_table(y1, y2):
    """两个二元变量的 2x2 频数表"""
    y1 = np.asarray(y1, dtype=int)
    y2 = np.asarray(y2, dtype=int)
    table = np.zeros((2, 2))
    np.add.at(table, (y1, y2), 1)
    return table


def tetrachoric_matrix(dataset):
    """数据集中所有结果两两之间的未调整四分相关"""
    records = []
    for r, s in combinations(range(dataset.R), 2):
        a, b = dataset.outcome_labels[r], dataset.outcome_labels[s]
        try:
            result = tetrachoric_correlation(contingency_table(dataset.Y[:, r], dataset.Y[:, s]))
            rho, se, boundary, n = result.rho, result.se, result.boundary, result.n
        except UndefinedCorrelationError as e:
            logger.warning("%s 与 %s: %s", a, b, e)
            rho, se, boundary, n = float("nan"), float("nan"), False, dataset.n_rows
        records.append({"pair": f"{a}:{b}", "rho": rho, "se": se, "boundary": boundary, "n": n})
    return pd.DataFrame(records, columns=["pair", "rho", "se", "boundary", "n"])
