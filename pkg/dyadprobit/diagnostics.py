"""
收敛诊断模块
潜在尺度缩减因子 (PSRF)、累计均值、接受率报告与后验汇总表
"""

import logging

import numpy as np
import pandas as pd

from dyadprobit.chain_store import pooled_matrix
from dyadprobit.errors import ValidationError

logger = logging.getLogger(__name__)

# 经典 Gelman-Rubin 估计量，整条链使用，不做分半
PSRF_SPLIT_CHAINS = False
QUANTILES = (0.025, 0.975)
DEFAULT_PSRF_THRESHOLD = 1.1


def psrf(chains, split=PSRF_SPLIT_CHAINS):
    """潜在尺度缩减因子 sqrt(((n-1)/n W + B/n) / W)

    chains 形状为 (链数, 每链抽样数)。split=True 时每条链拆成前后两半。
    """
    data = np.asarray(chains, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValidationError("PSRF 至少需要两条等长的链")
    if split:
        half = data.shape[1] // 2
        data = np.vstack([data[:, :half], data[:, half:2 * half]])
    m, n = data.shape
    if n < 2:
        raise ValidationError("PSRF 要求每条链至少 2 个抽样")

    within = data.var(axis=1, ddof=1).mean()
    between = n * data.mean(axis=1).var(ddof=1)
    if within == 0:
        return float("nan")
    pooled = (n - 1) / n * within + between / n
    return float(np.sqrt(pooled / within))


def running_means(values):
    """累计均值序列"""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValidationError("累计均值需要非空序列")
    return np.cumsum(values) / np.arange(1, values.size + 1)


def _psrf_column(stores, k):
    lengths = {len(store) for store in stores}
    if len(stores) < 2 or len(lengths) != 1 or lengths.pop() < 2:
        return float("nan")
    return psrf(np.vstack([store.matrix()[:, k] for store in stores]))


def summarize(stores):
    """合并各链抽样，计算每个参数的均值、标准差、分位数、PSRF 与区间是否含零"""
    draws = pooled_matrix(stores)
    if draws.shape[0] == 0:
        raise ValidationError("链中没有任何抽样")
    names = stores[0].names
    low, high = np.quantile(draws, QUANTILES, axis=0)
    sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1])
    summary = pd.DataFrame({
        "parameter": names,
        "mean": draws.mean(axis=0),
        "sd": sd,
        "q2.5": low,
        "q97.5": high,
        "psrf": [_psrf_column(stores, k) for k in range(len(names))],
    })
    summary["excludes_zero"] = (summary["q2.5"] > 0) | (summary["q97.5"] < 0)
    return summary


def flag_psrf(summary, threshold=DEFAULT_PSRF_THRESHOLD):
    """返回 PSRF 超过阈值的参数名"""
    flagged = summary.loc[summary["psrf"] > threshold, "parameter"].tolist()
    if flagged:
        logger.warning("%d 个参数的 PSRF 超过 %.2f: %s", len(flagged), threshold, ", ".join(flagged[:10]))
    return flagged


def running_means_frame(stores):
    """各链各参数的累计均值（可直接绘图的长表）"""
    frames = []
    for store in stores:
        matrix = store.matrix()
        if matrix.shape[0] == 0:
            continue
        means = np.cumsum(matrix, axis=0) / np.arange(1, matrix.shape[0] + 1)[:, None]
        frame = pd.DataFrame(means, columns=store.names)
        frame.insert(0, "draw", np.arange(1, matrix.shape[0] + 1))
        frame.insert(0, "chain", store.chain)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["chain", "draw"] + list(stores[0].names))
    return pd.concat(frames, ignore_index=True)


def acceptance_report(stores):
    """rho_e 各坐标的 Metropolis 接受率与冻结步长"""
    names = [n for n in stores[0].names if n.startswith("rho_e_")]
    records = []
    for store in stores:
        rates = store.rejection_rates()
        for k, name in enumerate(names):
            burn = store.burn_in_accepted[k] / store.burn_in_proposed if store.burn_in_proposed else np.nan
            records.append({
                "chain": store.chain,
                "parameter": name,
                "burn_in_acceptance": burn,
                "acceptance": 1.0 - rates[k] if store.proposed else np.nan,
                "rejection": rates[k],
                "gamma": store.final_gamma[k] if store.final_gamma is not None else np.nan,
            })
    return pd.DataFrame(records, columns=["chain", "parameter", "burn_in_acceptance",
                                          "acceptance", "rejection", "gamma"])


def format_table(frame, digits=4):
    """纯文本表格"""
    return frame.to_string(index=False, float_format=lambda x: f"{x:.{digits}f}")
