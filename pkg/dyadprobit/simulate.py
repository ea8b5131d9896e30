"""
模拟数据模块
按二层或三层模型正向生成含伴侣形成与解除的面板数据，用作参数恢复的真值
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from dyadprobit.chain_store import write_draws
from dyadprobit.clusters import build_couple_clusters
from dyadprobit.data_model import write_dataset, validate_dataset
from dyadprobit.errors import ValidationError
from dyadprobit.levels import LevelFactory
from dyadprobit.state import LatentState, ParameterState
from dyadprobit.stochastic import PSD_TOLERANCE, is_positive_definite_corr, n_pairs, sample_multivariate_normal

logger = logging.getLogger(__name__)


@dataclass
class SimulationScenario:
    """模拟情景：真值参数、样本结构与伴侣转移概率

    truth 中的协方差允许半正定（例如全零），激活层次由 truth.sigma 的键决定。
    n_units 为初始个体数；伴侣从从未结过伴的备用个体中抽取，加入后才被观测。
    """

    truth: ParameterState
    n_units: int
    n_waves: int
    initial_partner_prob: float = 0.6
    form_prob: float = 0.0
    dissolve_prob: float = 0.0
    design_csv: Optional[str] = None
    seed: int = 0

    @property
    def levels(self):
        return self.truth.levels

    @property
    def R(self):
        return self.truth.R

    @property
    def P(self):
        return self.truth.P

    def validate(self):
        """检查情景不变量"""
        if self.n_units < 1 or self.n_waves < 1:
            raise ValidationError("n_units 与 n_waves 必须为正", key="n_units")
        for name in ("initial_partner_prob", "form_prob", "dissolve_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name}={value} 不在 [0, 1] 内", key=name)
        truth = self.truth
        if truth.rho_e.size != n_pairs(truth.R):
            raise ValidationError(f"rho_e 长度应为 {n_pairs(truth.R)}", key="rho_e")
        if not is_positive_definite_corr(truth.rho_e):
            raise ValidationError("真值残差相关矩阵不是正定的", key="rho_e")
        for key, matrix in truth.sigma.items():
            if matrix.shape != (truth.R, truth.R) or not np.allclose(matrix, matrix.T):
                raise ValidationError(f"sigma_{key} 必须是 {truth.R}x{truth.R} 对称矩阵", key=f"sigma_{key}")
            if np.linalg.eigvalsh(matrix).min() < -PSD_TOLERANCE:
                raise ValidationError(f"sigma_{key} 不是半正定的", key=f"sigma_{key}")
        if self.design_csv is not None and not os.path.exists(self.design_csv):
            raise ValidationError(f"设计矩阵文件不存在: {self.design_csv}", key="design_csv")
        return self


def _partner_histories(scenario, rng):
    """伴侣关系演化：返回 {(个体, 期): 伴侣或 None}"""
    n_founders = scenario.n_units
    next_id = n_founders + 1
    partner = {}
    status = [None] * n_founders

    for wave in range(1, scenario.n_waves + 1):
        for i in range(n_founders):
            current = status[i]
            if wave == 1:
                if rng.random() < scenario.initial_partner_prob:
                    current = next_id
                    next_id += 1
            elif current is not None:
                if rng.random() < scenario.dissolve_prob:
                    current = None
            elif rng.random() < scenario.form_prob:
                current = next_id
                next_id += 1
            status[i] = current

            founder = str(i + 1)
            partner[(founder, wave)] = None if current is None else str(current)
            if current is not None:
                partner[(str(current), wave)] = founder
    return partner


def _design_matrix(scenario, n_rows, rng):
    """默认截距加标准正态列；给定设计 CSV 时按行循环使用"""
    if scenario.design_csv is None:
        labels = ["x_intercept"] + [f"x_{p}" for p in range(1, scenario.P)]
        X = np.column_stack([np.ones(n_rows), rng.standard_normal((n_rows, scenario.P - 1))])
        return X, labels

    frame = pd.read_csv(scenario.design_csv)
    if frame.shape[1] != scenario.P:
        raise ValidationError(
            f"设计矩阵有 {frame.shape[1]} 列，真值 B 需要 P={scenario.P}", key="design_csv"
        )
    labels = [c if c.startswith("x_") else f"x_{c}" for c in frame.columns]
    values = frame.to_numpy(dtype=float)
    return values[np.arange(n_rows) % values.shape[0]], labels


def simulate_dataset(scenario):
    """生成模拟数据集

    返回 (PanelDataset, 真值 LatentState, 随机效应层次字典)。同一种子得到相同结果。
    """
    scenario.validate()
    rng = np.random.default_rng(scenario.seed)
    truth = scenario.truth
    R = truth.R

    partner = _partner_histories(scenario, rng)
    keys = sorted(partner, key=lambda k: (int(k[0]), k[1]))
    X, covariate_labels = _design_matrix(scenario, len(keys), rng)
    outcome_labels = [f"y_{r + 1}" for r in range(R)]

    raw_rows = [
        {
            "individual_id": individual,
            "wave": wave,
            "partner_id": partner[(individual, wave)],
            "outcomes": [0] * R,
            "covariates": list(X[pos]),
        }
        for pos, (individual, wave) in enumerate(keys)
    ]
    dataset = validate_dataset(raw_rows, outcome_labels, covariate_labels)
    index = build_couple_clusters(dataset)
    levels = LevelFactory.create_levels(scenario.levels, dataset, index)

    zeros = np.zeros(R)
    y_star = dataset.X @ truth.B.T
    effects = {}
    for key, level in levels.items():
        effects[key] = sample_multivariate_normal(
            zeros, truth.sigma[key], rng, size=level.n_units, method="eigh"
        )
        y_star = y_star + level.expand(effects[key])
    y_star = y_star + sample_multivariate_normal(zeros, truth.sigma_e, rng, size=dataset.n_rows)

    dataset = dataset.with_outcomes((y_star > 0).astype(int))
    logger.info("模拟完成: %d 行, %d 个个体, %d 个夫妻簇, 层次 %s",
                dataset.n_rows, dataset.n, index.n_clusters, ",".join(scenario.levels))
    return dataset, LatentState(y_star, effects), levels


def write_simulation(scenario, dataset, out_dir):
    """写出 data.csv 与真值文件 truth.csv（链文件行格式，抽样编号 0）"""
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    data_path = os.path.join(out_dir, "data.csv")
    truth_path = os.path.join(out_dir, "truth.csv")
    write_dataset(dataset, data_path)
    truth = scenario.truth
    names = ParameterState.parameter_names(truth.R, truth.P, truth.levels)
    header = {"seed": scenario.seed, "levels": ",".join(truth.levels), "draw_index": [0]}
    write_draws(truth_path, names, truth.to_vector(), header)
    logger.info("真值已写入 %s", truth_path)
    return data_path, truth_path
