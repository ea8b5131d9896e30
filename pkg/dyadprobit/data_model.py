"""
面板数据模块
观测行、面板数据集的校验与 CSV 读写
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from dyadprobit.errors import ValidationError

logger = logging.getLogger(__name__)

ID_COLUMNS = ["individual_id", "wave", "partner_id"]
OUTCOME_PREFIX = "y_"
COVARIATE_PREFIX = "x_"


def id_sort_key(value):
    """个体编号排序键：数字编号按数值排序，其余按字符串"""
    text = str(value)
    try:
        return (0, int(text), "")
    except ValueError:
        return (1, 0, text)


def _is_missing(value):
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return isinstance(value, str) and value.strip() == ""


class ObservationRow:
    """观测行类：某个体在某一期的协变量与二元结果"""

    def __init__(self, individual_id, wave, covariates, outcomes, partner_id=None):
        self.individual_id = str(individual_id)
        self.wave = int(wave)
        self.partner_id = None if _is_missing(partner_id) else str(partner_id)
        self.covariates = tuple(float(x) for x in covariates)
        self.outcomes = tuple(int(y) for y in outcomes)

    @classmethod
    def from_dict(cls, data, row=None):
        """从字典创建观测行，逐项检查缺失与取值"""
        for key in ("individual_id", "wave"):
            if _is_missing(data.get(key)):
                raise ValidationError(f"缺少 {key}", row=row)
        try:
            wave = int(data["wave"])
        except (TypeError, ValueError):
            raise ValidationError(f"期数不是整数: {data['wave']!r}", row=row)
        if wave < 1:
            raise ValidationError(f"期数必须 >= 1，实际为 {wave}", row=row)

        outcomes = []
        for value in data.get("outcomes", []):
            try:
                number = float(value)
            except (TypeError, ValueError):
                raise ValidationError(f"结果取值不合法: {value!r}", row=row)
            if number not in (0.0, 1.0):
                raise ValidationError(f"结果取值必须为 0 或 1，实际为 {value!r}", row=row)
            outcomes.append(int(number))

        covariates = []
        for value in data.get("covariates", []):
            try:
                covariates.append(float(value))
            except (TypeError, ValueError):
                raise ValidationError(f"协变量不是数值: {value!r}", row=row)

        return cls(
            individual_id=data["individual_id"],
            wave=wave,
            covariates=covariates,
            outcomes=outcomes,
            partner_id=data.get("partner_id"),
        )


@dataclass
class PanelDataset:
    """面板数据集类（构造后不可变）"""

    rows: list
    outcome_labels: list
    covariate_labels: list
    rejected_rows: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = tuple(self.rows)
        self.outcome_labels = list(self.outcome_labels)
        self.covariate_labels = list(self.covariate_labels)
        self.X = np.array([r.covariates for r in self.rows], dtype=float).reshape(len(self.rows), self.P)
        self.Y = np.array([r.outcomes for r in self.rows], dtype=int).reshape(len(self.rows), self.R)
        self.waves = np.array([r.wave for r in self.rows], dtype=int)
        self.individual_ids = [r.individual_id for r in self.rows]

    @property
    def R(self):
        return len(self.outcome_labels)

    @property
    def P(self):
        return len(self.covariate_labels)

    @property
    def n_rows(self):
        return len(self.rows)

    @property
    def individuals(self):
        """全部个体编号（按编号排序）"""
        return sorted(set(self.individual_ids), key=id_sort_key)

    @property
    def n(self):
        return len(set(self.individual_ids))

    @property
    def T(self):
        """每个个体的观测期数"""
        counts = {}
        for individual in self.individual_ids:
            counts[individual] = counts.get(individual, 0) + 1
        return counts

    def covariate_index(self, name):
        """协变量名对应的列号"""
        if name not in self.covariate_labels:
            raise ValidationError(f"未知协变量: {name}", key=name)
        return self.covariate_labels.index(name)

    def select_outcomes(self, labels):
        """只保留指定的结果列（用于单独拟合的稀有结果）"""
        unknown = [label for label in labels if label not in self.outcome_labels]
        if unknown:
            raise ValidationError(f"未知结果列: {', '.join(unknown)}")
        keep = [self.outcome_labels.index(label) for label in labels]
        rows = [
            ObservationRow(r.individual_id, r.wave, r.covariates, [r.outcomes[k] for k in keep], r.partner_id)
            for r in self.rows
        ]
        return PanelDataset(rows, list(labels), self.covariate_labels, self.rejected_rows)

    def with_outcomes(self, Y):
        """替换结果矩阵，得到新数据集"""
        Y = np.asarray(Y, dtype=int)
        rows = [
            ObservationRow(r.individual_id, r.wave, r.covariates, Y[i], r.partner_id)
            for i, r in enumerate(self.rows)
        ]
        return PanelDataset(rows, self.outcome_labels, self.covariate_labels, self.rejected_rows)

    def to_frame(self):
        """转换为长格式 DataFrame"""
        frame = pd.DataFrame({
            "individual_id": self.individual_ids,
            "wave": self.waves,
            "partner_id": [r.partner_id or "" for r in self.rows],
        })
        for k, label in enumerate(self.outcome_labels):
            frame[label] = self.Y[:, k]
        for k, label in enumerate(self.covariate_labels):
            frame[label] = self.X[:, k]
        return frame


def _check_partner_symmetry(rows, positions):
    """同一期内配偶关系必须双向一致"""
    by_key = {(r.individual_id, r.wave): (r, pos) for r, pos in zip(rows, positions)}
    for row, pos in zip(rows, positions):
        if row.partner_id is None:
            continue
        if row.partner_id == row.individual_id:
            raise ValidationError(f"个体 {row.individual_id} 把自己登记为配偶", row=pos)
        other = by_key.get((row.partner_id, row.wave))
        if other is None:
            continue
        partner_row, partner_pos = other
        if partner_row.partner_id != row.individual_id:
            raise ValidationError(
                f"配偶关系不对称: 第 {pos} 行 {row.individual_id} 登记 {row.partner_id}，"
                f"第 {partner_pos} 行 {row.partner_id} 登记 {partner_row.partner_id or '无'}（第 {row.wave} 期）",
                row=pos,
            )


def validate_dataset(raw_rows, outcome_labels, covariate_labels):
    """校验原始行（字典列表）并构造数据集

    含缺失协变量或结果的行按完整个案原则剔除，并记录行号诊断信息。
    """
    outcome_labels = list(outcome_labels)
    covariate_labels = list(covariate_labels)
    R, P = len(outcome_labels), len(covariate_labels)

    rows, positions, rejected = [], [], []
    for pos, data in enumerate(raw_rows, start=1):
        outcomes = list(data.get("outcomes", []))
        covariates = list(data.get("covariates", []))
        if len(outcomes) != R:
            raise ValidationError(f"结果个数应为 {R}，实际为 {len(outcomes)}", row=pos)
        if len(covariates) != P:
            raise ValidationError(f"协变量个数应为 {P}，实际为 {len(covariates)}", row=pos)
        missing = [outcome_labels[k] for k, v in enumerate(outcomes) if _is_missing(v)]
        missing += [covariate_labels[k] for k, v in enumerate(covariates) if _is_missing(v)]
        if missing:
            rejected.append((pos, missing))
            continue
        rows.append(ObservationRow.from_dict(data, row=pos))
        positions.append(pos)

    if rejected:
        logger.warning("剔除 %d 行含缺失值的观测（完整个案）: %s", len(rejected),
                       ", ".join(f"第{pos}行[{'/'.join(cols)}]" for pos, cols in rejected[:10]))
    if not rows:
        raise ValidationError("数据集为空")

    seen = {}
    for row, pos in zip(rows, positions):
        key = (row.individual_id, row.wave)
        if key in seen:
            raise ValidationError(
                f"个体 {row.individual_id} 在第 {row.wave} 期重复出现（首次在第 {seen[key]} 行）", row=pos
            )
        seen[key] = pos

    _check_partner_symmetry(rows, positions)
    return PanelDataset(rows, outcome_labels, covariate_labels, rejected)


def read_dataset(path):
    """读取长格式 CSV（首行为表头，空字段为缺失）"""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValidationError(f"{path}: 无法解析 CSV: {e}")
    missing_columns = [c for c in ID_COLUMNS if c not in frame.columns]
    if missing_columns:
        raise ValidationError(f"{path}: 缺少列 {', '.join(missing_columns)}")

    outcome_labels = [c for c in frame.columns if c.startswith(OUTCOME_PREFIX)]
    covariate_labels = [c for c in frame.columns if c.startswith(COVARIATE_PREFIX)]
    if not outcome_labels or not covariate_labels:
        raise ValidationError(f"{path}: 需要至少一个 y_ 结果列和一个 x_ 协变量列")

    raw_rows = [
        {
            "individual_id": record["individual_id"],
            "wave": record["wave"],
            "partner_id": record["partner_id"],
            "outcomes": [record[c] for c in outcome_labels],
            "covariates": [record[c] for c in covariate_labels],
        }
        for record in frame.to_dict(orient="records")
    ]
    dataset = validate_dataset(raw_rows, outcome_labels, covariate_labels)
    logger.info("已读取 %s: %d 行, %d 个个体, R=%d, P=%d",
                path, dataset.n_rows, dataset.n, dataset.R, dataset.P)
    return dataset


def write_dataset(dataset, path):
    """按 read_dataset 可读回的长格式写出 CSV"""
    dataset.to_frame().to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    logger.info("数据集已写入 %s", path)
