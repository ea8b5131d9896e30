"""
随机效应层次模块
个体效应 u、夫妻固定效应 v 与夫妻时变效应 w 的单元划分
"""

from abc import ABC, abstractmethod

import numpy as np

from dyadprobit.data_model import id_sort_key
from dyadprobit.errors import ValidationError

# 配置文件中的层次名称 -> 内部键
LEVEL_NAMES = {
    "individual_u": "u",
    "couple_v": "v",
    "couple_w": "w",
}
LEVEL_ORDER = ("u", "v", "w")


def parse_levels(names):
    """把层次名称列表（或 two/three 简写）转换为有序的内部键"""
    if isinstance(names, str):
        shorthand = {"two": ("u",), "three": LEVEL_ORDER}
        if names.strip() in shorthand:
            return shorthand[names.strip()]
        names = [n for n in names.replace(",", " ").split() if n]
    keys = set()
    for name in names:
        key = LEVEL_NAMES.get(name, name)
        if key not in LEVEL_ORDER:
            raise ValidationError(f"未知随机效应层次: {name}")
        keys.add(key)
    return tuple(k for k in LEVEL_ORDER if k in keys)


class RandomEffectLevel(ABC):
    """随机效应层次基类：每行观测属于某个单元"""

    key = None
    description = None

    def __init__(self, unit_of_row, unit_labels):
        self.unit_of_row = np.asarray(unit_of_row, dtype=int)
        self.unit_labels = list(unit_labels)
        self.counts = np.bincount(self.unit_of_row, minlength=self.n_units)

    @property
    def n_units(self):
        return len(self.unit_labels)

    @classmethod
    @abstractmethod
    def from_dataset(cls, dataset, index):
        """由数据集与夫妻簇索引构造单元划分"""

    def unit_sums(self, values):
        """按单元汇总行级向量"""
        values = np.asarray(values, dtype=float)
        sums = np.empty((self.n_units, values.shape[1]))
        for r in range(values.shape[1]):
            sums[:, r] = np.bincount(self.unit_of_row, weights=values[:, r], minlength=self.n_units)
        return sums

    def expand(self, effects):
        """把单元效应展开到行"""
        return effects[self.unit_of_row]

    def __repr__(self):
        return f"{type(self).__name__}({self.n_units} 个单元)"


class IndividualLevel(RandomEffectLevel):
    """个体随机效应 u：单元为个体"""

    key = "u"
    description = "个体"

    @classmethod
    def from_dataset(cls, dataset, index):
        labels = sorted(set(dataset.individual_ids),
                        key=lambda i: (index.cluster_of[i], id_sort_key(i)))
        position = {label: k for k, label in enumerate(labels)}
        return cls([position[i] for i in dataset.individual_ids], labels)


class CoupleLevel(RandomEffectLevel):
    """夫妻固定随机效应 v：单元为夫妻簇"""

    key = "v"
    description = "夫妻（时不变）"

    @classmethod
    def from_dataset(cls, dataset, index):
        return cls(index.cluster_of_row, list(range(index.n_clusters)))


class CoupleWaveLevel(RandomEffectLevel):
    """夫妻时变随机效应 w：单元为（夫妻簇, 期）"""

    key = "w"
    description = "夫妻（时变）"

    @classmethod
    def from_dataset(cls, dataset, index):
        labels = [(j, t) for j in range(index.n_clusters) for t in index.waves[j]]
        position = {label: k for k, label in enumerate(labels)}
        units = [position[(j, t)] for j, t in zip(index.cluster_of_row, dataset.waves)]
        return cls(units, labels)


class LevelFactory:
    """随机效应层次工厂类"""

    _registry = {
        "u": IndividualLevel,
        "v": CoupleLevel,
        "w": CoupleWaveLevel,
    }

    @classmethod
    def create_level(cls, key, dataset, index):
        """创建层次实例"""
        key = LEVEL_NAMES.get(key, key)
        if key not in cls._registry:
            raise ValidationError(f"不支持的随机效应层次: {key}")
        return cls._registry[key].from_dataset(dataset, index)

    @classmethod
    def create_levels(cls, keys, dataset, index):
        """按固定顺序创建全部激活层次"""
        return {key: cls.create_level(key, dataset, index) for key in parse_levels(keys)}
