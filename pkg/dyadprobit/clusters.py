"""
夫妻簇模块
通过同居伴侣关系把个体连成连通分量（超级家庭）
"""

import logging
from dataclasses import dataclass

import numpy as np

from dyadprobit.data_model import id_sort_key

logger = logging.getLogger(__name__)


class UnionFind:
    """带路径压缩与按秩合并的并查集"""

    def __init__(self, items):
        self._leader = {s: s for s in items}
        self._rank = {s: 0 for s in items}
        self.n_clusters = len(self._leader)

    def __repr__(self):
        return f"UnionFind: {self.n_clusters} 个簇"

    def __contains__(self, s):
        return s in self._leader

    def find(self, s):
        """查找 s 所在集合的代表元"""
        path = [s]
        parent = self._leader[s]
        while parent != self._leader[parent]:
            path.append(parent)
            parent = self._leader[parent]
        for item in path:
            self._leader[item] = parent
        return parent

    def union(self, a, b):
        """合并 a 与 b 所在的集合"""
        a_root, b_root = self.find(a), self.find(b)
        if a_root == b_root:
            return
        if self._rank[a_root] < self._rank[b_root]:
            a_root, b_root = b_root, a_root
        self._leader[b_root] = a_root
        if self._rank[a_root] == self._rank[b_root]:
            self._rank[a_root] += 1
        self.n_clusters -= 1

    def groups(self):
        """代表元 -> 成员列表"""
        out = {}
        for item in self._leader:
            out.setdefault(self.find(item), []).append(item)
        return out


@dataclass(frozen=True)
class CoupleClusterIndex:
    """夫妻簇索引"""

    cluster_of: dict
    members: dict
    waves: dict
    cluster_of_row: np.ndarray

    @property
    def n_clusters(self):
        return len(self.members)

    def size(self, cluster):
        return len(self.members[cluster])


def link_components(individuals, links):
    """对个体和无向连接求连通分量，按最小成员编号排序后编号"""
    finder = UnionFind(individuals)
    for a, b in links:
        if a in finder and b in finder:
            finder.union(a, b)
    groups = [sorted(g, key=id_sort_key) for g in finder.groups().values()]
    groups.sort(key=lambda g: id_sort_key(g[0]))
    return {j: g for j, g in enumerate(groups)}


def build_couple_clusters(dataset):
    """构造夫妻簇：任意一期的伴侣关系都把两人并入同一簇"""
    individuals = dataset.individuals
    links = {
        tuple(sorted((row.individual_id, row.partner_id), key=id_sort_key))
        for row in dataset.rows
        if row.partner_id is not None
    }
    members = link_components(individuals, links)
    cluster_of = {person: j for j, group in members.items() for person in group}

    waves = {j: set() for j in members}
    for row in dataset.rows:
        waves[cluster_of[row.individual_id]].add(row.wave)
    waves = {j: sorted(w) for j, w in waves.items()}

    cluster_of_row = np.array([cluster_of[i] for i in dataset.individual_ids], dtype=int)
    sizes = np.bincount([len(g) for g in members.values()])
    logger.info("构造了 %d 个夫妻簇（规模分布: %s）", len(members),
                ", ".join(f"{k}人:{c}" for k, c in enumerate(sizes) if c))
    return CoupleClusterIndex(cluster_of, members, waves, cluster_of_row)
