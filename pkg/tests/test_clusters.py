from collections import deque

import numpy as np
import pytest

from dyadprobit.clusters import UnionFind, build_couple_clusters, link_components
from dyadprobit.data_model import validate_dataset
from dyadprobit.errors import ValidationError
from dyadprobit.levels import LevelFactory, parse_levels
from tests.conftest import make_row

LABELS = (["y_1", "y_2"], ["x_intercept", "x_1"])


def bfs_components(individuals, links):
    graph = {i: set() for i in individuals}
    for a, b in links:
        graph[a].add(b)
        graph[b].add(a)
    seen, components = set(), []
    for start in individuals:
        if start in seen:
            continue
        todo, group = deque([start]), set()
        while todo:
            node = todo.popleft()
            if node in group:
                continue
            group.add(node)
            todo.extend(graph[node] - group)
        seen |= group
        components.append(frozenset(group))
    return set(components)


def test_union_find():
    finder = UnionFind("abcd")
    finder.union("a", "b")
    finder.union("c", "d")
    finder.union("b", "d")
    assert finder.n_clusters == 1
    assert "e" not in finder
    assert finder.find("a") == finder.find("c")


def test_partner_history_forms_one_cluster(couple_dataset):
    index = build_couple_clusters(couple_dataset)
    members = {frozenset(g) for g in index.members.values()}
    assert members == {frozenset({"A", "B", "C"}), frozenset({"D"})}
    assert index.cluster_of["A"] == index.cluster_of["C"]
    assert index.waves[index.cluster_of["A"]] == [1, 2, 3, 4]
    assert index.size(index.cluster_of["A"]) == 3


def test_no_partners_gives_singletons():
    rows = [make_row(str(i), t) for i in range(1, 5) for t in (1, 2)]
    index = build_couple_clusters(validate_dataset(rows, *LABELS))
    assert index.n_clusters == 4
    assert all(index.size(j) == 1 for j in index.members)


def test_transitive_closure_without_co_observation():
    rows = [
        make_row("A", 1, "B"), make_row("B", 1, "A"),
        make_row("B", 5, "C"), make_row("C", 5, "B"),
        make_row("A", 6), make_row("C", 2),
    ]
    index = build_couple_clusters(validate_dataset(rows, *LABELS))
    assert index.n_clusters == 1


def test_matches_breadth_first_search(rng):
    individuals = [str(i) for i in range(200)]
    links = {tuple(rng.choice(individuals, size=2, replace=False)) for _ in range(120)}
    groups = link_components(individuals, links)
    assert {frozenset(g) for g in groups.values()} == bfs_components(individuals, links)


def test_cluster_numbering_is_stable(couple_dataset):
    index = build_couple_clusters(couple_dataset)
    assert index.members[0][0] == "A"
    assert list(index.cluster_of_row) == [index.cluster_of[i] for i in couple_dataset.individual_ids]


def test_levels_units(couple_dataset):
    index = build_couple_clusters(couple_dataset)
    levels = LevelFactory.create_levels("three", couple_dataset, index)
    assert list(levels) == ["u", "v", "w"]
    assert levels["u"].n_units == 4
    assert levels["v"].n_units == 2
    # 簇 {A,B,C} 覆盖第 1-4 期，D 覆盖第 1-2 期
    assert levels["w"].n_units == 6
    assert levels["w"].counts.sum() == couple_dataset.n_rows
    wave1 = levels["w"].unit_labels.index((index.cluster_of["A"], 1))
    assert levels["w"].counts[wave1] == 2


def test_unit_sums_and_expand(couple_dataset):
    index = build_couple_clusters(couple_dataset)
    level = LevelFactory.create_level("couple_v", couple_dataset, index)
    values = np.arange(couple_dataset.n_rows * 2, dtype=float).reshape(-1, 2)
    sums = level.unit_sums(values)
    assert np.allclose(sums.sum(axis=0), values.sum(axis=0))
    assert level.expand(sums).shape == values.shape


def test_parse_levels():
    assert parse_levels("two") == ("u",)
    assert parse_levels("three") == ("u", "v", "w")
    assert parse_levels("couple_w, individual_u") == ("u", "w")
    with pytest.raises(ValidationError):
        parse_levels(["household"])


def test_assignment_ignores_row_order(couple_rows, rng):
    index = build_couple_clusters(validate_dataset(couple_rows, *LABELS))
    for _ in range(5):
        shuffled = [couple_rows[i] for i in rng.permutation(len(couple_rows))]
        other = build_couple_clusters(validate_dataset(shuffled, *LABELS))
        assert other.cluster_of == index.cluster_of
        assert other.members == index.members
        assert other.waves == index.waves


def test_clusters_partition_individuals_and_rows(couple_dataset):
    index = build_couple_clusters(couple_dataset)
    assert sum(index.size(j) for j in index.members) == couple_dataset.n
    row_counts = np.bincount(index.cluster_of_row, minlength=index.n_clusters)
    assert row_counts.sum() == couple_dataset.n_rows
    for j, group in index.members.items():
        assert row_counts[j] == sum(couple_dataset.T[person] for person in group)


def test_rebuild_is_identical(couple_dataset):
    first = build_couple_clusters(couple_dataset)
    second = build_couple_clusters(couple_dataset)
    assert first.cluster_of == second.cluster_of
    assert np.array_equal(first.cluster_of_row, second.cluster_of_row)
