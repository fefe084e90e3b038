import math
import numpy as np
import pytest
from src.sources.tree_source import (
    build_tree,
    check_subtree,
    covariance_matrix,
    enumerate_rooted_subtrees,
    first_hop_toward,
    path_correlation,
    rooted_subtree,
    sample_block,
)
from src.utils.errors import BadCorrelation, MismatchedSubtree, NotATree, SingletonTree, UnknownVertex

SAMPLES = 200_000


def path_tree(*rhos):
    return build_tree(range(1, len(rhos) + 2), [(i + 1, i + 2, r) for i, r in enumerate(rhos)])


def star_tree():
    return build_tree(['c', 'a', 'b', 'd'], [('c', 'a', 0.7), ('c', 'b', 0.7), ('c', 'd', 0.7)])


def members(tree, subtree):
    return [tree.name(v) for v in subtree.members]


def test_smallest_tree():
    tree = build_tree([1, 2], [(1, 2, 0.8)])
    assert tree.names == (1, 2)
    assert tree.correlation(0, 1) == 0.8
    assert tree.neighbors(0) == (1,)


def test_invalid_trees():
    with pytest.raises(NotATree):
        build_tree([1, 2, 3], [(1, 2, 0.5), (2, 3, 0.5), (1, 3, 0.5)])
    with pytest.raises(NotATree):
        build_tree([1, 2, 3, 4], [(1, 2, 0.5), (3, 4, 0.5)])
    with pytest.raises(NotATree):
        build_tree([1, 1], [(1, 1, 0.5)])
    with pytest.raises(UnknownVertex):
        build_tree([1, 2], [(1, 9, 0.5)])


@pytest.mark.parametrize('rho', [1.0, -1.0, 1.5, float('nan')])
def test_bad_correlation(rho):
    with pytest.raises(BadCorrelation):
        build_tree([1, 2], [(1, 2, rho)])


def test_zero_correlation_warns(caplog):
    build_tree([1, 2], [(1, 2, 0.0)])
    assert 'rho = 0' in caplog.text


def test_path_correlation():
    tree = path_tree(0.8, 0.6)
    assert path_correlation(tree, 1, 1) == 1.0
    assert path_correlation(tree, 0, 1) == 0.8
    assert path_correlation(tree, 0, 2) == pytest.approx(0.48, abs=1e-15)
    with pytest.raises(UnknownVertex):
        path_correlation(tree, 0, 7)
    with pytest.raises(UnknownVertex):
        tree.index(42)


def test_covariance_matrix_is_symmetric_psd():
    phi = covariance_matrix(star_tree())
    assert np.allclose(phi, phi.T)
    assert np.allclose(np.diag(phi), 1.0)
    assert phi[1, 2] == pytest.approx(0.49)
    assert np.linalg.eigvalsh(phi).min() > 0


def test_sampled_correlation_matches_path_product():
    tree = path_tree(0.8, 0.6)
    x = sample_block(tree, SAMPLES, np.random.default_rng(0)).samples
    emp = np.corrcoef(x)
    for u in tree.vertices:
        for v in tree.vertices:
            r = path_correlation(tree, u, v)
            assert abs(emp[u, v] - r) <= 3 * (1 - r * r) / math.sqrt(SAMPLES) + 1e-12
    assert np.allclose(x.mean(axis=1), 0.0, atol=4 / math.sqrt(SAMPLES))
    assert np.allclose(x.var(axis=1), 1.0, atol=0.02)


def test_conditional_independence_on_path():
    tree = path_tree(0.8, 0.6)
    x = sample_block(tree, SAMPLES, np.random.default_rng(1)).samples
    # residuals of the ends after regressing on the middle vertex
    r1 = x[0] - 0.8 * x[1]
    r3 = x[2] - 0.6 * x[1]
    partial = np.corrcoef(r1, r3)[0, 1]
    assert abs(partial) <= 3 / math.sqrt(SAMPLES)


def test_independent_pair():
    tree = build_tree(['u', 'v'], [('u', 'v', 0.0)])
    x = sample_block(tree, SAMPLES, np.random.default_rng(2)).samples
    assert abs(np.mean(x[0] * x[1])) <= 3 / math.sqrt(SAMPLES)


def test_single_vertex_block():
    tree = build_tree(['solo'], [])
    block = sample_block(tree, 1000, np.random.default_rng(3), index=5)
    assert block.samples.shape == (1, 1000)
    assert block.n == 1000 and block.index == 5
    with pytest.raises(SingletonTree):
        enumerate_rooted_subtrees(tree)
    with pytest.raises(ValueError):
        sample_block(tree, 0, np.random.default_rng(3))


def test_sampling_is_seeded():
    tree = star_tree()
    a = sample_block(tree, 10, np.random.default_rng(9)).samples
    b = sample_block(tree, 10, np.random.default_rng(9)).samples
    assert np.array_equal(a, b)


def test_rooted_subtrees_of_small_trees():
    two = build_tree(['u', 'v'], [('u', 'v', 0.8)])
    subs = enumerate_rooted_subtrees(two)
    assert [members(two, s) for s in subs] == [['u'], ['v']]

    path = path_tree(0.8, 0.6)
    assert [members(path, s) for s in enumerate_rooted_subtrees(path)] == [[1, 2], [2], [3, 2]]

    star = star_tree()
    by_root = {star.name(s.root): members(star, s) for s in enumerate_rooted_subtrees(star)}
    assert by_root['c'] == ['c']
    assert by_root['a'] == ['a', 'c']
    sub = rooted_subtree(star, star.index('a'))
    assert sub.parent == {star.index('c'): star.index('a')}
    assert sub.label(star) == '{a,c}'


def test_members_are_never_leaves():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = int(rng.integers(2, 9))
        edges = [(v, int(rng.integers(0, v)), 0.5) for v in range(1, m)]
        tree = build_tree(range(m), edges)
        subs = enumerate_rooted_subtrees(tree)
        assert len(subs) == m
        for s in subs:
            assert s.members[0] == s.root
            for v in s.members[1:]:
                assert s.parent[v] in s.members
                # a member other than the root has a child in the rooted tree
                assert len(tree.neighbors(v)) >= 2


def test_check_subtree_and_first_hop():
    path = path_tree(0.8, 0.6, 0.5)
    sub = rooted_subtree(path, 1)
    check_subtree(path, sub)
    with pytest.raises(MismatchedSubtree):
        check_subtree(path, rooted_subtree(path_tree(0.8, 0.6), 1))
    assert first_hop_toward(path, sub, 0) == 1
    assert first_hop_toward(path, sub, 3) == 2
    assert first_hop_toward(path, sub, 1) is None
