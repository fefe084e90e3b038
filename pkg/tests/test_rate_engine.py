import math
import numpy as np
import pytest
from src.sources.tree_source import build_tree, enumerate_rooted_subtrees, rooted_subtree
from src.rates.rate_engine import (
    FineLimitKind,
    RateConstraints,
    c_key_infinity,
    classify_fine_limit,
    fine_limit_terms,
    parent_minimizing_subtree,
    r_com,
    r_ent,
    r_key,
    r_key_fine,
    r_nn,
    two_user_rate,
)
from src.utils.errors import MismatchedSubtree


def path_tree(*rhos):
    return build_tree(range(1, len(rhos) + 2), [(i + 1, i + 2, r) for i, r in enumerate(rhos)])


def star_tree(rho, leaves=3):
    return build_tree(['c'] + [f'l{i}' for i in range(leaves)], [('c', f'l{i}', rho) for i in range(leaves)])


def random_tree(rng, max_vertices):
    m = int(rng.integers(2, max_vertices + 1))
    edges = [(int(rng.integers(0, i)), i, float(rng.uniform(0.05, 0.95))) for i in range(1, m)]
    return build_tree(range(m), edges)


def test_r_ent_path_root_one():
    tree = path_tree(0.8, 0.6)
    sub = rooted_subtree(tree, tree.index(1))
    value = r_ent(tree, sub, RateConstraints.uniform(tree, 1.0))
    assert value == pytest.approx(1 + 0.5 * math.log2(2.08), abs=1e-12)
    assert value == pytest.approx(1.52829, abs=1e-5)


def test_r_ent_lone_root_is_its_rate():
    tree = path_tree(0.8, 0.6)
    sub = rooted_subtree(tree, tree.index(2))
    assert r_ent(tree, sub, RateConstraints.from_names(tree, {1: 1.0, 2: 1.7, 3: 0.4})) == 1.7


def test_r_ent_independent_sources_sum_rates():
    tree = path_tree(0.0, 0.0, 0.0)
    sub = rooted_subtree(tree, tree.index(1))
    rq = RateConstraints.uniform(tree, 1.3)
    assert r_ent(tree, sub, rq) == pytest.approx(1.3 * len(sub.members))


def test_r_com_path_values():
    tree = path_tree(0.8, 0.6)
    rq = RateConstraints.uniform(tree, 1.0)
    assert r_com(tree, rooted_subtree(tree, tree.index(2)), rq) == pytest.approx(0.5 * math.log2(3.4), abs=1e-12)
    assert r_com(tree, rooted_subtree(tree, tree.index(1)), rq) == pytest.approx(
        0.5 * math.log2(2.08 + 0.64 * 4 / 3) + 0.5 * math.log2(3.4), abs=1e-12)


def test_r_com_uncorrelated_root_collapses_to_rate():
    tree = path_tree(0.0, 0.0)
    rq = RateConstraints.uniform(tree, 2.0)
    assert r_com(tree, rooted_subtree(tree, tree.index(2)), rq) == pytest.approx(2.0)


def test_r_com_sigma2_variant_is_smaller():
    tree = path_tree(0.8, 0.6)
    rq = RateConstraints.uniform(tree, 1.0)
    sub = rooted_subtree(tree, tree.index(2))
    assert r_com(tree, sub, rq, variant='sigma2') < r_com(tree, sub, rq)


def test_mismatched_subtree_rejected():
    tree = path_tree(0.8, 0.6)
    other = path_tree(0.8, 0.6, 0.5)
    sub = rooted_subtree(other, other.index(3))
    with pytest.raises(MismatchedSubtree):
        r_ent(tree, sub, RateConstraints.uniform(tree, 1.0))


def test_r_key_path_picks_middle_root():
    tree = path_tree(0.8, 0.6)
    report = r_key(tree, RateConstraints.uniform(tree, 1.0))
    assert report.best_subtree.root == tree.index(2)
    assert report.best_subtree.members == (tree.index(2),)
    assert report.r_key == pytest.approx(1 - 0.5 * math.log2(3.4), abs=1e-12)
    assert report.r_key == pytest.approx(0.11723, abs=1e-5)
    assert report.alpha == 1.0
    df = report.to_frame(tree)
    assert list(df.columns) == ['root', 'members', 'r_ent', 'r_com', 'candidate', 'chosen']
    assert df['chosen'].sum() == 1
    assert df.loc[df['chosen'], 'root'].item() == '2'
    # negative candidates stay in the table
    assert (df['candidate'] < 0).any()


def test_r_key_all_zero_correlation_clips():
    tree = path_tree(0.0, 0.0)
    assert r_key(tree, RateConstraints.uniform(tree, 1.0)).r_key == 0.0


def test_r_key_ties_pick_smallest_root():
    tree = build_tree(['a', 'b'], [('a', 'b', 0.7)])
    report = r_key(tree, RateConstraints.uniform(tree, 1.5))
    assert report.best_subtree.root == 0


def test_r_key_two_vertex_matches_two_user_rate():
    rng = np.random.default_rng(3)
    for _ in range(50):
        rho = float(rng.uniform(-0.95, 0.95))
        ru, rv = rng.uniform(0.1, 4.0, size=2)
        tree = build_tree(['u', 'v'], [('u', 'v', rho)])
        report = r_key(tree, RateConstraints.from_names(tree, {'u': ru, 'v': rv}))
        expected = max(two_user_rate(rho, ru, rv), two_user_rate(rho, rv, ru), 0.0)
        assert report.r_key == pytest.approx(expected, abs=1e-12)


def test_lower_rate_terminal_communicates():
    tree = build_tree(['u', 'v'], [('u', 'v', 0.8)])
    report = r_key(tree, RateConstraints.from_names(tree, {'u': 1.0, 'v': 2.5}))
    assert report.best_subtree.root == tree.index('u')
    assert report.alpha == 1.0


def test_alpha_over_best_subtree_members():
    tree = path_tree(0.9, 0.9, 0.9)
    rq = RateConstraints.from_names(tree, {1: 2.0, 2: 2.0, 3: 1.0, 4: 4.0})
    report = r_key(tree, rq)
    rates = [rq[v] for v in report.best_subtree.members]
    assert report.alpha == max(rates) / min(rates)
    assert report.alpha >= 1.0


def test_two_user_values():
    assert two_user_rate(0.8, 1.0, 1.0) == pytest.approx(0.22373, abs=1e-5)
    assert r_nn(0.8, 1.0) == pytest.approx(0.47177, abs=1e-5)
    assert two_user_rate(0.8, 1.0, 30.0) == pytest.approx(r_nn(0.8, 1.0), abs=1e-6)
    assert two_user_rate(0.0, 1.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert r_nn(0.0, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_two_user_difference_identity():
    for rho in np.linspace(0.05, 0.95, 10):
        for ru in np.linspace(0.2, 3.0, 10):
            for rv in np.linspace(0.2, 3.0, 10):
                lhs = 2.0 ** (-2 * two_user_rate(rho, ru, rv)) - 2.0 ** (-2 * two_user_rate(rho, rv, ru))
                au, av = 2.0 ** (2 * ru), 2.0 ** (2 * rv)
                rhs = rho ** 2 * (1 / (av * (av - 1)) - 1 / (au * (au - 1)))
                assert lhs == pytest.approx(rhs, abs=1e-12)
                if rv > ru:
                    assert two_user_rate(rho, ru, rv) > two_user_rate(rho, rv, ru)
                assert two_user_rate(rho, ru, rv) < r_nn(rho, ru)


def test_nats_mode_differs():
    assert two_user_rate(0.8, 1.0, 1.0, units='nats') != pytest.approx(two_user_rate(0.8, 1.0, 1.0))
    with pytest.raises(ValueError):
        two_user_rate(0.8, 1.0, 1.0, units='dB')


def test_c_key_infinity():
    assert c_key_infinity(path_tree(0.8)) == pytest.approx(0.73697, abs=1e-5)
    assert c_key_infinity(path_tree(0.8, 0.6)) == pytest.approx(0.5 * math.log2(1 / 0.64))
    assert c_key_infinity(path_tree(0.8, 0.0, 0.9)) == 0.0


def test_fine_limit_three_path_achieves_capacity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        r1, r2 = rng.uniform(0.05, 0.95, size=2)
        tree = path_tree(r1, r2)
        value, sub = r_key_fine(tree)
        assert value == pytest.approx(c_key_infinity(tree), abs=1e-12)
        assert classify_fine_limit(tree).kind is FineLimitKind.ACHIEVES_CAPACITY


def test_fine_limit_homogeneous_trees():
    value, _ = r_key_fine(path_tree(0.6, 0.6, 0.6, 0.6))
    assert value == pytest.approx(0.32193, abs=1e-5)
    star = classify_fine_limit(star_tree(0.7))
    assert star.kind is FineLimitKind.ACHIEVES_CAPACITY
    assert star.r_key_fine == pytest.approx(0.5 * math.log2(1 / 0.51))
    assert abs(star.gap) <= 1e-9


def test_fine_limit_suboptimal_chain():
    tree = path_tree(0.8, 0.9, 0.8)
    result = classify_fine_limit(tree)
    assert result.kind is FineLimitKind.STRICTLY_SUBOPTIMAL
    assert result.r_key_fine == pytest.approx(0.27597, abs=1e-5)
    assert result.c_key == pytest.approx(0.73697, abs=1e-5)
    assert result.gap == pytest.approx(-0.5 * math.log2(0.19 / 0.36), abs=1e-6)
    assert result.gap == pytest.approx(0.46100, abs=1e-5)


def test_two_vertex_fine_limit_is_capacity():
    tree = path_tree(0.8)
    assert classify_fine_limit(tree).kind is FineLimitKind.ACHIEVES_CAPACITY
    report = r_key(tree, RateConstraints.uniform(tree, 30.0))
    assert report.r_key == pytest.approx(c_key_infinity(tree), abs=1e-6)


def test_parent_minimizing_tree_achieves_capacity():
    tree = path_tree(0.9, 0.5, 0.9)
    witness = parent_minimizing_subtree(tree)
    assert witness is not None
    assert witness.root == tree.index(2)
    result = classify_fine_limit(tree)
    assert result.kind is FineLimitKind.ACHIEVES_CAPACITY
    assert result.gap == pytest.approx(0.0, abs=1e-9)


def test_no_parent_minimizing_subtree_on_suboptimal_chain():
    assert parent_minimizing_subtree(path_tree(0.8, 0.9, 0.8)) is None


def test_fine_limit_convergence_random_trees():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        tree = random_tree(rng, 10)
        fine, _ = r_key_fine(tree)
        coarse = r_key(tree, RateConstraints.uniform(tree, 30.0)).r_key
        assert abs(coarse - fine) <= 1e-6


def test_fine_limit_bounded_by_capacity_random_trees():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        tree = random_tree(rng, 12)
        fine, _ = r_key_fine(tree)
        assert fine <= c_key_infinity(tree) + 1e-12
        for sub in enumerate_rooted_subtrees(tree):
            _, corrections = fine_limit_terms(tree, sub)
            assert all(c <= 1e-15 for c in corrections.values())
