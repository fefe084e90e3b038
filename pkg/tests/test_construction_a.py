import itertools
import math
import numpy as np
import pytest
from scipy import stats
from src.lattices.construction_a import (
    construction_a,
    cubic_lattice,
    gram_volume,
    mod_lattice,
    nearest_point,
    poltyrev_exponent,
    random_code,
    sample_dither,
    second_moment,
)
from src.utils.errors import BelowThreshold, DimensionMismatch

TWO_PI_E = 2 * math.pi * math.e


def brute_force_nearest(lattice, x, radius=3):
    best, best_d = None, math.inf
    for word in lattice.codewords:
        for shift in itertools.product(range(-radius, radius + 1), repeat=lattice.n):
            point = (word + lattice.p * np.array(shift)) * lattice.scale
            d = float(((x - point) ** 2).sum())
            if d < best_d - 1e-12:
                best, best_d = point, d
    return best, best_d


def test_cubic_rounding():
    lat = cubic_lattice(2, 1.7)
    assert np.allclose(nearest_point(lat, [0.4 * 1.7, -0.6 * 1.7]), [0.0, -1.7])


def test_small_code_example():
    lat = construction_a([[1, 1]], p=2)
    assert np.allclose(nearest_point(lat, [0.9, 0.9]), [1.0, 1.0])


def test_nearest_point_matches_brute_force():
    rng = np.random.default_rng(5)
    lat = construction_a(random_code(3, 1, 3, rng), p=3, scale=0.7)
    for x in rng.normal(scale=1.0, size=(40, 3)):
        _, best_d = brute_force_nearest(lat, x)
        got = nearest_point(lat, x)
        assert float(((x - got) ** 2).sum()) == pytest.approx(best_d, abs=1e-9)


def test_nearest_point_idempotent_on_lattice_points():
    rng = np.random.default_rng(8)
    lat = construction_a(random_code(4, 2, 5, rng), p=5, scale=0.45)
    x = rng.normal(scale=3.0, size=(10_000, 4))
    q = nearest_point(lat, x)
    assert np.allclose(nearest_point(lat, q), q)
    assert q.shape == x.shape


def test_mod_lattice_examples():
    lat = cubic_lattice(2, 2.0)
    assert np.allclose(mod_lattice(lat, [1.3 * 2.0, -0.2 * 2.0]), [0.3 * 2.0, -0.2 * 2.0])
    assert np.allclose(mod_lattice(lat, [4.0, -2.0]), [0.0, 0.0])


def test_mod_lattice_periodic_and_in_cell():
    rng = np.random.default_rng(9)
    lat = construction_a(random_code(3, 1, 5, rng), p=5, scale=1.3)
    x = rng.normal(scale=4.0, size=(10_000, 3))
    lam = nearest_point(lat, rng.normal(scale=20.0, size=(10_000, 3)))
    r = mod_lattice(lat, x)
    assert np.allclose(mod_lattice(lat, x + lam), r)
    assert np.allclose(nearest_point(lat, r), 0.0)


def test_dimension_mismatch():
    lat = cubic_lattice(3)
    with pytest.raises(DimensionMismatch):
        nearest_point(lat, [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        mod_lattice(lat, np.zeros((5, 2)))


def test_rank_deficient_code_rejected():
    with pytest.raises(ValueError):
        construction_a([[1, 2], [2, 4]], p=5)


def test_second_moment_of_cube():
    gamma = 0.8
    est, err = second_moment(cubic_lattice(3, gamma), 100_000, np.random.default_rng(1))
    assert est == pytest.approx(gamma ** 2 / 12, rel=0.02)
    assert err > 0


def test_second_moment_scaling_law():
    rng = np.random.default_rng(2)
    code = random_code(3, 1, 3, rng)
    a, ea = second_moment(construction_a(code, 3, 1.0), 100_000, np.random.default_rng(10))
    b, eb = second_moment(construction_a(code, 3, 2.5), 100_000, np.random.default_rng(11))
    assert abs(b - 2.5 ** 2 * a) <= 3 * math.hypot(eb, 2.5 ** 2 * ea)


def test_second_moment_stable_across_seeds():
    lat = construction_a([[1, 1]], p=2)
    a, ea = second_moment(lat, 100_000, np.random.default_rng(3))
    b, eb = second_moment(lat, 100_000, np.random.default_rng(4))
    assert abs(a - b) <= 3 * math.hypot(ea, eb)


def test_second_moment_needs_enough_samples():
    with pytest.raises(ValueError):
        second_moment(cubic_lattice(2), 100, np.random.default_rng(0))


def test_dither_uniform_on_cube():
    gamma = 1.5
    d = sample_dither(cubic_lattice(2, gamma), np.random.default_rng(12), size=100_000)
    for j in range(2):
        assert stats.kstest(d[:, j], 'uniform', args=(-gamma / 2, gamma)).pvalue > 0.01


def test_dither_mean_zero():
    rng = np.random.default_rng(13)
    lat = construction_a(random_code(3, 1, 5, rng), p=5, scale=0.9)
    d = sample_dither(lat, rng, size=50_000)
    se = d.std(axis=0, ddof=1) / math.sqrt(len(d))
    assert np.all(np.abs(d.mean(axis=0)) <= 3 * se)
    assert np.allclose(nearest_point(lat, d), 0.0)


@pytest.mark.parametrize('code,p,scale', [
    ([[1, 0], [0, 1]], 2, 1.0),
    ([[1, 1]], 2, 1.0),
    ([[1, 2]], 3, 0.6),
])
def test_dithered_sum_is_distributed_like_dither(code, p, scale):
    lat = construction_a(code, p, scale)
    rng = np.random.default_rng(14)
    x = np.array([0.37, -1.21]) * scale
    shifted = mod_lattice(lat, x + sample_dither(lat, rng, size=100_000))
    fresh = sample_dither(lat, rng, size=100_000)
    half = lat.p * scale / 2
    edges = np.linspace(-half, half, 9)
    h1, _, _ = np.histogram2d(shifted[:, 0], shifted[:, 1], bins=[edges, edges])
    h2, _, _ = np.histogram2d(fresh[:, 0], fresh[:, 1], bins=[edges, edges])
    table = np.vstack([h1.ravel(), h2.ravel()])
    table = table[:, table.sum(axis=0) > 0]
    _, pvalue, _, _ = stats.chi2_contingency(table)
    assert pvalue > 0.01


def test_volume_matches_gram_determinant():
    rng = np.random.default_rng(15)
    for n, k, p in [(2, 1, 3), (4, 2, 5), (5, 3, 7), (3, 0, 2)]:
        lat = construction_a(random_code(n, k, p, rng), p, scale=float(rng.uniform(0.3, 2.0)))
        assert gram_volume(lat) == pytest.approx(lat.volume, rel=1e-9)


def test_poltyrev_exponent_branches():
    assert poltyrev_exponent(TWO_PI_E) == pytest.approx(0.0, abs=1e-15)
    assert poltyrev_exponent(4 * TWO_PI_E) == pytest.approx(0.5, abs=1e-15)
    assert poltyrev_exponent(2 * TWO_PI_E) == pytest.approx(0.5 - 0.5 * math.log(2), abs=1e-12)
    for edge in (2 * TWO_PI_E, 4 * TWO_PI_E):
        below = poltyrev_exponent(edge * (1 - 1e-15))
        above = poltyrev_exponent(edge)
        assert abs(below - above) <= 1e-12
    grid = np.linspace(TWO_PI_E, 10 * TWO_PI_E, 400)
    values = [poltyrev_exponent(m) for m in grid]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_poltyrev_below_threshold():
    with pytest.raises(BelowThreshold):
        poltyrev_exponent(TWO_PI_E * 0.99)
