import csv
import json
import math

import numpy as np
import pytest
from scipy import stats
from scipy.stats import special_ortho_group

from conftest import gaussian_kernel_mean, mmd2_monte_carlo
from spurbench.errors import GeometryError
from spurbench.geometry import (GEOMETRY_COLUMNS, clean_prototype, contraction_report, cosine_to,
                                decompose, mann_whitney_u, mean_ci, mmd_rbf, write_geometry_csv,
                                write_json)


# ---------------------------------------------------------------- decomposition

def test_three_four_five():
    d = decompose([3.0, 4.0])
    assert d.magnitude == 5.0
    assert np.allclose(d.direction, [0.6, 0.8])


def test_reconstruction():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.standard_normal(64) * rng.uniform(0.1, 100)
        d = decompose(v)
        assert np.allclose(d.magnitude * d.direction, v, rtol=1e-12)
        assert np.linalg.norm(d.direction) == pytest.approx(1.0)


def test_euclidean_identity_in_polar_terms():
    rng = np.random.default_rng(1)
    q, p = rng.standard_normal(16), rng.standard_normal(16)
    a, b = decompose(q), decompose(p)
    cos = float(a.direction @ b.direction)
    polar = (a.magnitude - b.magnitude) ** 2 + 2 * a.magnitude * b.magnitude * (1 - cos)
    assert polar == pytest.approx(np.sum((q - p) ** 2), rel=1e-12)


def test_zero_vector_has_no_direction():
    with pytest.raises(GeometryError, match="no direction"):
        decompose(np.zeros(4))


def test_clean_prototype():
    assert np.allclose(clean_prototype([[2.0, 0.0], [0.0, 2.0]]), [1 / math.sqrt(2)] * 2)
    # raw means, so the longer vector pulls harder
    p = clean_prototype([[10.0, 0.0], [0.0, 1.0]])
    assert p[0] > p[1]
    with pytest.raises(GeometryError, match="degenerate prototype"):
        clean_prototype([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(GeometryError, match="degenerate prototype"):
        clean_prototype(np.zeros((0, 3)))


def test_cosine_to():
    assert np.allclose(cosine_to([[2.0, 0.0], [1.0, 1.0]], np.array([1.0, 0.0])), [1.0, 1 / math.sqrt(2)])


def test_mean_ci():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    m, ci = mean_ci(x)
    assert m == 2.5
    assert ci == pytest.approx(1.96 * np.std(x, ddof=1) / 2)
    assert mean_ci([7.0]) == (7.0, 0.0)


# ---------------------------------------------------------------- Mann-Whitney U

def test_exact_complete_separation():
    u, p = mann_whitney_u([6, 7, 8, 9, 10], [1, 2, 3, 4, 5])
    assert u == 25
    assert p == pytest.approx(2 / math.comb(10, 5), rel=1e-12)


def test_exact_against_enumeration_oracle():
    import itertools
    rng = np.random.default_rng(2)
    a, b = rng.normal(0.5, 1, 4), rng.normal(0, 1, 5)
    pooled = np.concatenate([a, b])

    def u_of(idx):
        return sum((pooled[i] > pooled[j]) + 0.5 * (pooled[i] == pooled[j])
                   for i in idx for j in range(9) if j not in idx)

    us = [u_of(c) for c in itertools.combinations(range(9), 4)]
    u_obs = u_of(tuple(range(4)))
    mean = 4 * 5 / 2
    ref = np.mean([abs(u - mean) >= abs(u_obs - mean) - 1e-12 for u in us])
    u, p = mann_whitney_u(a, b, method="exact")
    assert u == pytest.approx(u_obs)
    assert p == pytest.approx(min(1.0, ref), abs=1e-12)


def test_identical_samples_p_near_one():
    x = [1.0, 2.0, 3.0, 4.0]
    assert mann_whitney_u(x, x)[1] == pytest.approx(1.0)


def test_exact_and_asymptotic_agree_on_four_by_four():
    a, b = [1, 2, 4, 5], [3, 6, 7, 8]
    pe = mann_whitney_u(a, b, method="exact")[1]
    pa = mann_whitney_u(a, b, method="asymptotic")[1]
    assert abs(pe - pa) < 0.02


def test_exact_and_asymptotic_worst_case_over_all_rankings():
    import itertools
    worst = 0.0
    for a in itertools.combinations(range(1, 9), 4):
        b = [i for i in range(1, 9) if i not in a]
        pe = mann_whitney_u(a, b, method="exact")[1]
        pa = mann_whitney_u(a, b, method="asymptotic")[1]
        worst = max(worst, abs(pe - pa))
    # the largest gaps sit mid-distribution (p > 0.3), never in the tails
    assert worst < 0.035


def test_complementary_u():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal(30), rng.standard_normal(25)
    u_ab, p_ab = mann_whitney_u(a, b)
    u_ba, p_ba = mann_whitney_u(b, a)
    assert u_ab + u_ba == 30 * 25
    assert p_ab == pytest.approx(p_ba)


@pytest.mark.parametrize("n,m,ties", [(3, 4, False), (30, 40, False), (20, 25, True)])
def test_matches_scipy(n, m, ties):
    rng = np.random.default_rng(n * m)
    a, b = rng.normal(0.3, 1, n), rng.normal(0, 1, m)
    if ties:
        a, b = np.round(a), np.round(b)
    method = "exact" if n * m <= 64 else "asymptotic"
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method=method, use_continuity=True)
    u, p = mann_whitney_u(a, b)
    assert u == ref.statistic
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_extreme_separation_p_is_positive():
    _, p = mann_whitney_u(np.arange(4000) + 1e4, np.arange(4000))
    assert 0 < p < 1e-300


def test_u_input_errors():
    with pytest.raises(GeometryError):
        mann_whitney_u([], [1.0])
    with pytest.raises(GeometryError):
        mann_whitney_u([1.0], [2.0], method="bogus")


# ---------------------------------------------------------------- contraction report

def test_identical_sets_have_zero_diff():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((40, 8)) + 3
    labels = ["a"] * 20 + ["b"] * 20
    rep = contraction_report(x, labels, x.copy(), labels)
    assert rep.cos_diff == 0.0
    assert rep.clean_mag == rep.mixed_mag
    assert rep.mag_p == pytest.approx(1.0)
    assert set(rep.per_class) == {"a", "b"}


def test_contraction_detected():
    rng = np.random.default_rng(5)
    dirs = rng.standard_normal((500, 16))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    clean = dirs * rng.normal(83, 2.5, (500, 1))
    mixed = dirs * rng.normal(59, 1.1, (500, 1))
    rep = contraction_report(clean, ["a"] * 500, mixed, ["a"] * 500)
    assert rep.clean_mag > rep.mixed_mag and rep.mag_p < 1e-6
    assert rep.cos_diff == pytest.approx(0.0, abs=1e-12)


def test_missing_clean_reference():
    with pytest.raises(GeometryError, match="missing clean reference"):
        contraction_report(np.ones((2, 3)), ["a", "a"], np.ones((2, 3)), ["a", "b"])


def test_geometry_outputs(tmp_path):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((20, 4)) + 2
    labels = ["a"] * 10 + ["b"] * 10
    rep = contraction_report(x, labels, 0.7 * x, labels, label="test")
    write_geometry_csv(tmp_path / "g.csv", [rep])
    rows = list(csv.DictReader((tmp_path / "g.csv").open()))
    assert list(rows[0]) == GEOMETRY_COLUMNS
    assert [r["label"] for r in rows] == ["test", "test/a", "test/b"]
    assert float(rows[0]["clean_mag"]) == rep.clean_mag
    write_json(tmp_path / "g.json", rep.to_dict())
    back = json.loads((tmp_path / "g.json").read_text())
    assert back["per_class"]["a"]["n_clean"] == 10


# ---------------------------------------------------------------- MMD

def test_mmd_same_set_is_zero():
    x = np.random.default_rng(7).standard_normal((200, 5))
    rep = mmd_rbf(x, x)
    assert rep.mmd <= 1e-9
    assert rep.centroid_cosine == pytest.approx(1.0)


def test_mmd_opposite_centroids():
    x = np.random.default_rng(8).standard_normal((50, 3)) + [1.0, 2.0, 0.5]
    assert mmd_rbf(x, -x).centroid_cosine == pytest.approx(-1.0)


def test_monte_carlo_oracle_agrees_with_closed_form():
    mu_x, mu_y, s, h = np.zeros(2), np.array([4.0, 0.0]), 1.0, 2.5
    closed = 2 * gaussian_kernel_mean(0.0, s, h, 2) - 2 * gaussian_kernel_mean(16.0, s, h, 2)
    assert mmd2_monte_carlo(mu_x, mu_y, s, h) == pytest.approx(closed, rel=0.01)


def test_separated_gaussians_match_reference():
    rng = np.random.default_rng(9)
    mu_x, mu_y = np.zeros(2), np.array([4.0, 0.0])
    x = mu_x + rng.standard_normal((1500, 2))
    y = mu_y + rng.standard_normal((1500, 2))
    rep = mmd_rbf(x, y)
    ref = mmd2_monte_carlo(mu_x, mu_y, 1.0, rep.bandwidth)
    assert rep.mmd2_unbiased == pytest.approx(ref, rel=0.05)


def test_mmd_symmetric_and_rotation_invariant():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((80, 4))
    y = rng.standard_normal((60, 4)) + 0.8
    base = mmd_rbf(x, y).mmd2_unbiased
    assert mmd_rbf(y, x).mmd2_unbiased == pytest.approx(base, rel=1e-12)
    r = special_ortho_group.rvs(4, random_state=11)
    assert mmd_rbf(x @ r.T, y @ r.T).mmd2_unbiased == pytest.approx(base, rel=1e-9)


def test_mmd_errors():
    with pytest.raises(GeometryError, match="dimension mismatch"):
        mmd_rbf(np.ones((3, 2)), np.ones((3, 3)))
    with pytest.raises(GeometryError):
        mmd_rbf(np.ones((1, 2)), np.ones((3, 2)))
