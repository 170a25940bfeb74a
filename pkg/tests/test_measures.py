import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mkv_bismut.measures as M
from mkv_bismut.errors import (
    DimensionMismatchError,
    EmptyInputError,
    EnvelopeViolationError,
    EpsilonOutOfRangeError,
    NodeOutOfRangeError,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
atoms_1d = st.lists(finite, min_size=1, max_size=12)


def weighted(draw_pts, draw_w):
    w = np.asarray(draw_w, float)
    return M.EmpiricalMeasure(np.asarray(draw_pts, float)[:, None], w / w.sum())


@st.composite
def measures_1d(draw):
    pts = draw(atoms_1d)
    w = draw(st.lists(st.floats(0.01, 10), min_size=len(pts), max_size=len(pts)))
    return weighted(pts, w)


# ---- from_samples -------------------------------------------------------------

def test_from_samples_uniform_weights():
    mu = M.from_samples([(1, 0), (3, 0)])
    assert mu.dim == 2
    np.testing.assert_array_equal(mu.weights, [0.5, 0.5])


def test_from_samples_single_atom_is_dirac():
    mu = M.from_samples([(5,)])
    assert mu.size == 1 and mu.weights[0] == 1.0 and mu.points[0, 0] == 5.0


def test_from_samples_law_of_large_numbers():
    pts = np.random.default_rng(0).standard_normal((1000, 1))
    assert abs(M.from_samples(pts).mean[0]) < 0.1


def test_from_samples_errors():
    with pytest.raises(EmptyInputError):
        M.from_samples(np.empty((0, 1)))
    with pytest.raises(DimensionMismatchError):
        M.EmpiricalMeasure(np.zeros((2, 1)), [1.0])


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        M.EmpiricalMeasure(np.zeros((2, 1)), [0.5, 0.6])


def test_measure_is_read_only():
    mu = M.from_samples([[0.0], [1.0]])
    with pytest.raises(ValueError):
        mu.points[0, 0] = 3.0


# ---- moment -------------------------------------------------------------------

def test_moment_examples():
    assert M.moment(M.EmpiricalMeasure.dirac([2.0]), 2) == 4.0
    mu = M.from_samples(np.random.default_rng(1).standard_normal((7, 3)))
    assert M.moment(mu, 0) == 1.0
    assert M.moment(M.from_samples([[-1.0], [1.0]]), 3) == 1.0


def test_moment_rejects_negative_order():
    with pytest.raises(ValueError):
        M.moment(M.EmpiricalMeasure.dirac([1.0]), -1)


# ---- mix ----------------------------------------------------------------------

def test_mix_endpoints_and_convexity():
    mu = M.from_samples([[0.0], [2.0]])
    nu = M.from_samples([[5.0]])
    m0 = M.mix(mu, nu, 0.0)
    assert m0.integrate(lambda p: p[:, 0]) == mu.mean[0]
    assert m0.weights[-1] == 0.0  # zero-weight atom kept
    assert M.mix(mu, nu, 1.0).mean[0] == 5.0
    d = M.mix(M.EmpiricalMeasure.dirac([0.0]), M.EmpiricalMeasure.dirac([1.0]), 0.25)
    assert d.mean[0] == 0.25


def test_mix_errors():
    a, b = M.EmpiricalMeasure.dirac([0.0]), M.EmpiricalMeasure.dirac([0.0, 1.0])
    with pytest.raises(DimensionMismatchError):
        M.mix(a, b, 0.5)
    with pytest.raises(EpsilonOutOfRangeError):
        M.mix(a, a, 1.5)


@given(measures_1d(), measures_1d())
def test_mix_mean_is_exactly_convex_on_eps_grid(mu, nu):
    for eps in np.linspace(0, 1, 11):
        got = M.mix(mu, nu, eps).mean[0]
        want = M.weighted_sum(np.concatenate([mu.points[:, 0], nu.points[:, 0]]),
                              np.concatenate([(1 - eps) * mu.weights, eps * nu.weights]))
        assert got == want
        assert got == pytest.approx((1 - eps) * mu.mean[0] + eps * nu.mean[0], abs=1e-9)


@given(measures_1d(), measures_1d(), st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.0]))
def test_mix_moment_is_convex(mu, nu, k):
    for eps in (0.0, 0.3, 1.0):
        got = M.moment(M.mix(mu, nu, eps), k)
        assert got == pytest.approx((1 - eps) * M.moment(mu, k) + eps * M.moment(nu, k),
                                    rel=1e-12, abs=1e-12)


@given(measures_1d(), st.randoms(use_true_random=False))
def test_mean_is_independent_of_atom_order(mu, rnd):
    perm = list(range(mu.size))
    rnd.shuffle(perm)
    other = M.EmpiricalMeasure(mu.points[perm], mu.weights[perm])
    assert other.mean[0] == mu.mean[0]
    assert M.moment(other, 2) == M.moment(mu, 2)


# ---- pair_integral ------------------------------------------------------------

def test_pair_integral_examples():
    mu = M.from_samples(np.random.default_rng(2).standard_normal((5, 1)))
    nu = M.from_samples(np.random.default_rng(3).standard_normal((3, 1)))
    assert M.pair_integral(lambda p: np.ones(len(p)), mu, nu) == 0.0
    d0, d1 = M.EmpiricalMeasure.dirac([0.0]), M.EmpiricalMeasure.dirac([1.0])
    assert M.pair_integral(lambda p: p[:, 0], d0, d1) == -1.0
    assert M.pair_integral(lambda p: p[:, 0] ** 2, M.from_samples([[-1.0], [1.0]]), d0) == 1.0


@given(measures_1d(), measures_1d())
def test_pair_integral_antisymmetric(mu, nu):
    g = lambda p: np.sin(p[:, 0]) + p[:, 0] ** 2
    assert M.pair_integral(g, mu, nu) == -M.pair_integral(g, nu, mu)


# ---- wk_distance --------------------------------------------------------------

def test_wk_examples():
    mu = M.from_samples(np.random.default_rng(4).standard_normal((9, 1)))
    assert M.wk_distance(mu, mu, 2) == 0.0
    assert M.wk_distance(M.EmpiricalMeasure.dirac([0.0]), M.EmpiricalMeasure.dirac([3.0]), 1) == 3.0
    a, b = M.from_samples([[0.0], [2.0]]), M.from_samples([[1.0], [3.0]])
    assert M.wk_distance(a, b, 1) == pytest.approx(1.0, abs=1e-15)


def test_wk_weighted_matches_brute_force_quantiles():
    # W_1 in 1-d equals the integral of |F - G|
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=6), rng.normal(1, 2, size=4)
    wx, wy = rng.random(6), rng.random(4)
    mu = M.EmpiricalMeasure(x[:, None], wx / wx.sum())
    nu = M.EmpiricalMeasure(y[:, None], wy / wy.sum())
    grid = np.sort(np.concatenate([x, y]))
    F = np.array([mu.weights[x <= g].sum() for g in grid])
    G = np.array([nu.weights[y <= g].sum() for g in grid])
    ref = np.sum(np.abs(F - G)[:-1] * np.diff(grid))
    assert M.wk_distance(mu, nu, 1) == pytest.approx(ref, rel=1e-12)


def test_wk_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        M.wk_distance(M.EmpiricalMeasure.dirac([0.0]), M.EmpiricalMeasure.dirac([0.0, 0.0]))


def test_sliced_wk_is_deterministic_and_translation_exact():
    rng = np.random.default_rng(6)
    mu = M.from_samples(rng.standard_normal((50, 3)))
    nu = M.EmpiricalMeasure(mu.points + np.array([1.0, 0.0, 0.0]), mu.weights)
    a, b = M.wk_distance(mu, nu, 1), M.wk_distance(mu, nu, 1)
    assert a == b and 0 < a <= 1.0 + 1e-12


@settings(max_examples=60)
@given(measures_1d(), measures_1d(), measures_1d(), st.sampled_from([1.0, 2.0, 3.0]))
def test_wk_triangle_inequality(a, b, c, k):
    assert M.wk_distance(a, c, k) <= M.wk_distance(a, b, k) + M.wk_distance(b, c, k) + 1e-9


@given(measures_1d(), measures_1d())
def test_wk_symmetric_nonnegative(a, b):
    d = M.wk_distance(a, b, 2)
    assert d >= 0 and d == pytest.approx(M.wk_distance(b, a, 2), rel=1e-12, abs=1e-12)


# ---- weighted TV --------------------------------------------------------------

def test_weighted_tv_examples():
    mu = M.from_samples(np.random.default_rng(7).standard_normal((5, 1)))
    assert M.weighted_tv_estimate(mu, mu, 1) == 0.0
    d0, d1 = M.EmpiricalMeasure.dirac([0.0]), M.EmpiricalMeasure.dirac([1.0])
    assert M.weighted_tv_estimate(d0, d1, 1, tests=[lambda p: p[:, 0]]) == 1.0
    assert M.weighted_tv_estimate(d0, d1, 1, tests=[lambda p: 1 + np.abs(p[:, 0])]) == 1.0


def test_weighted_tv_envelope_violation():
    d0, d3 = M.EmpiricalMeasure.dirac([0.0]), M.EmpiricalMeasure.dirac([3.0])
    with pytest.raises(EnvelopeViolationError):
        M.weighted_tv_estimate(d0, d3, 1, tests=[lambda p: p[:, 0] ** 2])


@pytest.mark.parametrize("dim,k", [(1, 1.0), (1, 0.5), (2, 1.0), (3, 2.0)])
def test_battery_has_sixteen_functions_within_envelope(dim, k):
    fns = M.test_battery(dim, k)
    assert len(fns) == 16
    mu = M.from_samples(np.random.default_rng(8).normal(0, 5, (200, dim)))
    for f in fns:
        M.check_envelope(f, mu, k)


@given(measures_1d(), measures_1d())
def test_weighted_tv_is_lower_bound_of_wk_plus_envelope(mu, nu):
    # every battery function is 1 + |x| bounded; the estimate never exceeds mu(1+|x|) + nu(1+|x|)
    tv = M.weighted_tv_estimate(mu, nu, 1)
    assert 0 <= tv <= 2 + M.moment(mu, 1) + M.moment(nu, 1) + 1e-9


# ---- grid and flows -----------------------------------------------------------

def test_time_grid():
    g = M.TimeGrid(1.0, 4)
    np.testing.assert_array_equal(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    assert g.dt == 0.25 and g.node(0.75) == 3
    assert g.refine(2).steps == 8
    with pytest.raises(NodeOutOfRangeError):
        g.node(0.3)
    with pytest.raises(ValueError, match="grid.M must be ≥ 1"):
        M.TimeGrid(1.0, 0)


def test_measure_flow_shift_and_distance():
    g = M.TimeGrid(1.0, 2)
    mu = M.from_samples([[0.0], [1.0]])
    f1 = M.MeasureFlow.constant(g, mu)
    f2 = f1.shifted(0.5)
    np.testing.assert_allclose(f2.means()[:, 0], 1.0)
    assert M.flow_distance(f1, f1) == 0.0
    assert M.flow_distance(f1, f2) >= 0.5
    with pytest.raises(DimensionMismatchError):
        M.MeasureFlow(g, (mu,))


def test_csv_round_trip_is_exact():
    rng = np.random.default_rng(9)
    w = rng.random(5)
    mu = M.EmpiricalMeasure(rng.standard_normal((5, 2)), w / w.sum())
    text = mu.to_csv()
    assert text.splitlines()[0] == "weight,x_1,x_2"
    back = M.EmpiricalMeasure.from_csv(text)
    np.testing.assert_array_equal(back.points, mu.points)
    np.testing.assert_array_equal(back.weights, mu.weights)


def test_resample_is_seeded():
    mu = M.from_samples(np.arange(10.0)[:, None])
    a = M.resample(mu, 20, np.random.default_rng(0))
    b = M.resample(mu, 20, np.random.default_rng(0))
    np.testing.assert_array_equal(a.points, b.points)
    assert set(a.points[:, 0]) <= set(range(10))
