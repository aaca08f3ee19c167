import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from anisofield.subgaussian import (
    COMPLEX_GAUSSIAN, RADEMACHER_COMPLEX, RADEMACHER_REAL, SOURCES, SubGaussianSource, draw,
    mgf_check, series_mgf_check, sup_partial_sum_tail, symmetry_check, tail_bound, tail_check,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_draw_empty():
    for kind in SOURCES:
        out = draw(SubGaussianSource(kind), 0, rng())
        assert out.shape == (0,) and out.dtype == np.complex128


def test_rademacher_real_mean():
    n = 10 ** 6
    z = draw(SubGaussianSource(RADEMACHER_REAL), n, rng(1))
    assert set(np.unique(z)) == {-1.0, 1.0}
    assert abs(z.real.mean()) <= 4 / math.sqrt(n)


def test_complex_gaussian_variance():
    z = draw(SubGaussianSource(COMPLEX_GAUSSIAN), 10 ** 6, rng(2))
    assert abs(z.real.var() - 1) < 0.01
    assert abs(z.imag.var() - 1) < 0.01


def test_rademacher_complex_values():
    z = draw(SubGaussianSource(RADEMACHER_COMPLEX), 10 ** 4, rng(3))
    assert np.allclose(np.abs(z), 1.0)
    assert set(np.round(z, 12)) <= {1, -1, 1j, -1j}


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(SOURCES), st.integers(0, 2 ** 32 - 1), st.integers(1, 500),
       st.integers(1, 500))
def test_draw_deterministic_and_prefix_consistent(kind, seed, n, m):
    src = SubGaussianSource(kind)
    a = draw(src, n, rng(seed))
    b = draw(src, n, rng(seed))
    assert np.array_equal(a, b)
    c = draw(src, n + m, rng(seed))
    assert np.array_equal(c[:n], a)


def test_tail_examples():
    rows = tail_check(RADEMACHER_REAL, [2.0, 20.0], 10 ** 4)
    assert rows[0].empirical == 0 and rows[0].bound == pytest.approx(4 * math.exp(-0.5))
    assert rows[1].empirical == 0
    cg = tail_check(COMPLEX_GAUSSIAN, [4.0], 2 * 10 ** 5, seed=5)[0]
    # |CN| with unit-variance parts: P(|Z| > t) = exp(-t**2 / 2)
    exact = math.exp(-8.0)
    assert cg.bound == pytest.approx(4 * math.exp(-2.0))
    assert abs(cg.empirical - exact) < 5 * math.sqrt(exact / 2e5)
    assert not cg.violated


def test_tail_check_requires_enough_samples():
    with pytest.raises(ValueError):
        tail_check(COMPLEX_GAUSSIAN, [1.0], 100)


def test_tail_bound_value():
    assert tail_bound(0.0) == 4.0


def test_mgf_examples():
    z0 = mgf_check(COMPLEX_GAUSSIAN, [0], 10 ** 4)[0]
    assert z0.empirical == 1.0 and z0.se == 0.0
    cg = mgf_check(COMPLEX_GAUSSIAN, [1.0], 10 ** 6, seed=1)[0]
    assert abs(cg.empirical - 1.0) < 4 * cg.se and not cg.violated
    rr = mgf_check(RADEMACHER_REAL, [1.0], 10 ** 5, seed=1)[0]
    assert rr.empirical == pytest.approx(math.cosh(1) / math.exp(0.5), abs=0.01)
    assert rr.empirical <= 1.0


def test_mgf_grid_limited():
    with pytest.raises(ValueError):
        mgf_check(COMPLEX_GAUSSIAN, [3.5], 10 ** 4)


def test_supsum_examples():
    a = 2.0 ** -np.arange(1, 51)
    row = sup_partial_sum_tail(a, COMPLEX_GAUSSIAN, 6.0, 10 ** 5, seed=2)
    assert row.bound == pytest.approx(8 * math.exp(-4.5))
    assert not row.violated
    vac = sup_partial_sum_tail(a, RADEMACHER_REAL, 1.0, 10 ** 4)
    assert vac.bound > 1 and not vac.violated
    single = sup_partial_sum_tail([1.0], COMPLEX_GAUSSIAN, 4.0, 10 ** 5, seed=3)
    ref = tail_check(COMPLEX_GAUSSIAN, [4.0], 10 ** 5, seed=3)[0]
    assert single.bound == pytest.approx(2 * ref.bound)
    assert abs(single.empirical - math.exp(-8)) < 5 * math.sqrt(math.exp(-8) / 1e5)


def test_supsum_zero_weights():
    with pytest.raises(ValueError):
        sup_partial_sum_tail(np.zeros(5), COMPLEX_GAUSSIAN, 1.0, 10 ** 4)


def test_series_mgf_parameter():
    a = 2.0 ** -np.arange(1, 21)
    for row in series_mgf_check(a, RADEMACHER_COMPLEX, [0.5, 1.0, 1.5 + 0.5j], 10 ** 5, seed=4):
        assert not row.violated


@pytest.mark.parametrize("kind", SOURCES)
def test_symmetry(kind):
    assert symmetry_check(kind, 10 ** 5, seed=7)["passed"]


def test_rademacher_complex_phase_uniform():
    z = draw(SubGaussianSource(RADEMACHER_COMPLEX), 40_000, rng(9))
    counts = [np.count_nonzero(np.isclose(z, v)) for v in (1, 1j, -1, -1j)]
    assert stats.chisquare(counts).pvalue > 0.001


def test_report_serialization():
    row = mgf_check(COMPLEX_GAUSSIAN, [1 + 1j], 10 ** 4)[0]
    d = row.to_dict()
    assert d["z"] == [1.0, 1.0] and set(d) == {"z", "empirical", "bound", "se", "violated"}
