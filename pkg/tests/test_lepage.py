import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from anisofield import kernels
from anisofield.lepage import (
    AlphaField, EigenProduct, FieldGrid, HarmonizableOS, IsotropicMixture, RieszBessel,
    ZeroKernel, density_from_dict, draw_realization, empirical_charfunc, envelope_integral,
    fdd_invariance_test, gaussian_density, grid_points, kernel_alpha_integral, kernel_from_dict,
    moment_check, moment_integral, radial_gof, replicate_values, series_log_charfunc,
    series_terms, simulate_field, simulate_lines, stable_constant, stable_constant_factors,
    _g_squared_times_weight,
)
from anisofield.quasi_metric import HomogeneousPsi, QuasiMetricSpec, ScalingMatrix, mat_power
from anisofield.subgaussian import RADEMACHER_REAL

E1 = ScalingMatrix([[1.0]])
DIAG12 = ScalingMatrix([[1.0, 0.0], [0.0, 2.0]])
BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


def os1(H=0.5):
    return HarmonizableOS(HomogeneousPsi(E1), H)


# -- densities -----------------------------------------------------------------

def test_tail_inverse_cdf_boundary():
    m = IsotropicMixture(1.5, math.e, 0.1)
    # the tail branch at U = 1 sits exactly on the cutoff
    assert m.sample_log_radius(np.array([1.0]), np.array([0.0]))[0] == pytest.approx(1.0)


def test_inside_ball_median():
    m = IsotropicMixture(1.0, math.e, 0.1, d=1)
    logr = m.sample_log_radius(np.array([0.0]), np.array([0.5]))[0]
    assert math.exp(logr) == pytest.approx(math.e * 0.5 ** 0.5, rel=1e-14)


@pytest.mark.parametrize("density", [
    IsotropicMixture(1.5, math.e, 0.1, d=1),
    IsotropicMixture(1.5, math.e ** 2, 0.5, d=2),
    IsotropicMixture(0.1, math.e, 1.0, d=3),
    EigenProduct(DIAG12, zeta=0.5),
], ids=["iso1", "iso2", "iso3", "eigen"])
def test_radial_goodness_of_fit(density):
    assert radial_gof(density, 10 ** 5, seed=1) > 0.01


@pytest.mark.parametrize("zeta,r0", [(0.1, math.e), (0.5, math.e ** 2)])
def test_isotropic_density_normalised(zeta, r0):
    m = IsotropicMixture(1.5, r0, zeta, d=1)
    f = lambda x: math.exp(m.log_pdf([[x]])[0])
    # in log-radius the tail mass decays only like s**(-zeta): integrate in s
    inner = integrate.quad(f, 0, r0)[0]
    tail = integrate.quad(lambda s: math.exp(m.log_pdf_radius(s) + s), math.log(r0), np.inf,
                          limit=500)[0]
    assert 2 * (inner + tail) == pytest.approx(1.0, rel=1e-6)


def test_eigen_product_density_positive():
    m = EigenProduct(DIAG12, zeta=[0.5, 1.0])
    xi = np.random.default_rng(0).normal(size=(1000, 2)) * 10
    assert np.all(np.isfinite(m.log_pdf(xi)))


def test_density_from_dict():
    assert isinstance(density_from_dict({"kind": "isotropic_mixture", "zeta": 0.5}),
                      IsotropicMixture)
    assert density_from_dict({"kind": "eigen_product"}, DIAG12).d == 2
    with pytest.raises(ValueError):
        density_from_dict({"kind": "nope"})
    with pytest.raises(ValueError):
        IsotropicMixture(1.5, 2.0, 0.1)


# -- kernels -------------------------------------------------------------------

xi2 = st.tuples(st.floats(-50, 50), st.floats(-50, 50)).filter(lambda v: math.hypot(*v) > 1e-3)
u2 = st.tuples(st.floats(-2, 2), st.floats(-2, 2))


@settings(max_examples=60, deadline=None)
@given(xi2, u2, st.floats(0.3, 1.9))
def test_kernel_increment_bound(xi, u, alpha):
    for k in (HarmonizableOS(HomogeneousPsi(DIAG12), 0.6), RieszBessel(DIAG12, 1.0, 1.0)):
        f = k.f(u, xi, alpha)[0, 0]
        psi = k.psi_alpha(xi, alpha)[0]
        bound = min(math.hypot(*u) * math.hypot(*xi), 2.0) * psi
        assert abs(f) <= bound * (1 + 1e-12) + 1e-300
        assert k.f([0.0, 0.0], xi, alpha)[0, 0] == 0


@settings(max_examples=60, deadline=None)
@given(xi2, st.floats(0.1, 10), st.floats(0.3, 1.9))
def test_os_psi_alpha_homogeneity(xi, c, alpha):
    k = HarmonizableOS(HomogeneousPsi(DIAG12), 0.6)
    lhs = k.psi_alpha(mat_power(DIAG12.T, c) @ np.array(xi), alpha)[0]
    rhs = c ** (-0.6 - DIAG12.q / alpha) * k.psi_alpha(xi, alpha)[0]
    assert lhs == pytest.approx(rhs, rel=1e-8)


def test_os_constraint():
    with pytest.raises(ValueError, match="H in \\(0, a1\\)"):
        HarmonizableOS(HomogeneousPsi(DIAG12), 1.0)
    with pytest.raises(ValueError):
        HarmonizableOS(HomogeneousPsi(E1), 0.0)


def test_riesz_bessel_constraints():
    with pytest.raises(ValueError, match="q\\(E\\)/2 < beta1 \\+ beta2"):
        RieszBessel(DIAG12, 0.5, 0.5)
    with pytest.raises(ValueError, match="beta1 < q\\(E\\)/2"):
        RieszBessel(DIAG12, 2.2, 0.0, alpha=1.0)
    k = RieszBessel(DIAG12, 2.2, 0.0)
    with pytest.raises(ValueError):
        k.check_alpha(1.0)
    k.check_alpha(1.5)


def test_cond_hs_constant_finite():
    k = HarmonizableOS(HomogeneousPsi(DIAG12), 0.6)
    c = k.cond_hs_constant(1.5)
    assert np.isfinite(c) and c > 0


def test_kernel_from_dict():
    k = kernel_from_dict({"kind": "harmonizable_os", "H": 0.6}, DIAG12)
    assert isinstance(k, HarmonizableOS) and k.H == 0.6
    assert isinstance(kernel_from_dict({"kind": "zero"}, DIAG12), ZeroKernel)


# -- alpha fields --------------------------------------------------------------

def test_alpha_field():
    af = AlphaField.affine(1.2, [0.4], 1.2, 1.6)
    assert af.range_on([[0, 1]]) == (1.2, pytest.approx(1.6))
    assert AlphaField.from_dict(af.to_dict()) == af
    assert af.lipschitz(QuasiMetricSpec.euclidean(), [[0, 1]]) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        AlphaField.constant(2.0)
    with pytest.raises(ValueError):
        AlphaField.affine(1.0, [1.0], 0.5, 2.5)


# -- simulation ----------------------------------------------------------------

def test_origin_is_zero():
    f = simulate_field(os1(), IsotropicMixture(), 1.5, [[-1, 1]], (5,), 2000, seed=3)
    assert f.values[2] == 0
    assert f.values.size == 5 and isinstance(f, FieldGrid)


def test_constant_alpha_field_matches_stable_path():
    k = HarmonizableOS(HomogeneousPsi(DIAG12), 0.6)
    dens = EigenProduct(DIAG12, zeta=0.5)
    a = simulate_field(k, dens, 1.5, [[0, 1], [0, 1]], (9, 7), 3000, seed=4)
    b = simulate_field(k, dens, AlphaField.constant(1.5), [[0, 1], [0, 1]], (9, 7), 3000, seed=4)
    assert np.array_equal(a.values, b.values)


def test_metadata_reproduces_grid():
    f = simulate_field(os1(), IsotropicMixture(zeta=0.5), 1.2, [[0, 2]], (33,), 4000, seed=9)
    meta = f.metadata
    assert {"kernel", "density", "alpha", "N", "seed", "d_alpha_applied"} <= set(meta)
    k = kernel_from_dict(meta["kernel"], ScalingMatrix.from_dict(meta["kernel"]["matrix"]))
    dens = density_from_dict(meta["density"])
    g = simulate_field(k, dens, AlphaField.from_dict(meta["alpha"]), f.box, f.resolution,
                       meta["N"], meta["seed"])
    assert np.array_equal(f.values, g.values)


@pytest.mark.parametrize("backend", BACKENDS)
def test_threads_do_not_change_values(backend):
    args = (os1(), IsotropicMixture(), AlphaField.affine(1.2, [0.4], 1.2, 1.6), [[0, 1]], (64,),
            5000)
    a = simulate_field(*args, seed=1, threads=1, backend=backend)
    b = simulate_field(*args, seed=1, threads=4, backend=backend)
    assert np.array_equal(a.values, b.values)


def test_threads_do_not_change_values_2d():
    # enough points and terms that threads really interleave inside the kernel
    k = HarmonizableOS(HomogeneousPsi(DIAG12), 0.6)
    args = (k, EigenProduct(DIAG12, 0.5), 1.5, [[0, 1], [0, 1]], (48, 48), 20_000)
    a = simulate_field(*args, seed=11, threads=1)
    for t in (3, 8):
        assert np.array_equal(a.values, simulate_field(*args, seed=11, threads=t).values)


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    k = HarmonizableOS(HomogeneousPsi(DIAG12), 0.6)
    args = (k, EigenProduct(DIAG12, 0.5), AlphaField.affine(1.2, [0.2, 0.2], 1.2, 1.6),
            [[0, 1], [0, 1]], (16, 16), 20_000)
    a = simulate_field(*args, seed=2, backend="python")
    b = simulate_field(*args, seed=2, backend="cython")
    np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-12 * np.abs(a.values).max())


def test_point_order_coherence():
    dens = IsotropicMixture()
    real = draw_realization(dens, 3000, 5)
    terms = series_terms(os1(), dens, real)
    from anisofield.lepage import evaluate_points
    pts = np.linspace(0, 1, 50)[:, None]
    perm = np.random.default_rng(1).permutation(50)
    a = evaluate_points(terms, pts, np.full(50, 1.5))
    b = evaluate_points(terms, pts[perm], np.full(50, 1.5))
    assert np.array_equal(a[perm], b)


def test_truncation_is_a_prefix():
    dens = IsotropicMixture(zeta=0.5)
    big = simulate_field(os1(), dens, 1.5, [[0, 1]], (11,), 4000, seed=6)
    real = draw_realization(dens, 4000, 6)
    small = simulate_field(os1(), dens, 1.5, [[0, 1]], (11,), 1000, seed=6)
    terms = series_terms(os1(), dens, real, 1000)
    from anisofield.lepage import evaluate_points
    ref = evaluate_points(terms, grid_points([[0, 1]], (11,)), np.full(11, 1.5))
    assert np.array_equal(small.values, ref)
    assert not np.array_equal(small.values, big.values)


def test_dropped_terms_counted():
    f = simulate_field(os1(), IsotropicMixture(zeta=0.1), 1.5, [[0, 1]], (3,), 20_000, seed=0)
    assert 0 < f.metadata["n_dropped_terms"] < 20_000


def test_simulate_lines_match_grid():
    k = HarmonizableOS(HomogeneousPsi(DIAG12), 0.6)
    dens = EigenProduct(DIAG12, zeta=0.5)
    full = simulate_field(k, dens, 1.5, [[0, 1], [0, 1]], (8, 6), 2000, seed=3).array()
    lines, _ = simulate_lines(k, dens, 1.5, [[0, 1], [0, 1]], (8, 6),
                              {0: [(1,), (4,)], 1: [(2,)]}, 2000, seed=3)
    np.testing.assert_allclose(lines[0], full[:, [1, 4]].T, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(lines[1][0], full[2], rtol=1e-13, atol=1e-15)


def test_d_alpha_scaling():
    args = (os1(), IsotropicMixture(), 1.5, [[0, 1]], (5,), 1000)
    raw = simulate_field(*args, seed=2)
    scaled = simulate_field(*args, seed=2, apply_d_alpha=True)
    np.testing.assert_allclose(scaled.values * stable_constant(1.5), raw.values, rtol=1e-14)
    assert scaled.metadata["d_alpha_applied"]
    with pytest.raises(ValueError):
        simulate_field(*args, seed=2, apply_d_alpha=True, source=RADEMACHER_REAL)


def test_simulation_errors():
    with pytest.raises(ValueError):
        simulate_field(os1(), IsotropicMixture(d=2), 1.5, [[0, 1]], (5,), 100, seed=0)
    with pytest.raises(ValueError):
        simulate_field(os1(), IsotropicMixture(), 2.0, [[0, 1]], (5,), 100, seed=0)


# -- stable constant -----------------------------------------------------------

def test_stable_constant_alpha_one():
    expected = math.sqrt(2 / math.pi) * (math.pi / 2) ** 2
    assert stable_constant(1.0) == pytest.approx(expected, rel=1e-10)
    assert expected == pytest.approx(1.9687, abs=1e-4)


@pytest.mark.parametrize("alpha", [0.25, 0.5, 1.0, 1.5, 1.9])
def test_stable_constant_factors(alpha):
    for name, (q, c) in stable_constant_factors(alpha).items():
        assert abs(q - c) <= 1e-6 * abs(c), name
    if alpha == 1.5:
        assert math.gamma(-0.5) * math.cos(0.75 * math.pi) > 0


def test_stable_constant_domain():
    for bad in (0.0, 2.0, -1.0):
        with pytest.raises(ValueError):
            stable_constant(bad)
    with pytest.raises(ValueError):
        stable_constant(1.0, RADEMACHER_REAL)


def test_series_charfunc_oracle():
    # the limit law at a point is isotropic stable with a density-free scale
    k, alpha, u = os1(), 1.5, 0.5
    K = kernel_alpha_integral(k, u, alpha)
    vals = replicate_values(k, IsotropicMixture(1.5, math.e, 0.5), alpha, [[u]], 2000,
                            list(range(3000)))
    z = np.array([0.3, 0.6j])
    phi, se = empirical_charfunc(vals, z)
    ref = np.exp([series_log_charfunc(zz, K, alpha) for zz in z])
    assert np.all(np.abs(phi[0] - ref) <= 4 * se[0])


# -- moments -------------------------------------------------------------------

def test_moment_zero_kernel():
    rep = moment_check(ZeroKernel(1), IsotropicMixture(), 1.5, [1.0], 1.0, 10 ** 4)
    assert rep.estimate == 0.0 and not rep.unstable


def test_moment_against_quadrature():
    dens = IsotropicMixture(alpha0=0.1)
    rep = moment_check(os1(), dens, 1.5, [1.0], 1.0, 4 * 10 ** 5, seed=3)
    ref = moment_integral(os1(), dens, 1.5, [1.0], 1.0)
    assert not rep.unstable
    assert abs(rep.estimate - ref) <= 3 * rep.se


def test_moment_gaussian_density_unstable():
    rep = moment_check(os1(), gaussian_density(1), 1.5, [1.0], 1.0, 2 * 10 ** 5, seed=1)
    assert rep.unstable


# -- envelope integral ---------------------------------------------------------

def test_envelope_decreasing():
    h = 2.0 ** -np.arange(2, 8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = envelope_integral(os1(), IsotropicMixture(), 1.5, h)
    assert np.all(np.diff(rep.values) < 0)
    assert rep.predicted_slope == 1.0


def test_envelope_saturation():
    # once the min is saturated, g no longer depends on h
    xi = np.array([[3.0], [-7.0], [40.0]])
    a = _g_squared_times_weight(os1(), IsotropicMixture(), 1.5, 1e8, xi, 1.0)
    b = _g_squared_times_weight(os1(), IsotropicMixture(), 1.5, 1e9, xi, 1.0)
    np.testing.assert_array_equal(a, b)


def test_envelope_domain():
    with pytest.raises(ValueError):
        envelope_integral(os1(), IsotropicMixture(), 1.5, [0.5])


# -- invariance ----------------------------------------------------------------

def test_fdd_identical_densities():
    dens = IsotropicMixture(zeta=0.5)
    rep = fdd_invariance_test(os1(), dens, dens, 1.5, [[0.5], [1.0]], 1000, [0.5, 1.0j], 500,
                              seed=3)
    assert rep.passed


def test_fdd_zero_kernel():
    rep = fdd_invariance_test(ZeroKernel(1), IsotropicMixture(), IsotropicMixture(zeta=0.5), 1.5,
                              [[0.5]], 1000, [1.0, 2.0], 100)
    assert np.all(rep.phi_a == 1) and np.all(rep.phi_b == 1) and rep.passed
    assert rep.to_dict()["n_cells"] == 2
