import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from pmpotts.models import pet
from pmpotts.models.pet import (DEFAULT_TRUTH, CompartmentParams, ConvolutionGrid, FrameSchedule,
                                PetFamily, PetPrior, PlasmaInput, bolus_input, default_schedule,
                                lambda_conditional, log_likelihood_normal, log_likelihood_t,
                                log_marginal_likelihood_normal, log_prior_density, read_input_csv,
                                read_pet_csv, read_peti, read_schedule_csv, sample_prior,
                                simulate_pet_image, tissue_concentration, volume_of_distribution,
                                write_input_csv, write_pet_csv, write_peti, write_schedule_csv)

SCH = default_schedule()
INP = bolus_input(0.5, 1 / 60, SCH.ends[-1])
CONST = PlasmaInput([0.0, 5000.0], [2.0, 2.0])


def one_frame(end=1.0):
    return FrameSchedule([0.0, end])


# --- tissue curve ----------------------------------------------------------

@pytest.mark.parametrize("phi,theta", [([3e-3], [2e-3]), ([1e-2, 4e-3], [5e-4, 0.03]),
                                       ([4.4e-3, 1e-4, 1.4e-3], [4.5e-4, 2.7e-3, 1e-2])])
def test_constant_input_closed_form(phi, theta):
    t = np.array([1.0, 30.0, 400.0, 4999.0])
    p = CompartmentParams.normal(phi, theta)
    want = sum(f * 2.0 * -np.expm1(-k * t) / k for f, k in zip(phi, theta))
    np.testing.assert_allclose(tissue_concentration(t, p, CONST), want, rtol=0, atol=1e-10)


def test_zero_time_and_small_theta_limit():
    p = CompartmentParams.normal([3e-3], [1e-12])
    assert tissue_concentration(0.0, p, CONST) == 0.0
    t = np.array([5.0, 500.0, 4000.0])
    np.testing.assert_allclose(tissue_concentration(t, p, CONST), 3e-3 * 2.0 * t, rtol=1e-6)


def test_matches_quadrature_on_bolus():
    p = CompartmentParams.normal([4.9e-3, 1.8e-3], [5e-4, 0.011])
    for t in (45.0, 700.0, 3000.0):
        # the interpolant is smooth between knots, so integrate piece by piece
        knots = np.unique(np.concatenate([[0.0], INP.times[INP.times < t], [t]]))
        want = sum(f * sum(integrate.quad(lambda s: float(INP(s)) * math.exp(-k * (t - s)), lo, hi,
                                          epsabs=0, epsrel=1e-12)[0]
                           for lo, hi in zip(knots[:-1], knots[1:]))
                   for f, k in zip(p.phi, p.theta))
        assert tissue_concentration(t, p, INP) == pytest.approx(want, rel=1e-8)


@pytest.mark.parametrize("a", [0.0, 2.0, 10.0])
def test_linear_in_phi(a):
    p = CompartmentParams.normal([4.9e-3, 1.8e-3], [5e-4, 0.011])
    q = CompartmentParams.normal(a * p.phi, p.theta)
    np.testing.assert_allclose(tissue_concentration(SCH.ends, q, INP),
                               a * tissue_concentration(SCH.ends, p, INP), rtol=1e-12, atol=0)


def test_curve_non_decreasing_for_slow_washout():
    # with negligible washout the curve tracks the cumulative input
    p = CompartmentParams.normal([4.9e-3], [1e-9])
    grid = np.linspace(0, SCH.ends[-1], 400)
    c = tissue_concentration(grid, p, INP)
    # any decrease is bounded by the washout once the input has gone
    assert np.all(np.diff(c) >= -2e-9 * np.diff(grid) * c[1:])


def test_time_outside_input_support():
    p = CompartmentParams.normal([1e-3], [1e-3])
    with pytest.raises(ValueError):
        tissue_concentration(INP.t_max + 1.0, p, INP)
    with pytest.raises(ValueError):
        tissue_concentration(-1.0, p, INP)


# --- volume of distribution ------------------------------------------------

def test_volume_examples():
    assert volume_of_distribution(DEFAULT_TRUTH[1]) == pytest.approx(9.8, abs=1e-12)
    assert volume_of_distribution(DEFAULT_TRUTH[2]) == pytest.approx(9.963636, abs=1e-6)
    # 9.77778 + 0.03704 + 0.14; quoted elsewhere as 9.9552
    assert volume_of_distribution(DEFAULT_TRUTH[3]) == pytest.approx(9.954815, abs=1e-6)
    assert volume_of_distribution(DEFAULT_TRUTH[3]) == pytest.approx(9.9552, abs=5e-4)
    with pytest.raises(ValueError):
        volume_of_distribution(CompartmentParams.normal([1e-3], [0.0]))


@given(st.lists(st.tuples(st.floats(1e-5, 0.1), st.floats(1e-4, 0.1)), min_size=1, max_size=3), st.randoms())
def test_volume_permutation_invariant(comps, rnd):
    phi, theta = map(list, zip(*comps))
    k = list(range(len(phi)))
    rnd.shuffle(k)
    a = volume_of_distribution(CompartmentParams.normal(phi, theta))
    b = volume_of_distribution(CompartmentParams.normal([phi[i] for i in k], [theta[i] for i in k]))
    assert a == pytest.approx(b, rel=1e-12)


# --- likelihoods -----------------------------------------------------------

def _curve(p):
    ct = tissue_concentration(SCH.ends, p, INP)
    return ct, ct / SCH.durations


def test_normal_zero_residual_and_precision_doubling():
    p = CompartmentParams.normal([4.9e-3, 1.8e-3], [5e-4, 0.011], lam=3.0)
    ct, iota = _curve(p)
    val = log_likelihood_normal(ct, p, INP, SCH)
    assert val == pytest.approx(np.sum(0.5 * np.log(3.0 / (2 * math.pi * iota))), abs=1e-9)
    p2 = CompartmentParams.normal(p.phi, p.theta, lam=6.0)
    assert log_likelihood_normal(ct, p2, INP, SCH) - val == pytest.approx(SCH.n_frames * 0.5 * math.log(2), abs=1e-9)


@pytest.mark.parametrize("r", [0.0, 0.7, -2.3])
def test_normal_single_frame_reduces_to_standard_normal(r):
    sch = one_frame()
    p = CompartmentParams.normal([1e-3], [1e-3])
    c = tissue_concentration(1.0, p, CONST)
    # lambda equal to iota leaves a unit-variance normal
    q = CompartmentParams.normal([1e-3], [1e-3], lam=c)
    assert log_likelihood_normal([c + r], q, CONST, sch) == pytest.approx(-0.5 * math.log(2 * math.pi) - r * r / 2, abs=1e-12)


def test_normal_matches_brute_force_mvn():
    rng = np.random.default_rng(11)
    for _ in range(100):
        M = int(rng.integers(1, 4))
        p = CompartmentParams.normal(rng.uniform(1e-4, 1e-2, M), rng.uniform(2e-4, 5e-2, M), lam=rng.uniform(0.2, 5))
        ct, iota = _curve(p)
        y = ct + rng.normal(size=ct.size) * np.sqrt(iota)
        lam = math.exp(p.log_lambda)
        cov = np.diag(iota / lam)
        r = y - ct
        want = -0.5 * (ct.size * math.log(2 * math.pi) + np.linalg.slogdet(cov)[1] + r @ np.linalg.solve(cov, r))
        assert log_likelihood_normal(y, p, INP, SCH) == pytest.approx(want, abs=1e-9)


def test_non_positive_curve_gives_minus_inf():
    late = PlasmaInput([100.0, 5000.0], [1.0, 1.0])
    sch = FrameSchedule([0.0, 50.0, 200.0])
    p = CompartmentParams.normal([1e-3], [1e-3])
    assert log_likelihood_normal([0.0, 0.1], p, late, sch) == -math.inf
    assert log_likelihood_t([0.0, 0.1], CompartmentParams.student([1e-3], [1e-3], 1.0, 4.0), late, sch) == -math.inf


def test_t_cauchy_at_mode():
    sch = one_frame()
    p = CompartmentParams.normal([1e-3], [1e-3])
    c = tissue_concentration(1.0, p, CONST)
    q = CompartmentParams.student([1e-3], [1e-3], tau=c, nu=1.0)
    assert log_likelihood_t([c], q, CONST, sch) == pytest.approx(-math.log(math.pi), abs=1e-12)


def test_t_large_nu_matches_normal():
    rng = np.random.default_rng(2)
    p = CompartmentParams.normal([4.9e-3], [5e-4], lam=2.0)
    ct, iota = _curve(p)
    y = ct + rng.normal(size=ct.size) * np.sqrt(iota / 2.0)
    q = CompartmentParams.student(p.phi, p.theta, tau=2.0, nu=1e6)
    diff = log_likelihood_t(y, q, INP, SCH) - log_likelihood_normal(y, p, INP, SCH)
    assert abs(diff) / SCH.n_frames < 1e-3
    # and the asymptotic branch for enormous nu
    q = CompartmentParams.student(p.phi, p.theta, tau=2.0, nu=1e12)
    assert log_likelihood_t(y, q, INP, SCH) == pytest.approx(log_likelihood_normal(y, p, INP, SCH), abs=1e-4)


@given(st.floats(0.0, 5.0))
def test_t_symmetric_in_residual(r):
    sch = one_frame()
    p = CompartmentParams.student([1e-3], [1e-3], tau=0.7, nu=3.5)
    c = tissue_concentration(1.0, p, CONST)
    assert log_likelihood_t([c + r], p, CONST, sch) == pytest.approx(log_likelihood_t([c - r], p, CONST, sch), abs=1e-12)


def test_t_invalid_nu():
    p = CompartmentParams(np.array([1e-3]), np.array([1e-3]), log_tau=0.0, nu=0.0)
    with pytest.raises(ValueError):
        log_likelihood_t([1.0], p, CONST, one_frame())


@pytest.mark.parametrize("a,b", [(1e-3, 1e-3), (2.0, 0.5)])
def test_marginal_over_precision_matches_quadrature(a, b):
    prior = PetPrior(gamma_shape=a, gamma_rate=b)
    p = CompartmentParams.normal([4.9e-3, 1.8e-3], [5e-4, 0.011])
    ct, iota = _curve(p)
    y = ct + np.random.default_rng(4).normal(size=ct.size) * np.sqrt(0.3 * iota)
    shape, rate = lambda_conditional(y, p, INP, SCH, prior)
    mode = math.log(shape / rate)
    ref = log_likelihood_normal(y, CompartmentParams(p.phi, p.theta, log_lambda=mode), INP, SCH)

    def integrand(u):
        q = CompartmentParams(p.phi, p.theta, log_lambda=u)
        # gamma density of lambda times d lambda / d u = lambda
        lg = a * math.log(b) - math.lgamma(a) + a * u - b * math.exp(u)
        return math.exp(log_likelihood_normal(y, q, INP, SCH) + lg - ref)

    val, _ = integrate.quad(integrand, mode - 3, mode + 3, epsabs=0, epsrel=1e-11, limit=200)
    assert log_marginal_likelihood_normal(y, p, INP, SCH, prior) == pytest.approx(ref + math.log(val), abs=1e-7)


# --- priors ----------------------------------------------------------------

def test_prior_support_and_density():
    prior = PetPrior()
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = sample_prior(3, prior, rng)
        assert np.all((p.phi >= 1e-5) & (p.phi <= 1e-1))
        assert np.all((p.theta >= 1e-4) & (p.theta <= 1e-1))
        assert math.isfinite(log_prior_density(p, prior))
    out = CompartmentParams.normal([0.5], [1e-3])
    assert log_prior_density(out, prior) == -math.inf


def test_t_prior_has_inverse_square_nu_term():
    prior = PetPrior(error="t")
    p4 = CompartmentParams.student([1e-3], [1e-3], tau=1.0, nu=4.0)
    p8 = CompartmentParams.student([1e-3], [1e-3], tau=1.0, nu=8.0)
    assert log_prior_density(p4, prior) - log_prior_density(p8, prior) == pytest.approx(2 * math.log(2), abs=1e-12)
    # 1/nu must lie in [0, 0.5)
    assert log_prior_density(CompartmentParams.student([1e-3], [1e-3], 1.0, 2.0), prior) == -math.inf
    p = sample_prior(2, prior, np.random.default_rng(1))
    assert p.nu > 2.0 and p.error == "t"


def test_real_data_prior_floor():
    assert PetPrior.real_data().theta_bounds[0] == 7e-4
    assert PetPrior().theta_bounds[0] == 1e-4
    with pytest.raises(ValueError):
        PetPrior(phi_bounds=(0.1, 0.01))


def test_gamma_precision_prior_mean():
    # the compiled sampler draws log tau with the same Gamma(a + 1) U^(1/a) device
    fam = PetFamily(INP, SCH, PetPrior(error="t"))
    kd = fam.kernel_data()
    n = 1_000_000
    eta = np.zeros((fam.dim(0), n))
    pet.kernel_sample_prior(np.random.default_rng(5), eta, 0, kd.fpar, kd.fmat)
    x = np.exp(eta[2])
    se = math.sqrt(1e-3 / 1e-3**2 / n)
    assert abs(x.mean() - 1.0) < 4 * se
    assert np.all(eta[0] >= math.log(1e-5)) and np.all(eta[0] <= math.log(1e-1))


def test_python_gamma_draws_match_law():
    prior = PetPrior(gamma_shape=2.0, gamma_rate=3.0)
    rng = np.random.default_rng(8)
    lam = np.exp([sample_prior(1, prior, rng).log_lambda for _ in range(5000)])
    assert stats.kstest(lam, stats.gamma(a=2.0, scale=1 / 3.0).cdf).pvalue > 0.01


# --- simulation ------------------------------------------------------------

def test_simulation_variance_scaling():
    n = 10_000
    y = simulate_pet_image(np.zeros(n, dtype=int), DEFAULT_TRUTH, INP, SCH, 0.5, np.random.default_rng(3))
    assert y.var(axis=0, ddof=1).max() == pytest.approx(0.5, rel=0.05)
    ct = tissue_concentration(SCH.ends, DEFAULT_TRUTH[1], INP)
    assert np.abs(y.mean(axis=0) - ct).max() < 5 * math.sqrt(0.5 / n)


def test_simulation_low_noise_limit_and_determinism():
    field = np.array([0, 1, 2, 0])
    y = simulate_pet_image(field, DEFAULT_TRUTH, INP, SCH, 1e-14, np.random.default_rng(0))
    for v, idx in enumerate(field):
        np.testing.assert_allclose(y[v], tissue_concentration(SCH.ends, DEFAULT_TRUTH[idx + 1], INP), atol=1e-6)
    a = simulate_pet_image(field, DEFAULT_TRUTH, INP, SCH, 0.5, np.random.default_rng(7))
    b = simulate_pet_image(field, DEFAULT_TRUTH, INP, SCH, 0.5, np.random.default_rng(7))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        simulate_pet_image(field, DEFAULT_TRUTH, INP, SCH, 0.0, np.random.default_rng(0))


def test_simulation_rejects_all_zero_curve():
    late = PlasmaInput([9000.0, 9500.0], [1.0, 1.0])
    sch = FrameSchedule([0.0, 100.0, 200.0])
    with pytest.raises(ValueError):
        simulate_pet_image(np.zeros(2, dtype=int), DEFAULT_TRUTH, late, sch, 0.5, np.random.default_rng(0))


# --- files -----------------------------------------------------------------

def test_default_schedule_shape():
    # a 30 s background frame plus 49 listed frames
    assert SCH.n_frames == 50
    assert SCH.ends[-1] == 8265.0
    assert np.all(SCH.durations > 0)
    with pytest.raises(ValueError):
        FrameSchedule([0.0, 10.0, 10.0])


def test_csv_and_peti_round_trips(tmp_path):
    write_schedule_csv(tmp_path / "s.csv", SCH)
    assert np.array_equal(read_schedule_csv(tmp_path / "s.csv").boundaries, SCH.boundaries)
    write_input_csv(tmp_path / "i.csv", INP)
    back = read_input_csv(tmp_path / "i.csv")
    assert np.array_equal(back.times, INP.times) and np.array_equal(back.values, INP.values)
    img = np.random.default_rng(0).normal(size=(6, 5))
    write_pet_csv(tmp_path / "y.csv", img)
    assert np.array_equal(read_pet_csv(tmp_path / "y.csv"), img)
    write_peti(tmp_path / "y.peti", img, 3, 2)
    out, w, h = read_peti(tmp_path / "y.peti")
    assert (w, h) == (3, 2) and np.array_equal(out, img)
    (tmp_path / "bad.peti").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_peti(tmp_path / "bad.peti")


def test_input_validation():
    with pytest.raises(ValueError):
        PlasmaInput([0.0, 1.0], [1.0, -1.0])
    with pytest.raises(ValueError):
        PlasmaInput([1.0, 0.5], [1.0, 1.0])


# --- family and compiled kernels -------------------------------------------

def test_family_dimensions_and_eta_round_trip():
    fam = PetFamily(INP, SCH)
    assert [fam.dim(m) for m in range(3)] == [2, 4, 6]
    assert [PetFamily(INP, SCH, PetPrior(error="t")).dim(m) for m in range(3)] == [4, 6, 8]
    p = DEFAULT_TRUTH[3]
    q = fam.from_eta(fam.to_eta(p), 2)
    np.testing.assert_allclose(q.phi, p.phi, rtol=1e-12)
    np.testing.assert_allclose(q.theta, p.theta, rtol=1e-12)
    y = fam.simulate(np.array([1]), np.random.default_rng(0))[0]
    shape, rate = lambda_conditional(y, DEFAULT_TRUTH[2], INP, SCH, fam.prior)
    assert math.exp(fam.from_eta(fam.to_eta(DEFAULT_TRUTH[2]), 1, y).log_lambda) == pytest.approx(shape / rate)


@settings(max_examples=30)
@given(st.integers(0, 2), st.integers(0, 2**32 - 1), st.sampled_from(["normal", "t"]))
def test_kernels_match_python(m, seed, err):
    fam = PetFamily(INP, SCH, PetPrior(error=err))
    kd = fam.kernel_data()
    rng = np.random.default_rng(seed)
    y = fam.simulate(np.array([m]), rng)[0]
    theta = fam.sample_prior(m, rng)
    eta = fam.to_eta(theta)[:, None].copy()
    eta_sorted = fam.to_eta(theta.sorted())[:, None].copy()
    g = fam.grid
    buf = np.empty(g.h_class.size + 1)
    work = np.empty((g.class_h.size, 3))
    ct = np.empty(SCH.n_frames)
    ll = pet.kernel_loglik(eta, 0, y, kd.fpar, kd.ivec, kd.fmat, m, buf, work, ct)
    want = fam.sampled_log_likelihood(y, theta, m)
    if math.isinf(want):
        assert ll == want
    else:
        assert ll == pytest.approx(want, rel=1e-9, abs=1e-8)
    assert pet.kernel_derived(eta, 0, m, kd.fpar) == pytest.approx(volume_of_distribution(theta), rel=1e-12)
    # on the ordered cone the compiled prior is M! times the Python density in eta space
    lp = pet.kernel_logprior(eta_sorted, 0, m, kd.fpar, kd.fmat)
    jac = float(np.sum(eta_sorted[: 2 * (m + 1), 0]))
    if err == "normal":
        p_lam = CompartmentParams(theta.phi, theta.theta, log_lambda=0.0)
        base = log_prior_density(p_lam, fam.prior) - pet._gamma_logpdf_of_log(0.0, 1e-3, 1e-3)
        assert lp == pytest.approx(base + jac + math.lgamma(m + 2), abs=1e-9)
    else:
        assert math.isfinite(lp)
    if m > 0 and not np.all(np.diff(theta.theta) >= 0):
        assert pet.kernel_logprior(eta, 0, m, kd.fpar, kd.fmat) == -math.inf


def test_kernel_prior_draws_are_ordered():
    fam = PetFamily(INP, SCH)
    kd = fam.kernel_data()
    eta = np.zeros((6, 2000))
    pet.kernel_sample_prior(np.random.default_rng(0), eta, 2, kd.fpar, kd.fmat)
    assert np.all(np.diff(eta[3:6], axis=0) >= 0)
    assert np.all(np.isfinite([pet.kernel_logprior(eta, i, 2, kd.fpar, kd.fmat) for i in range(50)]))


def test_convolution_grid_rejects_out_of_range():
    with pytest.raises(ValueError):
        ConvolutionGrid.build(INP, [INP.t_max + 10])
