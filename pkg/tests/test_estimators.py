import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import mean_se
from twinloss.channels import ChannelConfig, SourceModel, simulate_pairs, theoretical_joint_stats
from twinloss.errors import ArgumentError, DegenerateDenominatorError, UnsupportedCaseError
from twinloss.estimators import (
    BoundKind,
    CalibrationRecord,
    EstimatorKind,
    all_bounds,
    bccb_variance,
    bound,
    calibrate,
    coherent_pair_variance,
    differential_variance,
    estimate,
    estimate_differential,
    estimate_optimized,
    estimate_ratio,
    estimate_single_beam,
    optimized_variance_for_weight,
    optimized_variance_symmetric,
    optimized_weight_symmetric,
    ratio_variance,
    single_beam_variance,
    theory_variance,
    twb_optimized_variance,
    twb_ratio_variance,
    uql_variance,
)
from twinloss.photostat import sample_twb_pair

scipy_stats = pytest.importorskip("scipy.stats")

N = 1e4


def _record(gamma=1.0, mean_np=100.0, k=0.0, delta_e=0.0):
    return CalibrationRecord(gamma=gamma, sigma_gamma=0.0, fano_p=1.0, fano_r=1.0, mean_np=mean_np,
                             mean_nr=gamma * mean_np, k_opt=k, delta_e=delta_e, trials=2)


def _twb(eta=0.76, eta_r=None, mean=N):
    # Small occupation per mode: the regime of a broadband down-conversion source.
    src = SourceModel.twin_beam(1e-4, int(mean / eta / 1e-4))
    return src, ChannelConfig(eta_p=eta, eta_r=eta if eta_r is None else eta_r)


def _measure(src, cfg, alpha, rng, trials=10**5, cal_trials=2 * 10**5):
    cal = calibrate(*simulate_pairs(src, cfg.with_alpha(0.0), rng, cal_trials))
    n_p, n_r = simulate_pairs(src, cfg.with_alpha(alpha), rng, trials)
    return cal, n_p, n_r


# Point evaluations


def test_ratio_arithmetic():
    assert estimate_ratio(98, 100, _record()) == pytest.approx(0.02)
    assert estimate_ratio(50, 50, _record()) == 0.0
    assert estimate_ratio(10, 40, _record(gamma=2.0)) == pytest.approx(0.5)


def test_ratio_zero_reference_raises():
    with pytest.raises(DegenerateDenominatorError):
        estimate_ratio(3, 0, _record())
    with pytest.raises(ZeroDivisionError):
        estimate_ratio(np.array([3, 4]), np.array([5, 0]), _record())


def test_estimate_counts_exclusions():
    values, excluded = estimate(EstimatorKind.RATIO, [98, 3, 50], [100, 0, 50], _record())
    assert excluded == 1
    assert values == pytest.approx([0.02, 0.0])
    _, excluded = estimate(EstimatorKind.SINGLE_BEAM, [98, 3], [100, 0], _record())
    assert excluded == 0


def test_optimized_arithmetic():
    cal = _record(k=0.0)
    assert estimate_optimized(98, 7, cal) == pytest.approx(estimate_single_beam(98, 7, cal))
    assert estimate_optimized(cal.mean_np, cal.mean_nr, _record(k=0.8)) == 0.0
    assert estimate_optimized(90, 110, _record(k=0.5)) == pytest.approx(1 - (90 - 5) / 100)
    assert estimate_optimized(90, 100, _record(k=0.5, delta_e=2.0)) == pytest.approx(1 - 92 / 100)


def test_differential_arithmetic():
    cal = _record(gamma=2.0)
    assert estimate_differential(30, 60, cal) == 0.0
    assert estimate_differential(40, 100, cal) == pytest.approx((100 - 80) / 200)
    assert estimate_differential(40, 100, cal, reference_mean=100) == pytest.approx(0.2)


def test_single_beam_arithmetic():
    cal = _record(gamma=1.5)
    assert estimate_single_beam(cal.mean_np, 12345, cal) == pytest.approx(0.0)
    assert estimate_single_beam(0, 1, cal) == 1.0


def test_vectorised_matches_scalar():
    cal = _record(k=0.3)
    n_p = np.array([90, 95, 100])
    n_r = np.array([99, 101, 100])
    for fn in (estimate_ratio, estimate_optimized, estimate_differential, estimate_single_beam):
        vec = fn(n_p, n_r, cal)
        assert vec == pytest.approx([fn(int(a), int(b), cal) for a, b in zip(n_p, n_r)])


# Calibration


def test_calibrate_raw_twin_beam(rng):
    cal = calibrate(*sample_twb_pair(0.1, 10**4, rng, size=10**4))
    assert cal.gamma == 1.0 and cal.sigma_gamma == 0.0 and cal.k_opt == pytest.approx(1.0)
    assert cal.delta_e == 0.0 and cal.trials == 10**4


def test_calibrated_weight_matches_symmetric_form(rng):
    src, cfg = _twb(0.76)
    cal = calibrate(*simulate_pairs(src, cfg, rng, 10**6))
    sigma = cal.sigma_gamma  # gamma is 1 to within noise
    fano = 0.5 * (cal.fano_p + cal.fano_r)
    assert abs(cal.k_opt - optimized_weight_symmetric(sigma, fano)) < 0.01
    assert abs(cal.k_opt - 0.76) < 0.01


def test_calibrate_independent_poisson(rng):
    cal = calibrate(rng.poisson(1e4, 10**5), rng.poisson(1e4, 10**5))
    assert abs(cal.k_opt) < 0.01


def test_calibration_errors():
    with pytest.raises(Exception):
        calibrate([5], [5])
    with pytest.raises(Exception):
        calibrate([1, 2, 3], [0, 0, 0])


def test_scaled_weight():
    cal = _record(k=0.8)
    assert cal.scaled_weight(0.25).k_opt == pytest.approx(0.6)
    assert cal.with_weight(0.1).k_opt == 0.1


# Ensembles


def test_ratio_unbiased_at_thirty_percent(rng):
    src, cfg = _twb(0.76)
    cal, n_p, n_r = _measure(src, cfg, 0.3, rng, trials=2 * 10**4, cal_trials=10**5)
    assert abs(estimate_ratio(n_p, n_r, cal).mean() - 0.3) < 0.005


def test_optimized_default_configuration(rng):
    src, cfg = _twb(0.76)
    cal, n_p, n_r = _measure(src, cfg, 0.02, rng)
    s = estimate_optimized(n_p, n_r, cal.scaled_weight(1 - n_p.mean() / cal.mean_np))
    assert abs(s.mean() - 0.02) < 0.002
    assert s.var(ddof=1) == pytest.approx(twb_optimized_variance(0.02, cal.mean_np, 0.76), rel=0.05)


def test_differential_high_loss(rng):
    src, cfg = _twb(0.76)
    cal, n_p, n_r = _measure(src, cfg, 0.7, rng)
    s = estimate_differential(n_p, n_r, cal)
    expected = differential_variance(0.7, cal.mean_np, cal.gamma, cal.sigma_gamma, cal.fano_r)
    assert s.var(ddof=1) == pytest.approx(expected, rel=0.05)


@pytest.mark.parametrize("alpha", [0.1, 0.5])
def test_single_beam_coherent_reaches_coherent_limit(alpha, rng):
    src = SourceModel.coherent_pair(N)
    cal, n_p, n_r = _measure(src, ChannelConfig(), alpha, rng)
    s = estimate_single_beam(n_p, n_r, cal)
    assert s.var(ddof=1) == pytest.approx((1 - alpha) / N, rel=0.05)


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_fock_ratio_reaches_uql(alpha, rng):
    src = SourceModel.fock_pair(int(N))
    cal, n_p, n_r = _measure(src, ChannelConfig(), alpha, rng, cal_trials=100)
    s = estimate_ratio(n_p, n_r, cal)
    assert s.var(ddof=1) == pytest.approx(uql_variance(alpha, N), rel=0.05)


@pytest.mark.parametrize("alpha", [0.05, 0.3, 0.8])
def test_fock_ratio_exact_enumeration(alpha):
    # Lossless Fock pair: N_R = n, N'_P ~ Binomial(n, 1 - alpha); enumerate the estimator.
    n = 400
    k = np.arange(n + 1)
    pmf = scipy_stats.binom.pmf(k, n, 1 - alpha)
    s = 1 - k / n
    mean = float(pmf @ s)
    var = float(pmf @ (s - mean) ** 2)
    assert mean == pytest.approx(alpha, abs=1e-12)
    src = SourceModel.fock_pair(n)
    assert var == pytest.approx(theory_variance(EstimatorKind.RATIO, src, ChannelConfig(), alpha), rel=1e-10)


@pytest.mark.parametrize("gamma", [1.0, 4.0, 100.0])
def test_coherent_pairs_follow_closed_form(gamma, rng):
    src = SourceModel.coherent_pair(N, reference_mean=gamma * N)
    alpha = 0.3
    cal, n_p, n_r = _measure(src, ChannelConfig(), alpha, rng)
    var = estimate_ratio(n_p, n_r, cal).var(ddof=1)
    assert var == pytest.approx(coherent_pair_variance(alpha, N, gamma), rel=0.05)
    if gamma == 100.0:
        assert var == pytest.approx((1 - alpha) / N, rel=0.05)


def _exact_linear_variance(kind, src, cfg, alpha, cutoff=70):
    """Enumerate a linear estimator on the detected joint pmf of a small source."""
    stats = theoretical_joint_stats(src, cfg.with_alpha(0.0))
    diag = scipy_stats.nbinom.pmf(np.arange(cutoff), src.modes, 1 / (1 + src.mean_per_mode))
    k = np.arange(cutoff)
    tp = scipy_stats.binom.pmf(k[None, :], k[:, None], cfg.with_alpha(alpha).probe_survival)
    tr = scipy_stats.binom.pmf(k[None, :], k[:, None], cfg.reference_survival)
    joint = tp.T @ np.diag(diag) @ tr
    n_p, n_r = np.meshgrid(k, k, indexing="ij")
    g, mp, mr = stats.gamma, stats.probe.mean, stats.reference.mean
    if kind is EstimatorKind.DIFFERENTIAL:
        s = (n_r - g * n_p) / mr
    elif kind is EstimatorKind.SINGLE_BEAM:
        s = 1 - g * n_p / mr
    else:
        weight = (1 - alpha) * stats.covariance / stats.reference.variance
        s = 1 - (n_p - weight * (n_r - mr)) / mp
    mean = float((joint * s).sum())
    return float((joint * (s - mean) ** 2).sum())


@pytest.mark.parametrize("kind", [EstimatorKind.OPTIMIZED, EstimatorKind.DIFFERENTIAL, EstimatorKind.SINGLE_BEAM])
@pytest.mark.parametrize("alpha", [0.0, 0.2, 0.7])
def test_linear_estimator_variance_exact(kind, alpha):
    src = SourceModel.twin_beam(0.8, 4)
    cfg = ChannelConfig(eta_p=0.7, eta_r=0.45)
    exact = _exact_linear_variance(kind, src, cfg, alpha)
    assert theory_variance(kind, src, cfg, alpha) == pytest.approx(exact, rel=1e-8)


# Closed forms


def test_theory_examples():
    src = SourceModel.twin_beam(1e-3, 10**7)
    for alpha in (0.1, 0.5):
        assert theory_variance(EstimatorKind.RATIO, src, ChannelConfig(), alpha) == pytest.approx(
            uql_variance(alpha, 1e4), rel=1e-12)
    ccb = SourceModel.split_classical(100.0, tau=0.5)
    assert theory_variance(EstimatorKind.RATIO, ccb, ChannelConfig(), 0.0) == pytest.approx(0.02)
    assert bccb_variance(0.0, 100.0) == pytest.approx(0.02)
    src, cfg = _twb(0.76)
    n = 0.76 * src.modes * src.mean_per_mode
    assert theory_variance(EstimatorKind.OPTIMIZED, src, cfg, 0.3) == pytest.approx(
        twb_optimized_variance(0.3, n, 0.76), rel=1e-3)
    assert theory_variance(EstimatorKind.RATIO, src, cfg, 0.3) == pytest.approx(
        twb_ratio_variance(0.3, n, 0.76), rel=1e-9)


def test_symmetric_optimized_forms_agree():
    # Minimum of the weighted variance equals the symmetric closed form.
    n, fano, sigma = 1e4, 1.3, 0.4
    var = fano * n
    cov = n * (fano - sigma)
    k = optimized_weight_symmetric(sigma, fano)
    assert k == pytest.approx(cov / var)
    assert optimized_variance_for_weight(0.0, n, var, var, cov, k) == pytest.approx(
        optimized_variance_symmetric(0.0, n, sigma, fano))
    for alpha in (0.2, 0.6):
        best = optimized_variance_for_weight(alpha, n, var, var, cov, (1 - alpha) * k)
        assert best == pytest.approx(optimized_variance_symmetric(alpha, n, sigma, fano))


def test_unsupported_case():
    with pytest.raises(UnsupportedCaseError):
        theory_variance(EstimatorKind.RATIO, SourceModel.coherent_pair(0.0), ChannelConfig(), 0.1)
    with pytest.raises(UnsupportedCaseError):
        theory_variance(EstimatorKind.SINGLE_BEAM, SourceModel.twin_beam(0.1, 10), ChannelConfig(eta_p=0.0), 0.1)


def test_bounds_examples():
    assert bound(BoundKind.UQL, 0.5, 100) == pytest.approx(0.05)
    assert bound(BoundKind.COHERENT, 0.0, 100) == bound(BoundKind.SNL, 0.0, 100)
    assert bound(BoundKind.UQL, 0.0, 100) == 0.0 and bound(BoundKind.UQL, 1.0, 100) == 0.0
    assert bound(BoundKind.BALANCED_CCB, 0.0, 100) == pytest.approx(math.sqrt(0.02))
    assert set(all_bounds(0.1, 10)) == set(BoundKind)
    with pytest.raises(ArgumentError):
        bound(BoundKind.UQL, 1.5, 100)
    with pytest.raises(ArgumentError):
        bound(BoundKind.SNL, 0.5, 0)


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.0, 1.0), n=st.floats(1.0, 1e7))
def test_bounds_ordering(alpha, n):
    b = all_bounds(alpha, n)
    assert b[BoundKind.UQL] <= b[BoundKind.COHERENT] * (1 + 1e-12)
    assert b[BoundKind.COHERENT] <= b[BoundKind.SNL] * (1 + 1e-12)
    assert b[BoundKind.COHERENT] <= b[BoundKind.BALANCED_CCB] * (1 + 1e-12)


@pytest.mark.parametrize("eta", [0.7, 0.76, 0.9, 1.0])
def test_ordering_at_high_efficiency(eta):
    src, cfg = _twb(eta)
    ccb = SourceModel.split_classical(N, tau=0.5)
    for alpha in np.linspace(0.0, 0.9, 19):
        opt = theory_variance(EstimatorKind.OPTIMIZED, src, cfg, alpha)
        ratio = theory_variance(EstimatorKind.RATIO, src, cfg, alpha)
        classical = theory_variance(EstimatorKind.RATIO, ccb, cfg, alpha)
        assert opt <= ratio * (1 + 1e-9)
        assert ratio <= classical


@pytest.mark.parametrize("eta_r", [0.3, 0.43, 0.49])
def test_crossover_below_half_reference_efficiency(eta_r):
    src, cfg = _twb(0.76, eta_r)
    alphas = np.linspace(0.0, 0.95, 39)
    ratio = [theory_variance(EstimatorKind.RATIO, src, cfg, a) for a in alphas]
    single = [theory_variance(EstimatorKind.SINGLE_BEAM, src, cfg, a) for a in alphas]
    opt = [theory_variance(EstimatorKind.OPTIMIZED, src, cfg, a) for a in alphas]
    assert any(r > s for r, s in zip(ratio, single))
    assert all(o <= s for o, s in zip(opt, single))


def test_differential_worse_at_high_loss():
    src, cfg = _twb(0.76)
    st_ = theoretical_joint_stats(src, cfg)
    diff = differential_variance(0.9, st_.probe.mean, st_.gamma, st_.nrf_gamma, st_.fano_r)
    ratio = ratio_variance(0.9, st_.probe.mean, st_.gamma, st_.nrf_gamma)
    assert diff > ratio
    assert theory_variance(EstimatorKind.DIFFERENTIAL, src, cfg, 0.9) > theory_variance(
        EstimatorKind.RATIO, src, cfg, 0.9)


def test_differential_exact_form_reduces_to_closed_form():
    src, cfg = _twb(0.9)
    st_ = theoretical_joint_stats(src, cfg)
    for alpha in (0.1, 0.7):
        assert theory_variance(EstimatorKind.DIFFERENTIAL, src, cfg, alpha) == pytest.approx(
            differential_variance(alpha, st_.probe.mean, st_.gamma, st_.nrf_gamma, st_.fano_r), rel=1e-6)


def test_single_beam_closed_form():
    assert single_beam_variance(0.0, 100, 1.0) == pytest.approx(0.01)
    assert single_beam_variance(0.3, 100, 1.0) == pytest.approx(0.007)


@pytest.mark.parametrize("src,cfg", [
    (SourceModel.twin_beam(0.01, 20_000), ChannelConfig(0.76, 0.76)),
    (SourceModel.twin_beam(0.01, 20_000), ChannelConfig(0.76, 0.43)),
    (SourceModel.coherent_pair(300.0, reference_mean=500.0), ChannelConfig(0.9, 0.8)),
    (SourceModel.split_classical(200.0, tau=0.4, input_fano=2.0), ChannelConfig()),
], ids=["twb", "twb_asym", "coherent", "ccb"])
@pytest.mark.parametrize("alpha", [0.0, 0.1, 0.6])
def test_every_estimator_unbiased(src, cfg, alpha, rng):
    cal, n_p, n_r = _measure(src, cfg, alpha, rng, trials=2 * 10**4, cal_trials=10**5)
    for kind in EstimatorKind:
        record = cal.scaled_weight(alpha) if kind is EstimatorKind.OPTIMIZED else cal
        values, excluded = estimate(kind, n_p, n_r, record)
        assert excluded == 0
        # Calibration noise adds to the trial noise; both enter the tolerance.
        spread = math.hypot(mean_se(values), values.std() * math.sqrt(n_p.size / cal.trials))
        assert abs(values.mean() - alpha) < 5 * spread, kind
