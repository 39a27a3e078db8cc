import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from mlocpoly.loss import (
    analytic_g,
    analytic_sigma2,
    center_shift,
    centered_for,
    gaussian_error,
    huber_loss,
    log_chi_squared_error,
    lq_loss,
    mean_influence,
    phi,
    quantile_loss,
    rho,
    squared_loss,
    student_t_error,
)

ALL_LOSSES = [
    quantile_loss(0.5),
    quantile_loss(0.25),
    huber_loss(1.345),
    squared_loss(),
    lq_loss(1.5),
]


def test_rho_hand_values():
    assert rho(quantile_loss(0.5), -2.0) == pytest.approx(2.0)
    assert rho(quantile_loss(0.25), 2.0) == pytest.approx(0.25 * 2 * 2 - 2 + 2)  # 2q t for t>0
    assert rho(huber_loss(1.0), 0.5) == pytest.approx(0.125)
    assert rho(huber_loss(1.0), 2.0) == pytest.approx(1.5)
    assert rho(squared_loss(), 3.0) == pytest.approx(9.0)
    assert rho(lq_loss(1.5), 4.0) == pytest.approx(8.0)


def test_phi_hand_values():
    assert phi(quantile_loss(0.25), -0.1) == pytest.approx(-1.5)
    assert phi(quantile_loss(0.25), 0.1) == pytest.approx(0.5)
    assert phi(quantile_loss(0.25), 0.0) == pytest.approx(0.5)  # right-continuous
    assert phi(huber_loss(1.345), 2.0) == pytest.approx(1.345)
    assert phi(huber_loss(1.345), -2.0) == pytest.approx(-1.345)
    assert phi(huber_loss(1.345), 0.7) == pytest.approx(0.7)
    assert phi(squared_loss(), 3.0) == pytest.approx(6.0)
    assert phi(lq_loss(1.5), 4.0) == pytest.approx(3.0)


def test_loss_parameter_validation():
    with pytest.raises(ValueError):
        quantile_loss(0.0)
    with pytest.raises(ValueError):
        quantile_loss(1.0)
    with pytest.raises(ValueError):
        huber_loss(0.0)
    with pytest.raises(ValueError):
        lq_loss(1.0)


def test_smoothness_and_jump_metadata():
    assert quantile_loss(0.3).smoothness_s == 0.0
    assert quantile_loss(0.3).jump_points == (0.0,)
    assert not quantile_loss(0.3).lipschitz_phi
    assert huber_loss(1.0).lipschitz_phi
    assert squared_loss().lipschitz_phi
    assert huber_loss(1.0).jump_points == ()
    assert lq_loss(1.5).smoothness_s == pytest.approx(0.5)
    assert not lq_loss(1.5).lipschitz_phi


@settings(deadline=None, max_examples=80)
@given(
    loss_idx=st.integers(min_value=0, max_value=len(ALL_LOSSES) - 1),
    a=st.floats(-5, 5, allow_nan=False),
    b=st.floats(-5, 5, allow_nan=False),
)
def test_rho_convex_midpoint(loss_idx, a, b):
    loss = ALL_LOSSES[loss_idx]
    mid = rho(loss, 0.5 * (a + b))
    assert mid <= 0.5 * (rho(loss, a) + rho(loss, b)) + 1e-12


@settings(deadline=None, max_examples=80)
@given(
    loss_idx=st.integers(min_value=0, max_value=len(ALL_LOSSES) - 1),
    a=st.floats(-5, 5, allow_nan=False),
    b=st.floats(-5, 5, allow_nan=False),
)
def test_phi_monotone(loss_idx, a, b):
    loss = ALL_LOSSES[loss_idx]
    lo, hi = min(a, b), max(a, b)
    assert phi(loss, lo) <= phi(loss, hi) + 1e-12


@settings(deadline=None, max_examples=60)
@given(
    loss_idx=st.integers(min_value=0, max_value=len(ALL_LOSSES) - 1),
    t=st.floats(-4, 4, allow_nan=False).filter(lambda t: abs(t) > 1e-2),
)
def test_phi_is_rho_derivative(loss_idx, t):
    # single scale constant c = 1 for every family: d rho/dt == phi away from kinks
    loss = ALL_LOSSES[loss_idx]
    eps = 1e-6 * max(1.0, abs(t))
    numeric = (rho(loss, t + eps) - rho(loss, t - eps)) / (2 * eps)
    assert numeric == pytest.approx(float(phi(loss, t)), rel=1e-4, abs=1e-6)


def test_analytic_g_values():
    assert analytic_g(quantile_loss(0.5), gaussian_error()) == pytest.approx(
        2.0 / np.sqrt(2 * np.pi), rel=1e-12
    )
    assert analytic_g(squared_loss(), gaussian_error(0.3)) == 2.0
    k = 1.345
    expect = 2 * stats.norm.cdf(k) - 1
    assert analytic_g(huber_loss(k), gaussian_error()) == pytest.approx(expect, rel=1e-12)
    # k -> infinity limit reduces to the squared family after the scale pairing
    assert analytic_g(huber_loss(1e6), gaussian_error()) == pytest.approx(1.0, rel=1e-10)


def test_huber_squared_pairing_invariance():
    # phi/g is the scale-free object; huber(k large) and squared agree on it
    t = np.linspace(-3, 3, 13)
    hub, sq = huber_loss(1e6), squared_loss()
    err = gaussian_error()
    lhs = phi(hub, t) / analytic_g(hub, err)
    rhs = phi(sq, t) / analytic_g(sq, err)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_analytic_g_lq_gaussian():
    # q(q-1) E|eps|^{q-2} with E|N(0,1)|^s = 2^{s/2} Gamma((s+1)/2) / sqrt(pi)
    q = 1.5
    s = q - 2.0
    closed = q * (q - 1) * 2 ** (s / 2) * special.gamma((s + 1) / 2) / np.sqrt(np.pi)
    assert analytic_g(lq_loss(q), gaussian_error()) == pytest.approx(closed, rel=1e-8)
    with pytest.raises(ValueError):
        analytic_g(lq_loss(2.5), gaussian_error())


def test_analytic_g_quantile_requires_centered_model():
    with pytest.raises(ValueError, match="q-quantile"):
        analytic_g(quantile_loss(0.25), gaussian_error())
    model = centered_for(quantile_loss(0.25), gaussian_error())
    assert model.cdf(0.0) == pytest.approx(0.25, abs=1e-12)
    assert analytic_g(quantile_loss(0.25), model) == pytest.approx(
        2 * stats.norm.pdf(stats.norm.ppf(0.25)), rel=1e-10
    )


def test_analytic_sigma2_values():
    assert analytic_sigma2(quantile_loss(0.5), gaussian_error()) == pytest.approx(1.0)
    model = centered_for(quantile_loss(0.25), gaussian_error())
    assert analytic_sigma2(quantile_loss(0.25), model) == pytest.approx(0.75)
    assert analytic_sigma2(squared_loss(), gaussian_error(0.5)) == pytest.approx(1.0)


def test_analytic_sigma2_huber_matches_closed_form():
    k, sig = 1.345, 0.8
    kap = k / sig
    closed = sig**2 * (2 * stats.norm.cdf(kap) - 1 - 2 * kap * stats.norm.pdf(kap)) + 2 * k**2 * (
        1 - stats.norm.cdf(kap)
    )
    got = analytic_sigma2(huber_loss(k), gaussian_error(sig))
    assert got == pytest.approx(closed, rel=1e-9)


def test_center_shift_closed_forms():
    assert center_shift(quantile_loss(0.25), gaussian_error(2.0)) == pytest.approx(
        2.0 * stats.norm.ppf(0.25), rel=1e-10
    )
    # E ln chi^2_1 = digamma(1/2) + ln 2
    assert center_shift(squared_loss(), log_chi_squared_error()) == pytest.approx(
        special.digamma(0.5) + np.log(2.0), rel=1e-10
    )
    assert center_shift(quantile_loss(0.5), log_chi_squared_error()) == pytest.approx(
        np.log(stats.chi2(1).ppf(0.5)), rel=1e-10
    )


@pytest.mark.parametrize(
    "loss",
    [quantile_loss(0.3), huber_loss(1.0), squared_loss(), lq_loss(1.5)],
)
@pytest.mark.parametrize(
    "error", [gaussian_error(0.7), student_t_error(5.0), log_chi_squared_error()]
)
def test_centering_kills_mean_influence(loss, error):
    model = centered_for(loss, error)
    assert abs(mean_influence(loss, model)) < 1e-8


def test_error_model_pdf_cdf_consistency():
    for model in [gaussian_error(0.5), student_t_error(4.0, 1.2), log_chi_squared_error(0.9)]:
        t = np.linspace(*model.quad_bounds(1e-4), 41)
        eps = 1e-6
        numeric = (model.cdf(t + eps) - model.cdf(t - eps)) / (2 * eps)
        np.testing.assert_allclose(numeric, model.pdf(t), rtol=5e-4, atol=1e-7)
        u = np.linspace(0.05, 0.95, 19)
        np.testing.assert_allclose(model.cdf(model.ppf(u)), u, atol=1e-9)


def test_log_chi_squared_variance():
    assert log_chi_squared_error().var() == pytest.approx(np.pi**2 / 2, rel=1e-12)


def test_student_t_variance_guard():
    with pytest.raises(ValueError, match="infinite"):
        student_t_error(2.0).var()


def test_error_sampling_moments():
    rng = np.random.default_rng(42)
    model = centered_for(squared_loss(), log_chi_squared_error())
    draws = model.sample(rng, 200_000)
    assert abs(draws.mean()) < 0.02
    assert draws.var() == pytest.approx(np.pi**2 / 2, rel=0.03)
    model2 = gaussian_error(0.5)
    draws2 = model2.sample(rng, 100_000)
    assert draws2.std() == pytest.approx(0.5, rel=0.02)
