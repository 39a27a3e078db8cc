import math
import warnings

import numpy as np
import pytest

from mlocpoly.additive import (
    AdditiveFitConfig,
    TooManyLocalFailures,
    asymptotic_bias,
    asymptotic_variance,
    estimate_component,
    marginal_integration,
    phi1_oracle,
)
from mlocpoly.dgp import (
    AdditiveFunction,
    DgpSpec,
    LinearProductDensity,
    PolyComponent,
    SineComponent,
    simulate,
)
from mlocpoly.localfit import Dataset
from mlocpoly.loss import centered_for, gaussian_error, quantile_loss, squared_loss

NU2 = 0.2  # second moment of the epanechnikov kernel


def two_dim_spec(seed=11, scale=0.4, nuisance=PolyComponent((0.0, 0.4)),
                 density=None):
    m = AdditiveFunction(0.3, (SineComponent(), nuisance))
    return DgpSpec(kind="iid-additive", m=m, error=gaussian_error(scale),
                   seed=seed, density=density)


def linear_dataset(n=120, seed=2):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, 2))
    y = 0.3 + 0.5 * x[:, 0] - 0.2 * x[:, 1]
    return Dataset(x=x, y=y)


def cfg_for(p=1, h1=0.25, h=0.25, loss=None, **kw):
    return AdditiveFitConfig(p=p, kernel="epanechnikov", h1=h1, h=h,
                             loss=squared_loss() if loss is None else loss, **kw)


class TestConfig:
    def test_nuisance_bandwidth_cannot_exceed_h1(self):
        with pytest.raises(ValueError, match="must not exceed"):
            cfg_for(h1=0.1, h=0.2)

    @pytest.mark.parametrize("h1,h", [(0.0, 0.1), (-0.2, 0.1), (0.2, 0.0), (0.2, math.nan)])
    def test_bandwidths_positive_finite(self, h1, h):
        with pytest.raises(ValueError):
            cfg_for(h1=h1, h=h)

    def test_fit_config_bandwidth_vector(self):
        with pytest.warns(UserWarning):  # d=3 at p=1 is below the degree bound
            fc = cfg_for(h1=0.3, h=0.1).fit_config(3)
        np.testing.assert_allclose(fc.bandwidths(3), [0.3, 0.1, 0.1])

    def test_needs_two_dimensions(self):
        with pytest.raises(ValueError, match="d >= 2"):
            cfg_for().fit_config(1)

    def test_dimension_degree_warning(self):
        with pytest.raises(UserWarning, match="3d < 2p\\+5"):
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                cfg_for(p=1).fit_config(3)

    def test_no_warning_when_degree_suffices(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            cfg_for(p=1).fit_config(2)
            cfg_for(p=3).fit_config(3)


class TestGroundTruth:
    def test_uniform_nuisance_integrates_out(self):
        spec = two_dim_spec(nuisance=PolyComponent((0.2, 0.6)))
        for x1 in (0.1, 0.37, 0.8):
            want = 0.3 + math.sin(2 * math.pi * x1) + 0.5
            assert abs(phi1_oracle(spec, x1) - want) < 1e-12

    def test_tilted_nuisance_law(self):
        dens = LinearProductDensity((0.0, 0.5))
        spec = two_dim_spec(nuisance=PolyComponent((0.2, 0.6)), density=dens)
        # int (0.2 + 0.6 t)(0.75 + 0.5 t) dt = 0.525
        want = 0.3 + math.sin(2 * math.pi * 0.37) + 0.525
        assert abs(phi1_oracle(spec, 0.37) - want) < 1e-12

    def test_series_kind_rejected(self):
        m = AdditiveFunction(0.0, (PolyComponent((0.0, 0.3)), PolyComponent((0.0, 0.3))))
        spec = DgpSpec(kind="mixing-ar", m=m, error=gaussian_error(0.5), seed=1)
        with pytest.raises(ValueError, match="design density"):
            phi1_oracle(spec, 0.4)


class TestMarginalIntegration:
    def test_reproduces_linear_target_exactly(self):
        data = linear_dataset(n=150)
        got = marginal_integration(data, cfg_for(h1=0.3, h=0.3), 0.4)
        want = np.mean(0.3 + 0.5 * 0.4 - 0.2 * data.x[:, 1])
        assert abs(got - want) < 1e-9

    def test_constant_response_quantile(self):
        rng = np.random.default_rng(7)
        data = Dataset(x=rng.uniform(0.0, 1.0, size=(120, 2)), y=np.full(120, 1.7))
        loss = quantile_loss(0.5)
        got = marginal_integration(data, cfg_for(h1=0.35, h=0.35, loss=loss), 0.5)
        assert abs(got - 1.7) < 1e-8

    def test_tiny_windows_raise(self):
        data = linear_dataset(n=80)
        with pytest.raises(TooManyLocalFailures, match="90%"):
            marginal_integration(data, cfg_for(h1=0.004, h=0.004), 0.5)


def clustered_dataset(n_outliers):
    # 92 well-spread points plus duplicated rows far outside their windows;
    # the duplicates produce exactly singular local designs at (x1, 5.0)
    rng = np.random.default_rng(31)
    n_good = 100 - n_outliers
    x_good = rng.uniform(0.3, 0.7, size=(n_good, 2))
    x_bad = np.tile([0.5, 5.0], (n_outliers, 1))
    x = np.vstack([x_good, x_bad])
    y = 0.3 + 0.5 * x[:, 0] - 0.2 * x[:, 1]
    return Dataset(x=x, y=y)


class TestFailureAccounting:
    def test_partial_failures_recorded(self):
        data = clustered_dataset(8)
        cfg = cfg_for(h1=0.2, h=0.2, eval_grid=np.array([0.5]))
        est = estimate_component(data, cfg)
        assert est.failures == ((0.5, 8),)
        want = np.mean(0.3 + 0.5 * 0.5 - 0.2 * data.x[:92, 1])
        assert abs(est.phi_n1[0] - want) < 1e-9

    def test_over_threshold_raises(self):
        data = clustered_dataset(15)
        cfg = cfg_for(h1=0.2, h=0.2)
        with pytest.raises(TooManyLocalFailures):
            marginal_integration(data, cfg, 0.5)


class TestEstimateComponent:
    def test_centering_and_shapes(self):
        spec = two_dim_spec(seed=4)
        data = simulate(spec, 300).dataset
        grid = np.linspace(0.25, 0.75, 5)
        est = estimate_component(data, cfg_for(h1=0.3, h=0.3, eval_grid=grid))
        assert est.phi_n1.shape == (5,)
        assert abs(est.centered_component.mean()) < 1e-12
        np.testing.assert_allclose(est.centered_component,
                                   est.phi_n1 - est.phi_n1.mean())
        assert est.failures == ()

    def test_grid_required(self):
        data = simulate(two_dim_spec(), 300).dataset
        with pytest.raises(ValueError, match="eval_grid"):
            estimate_component(data, cfg_for())


class TestAsymptoticBias:
    def test_uniform_sine_closed_form(self):
        # nuisance second derivative integrates to zero, leaving nu2 h^2 m1''/2
        spec = two_dim_spec(nuisance=SineComponent(amplitude=0.7))
        cfg = cfg_for(h1=0.25, h=0.25)
        want = NU2 * 0.25**2 * (-((2 * math.pi) ** 2) * math.sin(2 * math.pi * 0.25) / 2.0)
        got = asymptotic_bias(0.25, cfg, spec, quadrature=True)
        assert abs(got - want) < 1e-10 * abs(want)

    def test_halving_bandwidth_scales(self):
        spec = two_dim_spec()
        b_full = asymptotic_bias(0.3, cfg_for(h1=0.2, h=0.2), spec, quadrature=True)
        b_half = asymptotic_bias(0.3, cfg_for(h1=0.1, h=0.1), spec, quadrature=True)
        assert abs(b_half - b_full / 4.0) < 1e-12

    def test_larger_bandwidth_sets_scale(self):
        spec = two_dim_spec()
        wide = asymptotic_bias(0.3, cfg_for(h1=0.3, h=0.1), spec, quadrature=True)
        same = asymptotic_bias(0.3, cfg_for(h1=0.3, h=0.3), spec, quadrature=True)
        assert wide == pytest.approx(same, rel=1e-12)

    def test_monte_carlo_matches_quadrature(self):
        spec = two_dim_spec(nuisance=SineComponent(amplitude=1.0))
        cfg = cfg_for(h1=0.25, h=0.25)
        quad = asymptotic_bias(0.25, cfg, spec, quadrature=True)
        mc = asymptotic_bias(0.25, cfg, spec, draws=100_000)
        # nuisance curvature has sd ~14 per draw; 4 sigma of the mean
        assert abs(mc - quad) < 4 * NU2 * (14.0 / math.sqrt(100_000)) * 0.25**2


class TestAsymptoticVariance:
    def test_uniform_squared_closed_form(self):
        spec = two_dim_spec(scale=0.7)
        got = asymptotic_variance(0.4, cfg_for(), spec)
        assert got == pytest.approx(0.49, rel=1e-12)

    def test_unit_domain_constant(self):
        spec = two_dim_spec(scale=0.7)
        got = asymptotic_variance(0.4, cfg_for(), spec, domain="unit")
        assert got == pytest.approx(0.49 * 0.0625, rel=1e-12)

    def test_quantile_routes_agree(self):
        loss = quantile_loss(0.3)
        err = centered_for(loss, gaussian_error(0.5))
        m = AdditiveFunction(0.3, (SineComponent(), PolyComponent((0.0, 0.4))))
        spec = DgpSpec(kind="iid-additive", m=m, error=err, seed=9,
                       density=LinearProductDensity((0.0, 0.6)))
        cfg = cfg_for(loss=loss)
        general = asymptotic_variance(0.4, cfg, spec, route="general")
        special = asymptotic_variance(0.4, cfg, spec, route="quantile")
        assert abs(general - special) < 1e-10 * special
        auto = asymptotic_variance(0.4, cfg, spec)
        assert auto == special

    def test_quantile_route_needs_quantile_loss(self):
        spec = two_dim_spec()
        with pytest.raises(ValueError, match="quantile"):
            asymptotic_variance(0.4, cfg_for(), spec, route="quantile")

    def test_unknown_route(self):
        spec = two_dim_spec()
        with pytest.raises(ValueError, match="unknown route"):
            asymptotic_variance(0.4, cfg_for(), spec, route="exact")


class TestAccuracy:
    def test_tracks_bias_corrected_target(self):
        spec = two_dim_spec(seed=23, scale=0.3)
        data = simulate(spec, 500).dataset
        cfg = cfg_for(h1=0.15, h=0.15)
        got = marginal_integration(data, cfg, 0.3)
        center = phi1_oracle(spec, 0.3) + asymptotic_bias(0.3, cfg, spec, quadrature=True)
        # limit sd ~ 0.027 at n=500, h1=0.15; allow four of those
        assert abs(got - center) < 0.12
