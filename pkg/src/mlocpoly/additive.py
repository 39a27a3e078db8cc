"""Marginal integration for additive components, with limit moment evaluators.

The component estimate at x1 averages the full-dimensional local fit's level
coefficient over the observed nuisance covariates, with a wider bandwidth on
the direction of interest than elsewhere.  The evaluators below give the
deterministic targets of the sqrt(n h1) limit: the quadrature ground truth
for phi_1, the small-bandwidth bias functional, and the limit variance in
both its general and quantile-specialized forms (kept as two separate code
paths on purpose; their agreement is a test, not an assumption).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dgp import DgpSpec
from .kernels import build_moment_tables, tensor_quadrature
from .localfit import Dataset, FitConfig, FitResult, SolverSettings, fit_points_batched
from .loss import LossModel, analytic_g, analytic_sigma2
from .polybasis import extended_block, mi_factorial, w_scaling


class TooManyLocalFailures(Exception):
    """Raised when under 90% of the nuisance-point fits succeed."""

    def __init__(self, failed: int, total: int, x1: float):
        self.failed = failed
        self.total = total
        self.x1 = x1
        super().__init__(
            f"{failed} of {total} local fits failed at x1={x1:g}; "
            "need at least 90% successes"
        )


@dataclass(frozen=True)
class AdditiveFitConfig:
    """Fit settings with separate interest (h1) and nuisance (h) bandwidths.

    h may not exceed h1.  eval_grid holds the coordinate-1 points at which
    the component curve is traced; single-point studies leave it None.
    """

    p: int
    kernel: str
    h1: float
    h: float
    loss: LossModel
    eval_grid: np.ndarray | None = None
    min_local_points: int | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if not (self.h1 > 0 and math.isfinite(self.h1)):
            raise ValueError(f"h1 must be positive and finite, got {self.h1}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"h must be positive and finite, got {self.h}")
        if self.h > self.h1:
            raise ValueError(
                f"nuisance bandwidth h={self.h} must not exceed h1={self.h1}"
            )

    def fit_config(self, d: int) -> FitConfig:
        if d < 2:
            raise ValueError("marginal integration needs d >= 2")
        if 3 * d >= 2 * self.p + 5:
            warnings.warn(
                f"d={d}, p={self.p} violates 3d < 2p+5; the limit theory "
                "needs a higher polynomial degree at this dimension",
                stacklevel=2,
            )
        h = np.full(d, self.h)
        h[0] = self.h1
        return FitConfig(
            p=self.p,
            kernel=self.kernel,
            h=h,
            loss=self.loss,
            min_local_points=self.min_local_points,
            solver=self.solver,
        )


@dataclass(frozen=True)
class AdditiveEstimate:
    """Component trace over the evaluation grid.

    centered_component subtracts the grid mean, so it matches the additive
    component only up to that empirical constant.  failures records
    (x1, failed fit count) pairs for grid points that still met the 90%
    success threshold.
    """

    grid: np.ndarray
    phi_n1: np.ndarray
    centered_component: np.ndarray
    failures: tuple[tuple[float, int], ...]


def _marginal_value(data: Dataset, fc: FitConfig, x1: float) -> tuple[float, int]:
    """One marginal integration pass; returns (estimate, failed fit count).

    Evaluation points share the nuisance coordinates of the sample, so they
    are fitted in nuisance-sorted order to keep each batch's union window
    small; the plain average over successes needs no unsorting.
    """
    pts = np.column_stack([np.full(data.n, float(x1)), data.x[:, 1:]])
    order = np.lexsort(pts[:, 1:].T)
    fits = fit_points_batched(data, pts[order], fc)
    values = [f.m_hat for f in fits if isinstance(f, FitResult)]
    failed = data.n - len(values)
    if failed > 0.1 * data.n:
        raise TooManyLocalFailures(failed, data.n, float(x1))
    return float(np.mean(values)), failed


def marginal_integration(data: Dataset, cfg: AdditiveFitConfig, x1: float) -> float:
    """Average level coefficient over nuisance draws: n^{-1} sum beta_0(x1, X_2i).

    Raises TooManyLocalFailures when over 10% of the n local fits fail.
    """
    value, _ = _marginal_value(data, cfg.fit_config(data.d), x1)
    return value


def estimate_component(data: Dataset, cfg: AdditiveFitConfig) -> AdditiveEstimate:
    """Trace phi_n1 over cfg.eval_grid and center it to grid mean zero."""
    if cfg.eval_grid is None:
        raise ValueError("estimate_component needs cfg.eval_grid")
    grid = np.asarray(cfg.eval_grid, dtype=float).reshape(-1)
    fc = cfg.fit_config(data.d)
    phi = np.empty(grid.size)
    failures = []
    for i, x1 in enumerate(grid):
        phi[i], failed = _marginal_value(data, fc, float(x1))
        if failed:
            failures.append((float(x1), failed))
    return AdditiveEstimate(
        grid=grid,
        phi_n1=phi,
        centered_component=phi - phi.mean(),
        failures=tuple(failures),
    )


def _nuisance_quadrature(oracle: DgpSpec, order: int):
    """Nodes, weights, and f2 values for the [0,1]^(d-1) nuisance cube."""
    if oracle.density is None:
        raise ValueError(
            "additive limit evaluators need a design density; "
            f"{oracle.kind!r} generators do not carry one"
        )
    d = oracle.d
    nodes, weights = tensor_quadrature(d - 1, order, lo=0.0, hi=1.0)
    f2 = np.ones(len(nodes))
    for j in range(1, d):
        f2 *= oracle.density.coordinate_pdf(j, nodes[:, j - 1])
    return nodes, weights, f2


def phi1_oracle(oracle: DgpSpec, x1: float, order: int = 24) -> float:
    """Ground truth: integral of the target over the nuisance design law."""
    nodes, weights, f2 = _nuisance_quadrature(oracle, order)
    pts = np.column_stack([np.full(len(nodes), float(x1)), nodes])
    return float(weights @ (oracle.target_value(pts) * f2))


def asymptotic_bias(x1: float, cfg: AdditiveFitConfig, oracle: DgpSpec,
                    draws: int = 100_000, quadrature: bool = False,
                    order: int = 24) -> float:
    """Bias functional max(h1,h)^(p+1) e_1 W_p S_p^{-1} B_1 E m_{p+1}(x1, X_2).

    The nuisance expectation defaults to Monte Carlo over `draws` design
    samples (stream derived from the oracle seed); quadrature=True switches
    to the tensor Gauss-Legendre oracle used in tests.  The scale prefactor
    treats the degree p+1 block with the larger of the two bandwidths, which
    is exact when h1 = h.
    """
    if oracle.density is None:
        raise ValueError("additive limit evaluators need a design density")
    d = oracle.d
    fc = cfg.fit_config(d)
    layout = fc.layout_for(d)
    tables = build_moment_tables(fc.kernel_for(d), layout)
    block = extended_block(layout, cfg.p + 1)

    if quadrature:
        nodes, weights, f2 = _nuisance_quadrature(oracle, order)
        pts = np.column_stack([np.full(len(nodes), float(x1)), nodes])
        wts = weights * f2
        mp1 = np.array([
            float(wts @ oracle.m.partial(pts, r)) / mi_factorial(r) for r in block
        ])
    else:
        rng = np.random.default_rng(oracle.seed)
        x2 = np.column_stack([
            oracle.density.coordinate_sample(rng, j, draws) for j in range(1, d)
        ])
        pts = np.column_stack([np.full(draws, float(x1)), x2])
        mp1 = np.array([
            float(np.mean(oracle.m.partial(pts, r))) / mi_factorial(r) for r in block
        ])

    vec = w_scaling(layout) * np.linalg.solve(tables.Sp, tables.B1 @ mp1)
    return max(cfg.h1, cfg.h) ** (cfg.p + 1) * float(vec[0])


def _kernel_constant(cfg: AdditiveFitConfig, d: int, domain: str) -> float:
    """e_1 S_p^{-1} K_2 K_2^T S_p^{-1} e_1^T for the configured kernel."""
    fc = cfg.fit_config(d)
    tables = build_moment_tables(fc.kernel_for(d), fc.layout_for(d))
    lead = float(np.linalg.solve(tables.Sp, tables.K2(domain))[0])
    return lead * lead


def asymptotic_variance(x1: float, cfg: AdditiveFitConfig, oracle: DgpSpec,
                        domain: str = "support", route: str = "auto",
                        order: int = 24) -> float:
    """Limit variance of sqrt(n h1)(phi_n1 - phi_1).

    route 'general' evaluates the (fg^2)^{-1} f_2^2 sigma^2 integral; route
    'quantile' the q(1-q) f^{-1} f_eps^{-2}(0) f_2^2 specialization; 'auto'
    picks by loss family.  Both carry the same kernel constant, whose K_2
    vector takes the requested integration domain.
    """
    if route == "auto":
        route = "quantile" if cfg.loss.family == "quantile" else "general"
    d = oracle.d
    nodes, weights, f2 = _nuisance_quadrature(oracle, order)
    pts = np.column_stack([np.full(len(nodes), float(x1)), nodes])
    f = oracle.density.pdf(pts)
    kconst = _kernel_constant(cfg, d, domain)

    if route == "general":
        g0 = analytic_g(cfg.loss, oracle.error)
        s2 = analytic_sigma2(cfg.loss, oracle.error)
        integral = float(weights @ (f2 * f2 * s2 / (f * g0 * g0)))
        return integral * kconst
    if route == "quantile":
        if cfg.loss.family != "quantile":
            raise ValueError("quantile route needs a quantile loss")
        q = cfg.loss.q
        dens0 = oracle.error.pdf(0.0)
        integral = float(weights @ (f2 * f2 / (f * dens0 * dens0)))
        return q * (1.0 - q) * integral * kconst
    raise ValueError(f"unknown route {route!r}; use 'auto', 'general', or 'quantile'")
