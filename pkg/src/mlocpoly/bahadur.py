"""Splits local M-fit error into an influence average, small-h bias, and rest.

In scaled coordinates the fitted gap H_n(beta_hat - beta_p) is tracked by a
linear statistic: the kernel-weighted average of influence values phi(residual)
pushed through S_np(x)^{-1} and the factorial rescaling W_p.  The difference
between gap and linear statistic is the remainder whose sup-norm decay the
rate machinery below measures over an interior grid.

Sign and scale conventions are anchored by the squared-loss case, where the
remainder vanishes identically when S_np is taken as the empirical scaled
moment matrix times g: that identity is algebra, not asymptotics, and the
test suite checks it to 1e-8 on random data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dgp import DgpSpec, density_model, oracle_beta_p, oracle_mp_vectors, simulate
from .kernels import (
    SingularSnp,
    build_moment_tables,
    build_mtilde,
    build_np_matrix,
    build_snp,
)
from .localfit import (
    Dataset,
    FitConfig,
    FitResult,
    _as_points,
    _design,
    fit_point,
    fit_points_batched,
)
from .loss import LossModel, analytic_g, phi
from .polybasis import h_scaling, w_scaling

SNP_MODES = ("oracle", "plugin", "empirical")

# medians below this are treated as exact-identity zeros in rate fits
DEGENERATE_FLOOR = 1e-10


@dataclass(frozen=True)
class BahadurDecomposition:
    """All pieces of the expansion at one evaluation point.

    fitted_gap = H_n(beta_hat_p - beta_p) on the scaled-coefficient scale;
    remainder = fitted_gap - leading_term by construction.  bias_theoretical
    holds the small-h branch formulas; it is NaN for series simulators, whose
    stationary design density is not exposed in closed form.
    """

    x: np.ndarray
    leading_term: np.ndarray
    bias_theoretical: np.ndarray
    stochastic_term: np.ndarray
    fitted_gap: np.ndarray
    remainder: np.ndarray
    snp_mode: str


@dataclass(frozen=True)
class RateRecord:
    n: int
    h: float
    median_sup_remainder: float
    theory_scale: float
    failed_replications: int


@dataclass(frozen=True)
class RateReport:
    family: str
    records: tuple[RateRecord, ...]
    slope: float
    slope_se: float
    lambda_target: float
    degenerate: bool


def lambda_target(loss: LossModel, p: int) -> float:
    """Remainder exponent for the sup-norm rate.

    Influences with a jump (quantile) have roughness s = 0, the |t|^q family
    has s = 2 - q; both get min{(p+1)/(p+s+1), (3p+3+2s)/(4p+4s+4)}.  Losses
    with a Lipschitz influence (huber, squared) get exponent 1.
    """
    if loss.family == "quantile":
        s = 0.0
    elif loss.family == "lq":
        s = 2.0 - loss.q
    else:
        return 1.0
    return min((p + 1) / (p + s + 1), (3 * p + 3 + 2 * s) / (4 * p + 4 * s + 4))


def _prod_kernel(kernel, u: np.ndarray) -> np.ndarray:
    # Kernel.__call__ assumes 2-d input; this handles stacked grids too
    return np.prod(kernel.k1(u), axis=-1)


def _invert(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        inv = np.linalg.inv(matrix)
    except np.linalg.LinAlgError as exc:
        raise SingularSnp(f"{what} is singular") from exc
    if not np.all(np.isfinite(inv)):
        raise SingularSnp(f"{what} inverse is not finite")
    return inv


def empirical_snp(data: Dataset, x, cfg: FitConfig, oracle: DgpSpec) -> np.ndarray:
    """g(x) times the kernel-weighted scaled sample moment matrix.

    This is the normalization under which the squared-loss remainder is
    exactly zero; g comes from the oracle's error model and is constant in x
    for the homoskedastic designs shipped here.
    """
    layout = cfg.layout_for(data.d)
    kernel = cfg.kernel_for(data.d)
    hs = cfg.bandwidths(data.d)
    x = np.asarray(x, dtype=float).reshape(data.d)
    u = (data.x - x[None, :]) / hs[None, :]
    weights = _prod_kernel(kernel, u)
    cols = _design(layout, u)
    moment = (cols * weights[:, None]).T @ cols / (data.n * float(np.prod(hs)))
    return analytic_g(cfg.loss, oracle.error) * moment


def plugin_snp(data: Dataset, x, cfg: FitConfig) -> np.ndarray:
    """Estimated (f g)(x) times the unit moment matrix S_p.

    f is a product-kernel density estimate with per-coordinate Silverman
    bandwidths.  g is a symmetric-difference slope of the influence over the
    local fit's own residuals, which for the quantile family reduces to a
    kernel estimate of 2 f_eps(0) and for squared loss is exactly 2.
    """
    layout = cfg.layout_for(data.d)
    kernel = cfg.kernel_for(data.d)
    hs = cfg.bandwidths(data.d)
    x = np.asarray(x, dtype=float).reshape(data.d)

    sd = np.std(data.x, axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    bw = 1.06 * sd * data.n ** (-1.0 / (4 + data.d))
    fhat = float(np.mean(_prod_kernel(kernel, (data.x - x[None, :]) / bw[None, :])))
    fhat /= float(np.prod(bw))

    fit = fit_point(data, x, cfg)
    u = (data.x - x[None, :]) / hs[None, :]
    weights = _prod_kernel(kernel, u)
    scaled = _design(layout, u) @ (h_scaling(layout, hs) * fit.raw_beta)
    resid = data.y - scaled
    live = weights > 0
    spread = float(np.median(np.abs(resid[live] - np.median(resid[live])))) if live.any() else 0.0
    delta = max(0.1 * spread, 1e-3)
    num = float(weights @ (phi(cfg.loss, resid + delta) - phi(cfg.loss, resid - delta)))
    ghat = num / (2.0 * delta * float(weights.sum()))

    tables = build_moment_tables(kernel, layout)
    return fhat * ghat * tables.Sp


def snp_matrix(data: Dataset | None, x, cfg: FitConfig, oracle: DgpSpec, snp_mode: str) -> np.ndarray:
    """S_np(x) under the requested mode: oracle quadrature, plug-in, or empirical."""
    if snp_mode not in SNP_MODES:
        raise ValueError(f"snp_mode must be one of {SNP_MODES}, got {snp_mode!r}")
    d = oracle.d
    if snp_mode == "oracle":
        model = density_model(oracle, cfg.loss)
        return build_snp(model, cfg.kernel_for(d), cfg.layout_for(d), x, cfg.bandwidths(d))
    if data is None:
        raise ValueError(f"snp_mode {snp_mode!r} needs sample data")
    if snp_mode == "plugin":
        return plugin_snp(data, x, cfg)
    return empirical_snp(data, x, cfg, oracle)


def _influence_vector(data: Dataset, x: np.ndarray, cfg: FitConfig, resid: np.ndarray,
                      s_inv: np.ndarray) -> np.ndarray:
    layout = cfg.layout_for(data.d)
    kernel = cfg.kernel_for(data.d)
    hs = cfg.bandwidths(data.d)
    u = (data.x - x[None, :]) / hs[None, :]
    weights = _prod_kernel(kernel, u)
    cols = _design(layout, u)
    summed = cols.T @ (weights * phi(cfg.loss, resid)) / (data.n * float(np.prod(hs)))
    return w_scaling(layout) * (s_inv @ summed)


def leading_term(data: Dataset, x, cfg: FitConfig, oracle: DgpSpec,
                 snp_mode: str = "oracle") -> np.ndarray:
    """Linear influence statistic with residuals against the local Taylor value."""
    x = np.asarray(x, dtype=float).reshape(data.d)
    layout = cfg.layout_for(data.d)
    hs = cfg.bandwidths(data.d)
    b0 = oracle_beta_p(oracle, layout, x)
    s_inv = _invert(snp_matrix(data, x, cfg, oracle, snp_mode), "S_np")
    u = (data.x - x[None, :]) / hs[None, :]
    taylor = _design(layout, u) @ (h_scaling(layout, hs) * b0)
    return _influence_vector(data, x, cfg, data.y - taylor, s_inv)


def stochastic_term(data: Dataset, x, cfg: FitConfig, oracle: DgpSpec,
                    snp_mode: str = "oracle") -> np.ndarray:
    """Same statistic with the influence applied to the true errors."""
    x = np.asarray(x, dtype=float).reshape(data.d)
    s_inv = _invert(snp_matrix(data, x, cfg, oracle, snp_mode), "S_np")
    eps = data.y - oracle.target_value(data.x)
    return _influence_vector(data, x, cfg, eps, s_inv)


def theoretical_bias(x, h: float, cfg: FitConfig, oracle: DgpSpec) -> np.ndarray:
    """Leading deterministic bias of the scaled gap, branch chosen per entry.

    Entries whose degree has opposite parity to p carry the h^(p+1) term
    W_p S_p^{-1} B_1 m_{p+1}; same-parity entries fall to the h^(p+2) term,
    which brings in the design-density gradient through the expansion
    matrices and the order p+2 derivatives.  The conformable reading of the
    mixed product is (Mtilde - N_p S_p^{-1} B_1) m_{p+1}.
    """
    d = oracle.d
    h = float(h)
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    layout = cfg.layout_for(d)
    kernel = cfg.kernel_for(d)
    tables = build_moment_tables(kernel, layout)
    wp = w_scaling(layout)
    mp1, mp2 = oracle_mp_vectors(oracle, layout, x)

    odd_part = wp * np.linalg.solve(tables.Sp, tables.B1 @ mp1)

    model = density_model(oracle, cfg.loss)
    x_arr = np.asarray(x, dtype=float).reshape(d)
    fg_x = float(model.fg(x_arr[None, :])[0])
    mtilde = build_mtilde(model, kernel, layout, x_arr)
    np_mat = build_np_matrix(model, kernel, layout, x_arr)
    inner = (mtilde - np_mat @ np.linalg.solve(tables.Sp, tables.B1)) @ mp1 / fg_x
    inner = inner + tables.B2 @ mp2
    even_part = wp * np.linalg.solve(tables.Sp, inner)

    out = np.empty(layout.size)
    for a, r in enumerate(layout.order):
        if (cfg.p - sum(r)) % 2 == 1:
            out[a] = h ** (cfg.p + 1) * odd_part[a]
        else:
            out[a] = h ** (cfg.p + 2) * even_part[a]
    return out


def decompose(data: Dataset, x, cfg: FitConfig, oracle: DgpSpec,
              snp_mode: str = "oracle") -> BahadurDecomposition:
    """Fit at x and assemble every piece of the expansion.

    Fit errors and singular S_np propagate to the caller.  With anisotropic
    bandwidths the bias scale uses the largest coordinate bandwidth, matching
    the max(h1, h) convention of the marginal-integration results.
    """
    x = np.asarray(x, dtype=float).reshape(data.d)
    layout = cfg.layout_for(data.d)
    hs = cfg.bandwidths(data.d)
    fit = fit_point(data, x, cfg)
    b0 = oracle_beta_p(oracle, layout, x)
    gap = h_scaling(layout, hs) * w_scaling(layout) * (fit.raw_beta - b0)
    lead = leading_term(data, x, cfg, oracle, snp_mode)
    stoch = stochastic_term(data, x, cfg, oracle, snp_mode)
    if oracle.kind == "iid-additive":
        bias = theoretical_bias(x, float(np.max(hs)), cfg, oracle)
    else:
        bias = np.full(layout.size, np.nan)
    return BahadurDecomposition(
        x=x,
        leading_term=lead,
        bias_theoretical=bias,
        stochastic_term=stoch,
        fitted_gap=gap,
        remainder=gap - lead,
        snp_mode=snp_mode,
    )


# ---------------------------------------------------------------------------
# grid machinery for sup-norm studies


def interior_grid(d: int, h: float, count: int = 101) -> np.ndarray:
    """Tensor grid of count points per coordinate on [2h, 1-2h]."""
    lo, hi = 2.0 * h, 1.0 - 2.0 * h
    if not lo < hi:
        raise ValueError(f"bandwidth {h} leaves no interior interval [2h, 1-2h]")
    axis = np.linspace(lo, hi, count)
    if d == 1:
        return axis[:, None]
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class GridOracle:
    """Sample-independent precomputation for one (config, grid) pair.

    Shared across replications: true scaled coefficients per point and the
    inverse oracle S_np per point.  Only the oracle mode is cacheable; the
    empirical and plugin matrices depend on each sample.
    """

    points: np.ndarray
    b0: np.ndarray
    scaled_b0: np.ndarray
    s_inv: np.ndarray


def grid_oracle(oracle: DgpSpec, cfg: FitConfig, points) -> GridOracle:
    d = oracle.d
    layout = cfg.layout_for(d)
    kernel = cfg.kernel_for(d)
    hs = cfg.bandwidths(d)
    pts = _as_points(points, d)
    model = density_model(oracle, cfg.loss)
    b0 = np.stack([oracle_beta_p(oracle, layout, pt) for pt in pts])
    s_inv = np.stack([
        _invert(build_snp(model, kernel, layout, pt, hs), "S_np") for pt in pts
    ])
    return GridOracle(points=pts, b0=b0, scaled_b0=b0 * h_scaling(layout, hs)[None, :], s_inv=s_inv)


@dataclass(frozen=True)
class SupRemainder:
    value: float
    failed_points: int
    per_point: np.ndarray


def sup_remainder(data: Dataset, points, cfg: FitConfig, oracle: DgpSpec,
                  snp_mode: str = "oracle", precomputed: GridOracle | None = None,
                  chunk: int = 128) -> SupRemainder:
    """Max over grid points of the remainder's entrywise infinity norm.

    Failed local fits contribute NaN per-point values and are excluded from
    the max; the count comes back so callers can apply failure budgets.
    """
    d = data.d
    pts = _as_points(points, d)
    layout = cfg.layout_for(d)
    kernel = cfg.kernel_for(d)
    hs = cfg.bandwidths(d)
    wp = w_scaling(layout)
    hw = h_scaling(layout, hs) * wp
    vol = data.n * float(np.prod(hs))

    if precomputed is not None:
        pre = precomputed
        if pre.points.shape != pts.shape or not np.allclose(pre.points, pts):
            raise ValueError("precomputed grid does not match the requested points")
    elif snp_mode == "oracle":
        pre = grid_oracle(oracle, cfg, pts)
    else:
        b0 = np.stack([oracle_beta_p(oracle, layout, pt) for pt in pts])
        pre = GridOracle(points=pts, b0=b0,
                         scaled_b0=b0 * h_scaling(layout, hs)[None, :], s_inv=None)

    fits = fit_points_batched(data, pts, cfg)
    raw = np.full((len(pts), layout.size), np.nan)
    for i, f in enumerate(fits):
        if isinstance(f, FitResult):
            raw[i] = f.raw_beta

    per_point = np.full(len(pts), np.nan)
    for start in range(0, len(pts), chunk):
        sl = slice(start, min(start + chunk, len(pts)))
        u = (data.x[None, :, :] - pts[sl, None, :]) / hs[None, None, :]
        weights = _prod_kernel(kernel, u)
        cols = _design(layout, u)
        resid = data.y[None, :] - np.einsum("cnk,ck->cn", cols, pre.scaled_b0[sl])
        summed = np.einsum("cn,cn,cnk->ck", weights, phi(cfg.loss, resid), cols) / vol
        if snp_mode == "oracle":
            s_inv = pre.s_inv[sl]
        else:
            stack = np.stack([
                snp_matrix(data, pts[i], cfg, oracle, snp_mode)
                for i in range(sl.start, sl.stop)
            ])
            try:
                s_inv = np.linalg.inv(stack)
            except np.linalg.LinAlgError as exc:
                raise SingularSnp("S_np singular on the evaluation grid") from exc
        lead = wp[None, :] * np.einsum("ckl,cl->ck", s_inv, summed)
        gap = hw[None, :] * (raw[sl] - pre.b0[sl])
        per_point[sl] = np.max(np.abs(gap - lead), axis=1)

    failed = int(np.sum(~np.isfinite(per_point)))
    value = float(np.nanmax(per_point)) if failed < len(pts) else math.nan
    return SupRemainder(value=value, failed_points=failed, per_point=per_point)


def ols_loglog_slope(scales, medians) -> tuple[float, float]:
    """Slope and its standard error for log(median) on log(scale)."""
    x = np.log(np.asarray(scales, dtype=float))
    y = np.log(np.asarray(medians, dtype=float))
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ y) / sxx
    resid = y - y.mean() - slope * xc
    dof = len(x) - 2
    if dof <= 0:
        return slope, math.nan
    se = math.sqrt(float(resid @ resid) / dof / sxx)
    return slope, se


def rate_regression(loss: LossModel, dgp: DgpSpec, n_schedule, h_schedule,
                    grid: int | np.ndarray = 101, replications: int = 100, *,
                    p: int = 1, kernel: str = "epanechnikov",
                    snp_mode: str = "oracle") -> RateReport:
    """Median sup-remainder per n, fitted against the theoretical scale.

    h_schedule pairs with n_schedule (one bandwidth per sample size).  grid
    is either an explicit point array reused at every n or a per-coordinate
    count for the [2h, 1-2h] interior grid, which then tracks h.  Replication
    r of every cell draws sample stream (dgp.seed, r), so different loss
    families evaluated against the same dgp see identical data.
    """
    ns = [int(n) for n in n_schedule]
    hs = [float(h) for h in h_schedule]
    if len(ns) < 4:
        raise ValueError("rate fit needs at least 4 sample sizes")
    if len(hs) != len(ns):
        raise ValueError("h_schedule must pair one bandwidth with each n")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_schedule must be strictly increasing")

    d = dgp.d
    lam = lambda_target(loss, p)
    records = []
    for n, h in zip(ns, hs):
        cfg = FitConfig(p=p, kernel=kernel, h=h, loss=loss)
        pts = interior_grid(d, h, grid) if np.isscalar(grid) else _as_points(grid, d)
        pre = grid_oracle(dgp, cfg, pts) if snp_mode == "oracle" else None
        sups = []
        failures = 0
        for r in range(replications):
            try:
                sample = simulate(dgp, n, replication=r)
                result = sup_remainder(sample.dataset, pts, cfg, dgp,
                                       snp_mode=snp_mode, precomputed=pre)
            except (SingularSnp, ValueError) as exc:
                del exc
                failures += 1
                continue
            if not math.isfinite(result.value):
                failures += 1
                continue
            sups.append(result.value)
        median = float(np.median(sups)) if sups else math.nan
        scale = (math.log(n) / (n * h ** d)) ** lam
        records.append(RateRecord(n=n, h=h, median_sup_remainder=median,
                                  theory_scale=scale, failed_replications=failures))

    medians = [rec.median_sup_remainder for rec in records]
    degenerate = any(not math.isfinite(m) or m < DEGENERATE_FLOOR for m in medians)
    if degenerate:
        slope, se = math.nan, math.nan
    else:
        base = [math.log(rec.n) / (rec.n * rec.h ** d) for rec in records]
        slope, se = ols_loglog_slope(base, medians)
    return RateReport(
        family=loss.family,
        records=tuple(records),
        slope=slope,
        slope_se=se,
        lambda_target=lam,
        degenerate=degenerate,
    )
