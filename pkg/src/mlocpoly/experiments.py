"""Replication harness behind the shipped study configs.

run() derives replication i's data stream from (seed, i), aggregates with
medians for sup-norm statistics and means for moment statistics, and returns
a report whose payload contains only plain JSON types.  Wall-clock timing is
printed to stderr and kept out of the payload so identical configs serialize
to identical bytes.
"""

from __future__ import annotations

import dataclasses
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .additive import AdditiveFitConfig, TooManyLocalFailures, asymptotic_bias, \
    asymptotic_variance, marginal_integration, phi1_oracle
from .bahadur import DEGENERATE_FLOOR, decompose, ols_loglog_slope, \
    rate_regression, stochastic_term, theoretical_bias
from .dgp import DgpSpec, NonStationaryConfig, simulate
from .kernels import SingularSnp, build_moment_tables, build_sp_quadrature, \
    even_order_pairing_violation, make_kernel
from .localfit import FitConfig, InsufficientLocalData, SingularDesign, \
    fit_point
from .loss import LossModel, analytic_g, analytic_sigma2, quantile_loss, rho
from .polybasis import build_layout

STUDIES = ("bias-check", "bahadur-rate", "stochastic-clt", "additive-clt",
           "identity-suite")


class StudyAborted(Exception):
    """More than 10% of a study's replications failed."""


class DegenerateFit(Exception):
    """Rate aggregation saw a median at the exact-identity floor."""


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything one study run depends on.

    base_seed overrides the dgp's own seed when given, so one config file
    plus one seed reproduces a run exactly.  threads only controls execution
    concurrency and never enters the report payload.
    """

    study: str
    dgp: DgpSpec | None = None
    fit: FitConfig | AdditiveFitConfig | None = None
    n_schedule: tuple[int, ...] = ()
    replications: int = 100
    base_seed: int | None = None
    grid: int = 101
    x: tuple[float, ...] | None = None
    x1: float | None = None
    h_schedule: tuple[float, ...] | None = None
    losses: tuple[LossModel, ...] = ()
    snp_mode: str = "oracle"
    slope_band: tuple[float, float] = (0.55, 1.05)
    var_tolerance: float = 0.3
    skew_bound: float = 0.35
    kurt_bound: float = 0.8
    k2_domain: str = "support"
    threads: int = 1

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}; choose from {STUDIES}")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.study == "identity-suite":
            return
        if self.dgp is None:
            raise ValueError(f"study {self.study!r} needs a dgp")
        if not self.n_schedule:
            raise ValueError("n_schedule must be non-empty")
        if self.study in ("bias-check", "stochastic-clt"):
            if not isinstance(self.fit, FitConfig):
                raise ValueError(f"study {self.study!r} needs a FitConfig")
            if self.x is None:
                raise ValueError(f"study {self.study!r} needs an evaluation point x")
            if len(self.n_schedule) != 1:
                raise ValueError(f"study {self.study!r} uses a single sample size")
            if self.dgp.kind != "iid-additive":
                raise ValueError(
                    f"study {self.study!r} compares against density-based "
                    "formulas and needs an iid-additive dgp"
                )
        elif self.study == "bahadur-rate":
            if not isinstance(self.fit, FitConfig):
                raise ValueError("bahadur-rate needs a template FitConfig")
            if self.h_schedule is None or len(self.h_schedule) != len(self.n_schedule):
                raise ValueError("bahadur-rate needs one bandwidth per sample size")
        elif self.study == "additive-clt":
            if not isinstance(self.fit, AdditiveFitConfig):
                raise ValueError("additive-clt needs an AdditiveFitConfig")
            if self.x1 is None:
                raise ValueError("additive-clt needs an evaluation point x1")
            if len(self.n_schedule) != 1:
                raise ValueError("additive-clt uses a single sample size")
            if self.dgp.kind != "iid-additive" or self.dgp.d < 2:
                raise ValueError("additive-clt needs an iid-additive dgp with d >= 2")

    @property
    def rate_losses(self) -> tuple[LossModel, ...]:
        if self.losses:
            return self.losses
        return (self.fit.loss,) if self.fit is not None else ()

    def seeded_dgp(self) -> DgpSpec:
        if self.dgp is None or self.base_seed is None:
            return self.dgp
        return dataclasses.replace(self.dgp, seed=int(self.base_seed))


@dataclass(frozen=True)
class ExperimentReport:
    study: str
    config: dict
    cells: tuple[dict, ...]
    pass_flags: dict
    failure_counts: dict
    replications: int

    @property
    def all_passed(self) -> bool:
        return all(self.pass_flags.values())

    def to_payload(self) -> dict:
        return _plain({
            "study": self.study,
            "config": self.config,
            "replications": self.replications,
            "cells": list(self.cells),
            "pass_flags": self.pass_flags,
            "failure_counts": self.failure_counts,
            "all_passed": self.all_passed,
        })


def _plain(obj):
    """Recursively reduce to JSON-native types; NaN becomes None."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {"type": type(obj).__name__}
        for f in dataclasses.fields(obj):
            out[f.name] = _plain(getattr(obj, f.name))
        return out
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, (np.integer, int)) or isinstance(obj, bool):
        return obj if isinstance(obj, bool) else int(obj)
    return obj


def _config_echo(spec: ExperimentSpec) -> dict:
    dgp = spec.seeded_dgp()
    return {
        "study": spec.study,
        "base_seed": None if dgp is None else dgp.seed,
        "replications": spec.replications,
        "n_schedule": list(spec.n_schedule),
        "h_schedule": None if spec.h_schedule is None else list(spec.h_schedule),
        "grid": spec.grid,
        "x": None if spec.x is None else list(spec.x),
        "x1": spec.x1,
        "snp_mode": spec.snp_mode,
        "k2_domain": spec.k2_domain,
        "slope_band": list(spec.slope_band),
        "var_tolerance": spec.var_tolerance,
        "skew_bound": spec.skew_bound,
        "kurt_bound": spec.kurt_bound,
        "dgp": dgp,
        "fit": spec.fit,
        "losses": list(spec.rate_losses),
    }


def _summary(values) -> dict:
    arr = np.asarray(values, dtype=float)
    r = int(arr.size)
    mean = float(arr.mean()) if r else math.nan
    sd = float(arr.std(ddof=1)) if r > 1 else math.nan
    se = sd / math.sqrt(r) if r > 1 else math.nan
    return {"mean": mean, "sd": sd, "se": se, "se_defined": r > 1, "r": r}


def _shape_stats(arr: np.ndarray) -> tuple[float, float]:
    c = arr - arr.mean()
    m2 = float(np.mean(c**2))
    skew = float(np.mean(c**3)) / m2**1.5
    ex_kurt = float(np.mean(c**4)) / m2**2 - 3.0
    return skew, ex_kurt


def _map_replications(fn, count: int, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def _check_abort(study: str, failures: int, total: int):
    if failures > 0.1 * total:
        raise StudyAborted(
            f"{study}: {failures} of {total} replications failed (>10%)"
        )


# ValueError covers oracle windows that leave the density support
_REP_ERRORS = (InsufficientLocalData, SingularDesign, SingularSnp,
               NonStationaryConfig, TooManyLocalFailures, ValueError)


def aggregate_rate(records, d: int = 1) -> tuple[float, float]:
    """OLS slope of log median sup-remainder on log(log n / (n h^d)).

    Raises DegenerateFit when any median sits at the exact-identity floor.
    """
    recs = list(records)
    if len(recs) < 4:
        raise ValueError("rate aggregation needs at least 4 sample sizes")
    meds = [rec.median_sup_remainder for rec in recs]
    if any(not math.isfinite(m) or m < DEGENERATE_FLOOR for m in meds):
        raise DegenerateFit(
            f"median sup-remainder at or below {DEGENERATE_FLOOR:g}; "
            "the loss admits an exact identity at this configuration"
        )
    base = [math.log(rec.n) / (rec.n * rec.h**d) for rec in recs]
    return ols_loglog_slope(base, meds)


# ---------------------------------------------------------------------------
# study runners

def _run_bias_check(spec: ExperimentSpec) -> ExperimentReport:
    dgp = spec.seeded_dgp()
    cfg = spec.fit
    n = spec.n_schedule[0]
    x = np.asarray(spec.x, dtype=float)

    def one(i):
        sample = simulate(dgp, n, replication=i)
        try:
            f = fit_point(sample.dataset, x, cfg)
        except _REP_ERRORS as exc:
            return ("fail", type(exc).__name__)
        if not f.converged:
            return ("fail", "NotConverged")
        return ("ok", f.m_hat - float(dgp.target_value(x)))

    outcomes = _map_replications(one, spec.replications, spec.threads)
    errors = [v for tag, v in outcomes if tag == "ok"]
    failures = len(outcomes) - len(errors)
    _check_abort(spec.study, failures, spec.replications)

    h_max = float(np.max(cfg.bandwidths(dgp.d)))
    theory = float(theoretical_bias(x, h_max, cfg, dgp)[0])
    stats = _summary(errors)
    gap = abs(stats["mean"] - theory)
    cell = {"name": "mean_error", **stats, "theory": theory, "abs_gap": gap}
    passed = bool(stats["se_defined"] and gap <= 3.0 * stats["se"])
    return ExperimentReport(
        study=spec.study,
        config=_plain(_config_echo(spec)),
        cells=(cell,),
        pass_flags={"bias_within_3se": passed},
        failure_counts={"mean_error": failures},
        replications=spec.replications,
    )


def _run_bahadur_rate(spec: ExperimentSpec) -> ExperimentReport:
    dgp = spec.seeded_dgp()
    cells = []
    flags = {}
    counts = {}
    medians_by_family = {}
    lo, hi = spec.slope_band
    # the band is calibrated to the primary loss's theoretical exponent;
    # secondary losses get slope cells for the ordering check but no gate
    primary = spec.rate_losses[0].family
    for loss in spec.rate_losses:
        report = rate_regression(
            loss, dgp, spec.n_schedule, spec.h_schedule, grid=spec.grid,
            replications=spec.replications, p=spec.fit.p,
            kernel=spec.fit.kernel, snp_mode=spec.snp_mode,
        )
        for rec in report.records:
            _check_abort(spec.study, rec.failed_replications, spec.replications)
            cells.append({
                "name": f"{loss.family}:n={rec.n}",
                "n": rec.n,
                "h": rec.h,
                "median_sup_remainder": rec.median_sup_remainder,
                "theory_scale": rec.theory_scale,
                "r": spec.replications - rec.failed_replications,
            })
        if report.degenerate:
            raise DegenerateFit(
                f"{loss.family}: median sup-remainder at the exact-identity floor"
            )
        cells.append({
            "name": f"{loss.family}:slope",
            "slope": report.slope,
            "slope_se": report.slope_se,
            "lambda_target": report.lambda_target,
        })
        if loss.family == primary:
            flags[f"slope_in_band:{loss.family}"] = bool(lo <= report.slope <= hi)
        counts[loss.family] = int(sum(r.failed_replications for r in report.records))
        medians_by_family[loss.family] = [
            r.median_sup_remainder for r in report.records
        ]

    if {"huber", "quantile"} <= medians_by_family.keys():
        hm = medians_by_family["huber"]
        qm = medians_by_family["quantile"]
        flags["lipschitz_ordering"] = bool(all(a < b for a, b in zip(hm, qm)))
    return ExperimentReport(
        study=spec.study,
        config=_plain(_config_echo(spec)),
        cells=tuple(cells),
        pass_flags=flags,
        failure_counts=counts,
        replications=spec.replications,
    )


def _run_stochastic_clt(spec: ExperimentSpec) -> ExperimentReport:
    dgp = spec.seeded_dgp()
    cfg = spec.fit
    n = spec.n_schedule[0]
    x = np.asarray(spec.x, dtype=float)
    hs = cfg.bandwidths(dgp.d)
    scale = math.sqrt(n * float(np.prod(hs)))

    def one(i):
        sample = simulate(dgp, n, replication=i)
        try:
            term = stochastic_term(sample.dataset, x, cfg, dgp,
                                   snp_mode=spec.snp_mode)
        except _REP_ERRORS as exc:
            return ("fail", type(exc).__name__)
        return ("ok", scale * float(term[0]))

    outcomes = _map_replications(one, spec.replications, spec.threads)
    draws = np.array([v for tag, v in outcomes if tag == "ok"])
    failures = len(outcomes) - draws.size
    _check_abort(spec.study, failures, spec.replications)

    tables = build_moment_tables(cfg.kernel_for(dgp.d), cfg.layout_for(dgp.d))
    sp_inv_sq = np.linalg.solve(tables.Sp, tables.sq_matrix)
    kconst = float(np.linalg.solve(tables.Sp.T, sp_inv_sq.T)[0, 0])
    f_x = float(dgp.density.pdf(x))
    g0 = analytic_g(cfg.loss, dgp.error)
    limit_var = analytic_sigma2(cfg.loss, dgp.error) / (f_x * g0 * g0) * kconst

    stats = _summary(draws)
    var = float(draws.var(ddof=1)) if draws.size > 1 else math.nan
    skew, ex_kurt = _shape_stats(draws)
    cell = {
        "name": "scaled_stochastic_term", **stats,
        "variance": var, "limit_variance": limit_var,
        "variance_ratio": var / limit_var,
        "skewness": skew, "ex_kurtosis": ex_kurt,
    }
    flags = {
        "variance_within_tolerance": bool(abs(var / limit_var - 1.0) <= spec.var_tolerance),
        "skewness_in_band": bool(abs(skew) < spec.skew_bound),
        "kurtosis_in_band": bool(abs(ex_kurt) < spec.kurt_bound),
    }
    return ExperimentReport(
        study=spec.study,
        config=_plain(_config_echo(spec)),
        cells=(cell,),
        pass_flags=flags,
        failure_counts={"scaled_stochastic_term": failures},
        replications=spec.replications,
    )


def _run_additive_clt(spec: ExperimentSpec) -> ExperimentReport:
    dgp = spec.seeded_dgp()
    cfg = spec.fit
    n = spec.n_schedule[0]
    x1 = float(spec.x1)
    scale = math.sqrt(n * cfg.h1)
    phi1 = phi1_oracle(dgp, x1)

    def one(i):
        sample = simulate(dgp, n, replication=i)
        try:
            est = marginal_integration(sample.dataset, cfg, x1)
        except _REP_ERRORS as exc:
            return ("fail", type(exc).__name__)
        return ("ok", scale * (est - phi1))

    outcomes = _map_replications(one, spec.replications, spec.threads)
    draws = np.array([v for tag, v in outcomes if tag == "ok"])
    failures = len(outcomes) - draws.size
    _check_abort(spec.study, failures, spec.replications)

    var_support = asymptotic_variance(x1, cfg, dgp, domain="support")
    var_unit = asymptotic_variance(x1, cfg, dgp, domain="unit")
    predicted_mean = scale * asymptotic_bias(x1, cfg, dgp)

    stats = _summary(draws)
    var = float(draws.var(ddof=1)) if draws.size > 1 else math.nan
    skew, ex_kurt = _shape_stats(draws)
    cell = {
        "name": "scaled_component_error", **stats,
        "variance": var,
        "sigma_tilde_sq_support": var_support,
        "sigma_tilde_sq_unit": var_unit,
        "variance_ratio_support": var / var_support,
        "variance_ratio_unit": var / var_unit,
        "predicted_mean": predicted_mean,
        "skewness": skew, "ex_kurtosis": ex_kurt,
    }
    ref = var_unit if spec.k2_domain == "unit" else var_support
    flags = {
        "variance_within_tolerance": bool(abs(var / ref - 1.0) <= spec.var_tolerance),
        "skewness_in_band": bool(abs(skew) < spec.skew_bound),
        "kurtosis_in_band": bool(abs(ex_kurt) < spec.kurt_bound),
    }
    return ExperimentReport(
        study=spec.study,
        config=_plain(_config_echo(spec)),
        cells=(cell,),
        pass_flags=flags,
        failure_counts={"scaled_component_error": failures},
        replications=spec.replications,
    )


def _identity_cells() -> list[dict]:
    from math import comb

    from .dgp import AdditiveFunction, SineComponent
    from .localfit import Dataset

    cells = []

    worst = 0.0
    for d in range(1, 5):
        for p in range(0, 5):
            layout = build_layout(d, p)
            worst = max(worst, abs(layout.size - comb(p + d, d)))
            for i in range(p + 1):
                block = layout.block(i)
                head = (0,) * (d - 1) + (i,)
                worst = max(worst, float(block[0] != head))
    cells.append({"name": "basis_count", "max_violation": worst, "tolerance": 0.0})

    quad_worst = 0.0
    spd_min = math.inf
    parity_worst = 0.0
    for d in range(1, 4):
        for p in range(0, 4):
            layout = build_layout(d, p)
            kern = make_kernel("epanechnikov", d)
            tables = build_moment_tables(kern, layout)
            quad_worst = max(quad_worst, float(np.max(np.abs(
                build_sp_quadrature(kern, layout) - tables.Sp
            ))))
            spd_min = min(spd_min, float(np.linalg.eigvalsh(tables.Sp).min()))
            parity_worst = max(parity_worst, even_order_pairing_violation(tables))
    cells.append({"name": "sp_quadrature", "max_violation": quad_worst,
                  "tolerance": 1e-12})
    cells.append({"name": "sp_positive_definite", "min_eigenvalue": spd_min,
                  "tolerance": 0.0})
    cells.append({"name": "even_parity_rows", "max_violation": parity_worst,
                  "tolerance": 1e-10})

    from .loss import gaussian_error, squared_loss

    worst_rem = 0.0
    rng = np.random.default_rng(20240817)
    for d, p in ((1, 1), (1, 2), (2, 1), (2, 2)):
        m = AdditiveFunction(0.0, tuple(SineComponent() for _ in range(d)))
        oracle = DgpSpec(kind="iid-additive", m=m, error=gaussian_error(0.5),
                         seed=77)
        cfg = FitConfig(p=p, kernel="epanechnikov", h=0.35, loss=squared_loss())
        for rep in range(3):
            sample = simulate(oracle, 200, replication=rep)
            x = np.full(d, 0.35 + 0.1 * rep)
            dec = decompose(sample.dataset, x, cfg, oracle, snp_mode="empirical")
            worst_rem = max(worst_rem, float(np.max(np.abs(dec.remainder))))
    cells.append({"name": "squared_loss_identity", "max_violation": worst_rem,
                  "tolerance": 1e-8})

    worst_gap = -math.inf
    kern = make_kernel("epanechnikov", 1)
    for trial in range(25):
        x = rng.uniform(0, 1, size=(40, 1))
        y = rng.standard_normal(40)
        q = float(rng.uniform(0.15, 0.85))
        loss = quantile_loss(q)
        cfg = FitConfig(p=0, kernel="epanechnikov", h=0.45, loss=loss)
        res = fit_point(Dataset(x=x, y=y), 0.5, cfg)
        w = kern((x - 0.5) / 0.45).ravel()
        keep = w > 0
        brute = min(float(w[keep] @ rho(loss, y[keep] - c)) for c in y[keep])
        worst_gap = max(worst_gap, res.objective - brute)
    cells.append({"name": "weighted_quantile_window", "max_violation": worst_gap,
                  "tolerance": 1e-6})
    return cells


def _run_identity_suite(spec: ExperimentSpec) -> ExperimentReport:
    cells = _identity_cells()
    flags = {}
    for cell in cells:
        if "max_violation" in cell:
            flags[cell["name"]] = bool(cell["max_violation"] <= cell["tolerance"])
        else:
            flags[cell["name"]] = bool(cell["min_eigenvalue"] > cell["tolerance"])
    return ExperimentReport(
        study=spec.study,
        config=_plain(_config_echo(spec)),
        cells=tuple(cells),
        pass_flags=flags,
        failure_counts={},
        replications=spec.replications,
    )


_RUNNERS = {
    "bias-check": _run_bias_check,
    "bahadur-rate": _run_bahadur_rate,
    "stochastic-clt": _run_stochastic_clt,
    "additive-clt": _run_additive_clt,
    "identity-suite": _run_identity_suite,
}


def run(spec: ExperimentSpec) -> ExperimentReport:
    """Execute one study; deterministic payload for a fixed spec."""
    start = time.perf_counter()
    report = _RUNNERS[spec.study](spec)
    elapsed = time.perf_counter() - start
    print(f"[{spec.study}] wall-clock {elapsed:.2f}s", file=sys.stderr)
    return report
