"""Loss families, influence functions, and error-distribution oracles.

Every local M-fit minimizes sum_i K_i rho(Y_i - mu_i' beta) for one of four
convex loss families:

* quantile(q):  rho(t) = (2q - 1) t + |t|
* huber(k):     rho(t) = t^2/2 for |t| < k, k|t| - k^2/2 beyond
* squared:      rho(t) = t^2
* lq(q), q>1:   rho(t) = |t|^q

The influence function phi is the residual derivative phi(t) = d rho / d t
(a subgradient selection at kinks), so the per-family scale constant linking
phi to rho is 1 throughout.  The curvature weight that pairs with phi in the
asymptotics is g(x) = E[phi'(eps) | X=x], with distributional jumps counted:
for the quantile loss phi jumps by 2 at zero, so g = 2 f_eps(0|x); for the
Huber loss g = P(|eps| < k | x); for the squared loss g = 2 identically.
Only the combinations phi/g and E[phi^2]/g^2 enter any estimator or limit
formula, so rescaling a loss rescales phi and g together and changes nothing
downstream; the exactness identity in the decomposition module pins this
pairing end to end.

Error models are location families over a few named distributions, shifted so
that E[phi(eps)] = 0 for the active loss (quantile losses need the q-quantile
at zero, squared losses the mean, and the Huber/lq centers solve a
one-dimensional root find).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import log, pi, sqrt

import numpy as np
from scipy import integrate, optimize, special, stats

_LOSS_FAMILIES = ("quantile", "huber", "squared", "lq")


@dataclass(frozen=True)
class LossModel:
    """One convex loss family with its parameters.

    q is the quantile level for the quantile family and the exponent for the
    lq family; k is the Huber corner.  Unused parameters stay None.
    """

    family: str
    q: float | None = None
    k: float | None = None

    @property
    def jump_points(self) -> tuple[float, ...]:
        """Discontinuity locations of phi (empty for all but the quantile)."""
        return (0.0,) if self.family == "quantile" else ()

    @property
    def lipschitz_phi(self) -> bool:
        """True when phi is globally Lipschitz (huber and squared)."""
        return self.family in ("huber", "squared")

    @property
    def smoothness_s(self) -> float:
        """Roughness index s feeding the remainder-rate exponent lambda(s)."""
        if self.family == "quantile":
            return 0.0
        if self.family == "lq":
            return max(0.0, 2.0 - self.q)
        return 0.0


def quantile_loss(q: float) -> LossModel:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {q}")
    return LossModel(family="quantile", q=float(q))


def huber_loss(k: float) -> LossModel:
    if not k > 0.0:
        raise ValueError(f"huber corner must be positive, got {k}")
    return LossModel(family="huber", k=float(k))


def squared_loss() -> LossModel:
    return LossModel(family="squared")


def lq_loss(q: float) -> LossModel:
    if not q > 1.0:
        raise ValueError(f"lq exponent must exceed 1, got {q}")
    return LossModel(family="lq", q=float(q))


def rho(loss: LossModel, t) -> np.ndarray:
    """Loss value at residual t (vectorized)."""
    t = np.asarray(t, dtype=float)
    if loss.family == "quantile":
        return (2.0 * loss.q - 1.0) * t + np.abs(t)
    if loss.family == "huber":
        a = np.abs(t)
        return np.where(a < loss.k, 0.5 * t * t, loss.k * a - 0.5 * loss.k**2)
    if loss.family == "squared":
        return t * t
    if loss.family == "lq":
        return np.abs(t) ** loss.q
    raise ValueError(f"unknown loss family {loss.family!r}")


def phi(loss: LossModel, t) -> np.ndarray:
    """Influence function phi(t) = d rho / d t, right-continuous at kinks."""
    t = np.asarray(t, dtype=float)
    if loss.family == "quantile":
        return np.where(t >= 0.0, 2.0 * loss.q, 2.0 * loss.q - 2.0)
    if loss.family == "huber":
        return np.clip(t, -loss.k, loss.k)
    if loss.family == "squared":
        return 2.0 * t
    if loss.family == "lq":
        return loss.q * np.sign(t) * np.abs(t) ** (loss.q - 1.0)
    raise ValueError(f"unknown loss family {loss.family!r}")


# ---------------------------------------------------------------------------
# error models

_ERROR_FAMILIES = ("gaussian", "student_t", "log_chi_squared")


@dataclass(frozen=True)
class ErrorModel:
    """Homoskedastic error distribution eps = base - shift.

    base is gaussian(scale), student_t(df, scale), or log_chi_squared(scale)
    -- the last being ln(scale^2 chi^2_1), the regression error of a
    log-volatility target before centering.  shift relocates the law so a
    chosen loss is centered; build with centered_for.
    """

    family: str
    scale: float = 1.0
    df: float | None = None
    shift: float = 0.0

    def _base(self):
        if self.family == "gaussian":
            return stats.norm(scale=self.scale)
        if self.family == "student_t":
            return stats.t(df=self.df, scale=self.scale)
        raise ValueError(f"unknown error family {self.family!r}")

    def pdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.family == "log_chi_squared":
            z = t + self.shift - 2.0 * log(self.scale)
            return np.exp(0.5 * z - 0.5 * np.exp(z)) / sqrt(2.0 * pi)
        return self._base().pdf(t + self.shift)

    def cdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.family == "log_chi_squared":
            z = t + self.shift - 2.0 * log(self.scale)
            return stats.chi2(1).cdf(np.exp(z))
        return self._base().cdf(t + self.shift)

    def ppf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.family == "log_chi_squared":
            return 2.0 * log(self.scale) + np.log(stats.chi2(1).ppf(u)) - self.shift
        return self._base().ppf(u) - self.shift

    def mean(self) -> float:
        if self.family == "log_chi_squared":
            # E ln chi^2_1 = digamma(1/2) + ln 2
            return 2.0 * log(self.scale) + float(special.digamma(0.5)) + log(2.0) - self.shift
        if self.family == "student_t" and self.df <= 1:
            raise ValueError("student-t mean undefined for df <= 1")
        return float(self._base().mean()) - self.shift

    def var(self) -> float:
        if self.family == "log_chi_squared":
            return float(special.polygamma(1, 0.5))  # = pi^2 / 2
        if self.family == "student_t" and self.df <= 2:
            raise ValueError("student-t variance infinite for df <= 2")
        return float(self._base().var())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "gaussian":
            draws = self.scale * rng.standard_normal(n)
        elif self.family == "student_t":
            draws = self.scale * rng.standard_t(self.df, size=n)
        elif self.family == "log_chi_squared":
            draws = np.log((self.scale * rng.standard_normal(n)) ** 2)
        else:
            raise ValueError(f"unknown error family {self.family!r}")
        return draws - self.shift

    def quad_bounds(self, tail: float = 1e-9) -> tuple[float, float]:
        return float(self.ppf(tail)), float(self.ppf(1.0 - tail))


def gaussian_error(scale: float = 1.0) -> ErrorModel:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return ErrorModel(family="gaussian", scale=float(scale))


def student_t_error(df: float, scale: float = 1.0) -> ErrorModel:
    if df <= 0 or scale <= 0:
        raise ValueError("df and scale must be positive")
    return ErrorModel(family="student_t", scale=float(scale), df=float(df))


def log_chi_squared_error(scale: float = 1.0) -> ErrorModel:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return ErrorModel(family="log_chi_squared", scale=float(scale))


def _phi_breakpoints(loss: LossModel) -> list[float]:
    """Kink/jump locations of phi, handed to the quadrature subdivider."""
    pts = list(loss.jump_points)
    if loss.family == "huber":
        pts += [-loss.k, loss.k]
    if loss.family == "lq":
        pts.append(0.0)
    return pts


def mean_influence(loss: LossModel, error: ErrorModel) -> float:
    """E[phi(eps)] under the error model, by adaptive quadrature."""
    lo, hi = error.quad_bounds(tail=1e-14)
    pts = [p for p in _phi_breakpoints(loss) + [float(error.ppf(0.5))] if lo < p < hi]
    val, _ = integrate.quad(
        lambda t: float(phi(loss, t)) * float(error.pdf(t)),
        lo,
        hi,
        points=pts or None,
        limit=400,
        epsabs=1e-12,
        epsrel=1e-12,
    )
    return float(val)


def center_shift(loss: LossModel, error: ErrorModel) -> float:
    """The c with E[phi(base - c)] = 0, so the shifted model is loss-centered."""
    if loss.family == "quantile":
        return float(replace(error, shift=0.0).ppf(loss.q))
    if loss.family == "squared":
        return replace(error, shift=0.0).mean()
    base = replace(error, shift=0.0)
    lo, hi = base.quad_bounds(tail=1e-7)

    def balance(c):
        return mean_influence(loss, replace(base, shift=c))

    return float(optimize.brentq(balance, lo - 1.0, hi + 1.0, xtol=1e-12))


def centered_for(loss: LossModel, error: ErrorModel) -> ErrorModel:
    """Reshift the error model so E[phi(eps)] = 0 for this loss."""
    return replace(error, shift=center_shift(loss, replace(error, shift=0.0)))


def _require_quantile_centered(loss: LossModel, error: ErrorModel) -> None:
    at_zero = float(error.cdf(0.0))
    if abs(at_zero - loss.q) > 1e-8:
        raise ValueError(
            f"quantile loss at level {loss.q} needs the error q-quantile at 0; "
            f"this model has F(0) = {at_zero:.6g}"
        )


def analytic_g(loss: LossModel, error: ErrorModel) -> float:
    """Curvature weight g = E[phi'(eps)], jumps counted distributionally.

    quantile -> 2 f_eps(0); huber -> P(|eps| < k); squared -> 2;
    lq -> q(q-1) E|eps|^{q-2} by quadrature (finite for 1 < q < 2 when the
    density is bounded near zero).
    """
    if loss.family == "quantile":
        _require_quantile_centered(loss, error)
        return 2.0 * float(error.pdf(0.0))
    if loss.family == "squared":
        return 2.0
    if loss.family == "huber":
        return float(error.cdf(loss.k) - error.cdf(-loss.k))
    if loss.family == "lq":
        q = loss.q
        if q >= 2.0:
            raise ValueError("analytic_g for lq is served only for 1 < q < 2")
        lo, hi = error.quad_bounds(tail=1e-14)
        val, _ = integrate.quad(
            lambda t: q * (q - 1.0) * abs(t) ** (q - 2.0) * float(error.pdf(t)),
            lo,
            hi,
            points=[0.0],
            limit=400,
        )
        return float(val)
    raise ValueError(f"unknown loss family {loss.family!r}")


def analytic_sigma2(loss: LossModel, error: ErrorModel) -> float:
    """sigma^2 = E[phi^2(eps)] under the error model.

    quantile -> 4 q (1-q) (requires the q-quantile at zero); squared ->
    4 Var(eps); huber and lq by quadrature.
    """
    if loss.family == "quantile":
        _require_quantile_centered(loss, error)
        return 4.0 * loss.q * (1.0 - loss.q)
    if loss.family == "squared":
        return 4.0 * error.var()
    lo, hi = error.quad_bounds(tail=1e-14)
    pts = [p for p in _phi_breakpoints(loss) if lo < p < hi]
    val, _ = integrate.quad(
        lambda t: float(phi(loss, t)) ** 2 * float(error.pdf(t)),
        lo,
        hi,
        points=pts or None,
        limit=400,
        epsabs=1e-13,
        epsrel=1e-13,
    )
    return float(val)
