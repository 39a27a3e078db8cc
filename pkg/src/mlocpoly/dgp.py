"""Synthetic data generators with full analytic oracles.

Three kinds of process share one spec type:

* iid-additive        X ~ product density on [0,1]^d, Y = m(X) + eps;
* mixing-ar           Y_t = m(Y_{t-1}, ..., Y_{t-d}) + eps_t, burn-in
                      discarded; requires a contractive m;
* log-arch-volatility Y_t = sigma_t eps_t with ln sigma_t^2 = m(lags of Y);
                      the regression target variable is ln Y_t^2.

m is additive with one smooth (or piecewise-smooth) component per coordinate,
so every partial derivative needed by the fit diagnostics is available in
closed form: D^r m is the univariate derivative m_k^(i) when r = i*e_k and 0
at every mixed index.

Replications draw from counter-based streams keyed by (seed, replication), so
any replication can be generated independently of the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import LocalDensityModel
from .loss import ErrorModel, LossModel, analytic_g
from .localfit import Dataset
from .polybasis import BasisLayout, MultiIndex, extended_block, mi_factorial, mi_order

BURN_IN = 500
DIVERGENCE_LIMIT = 1e8


class NonStationaryConfig(Exception):
    """The series recursion left [-1e8, 1e8] during burn-in."""


# ---------------------------------------------------------------------------
# additive components

@dataclass(frozen=True)
class SineComponent:
    """amplitude * sin(frequency * x + phase)."""

    amplitude: float = 1.0
    frequency: float = 2.0 * math.pi
    phase: float = 0.0

    def value(self, x):
        return self.amplitude * np.sin(self.frequency * x + self.phase)

    def derivative(self, x, order: int):
        # d/dx sin = sin shifted by pi/2; repeat order times
        return (
            self.amplitude
            * self.frequency**order
            * np.sin(self.frequency * x + self.phase + order * math.pi / 2.0)
        )

    def lipschitz(self) -> float:
        return abs(self.amplitude * self.frequency)


@dataclass(frozen=True)
class PolyComponent:
    """Polynomial with coefficients in increasing degree order."""

    coeffs: tuple[float, ...]

    def value(self, x):
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def derivative(self, x, order: int):
        c = np.polynomial.polynomial.polyder(self.coeffs, order)
        return np.polynomial.polynomial.polyval(x, c) if c.size else np.zeros_like(x)

    def lipschitz(self) -> float:
        if len(self.coeffs) <= 1:
            return 0.0
        if len(self.coeffs) == 2:
            return abs(self.coeffs[1])
        return math.inf


@dataclass(frozen=True)
class AbsComponent:
    """slope * |x - center|; derivatives are taken away from the corner."""

    slope: float = 1.0
    center: float = 0.0

    def value(self, x):
        return self.slope * np.abs(x - self.center)

    def derivative(self, x, order: int):
        if order == 1:
            return self.slope * np.sign(x - self.center)
        return np.zeros_like(np.asarray(x, dtype=float))

    def lipschitz(self) -> float:
        return abs(self.slope)


@dataclass(frozen=True)
class AdditiveFunction:
    """m(x) = constant + sum_k component_k(x_k)."""

    constant: float
    components: tuple

    @property
    def d(self) -> int:
        return len(self.components)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], self.constant)
        for k, comp in enumerate(self.components):
            out = out + comp.value(x[..., k])
        return out

    def partial(self, x, r: MultiIndex):
        """D^r m; zero at every index touching more than one coordinate."""
        x = np.asarray(x, dtype=float)
        if mi_order(r) == 0:
            return self.value(x)
        live = [k for k, rk in enumerate(r) if rk > 0]
        if len(live) > 1:
            return np.zeros(x.shape[:-1])
        k = live[0]
        return self.components[k].derivative(x[..., k], r[k])

    def slope_sum(self) -> float:
        return sum(comp.lipschitz() for comp in self.components)


# ---------------------------------------------------------------------------
# covariate densities on [0,1]^d with analytic gradients and exact samplers

@dataclass(frozen=True)
class UniformDensity:
    d: int

    @property
    def support(self):
        return tuple((0.0, 1.0) for _ in range(self.d))

    def pdf(self, pts):
        pts = np.asarray(pts, dtype=float)
        inside = np.all((pts >= 0.0) & (pts <= 1.0), axis=-1)
        return inside.astype(float)

    def grad(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.zeros(pts.shape)

    def sample(self, rng, n: int):
        return rng.uniform(0.0, 1.0, size=(n, self.d))

    def coordinate_pdf(self, k: int, t):
        t = np.asarray(t, dtype=float)
        return ((t >= 0.0) & (t <= 1.0)).astype(float)

    def coordinate_sample(self, rng, k: int, n: int):
        return rng.uniform(0.0, 1.0, size=n)


@dataclass(frozen=True)
class LinearProductDensity:
    """Product of tilted-uniform marginals f_k(t) = 1 - s_k/2 + s_k t on [0,1].

    |s_k| < 2 keeps each marginal positive; s_k = 0 recovers uniform.
    """

    slopes: tuple[float, ...]

    def __post_init__(self):
        if any(abs(s) >= 2.0 for s in self.slopes):
            raise ValueError("marginal slope magnitudes must be < 2 for positivity")

    @property
    def d(self) -> int:
        return len(self.slopes)

    @property
    def support(self):
        return tuple((0.0, 1.0) for _ in range(self.d))

    def coordinate_pdf(self, k: int, t):
        t = np.asarray(t, dtype=float)
        s = self.slopes[k]
        inside = (t >= 0.0) & (t <= 1.0)
        return np.where(inside, 1.0 - s / 2.0 + s * t, 0.0)

    def pdf(self, pts):
        pts = np.asarray(pts, dtype=float)
        out = np.ones(pts.shape[:-1])
        for k in range(self.d):
            out = out * self.coordinate_pdf(k, pts[..., k])
        return out

    def grad(self, pts):
        pts = np.asarray(pts, dtype=float)
        vals = np.stack([self.coordinate_pdf(k, pts[..., k]) for k in range(self.d)], axis=-1)
        out = np.empty(pts.shape)
        for k in range(self.d):
            others = np.prod(np.delete(vals, k, axis=-1), axis=-1)
            out[..., k] = self.slopes[k] * others
        return out

    def coordinate_sample(self, rng, k: int, n: int):
        # invert F(t) = (1 - s/2) t + s t^2 / 2
        s = self.slopes[k]
        u = rng.uniform(0.0, 1.0, size=n)
        if s == 0.0:
            return u
        a = 1.0 - s / 2.0
        return (-a + np.sqrt(a * a + 2.0 * s * u)) / s

    def sample(self, rng, n: int):
        return np.column_stack([self.coordinate_sample(rng, k, n) for k in range(self.d)])


# ---------------------------------------------------------------------------
# spec and simulation

_KINDS = ("iid-additive", "mixing-ar", "log-arch-volatility")


@dataclass(frozen=True)
class DgpSpec:
    """One reproducible data-generating process.

    error is the centered residual law for the active loss (build it with
    loss.centered_for).  For log-arch-volatility it must be log_chi_squared;
    its shift then doubles as the constant separating the volatility function
    from the regression target ln Y^2 (see target_shift).
    """

    kind: str
    m: AdditiveFunction
    error: ErrorModel
    seed: int
    density: UniformDensity | LinearProductDensity | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if self.kind == "iid-additive":
            if self.density is None:
                object.__setattr__(self, "density", UniformDensity(self.m.d))
            if self.density.d != self.m.d:
                raise ValueError("density dimension does not match m")
        elif self.density is not None:
            raise ValueError("series kinds have no analytic covariate density")
        if self.kind == "log-arch-volatility" and self.error.family != "log_chi_squared":
            raise ValueError("log-arch-volatility requires a log_chi_squared error model")
        if self.kind == "mixing-ar" and self.m.slope_sum() >= 1.0:
            raise ValueError(
                f"mixing-ar needs a contractive m: slope sum {self.m.slope_sum():.3f} >= 1"
            )

    @property
    def d(self) -> int:
        return self.m.d

    @property
    def target_shift(self) -> float:
        """Constant between m and the regression target function."""
        return self.error.shift if self.kind == "log-arch-volatility" else 0.0

    def target_value(self, x):
        return self.m.value(x) + self.target_shift


@dataclass(frozen=True)
class SeriesSample:
    dataset: Dataset
    burn_in_discarded: int
    generator_kind: str


def _rng_for(spec: DgpSpec, replication: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[spec.seed, replication]))


def simulate(spec: DgpSpec, n: int, replication: int = 0) -> SeriesSample:
    """Draw one sample path; identical inputs give bit-identical output."""
    if n < 50:
        raise ValueError(f"n must be at least 50, got {n}")
    rng = _rng_for(spec, replication)
    d = spec.d
    if spec.kind == "iid-additive":
        x = spec.density.sample(rng, n)
        y = spec.m.value(x) + spec.error.sample(rng, n)
        return SeriesSample(Dataset(x=x, y=y), 0, spec.kind)

    total = n + BURN_IN + d
    if spec.kind == "mixing-ar":
        eps = spec.error.sample(rng, total)
        path = np.zeros(total)
        for t in range(d, total):
            lag = path[t - d: t][::-1]
            path[t] = spec.m.value(lag) + eps[t]
            if abs(path[t]) > DIVERGENCE_LIMIT:
                raise NonStationaryConfig(f"|Y| exceeded {DIVERGENCE_LIMIT:g} at step {t}")
        lagmat = np.column_stack([path[BURN_IN + d - k: total - k] for k in range(1, d + 1)])
        return SeriesSample(Dataset(x=lagmat, y=path[BURN_IN + d:], kind="series"), BURN_IN, spec.kind)

    # log-arch-volatility: Y_t = sigma_t eps_t, ln sigma_t^2 = m(lag vector)
    z = rng.standard_normal(total) * spec.error.scale
    path = np.zeros(total)
    for t in range(d, total):
        lag = path[t - d: t][::-1]
        lnsig2 = spec.m.value(lag)
        path[t] = math.exp(0.5 * lnsig2) * z[t]
        if abs(path[t]) > DIVERGENCE_LIMIT:
            raise NonStationaryConfig(f"|Y| exceeded {DIVERGENCE_LIMIT:g} at step {t}")
    lagmat = np.column_stack([path[BURN_IN + d - k: total - k] for k in range(1, d + 1)])
    target = np.log(path[BURN_IN + d:] ** 2)
    return SeriesSample(Dataset(x=lagmat, y=target, kind="series"), BURN_IN, spec.kind)


# ---------------------------------------------------------------------------
# analytic oracles

def oracle_beta_p(spec: DgpSpec, layout: BasisLayout, x) -> np.ndarray:
    """Taylor coefficients D^r m_target(x) / r! in layout order."""
    x = np.asarray(x, dtype=float).reshape(layout.d)
    out = np.empty(layout.size)
    for pos, r in enumerate(layout.order):
        out[pos] = spec.m.partial(x, r) / mi_factorial(r)
    out[0] += spec.target_shift
    return out


def oracle_mp_vectors(spec: DgpSpec, layout: BasisLayout, x):
    """Taylor coefficient vectors for total orders p+1 and p+2."""
    x = np.asarray(x, dtype=float).reshape(layout.d)

    def block(order):
        idx = extended_block(layout, order)
        return np.array([spec.m.partial(x, r) / mi_factorial(r) for r in idx])

    return block(layout.p + 1), block(layout.p + 2)


def density_model(spec: DgpSpec, loss: LossModel) -> LocalDensityModel:
    """f*g oracle for the i.i.d. design, with homoskedastic g = E phi'(eps)."""
    if spec.kind != "iid-additive":
        raise ValueError("analytic density model only exists for iid-additive specs")
    g0 = analytic_g(loss, spec.error)
    dens = spec.density
    bounds = np.asarray(dens.support, dtype=float)  # (d, 2) coordinate intervals

    return LocalDensityModel(
        f=lambda pts: dens.pdf(pts),
        g=lambda pts: np.full(np.asarray(pts).shape[:-1], g0),
        grad_fg=lambda pts: g0 * dens.grad(pts),
        support=(bounds[:, 0], bounds[:, 1]),
    )
