"""Product kernels on [-1,1]^d and their moment tables.

The asymptotic machinery for local polynomial M-regression is built from
moments of a compactly supported product kernel K(u) = prod_j k(u_j):

* nu_i = int K(u) u^i du for multi-indices i (pure kernel moments),
* the moment matrix S_p with entries [S_p]_{a,b} = nu_{r_a + r_b},
* the spill-over blocks B_1, B_2 pairing basis indices with the order p+1
  and p+2 monomials (bias constants),
* int K^2(u) u^i du (variance constants), and
* K_2 = int K(u) mu(u) du (marginal-integration variance constant).

All shipped kernels are polynomial on [-1,1], k(t) = c (1 - t^2)^m, so every
1-D moment has an exact rational closed form.  A tensor Gauss-Legendre route
is provided as an independent cross-check and as the general integrator for
the design-dependent matrix S_np(x), whose entries weight the kernel moments
by the local density-curvature product (fg)(x + hu).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Callable

import numpy as np

from .polybasis import BasisLayout, MultiIndex, design_columns, extended_block

#: fixed tensor quadrature order per coordinate; Gauss-Legendre of this order
#: integrates polynomials up to degree 47 exactly, far above any moment
#: degree reachable with p <= 10
QUADRATURE_ORDER = 24

#: condition number above which a moment matrix is flagged as singular
CONDITION_LIMIT = 1e12

#: largest per-coordinate moment degree served by the closed forms
MAX_MOMENT_DEGREE = 48

_FAMILIES = {
    # family -> (m, c) for k(t) = c * (1 - t^2)^m on [-1, 1]
    "epanechnikov": (1, 0.75),
    "biweight": (2, 15.0 / 16.0),
    "uniform": (0, 0.5),
}


class SingularSnp(Exception):
    """Raised when S_np(x) is numerically singular or indefinite."""


@dataclass(frozen=True)
class Kernel:
    """Product kernel K(u) = prod_j k(u_j), k(t) = c (1 - t^2)^m on [-1,1]."""

    family: str
    d: int

    @property
    def _mc(self) -> tuple[int, float]:
        return _FAMILIES[self.family]

    def k1(self, t) -> np.ndarray:
        """1-D kernel profile, zero outside [-1, 1]."""
        m, c = self._mc
        t = np.asarray(t, dtype=float)
        inside = np.abs(t) <= 1.0
        base = np.where(inside, 1.0 - t * t, 0.0)
        return c * base**m * inside

    def __call__(self, u) -> np.ndarray:
        """Product kernel at rows of u (shape (n, d) or (d,))."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return float(np.prod(self.k1(u)))
        return np.prod(self.k1(u), axis=1)

    def moment1d(self, j: int) -> float:
        """int_{-1}^{1} k(t) t^j dt, exact rational closed form."""
        return _profile_moment(*self._mc, j)

    def sq_moment1d(self, j: int) -> float:
        """int_{-1}^{1} k(t)^2 t^j dt, exact rational closed form."""
        m, c = self._mc
        return _profile_moment(2 * m, c * c, j)

    def half_moment1d(self, j: int) -> float:
        """int_{0}^{1} k(t) t^j dt (for the restricted K_2 domain variant)."""
        m, c = self._mc
        if not 0 <= j <= MAX_MOMENT_DEGREE:
            raise ValueError(f"moment degree {j} outside 0..{MAX_MOMENT_DEGREE}")
        return c * sum((-1) ** k * comb(m, k) / (j + 2 * k + 1) for k in range(m + 1))


def _profile_moment(m: int, c: float, j: int) -> float:
    """int_{-1}^{1} c (1-t^2)^m t^j dt; zero for odd j."""
    if not 0 <= j <= MAX_MOMENT_DEGREE:
        raise ValueError(f"moment degree {j} outside 0..{MAX_MOMENT_DEGREE}")
    if j % 2 == 1:
        return 0.0
    return 2.0 * c * sum((-1) ** k * comb(m, k) / (j + 2 * k + 1) for k in range(m + 1))


def make_kernel(family: str, d: int) -> Kernel:
    """Construct a product kernel; only compactly supported families ship.

    The asymptotics require a compactly supported kernel, so the Gaussian is
    rejected by name with a pointer to the supported families.
    """
    if family == "gaussian":
        raise ValueError(
            "the gaussian kernel has unbounded support and is not admissible "
            f"here; choose one of {sorted(_FAMILIES)}"
        )
    if family not in _FAMILIES:
        raise ValueError(f"unknown kernel family {family!r}; choose one of {sorted(_FAMILIES)}")
    if d < 1:
        raise ValueError(f"dimension d must be >= 1, got {d}")
    return Kernel(family=family, d=d)


def kernel_moment(kernel: Kernel, i: MultiIndex) -> float:
    """nu_i = int K(u) u^i du = prod_j moment1d(i_j)."""
    if len(i) != kernel.d:
        raise ValueError(f"multi-index length {len(i)} != kernel dimension {kernel.d}")
    out = 1.0
    for j in i:
        out *= kernel.moment1d(j)
        if out == 0.0:
            return 0.0
    return out


def squared_kernel_moment(kernel: Kernel, i: MultiIndex) -> float:
    """int K(u)^2 u^i du = prod_j sq_moment1d(i_j)."""
    if len(i) != kernel.d:
        raise ValueError(f"multi-index length {len(i)} != kernel dimension {kernel.d}")
    out = 1.0
    for j in i:
        out *= kernel.sq_moment1d(j)
        if out == 0.0:
            return 0.0
    return out


# ---------------------------------------------------------------------------
# tensor Gauss-Legendre quadrature (independent route)

@lru_cache(maxsize=32)
def gauss_legendre_1d(order: int, lo: float = -1.0, hi: float = 1.0):
    """Nodes and weights on [lo, hi]."""
    x, w = np.polynomial.legendre.leggauss(order)
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return mid + half * x, half * w


def tensor_quadrature(d: int, order: int = QUADRATURE_ORDER, lo: float = -1.0, hi: float = 1.0):
    """Tensor-product nodes (M, d) and weights (M,) on [lo, hi]^d."""
    x1, w1 = gauss_legendre_1d(order, lo, hi)
    grids = np.meshgrid(*([x1] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*([w1] * d), indexing="ij")
    weights = np.ones(nodes.shape[0])
    for g in wgrids:
        weights = weights * g.ravel()
    return nodes, weights


def kernel_moment_quadrature(kernel: Kernel, i: MultiIndex, order: int = QUADRATURE_ORDER) -> float:
    """nu_i by tensor quadrature; cross-check for the closed forms."""
    nodes, weights = tensor_quadrature(kernel.d, order)
    vals = kernel(nodes) * np.prod(nodes ** np.asarray(i, dtype=float), axis=1)
    return float(weights @ vals)


# ---------------------------------------------------------------------------
# moment tables

@dataclass(frozen=True)
class MomentTables:
    """Pure-kernel moment arrays for one (kernel, layout) pair.

    Attributes
    ----------
    Sp : (N, N) moment matrix, [S_p]_{a,b} = nu_{r_a + r_b}.
    B1 : (N, N_{p+1}) block pairing the basis with order p+1 monomials.
    B2 : (N, N_{p+2}) block pairing the basis with order p+2 monomials.
    K2_support : (N,) int over [-1,1]^d of K(v) mu(v) dv.
    K2_unit : (N,) the same integral restricted to [0,1]^d.
    sq_matrix : (N, N) with entries int K^2(u) u^{r_a + r_b} du.
    sp_condition : 2-norm condition number of Sp.
    sp_singular : True when sp_condition exceeds 1e12.
    """

    kernel: Kernel
    layout: BasisLayout
    Sp: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    K2_support: np.ndarray
    K2_unit: np.ndarray
    sq_matrix: np.ndarray
    sp_condition: float
    sp_singular: bool

    def nu(self, i: MultiIndex) -> float:
        return kernel_moment(self.kernel, i)

    def K2(self, domain: str = "support") -> np.ndarray:
        """K_2 vector; domain 'support' = [-1,1]^d, 'unit' = [0,1]^d."""
        if domain == "support":
            return self.K2_support
        if domain == "unit":
            return self.K2_unit
        raise ValueError(f"unknown K_2 domain {domain!r}; use 'support' or 'unit'")


def _pair_matrix(entry, rows, cols) -> np.ndarray:
    out = np.empty((len(rows), len(cols)))
    for a, r in enumerate(rows):
        for b, s in enumerate(cols):
            out[a, b] = entry(tuple(x + y for x, y in zip(r, s)))
    return out


def build_moment_tables(kernel: Kernel, layout: BasisLayout) -> MomentTables:
    """Assemble all pure-kernel moment arrays from the closed forms."""
    if kernel.d != layout.d:
        raise ValueError(f"kernel dimension {kernel.d} != layout dimension {layout.d}")
    rows = layout.order
    nu = lambda i: kernel_moment(kernel, i)
    Sp = _pair_matrix(nu, rows, rows)
    B1 = _pair_matrix(nu, rows, extended_block(layout, layout.p + 1))
    B2 = _pair_matrix(nu, rows, extended_block(layout, layout.p + 2))
    sq = _pair_matrix(lambda i: squared_kernel_moment(kernel, i), rows, rows)
    k2_full = np.array([nu(r) for r in rows])
    k2_unit = np.array(
        [np.prod([kernel.half_moment1d(j) for j in r]) for r in rows]
    )
    cond = float(np.linalg.cond(Sp))
    return MomentTables(
        kernel=kernel,
        layout=layout,
        Sp=Sp,
        B1=B1,
        B2=B2,
        K2_support=k2_full,
        K2_unit=k2_unit,
        sq_matrix=sq,
        sp_condition=cond,
        sp_singular=bool(cond > CONDITION_LIMIT),
    )


def build_sp_quadrature(kernel: Kernel, layout: BasisLayout, order: int = QUADRATURE_ORDER) -> np.ndarray:
    """S_p by tensor Gauss-Legendre; independent of the closed-form route."""
    nodes, weights = tensor_quadrature(layout.d, order)
    cols = design_columns(layout, nodes)
    wk = weights * kernel(nodes)
    return (cols * wk[:, None]).T @ cols


def even_order_pairing_violation(tables: MomentTables) -> float:
    """Max |sum_r [S_p^{-1}]_{N(r1),N(r)} nu_{r + r2}| over even-parity rows.

    For symmetric kernels, rows of S_p^{-1} B_1 indexed by r1 with p - |r1|
    even must vanish (the moment parity classes decouple).  Returns the
    largest absolute violation over all such r1 and all |r2| = p + 1.
    """
    layout = tables.layout
    rows_sp_inv_b1 = np.linalg.solve(tables.Sp, tables.B1)
    worst = 0.0
    for a, r in enumerate(layout.order):
        if (layout.p - sum(r)) % 2 == 0:
            worst = max(worst, float(np.max(np.abs(rows_sp_inv_b1[a]))))
    return worst


# ---------------------------------------------------------------------------
# design-dependent moment matrix S_np(x)

@dataclass(frozen=True)
class LocalDensityModel:
    """Local design oracle: covariate density f, curvature weight g, and the
    gradient of their product.

    f and g map (n, d) arrays to (n,) arrays; grad_fg maps a single point
    (d,) to the gradient vector of (fg) at that point.  support, when given,
    is a (lower, upper) pair of length-d arrays bounding the density's
    support; build_snp then refuses evaluation windows that leave it.
    """

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    grad_fg: Callable[[np.ndarray], np.ndarray]
    support: tuple[np.ndarray, np.ndarray] | None = None

    def fg(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.f(pts), dtype=float) * np.asarray(self.g(pts), dtype=float)

    def validate_on(self, pts: np.ndarray, g_floor: float = 1e-12) -> None:
        """Raise if f is not strictly positive or g not bounded away from 0."""
        fv = np.asarray(self.f(pts), dtype=float)
        gv = np.asarray(self.g(pts), dtype=float)
        if np.any(~np.isfinite(fv)) or np.any(fv <= 0.0):
            raise ValueError("density f must be finite and strictly positive on the grid")
        if np.any(~np.isfinite(gv)) or np.any(gv < g_floor):
            raise ValueError("curvature weight g must be finite and bounded away from zero")


def build_snp(
    model: LocalDensityModel,
    kernel: Kernel,
    layout: BasisLayout,
    x: np.ndarray,
    h,
    order: int = QUADRATURE_ORDER,
    jitter: bool = False,
) -> np.ndarray:
    """S_np(x): entries int K(u) u^{r_a + r_b} (fg)(x + h u) du.

    h may be scalar or a length-d vector of per-coordinate bandwidths (the
    integral stays over u in [-1,1]^d; bandwidth powers are handled by the
    callers' scaling conventions).  With jitter=True a diagonal ridge of
    1e-10 * trace/N is added; off by default.
    """
    x = np.asarray(x, dtype=float).reshape(layout.d)
    h = np.broadcast_to(np.asarray(h, dtype=float), (layout.d,))
    if np.any(h <= 0):
        raise ValueError("bandwidths must be positive")
    if model.support is not None:
        lo, hi = model.support
        if np.any(x - h < np.asarray(lo) - 1e-12) or np.any(x + h > np.asarray(hi) + 1e-12):
            raise ValueError(
                f"window around x={x} with bandwidth {h} leaves the density support"
            )
    nodes, weights = tensor_quadrature(layout.d, order)
    cols = design_columns(layout, nodes)
    fg = model.fg(x[None, :] + nodes * h[None, :])
    wk = weights * kernel(nodes) * fg
    snp = (cols * wk[:, None]).T @ cols
    if jitter:
        snp = snp + np.eye(layout.size) * (1e-10 * np.trace(snp) / layout.size)
    return snp


def build_np_matrix(
    model: LocalDensityModel, kernel: Kernel, layout: BasisLayout, x: np.ndarray
) -> np.ndarray:
    """First-order expansion matrix N_p(x), shape (N, N).

    Entries sum_i d_i(fg)(x) * nu_{r_a + r_b + e_i}: the h-linear term in the
    expansion S_np(x) = (fg)(x) S_p + h N_p(x) + O(h^2).
    """
    return _np_like(model, kernel, layout, x, layout.order)


def build_mtilde(
    model: LocalDensityModel, kernel: Kernel, layout: BasisLayout, x: np.ndarray
) -> np.ndarray:
    """Expansion matrix pairing the basis with order p+1 monomials, (N, N_{p+1}).

    Same entry rule as N_p(x); this is the h-linear term in the expansion of
    the B_1-analogue under the local design.
    """
    return _np_like(model, kernel, layout, x, extended_block(layout, layout.p + 1))


def _np_like(model, kernel, layout, x, cols) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(layout.d)
    grad = np.asarray(model.grad_fg(x), dtype=float).reshape(layout.d)
    out = np.zeros((layout.size, len(cols)))
    for i in range(layout.d):
        if grad[i] == 0.0:
            continue
        e = tuple(1 if j == i else 0 for j in range(layout.d))
        shifted = _pair_matrix(
            lambda idx: kernel_moment(kernel, tuple(a + b for a, b in zip(idx, e))),
            layout.order,
            cols,
        )
        out += grad[i] * shifted
    return out
