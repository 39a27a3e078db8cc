"""Multi-index bookkeeping for multivariate polynomial bases.

A local polynomial fit of degree p in d covariates carries one coefficient per
multi-index r = (r_1, ..., r_d) with |r| = r_1 + ... + r_d <= p.  Everything
downstream (moment matrices, scalings, estimator read-off) depends on a single
canonical arrangement of those indices, fixed here once:

* indices are grouped by total order i = 0, 1, ..., p;
* within order i, indices are arranged so that (0, ..., 0, i) comes first and
  (i, 0, ..., 0) comes last, i.e. sorted descending on the reversed tuple
  (r_d, ..., r_1).

Positions are 0-based throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

MultiIndex = tuple[int, ...]

#: largest total order for which factorial products are served
MAX_FACTORIAL_ORDER = 20

#: largest basis size accepted by build_layout
MAX_BASIS_SIZE = 10_000


def mi_order(r: MultiIndex) -> int:
    """Total order |r| = sum of the entries."""
    return sum(r)


def mi_factorial(r: MultiIndex) -> int:
    """r! = prod_j r_j!, exact integer arithmetic.

    Raises ValueError for |r| > 20; factorials beyond that are outside the
    supported degree range and only invite float overflow downstream.
    """
    if mi_order(r) > MAX_FACTORIAL_ORDER:
        raise ValueError(
            f"refusing factorial for |r| = {mi_order(r)} > {MAX_FACTORIAL_ORDER}"
        )
    return math.prod(math.factorial(k) for k in r)


def count_indices_exact(d: int, i: int) -> int:
    """Number of multi-indices in d coordinates with total order exactly i."""
    return math.comb(i + d - 1, d - 1)


def count_indices_upto(d: int, p: int) -> int:
    """Number of multi-indices in d coordinates with total order at most p."""
    return math.comb(p + d, d)


def degree_indices(d: int, i: int) -> tuple[MultiIndex, ...]:
    """All multi-indices of total order i, in canonical arrangement.

    The arrangement puts (0, ..., 0, i) first and (i, 0, ..., 0) last:
    descending sort on the reversed tuple (r_d, ..., r_1).

    >>> degree_indices(2, 2)
    ((0, 2), (1, 1), (2, 0))
    """
    out = []
    for combo in itertools.combinations_with_replacement(range(d), i):
        r = [0] * d
        for c in combo:
            r[c] += 1
        out.append(tuple(r))
    out.sort(key=lambda r: tuple(reversed(r)), reverse=True)
    return tuple(out)


@dataclass(frozen=True)
class BasisLayout:
    """Canonical arrangement of all multi-indices with |r| <= p.

    Attributes
    ----------
    d, p : dimension and maximum degree.
    order : all multi-indices, degree blocks concatenated.
    block_starts : block_starts[i] is the position of the first index of
        total order i; has p + 2 entries, the last one equal to size.
    """

    d: int
    p: int
    order: tuple[MultiIndex, ...]
    block_starts: tuple[int, ...]
    _position: dict[MultiIndex, int] = field(repr=False, compare=False, default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.order)

    def position(self, r: MultiIndex) -> int:
        """0-based position of r in the arrangement.

        Raises KeyError with a descriptive message for indices of the wrong
        length, with negative entries, or of order above p.
        """
        r = tuple(r)
        pos = self._position.get(r)
        if pos is None:
            raise KeyError(
                f"multi-index {r} is not in the degree-{self.p} basis over "
                f"{self.d} coordinate(s)"
            )
        return pos

    def block(self, i: int) -> tuple[MultiIndex, ...]:
        """The indices of total order exactly i, in arrangement order."""
        if not 0 <= i <= self.p:
            raise ValueError(f"block order {i} outside 0..{self.p}")
        return self.order[self.block_starts[i]:self.block_starts[i + 1]]


def build_layout(d: int, p: int) -> BasisLayout:
    """Construct the canonical basis layout for dimension d, degree p.

    Rejects d < 1, p outside 0..10, and basis sizes above 10^4.
    """
    if d < 1:
        raise ValueError(f"dimension d must be >= 1, got {d}")
    if not 0 <= p <= 10:
        raise ValueError(f"degree p must be in 0..10, got {p}")
    if count_indices_upto(d, p) > MAX_BASIS_SIZE:
        raise ValueError(
            f"basis size {count_indices_upto(d, p)} exceeds {MAX_BASIS_SIZE}"
        )
    order: list[MultiIndex] = []
    starts = [0]
    for i in range(p + 1):
        order.extend(degree_indices(d, i))
        starts.append(len(order))
    layout = BasisLayout(d=d, p=p, order=tuple(order), block_starts=tuple(starts))
    layout._position.update({r: a for a, r in enumerate(order)})
    return layout


def extended_block(layout: BasisLayout, i: int) -> tuple[MultiIndex, ...]:
    """Indices of total order i for the layout's dimension, any i >= 0.

    Unlike BasisLayout.block this also serves orders beyond p (the bias
    formulas need the order p+1 and p+2 blocks).
    """
    return degree_indices(layout.d, i)


def mu_vector(layout: BasisLayout, z) -> np.ndarray:
    """Monomial vector mu(z): entry at position(r) is z^r = prod z_j^{r_j}.

    >>> mu_vector(build_layout(2, 2), (2.0, 3.0))
    array([1., 3., 2., 9., 6., 4.])
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (layout.d,):
        raise ValueError(f"point has shape {z.shape}, expected ({layout.d},)")
    out = np.empty(layout.size)
    for a, r in enumerate(layout.order):
        out[a] = np.prod(z ** np.asarray(r))
    return out


def design_columns(layout: BasisLayout, z: np.ndarray) -> np.ndarray:
    """Monomial design matrix for many points at once.

    Parameters
    ----------
    z : array of shape (n, d); rows are evaluation offsets.

    Returns
    -------
    array of shape (n, size) with row i equal to mu_vector(layout, z[i]).
    Computed per coordinate-power to avoid re-exponentiation per index.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != layout.d:
        raise ValueError(f"points have shape {z.shape}, expected (n, {layout.d})")
    powers = [[None] * (layout.p + 1) for _ in range(layout.d)]
    for j in range(layout.d):
        powers[j][0] = np.ones(z.shape[0])
        for k in range(1, layout.p + 1):
            powers[j][k] = powers[j][k - 1] * z[:, j]
    out = np.empty((z.shape[0], layout.size))
    for a, r in enumerate(layout.order):
        col = powers[0][r[0]]
        for j in range(1, layout.d):
            if r[j]:
                col = col * powers[j][r[j]]
        out[:, a] = col
    return out


def w_scaling(layout: BasisLayout) -> np.ndarray:
    """Diagonal of W_p: entry r! at position(r).

    Applied to raw minimizer coefficients it recovers derivative estimates.
    Diagonal scalings commute, so W_p and the bandwidth scaling can be applied
    in either order.
    """
    return np.array([float(mi_factorial(r)) for r in layout.order])


def h_scaling(layout: BasisLayout, h) -> np.ndarray:
    """Diagonal of the bandwidth scaling H_n: entry h^|r| at position(r).

    h may be a positive scalar or a length-d vector of per-coordinate
    bandwidths, in which case the entry is prod_j h_j^{r_j}.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim == 0:
        h = np.full(layout.d, float(h))
    if h.shape != (layout.d,):
        raise ValueError(f"bandwidth has shape {h.shape}, expected scalar or ({layout.d},)")
    if np.any(h <= 0):
        raise ValueError("bandwidths must be positive")
    out = np.empty(layout.size)
    for a, r in enumerate(layout.order):
        out[a] = np.prod(h ** np.asarray(r))
    return out
