"""Local polynomial M-fits at a point, on a grid, and in vectorized batches.

A fit at x solves

    min_b  sum_i K((X_i - x)/h) rho(Y_i - mu(X_i - x)' b)

over the degree-p coefficient vector b.  Internally everything is solved in
bandwidth-scaled coordinates u_i = (X_i - x)/h (design mu(u_i)), which keeps
the normal equations well conditioned; the raw coefficients are recovered by
undoing the diagonal scaling, and the derivative-scale estimate is W_p times
the raw coefficients (entry r holds the estimate of D^r m(x)).

Solver dispatch is fixed by loss family:

* squared   -- exact weighted least squares via a rank-revealing SVD solve;
* huber     -- iteratively reweighted least squares with weights phi(t)/t
               (1 inside the corner, k/|t| outside); the reweighting is a
               quadratic majorization, so the exact objective is monotone;
* quantile, lq -- majorize-minimize on the smoothed residual sqrt(t^2+eps^2),
               with eps halved from 1e-2 * MAD of the warm-start residuals
               down to 1e-8, then a subgradient optimality check.

Hitting the iteration cap is reported through converged=False, not an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import loss as loss_mod
from .kernels import Kernel, make_kernel
from .loss import LossModel
from .polybasis import BasisLayout, build_layout, h_scaling, w_scaling


class InsufficientLocalData(Exception):
    """Too few observations carry positive kernel weight at the fit point."""

    def __init__(self, count: int, needed: int, x):
        self.count, self.needed = count, needed
        super().__init__(
            f"{count} observation(s) in the kernel window at x={np.asarray(x)}, "
            f"need at least {needed}"
        )


class SingularDesign(Exception):
    """The weighted local design is rank deficient."""


@dataclass(frozen=True)
class Dataset:
    """Regression sample: covariates x (n, d), responses y (n,).

    kind records provenance ("iid" or "series"); the fitting code treats both
    identically, downstream diagnostics may not.
    """

    x: np.ndarray
    y: np.ndarray
    kind: str = "iid"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"covariates {x.shape} do not align with responses {y.shape}")
        if y.shape[0] < 1:
            raise ValueError("dataset must contain at least one observation")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        if self.kind not in ("iid", "series"):
            raise ValueError(f"dataset kind must be 'iid' or 'series', got {self.kind!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class SolverSettings:
    gradient_tol: float = 1e-8
    max_iter: int = 200
    eps_scale: float = 1e-2
    eps_floor: float = 1e-8


@dataclass(frozen=True)
class FitConfig:
    """Degree, kernel, bandwidth, loss, and solver knobs for local fits.

    h may be a scalar or a length-d vector of per-coordinate bandwidths.
    min_local_points defaults to basis size + 2 when left at None.
    """

    p: int
    kernel: str
    h: float | np.ndarray
    loss: LossModel
    min_local_points: int | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)

    def layout_for(self, d: int) -> BasisLayout:
        return build_layout(d, self.p)

    def kernel_for(self, d: int) -> Kernel:
        return make_kernel(self.kernel, d)

    def needed_points(self, d: int) -> int:
        if self.min_local_points is not None:
            return int(self.min_local_points)
        return self.layout_for(d).size + 2

    def bandwidths(self, d: int) -> np.ndarray:
        h = np.broadcast_to(np.asarray(self.h, dtype=float), (d,)).copy()
        if np.any(h <= 0) or not np.all(np.isfinite(h)):
            raise ValueError(f"bandwidths must be positive and finite, got {h}")
        return h


@dataclass(frozen=True)
class FitResult:
    """Outcome of one local fit.

    beta_hat is on the derivative scale (entry at position(r) estimates
    D^r m(x)); raw_beta holds the unscaled polynomial coefficients.
    objective is the exact (unsmoothed) weighted loss at the solution.
    """

    x: np.ndarray
    beta_hat: np.ndarray
    raw_beta: np.ndarray
    m_hat: float
    objective: float
    iterations: int
    local_count: int
    converged: bool
    non_unique: bool = False


@dataclass(frozen=True)
class FitFailure:
    x: np.ndarray
    error: str
    message: str


# ---------------------------------------------------------------------------
# single-point reference implementation

def _window(data: Dataset, x: np.ndarray, kernel: Kernel, h: np.ndarray):
    u = (data.x - x[None, :]) / h[None, :]
    k = kernel(u)
    active = k > 0.0
    return u[active], k[active], data.y[active]


def _wls(z: np.ndarray, w: np.ndarray, y: np.ndarray, nbasis: int) -> np.ndarray:
    """Rank-revealing weighted least squares; raises SingularDesign."""
    sw = np.sqrt(w)
    sol, _, rank, _ = np.linalg.lstsq(z * sw[:, None], y * sw, rcond=None)
    if rank < nbasis:
        raise SingularDesign(
            f"weighted local design has rank {rank} < {nbasis}"
        )
    return sol

def _weighted_solve(z: np.ndarray, w: np.ndarray, y: np.ndarray) -> np.ndarray:
    a = (z * w[:, None]).T @ z
    b = (z * w[:, None]).T @ y
    return np.linalg.solve(a, b)


def _mad(r: np.ndarray) -> float:
    med = np.median(r)
    return float(np.median(np.abs(r - med)))


def _irls_huber(z, w, y, b0, k, settings):
    b = b0
    r = y - z @ b
    for it in range(1, settings.max_iter + 1):
        absr = np.maximum(np.abs(r), 1e-300)
        omega = np.where(absr < k, 1.0, k / absr)
        b_new = _weighted_solve(z, w * omega, y)
        change = float(np.max(np.abs(b_new - b)))
        b = b_new
        r = y - z @ b
        if change < settings.gradient_tol:
            return b, it, True
    return b, settings.max_iter, False


def _smoothed_parts(loss: LossModel, r: np.ndarray, eps):
    """Pointwise value, derivative, and curvature of the eps-smoothed loss.

    quantile: (2q-1)t + sqrt(t^2+eps^2); lq: (t^2+eps^2)^(q/2).  Both are
    strictly convex for eps > 0, so the stage subproblems have unique minima.
    """
    s2 = r * r + eps * eps
    q = loss.q
    if loss.family == "quantile":
        s = np.sqrt(s2)
        return (2 * q - 1) * r + s, (2 * q - 1) + r / s, eps * eps / (s2 * s)
    val = s2 ** (q / 2)
    psi = q * r * s2 ** ((q - 2) / 2)
    curv = q * s2 ** ((q - 4) / 2) * ((q - 1) * r * r + eps * eps)
    return val, psi, curv


def _mm_step(z, w, y, r, eps, loss):
    """One majorization step: weighted least squares against the smoothed loss."""
    q = loss.q
    if loss.family == "quantile":
        ws = w / np.sqrt(r * r + eps * eps)
        a = (z * ws[:, None]).T @ z
        rhs = (z * ws[:, None]).T @ y + (2 * q - 1) * (z * w[:, None]).sum(axis=0)
        return np.linalg.solve(a, rhs)
    omega = (r * r + eps * eps) ** ((q - 2.0) / 2.0)
    return _weighted_solve(z, w * omega, y)


_STAGE_CAP = 60       # iterations per smoothing level before eps is halved anyway
_STAGE_TOL_FACTOR = 1e-2
_NEWTON_DAMP = 1e-10  # Levenberg ridge, relative to mean Hessian diagonal
_BACKTRACK_MAX = 10


def _smoothed_iterate(z, w, y, b, eps, loss):
    """One solver iteration on the smoothed objective.

    A damped Newton step with backtracking does the work (plain majorization
    crawls near kinks and blows the iteration budget); the majorization step
    is the fallback whenever the Newton step fails to decrease the objective.
    """
    r = y - z @ b
    val, psi, curv = _smoothed_parts(loss, r, eps)
    f0 = w @ val
    grad = -(w * psi) @ z
    hd = w * curv
    hess = (z * hd[:, None]).T @ z
    n = b.size
    hess[np.diag_indices(n)] += _NEWTON_DAMP * np.trace(hess) / n
    try:
        step = np.linalg.solve(hess, -grad)
    except np.linalg.LinAlgError:
        step = None
    if step is not None:
        t = 1.0
        for _ in range(_BACKTRACK_MAX):
            cand = b + t * step
            vc, _, _ = _smoothed_parts(loss, y - z @ cand, eps)
            if w @ vc <= f0 - 1e-18:
                return cand
            t *= 0.5
    return _mm_step(z, w, y, r, eps, loss)


def _mm_smoothed(z, w, y, b0, loss, settings):
    """Annealed solver for quantile and lq losses.

    eps halves after each stage; convergence means the parameter sup-change
    settled below the stage tolerance at the floor smoothing level.
    """
    b = b0
    r = y - z @ b
    eps = max(settings.eps_scale * _mad(r), settings.eps_floor)
    total = 0
    while total < settings.max_iter:
        stage_tol = max(settings.gradient_tol, _STAGE_TOL_FACTOR * eps)
        change = np.inf
        for _ in range(_STAGE_CAP):
            if total >= settings.max_iter:
                break
            b_new = _smoothed_iterate(z, w, y, b, eps, loss)
            total += 1
            change = float(np.max(np.abs(b_new - b)))
            b = b_new
            if change < stage_tol:
                break
        if eps <= settings.eps_floor and change < stage_tol:
            return b, total, True
        eps = max(0.5 * eps, settings.eps_floor)
    return b, total, False


def _subgradient_check(z, w, r, q, zero_abs, scale_tol=1e-5, tie_tol=1e-7):
    """Optimality defect and tie flag for the check loss at the solution.

    Coordinate j of the subdifferential is bracketed by the interval
    [mid_j - half_j, mid_j + half_j]; optimality requires 0 in every
    interval.  A tie (flat set of minimizers wider than 1e-9) shows up as
    0 sitting on the interval boundary, or as the solution resting on fewer
    kink residuals than coefficients.  Residuals within zero_abs of 0 count
    as kinks: the smoothed solver parks them at the scale of its floor eps,
    not at exact zero.  Returns (ok, non_unique).
    """
    at_kink = np.abs(r) <= zero_abs
    smooth = ~at_kink
    grad = (w[smooth] * loss_mod.phi(LossModel("quantile", q=q), r[smooth])) @ z[smooth]
    if np.any(at_kink):
        center = (2.0 * q - 1.0) * (w[at_kink] @ z[at_kink])
        half = w[at_kink] @ np.abs(z[at_kink])
    else:
        center = np.zeros(z.shape[1])
        half = np.zeros(z.shape[1])
    mid = grad + center
    scale = w @ np.abs(z) + 1e-300
    defect = np.maximum(0.0, np.abs(mid) - half) / scale
    ok = bool(np.all(defect <= scale_tol))
    on_boundary = (2.0 * half > 1e-9) & (np.abs(half - np.abs(mid)) <= tie_tol * scale)
    underdetermined = int(at_kink.sum()) < z.shape[1]
    non_unique = ok and (underdetermined or bool(np.any(on_boundary)))
    return ok, non_unique


def fit_point(data: Dataset, x, cfg: FitConfig) -> FitResult:
    """Local polynomial M-fit at a single point; the reference implementation."""
    x = np.asarray(x, dtype=float).reshape(data.d)
    h = cfg.bandwidths(data.d)
    layout = cfg.layout_for(data.d)
    kernel = cfg.kernel_for(data.d)
    u, w, y = _window(data, x, kernel, h)
    needed = cfg.needed_points(data.d)
    if u.shape[0] < needed:
        raise InsufficientLocalData(u.shape[0], needed, x)
    z = _design(layout, u)
    b = _wls(z, w, y, layout.size)
    iterations, converged, non_unique = 0, True, False
    fam = cfg.loss.family
    if fam == "huber":
        b, iterations, converged = _irls_huber(z, w, y, b, cfg.loss.k, cfg.solver)
    elif fam in ("quantile", "lq"):
        b, iterations, converged = _mm_smoothed(z, w, y, b, cfg.loss, cfg.solver)
        r = y - z @ b
        if fam == "quantile":
            ok, non_unique = _subgradient_check(
                z, w, r, cfg.loss.q, zero_abs=1e3 * cfg.solver.eps_floor
            )
            converged = converged and ok
    elif fam != "squared":
        raise ValueError(f"unknown loss family {fam!r}")
    r = y - z @ b
    objective = float(w @ loss_mod.rho(cfg.loss, r))
    raw = b / h_scaling(layout, h)
    beta_hat = w_scaling(layout) * raw
    return FitResult(
        x=x,
        beta_hat=beta_hat,
        raw_beta=raw,
        m_hat=float(beta_hat[0]),
        objective=objective,
        iterations=iterations,
        local_count=int(u.shape[0]),
        converged=bool(converged),
        non_unique=non_unique,
    )


def objective_value(data: Dataset, x, cfg: FitConfig, raw_beta: np.ndarray) -> float:
    """Exact weighted objective sum_i K_i rho(Y_i - mu(X_i - x)' b)."""
    x = np.asarray(x, dtype=float).reshape(data.d)
    h = cfg.bandwidths(data.d)
    layout = cfg.layout_for(data.d)
    kernel = cfg.kernel_for(data.d)
    u = (data.x - x[None, :]) / h[None, :]
    k = kernel(u)
    active = k > 0.0
    if not np.any(active):
        return 0.0
    z = _design(layout, u[active]) * h_scaling(layout, h)[None, :]
    r = data.y[active] - z @ np.asarray(raw_beta, dtype=float)
    return float(k[active] @ loss_mod.rho(cfg.loss, r))


def _as_points(points, d: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None] if d == 1 else pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != d:
        raise ValueError(f"points shape {pts.shape} incompatible with d={d}")
    return pts


def fit_grid(data: Dataset, points, cfg: FitConfig) -> list[FitResult | FitFailure]:
    """Independent fit_point per row of points; failures recorded, not raised."""
    points = _as_points(points, data.d)
    out: list[FitResult | FitFailure] = []
    for row in points:
        try:
            out.append(fit_point(data, row, cfg))
        except (InsufficientLocalData, SingularDesign) as exc:
            out.append(FitFailure(x=row.copy(), error=type(exc).__name__, message=str(exc)))
    return out


# ---------------------------------------------------------------------------
# chunked batched path (vectorized over evaluation points)

def _bsolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stacked linear solve with vector right-hand sides: (C,N,N) x (C,N)."""
    return np.linalg.solve(a, b[..., None])[..., 0]


def _design(layout: BasisLayout, u: np.ndarray) -> np.ndarray:
    """Monomial design for u of shape (..., d) -> (..., N)."""
    powers = []
    for j in range(layout.d):
        pj = [np.ones(u.shape[:-1])]
        for k in range(1, layout.p + 1):
            pj.append(pj[-1] * u[..., j])
        powers.append(pj)
    cols = []
    for r in layout.order:
        col = powers[0][r[0]]
        for j in range(1, layout.d):
            if r[j]:
                col = col * powers[j][r[j]]
        cols.append(col)
    return np.stack(cols, axis=-1)


def fit_points_batched(
    data: Dataset, points, cfg: FitConfig, chunk: int = 256
) -> list[FitResult | FitFailure]:
    """Vectorized equivalent of fit_grid for healthy interior windows.

    Produces the same results as fit_point at each row of points (verified in
    the test suite); points whose window is short or singular fall back to
    the reference path so the failure taxonomy matches fit_grid.
    """
    points = _as_points(points, data.d)
    out: list[FitResult | FitFailure] = []
    for start in range(0, points.shape[0], chunk):
        out.extend(_fit_chunk(data, points[start:start + chunk], cfg))
    return out


def _fit_chunk(data: Dataset, pts: np.ndarray, cfg: FitConfig) -> list[FitResult | FitFailure]:
    h = cfg.bandwidths(data.d)
    layout = cfg.layout_for(data.d)
    kernel = cfg.kernel_for(data.d)
    needed = cfg.needed_points(data.d)
    C = pts.shape[0]
    u = (data.x[None, :, :] - pts[:, None, :]) / h[None, None, :]
    K = np.prod(kernel.k1(u), axis=2)  # (C, n)
    counts = (K > 0.0).sum(axis=1)
    # columns outside every window in the chunk contribute nothing; dropping
    # them keeps spatially sorted point batches near the local window size
    used = np.flatnonzero(K.max(axis=0) > 0.0)
    K = K[:, used]
    yv = data.y[used]
    Z = _design(layout, u[:, used])  # (C, n_used, N)
    healthy = counts >= needed

    B = np.zeros((C, layout.size))
    iters = np.zeros(C, dtype=int)
    conv = np.ones(C, dtype=bool)
    nonuniq = np.zeros(C, dtype=bool)
    fallback = set(np.flatnonzero(~healthy))

    idx = np.flatnonzero(healthy)
    if idx.size:
        try:
            A = np.einsum("cn,cni,cnj->cij", K[idx], Z[idx], Z[idx])
            rhs = np.einsum("cn,cni,n->ci", K[idx], Z[idx], yv)
            B[idx] = _bsolve(A, rhs)
        except np.linalg.LinAlgError:
            fallback.update(idx.tolist())
            idx = np.array([], dtype=int)

    if idx.size:
        fam = cfg.loss.family
        if fam == "huber":
            _batch_huber(K, Z, yv, B, idx, cfg, iters, conv)
        elif fam in ("quantile", "lq"):
            _batch_mm(K, Z, yv, B, idx, cfg, iters, conv)
            if fam == "quantile":
                for c in idx:
                    act = K[c] > 0
                    r = yv[act] - Z[c, act] @ B[c]
                    ok, nu_flag = _subgradient_check(
                        Z[c, act], K[c, act], r, cfg.loss.q,
                        zero_abs=1e3 * cfg.solver.eps_floor,
                    )
                    conv[c] = conv[c] and ok
                    nonuniq[c] = nu_flag
        elif fam != "squared":
            raise ValueError(f"unknown loss family {fam!r}")

    hs = h_scaling(layout, h)
    ws = w_scaling(layout)
    results: list[FitResult | FitFailure] = []
    for c in range(C):
        if c in fallback:
            try:
                results.append(fit_point(data, pts[c], cfg))
            except (InsufficientLocalData, SingularDesign) as exc:
                results.append(
                    FitFailure(x=pts[c].copy(), error=type(exc).__name__, message=str(exc))
                )
            continue
        act = K[c] > 0
        r = yv[act] - Z[c, act] @ B[c]
        raw = B[c] / hs
        results.append(
            FitResult(
                x=pts[c].copy(),
                beta_hat=ws * raw,
                raw_beta=raw,
                m_hat=float(ws[0] * raw[0]),
                objective=float(K[c, act] @ loss_mod.rho(cfg.loss, r)),
                iterations=int(iters[c]),
                local_count=int(act.sum()),
                converged=bool(conv[c]),
                non_unique=bool(nonuniq[c]),
            )
        )
    return results


def _batch_huber(K, Z, y, B, idx, cfg, iters, conv):
    settings = cfg.solver
    k = cfg.loss.k
    active = idx.copy()
    done = np.zeros(B.shape[0], dtype=bool)
    for it in range(1, settings.max_iter + 1):
        if active.size == 0:
            break
        R = y[None, :] - np.einsum("cni,ci->cn", Z[active], B[active])
        absr = np.maximum(np.abs(R), 1e-300)
        omega = np.where(absr < k, 1.0, k / absr) * K[active]
        A = np.einsum("cn,cni,cnj->cij", omega, Z[active], Z[active])
        rhs = np.einsum("cn,cni,n->ci", omega, Z[active], y)
        Bnew = _bsolve(A, rhs)
        change = np.max(np.abs(Bnew - B[active]), axis=1)
        B[active] = Bnew
        iters[active] = it
        settled = change < settings.gradient_tol
        done[active[settled]] = True
        active = active[~settled]
    conv[idx] = done[idx]


def _batch_smoothed_iterate(K, Z, y, B, rows, eps_live, loss, sum_kz_live):
    """One _smoothed_iterate step applied to every row at once."""
    Rl = y[None, :] - np.einsum("cni,ci->cn", Z[rows], B[rows])
    e = eps_live[:, None]
    val, psi, curv = _smoothed_parts(loss, Rl, e)
    f0 = np.einsum("cn,cn->c", K[rows], val)
    grad = -np.einsum("cn,cni->ci", K[rows] * psi, Z[rows])
    hd = K[rows] * curv
    H = np.einsum("cn,cni,cnj->cij", hd, Z[rows], Z[rows])
    n = B.shape[1]
    tr = np.einsum("cii->c", H)
    H[:, np.arange(n), np.arange(n)] += (_NEWTON_DAMP / n) * tr[:, None]
    step = _bsolve(H, -grad)
    Bnew = B[rows].copy()
    pending = np.arange(rows.size)
    t = np.ones(rows.size)
    for _ in range(_BACKTRACK_MAX):
        if pending.size == 0:
            break
        sub = rows[pending]
        cand = B[sub] + t[pending, None] * step[pending]
        Rc = y[None, :] - np.einsum("cni,ci->cn", Z[sub], cand)
        vc, _, _ = _smoothed_parts(loss, Rc, e[pending])
        fc = np.einsum("cn,cn->c", K[sub], vc)
        good = fc <= f0[pending] - 1e-18
        Bnew[pending[good]] = cand[good]
        t[pending[~good]] *= 0.5
        pending = pending[~good]
    if pending.size:
        # Newton failed to descend for these rows: majorization step instead
        sub = rows[pending]
        Rp = y[None, :] - np.einsum("cni,ci->cn", Z[sub], B[sub])
        e2p = e[pending] ** 2
        q = loss.q
        if loss.family == "quantile":
            W = K[sub] / np.sqrt(Rp * Rp + e2p)
            A = np.einsum("cn,cni,cnj->cij", W, Z[sub], Z[sub])
            rhs = np.einsum("cn,cni,n->ci", W, Z[sub], y) + (2 * q - 1) * sum_kz_live[pending]
        else:
            W = K[sub] * (Rp * Rp + e2p) ** ((q - 2.0) / 2.0)
            A = np.einsum("cn,cni,cnj->cij", W, Z[sub], Z[sub])
            rhs = np.einsum("cn,cni,n->ci", W, Z[sub], y)
        Bnew[pending] = _bsolve(A, rhs)
    return Bnew


def _batch_mm(K, Z, y, B, idx, cfg, iters, conv):
    """Vectorized mirror of _mm_smoothed; eps, budget, and status are per point.

    Arrays eps/total/status are indexed by position within idx; live holds
    positions of points still iterating in the current smoothing stage.
    """
    settings = cfg.solver
    loss = cfg.loss
    R = y[None, :] - np.einsum("cni,ci->cn", Z[idx], B[idx])
    Rmask = np.where(K[idx] > 0, R, np.nan)
    mad = np.nanmedian(np.abs(Rmask - np.nanmedian(Rmask, axis=1, keepdims=True)), axis=1)
    eps = np.maximum(settings.eps_scale * mad, settings.eps_floor)
    total = np.zeros(idx.size, dtype=int)
    status = np.zeros(idx.size, dtype=np.int8)  # 0 open, 1 converged, 2 exhausted
    sum_kz = np.einsum("cn,cni->ci", K[idx], Z[idx])
    while True:
        open_pos = np.flatnonzero(status == 0)
        status[open_pos[total[open_pos] >= settings.max_iter]] = 2
        open_pos = np.flatnonzero(status == 0)
        if open_pos.size == 0:
            break
        settled = np.zeros(idx.size, dtype=bool)
        live = open_pos.copy()
        for _ in range(_STAGE_CAP):
            if live.size == 0:
                break
            rows = idx[live]
            Bnew = _batch_smoothed_iterate(K, Z, y, B, rows, eps[live], loss, sum_kz[live])
            change = np.max(np.abs(Bnew - B[rows]), axis=1)
            B[rows] = Bnew
            total[live] += 1
            tol_live = np.maximum(settings.gradient_tol, _STAGE_TOL_FACTOR * eps[live])
            ok = change < tol_live
            settled[live[ok]] = True
            over = total[live] >= settings.max_iter
            status[live[over & ~ok]] = 2
            live = live[~ok & ~over]
        at_floor = eps <= settings.eps_floor
        status[settled & at_floor & (status == 0)] = 1
        still_open = status == 0
        eps[still_open] = np.maximum(0.5 * eps[still_open], settings.eps_floor)
    iters[idx] = total
    conv[idx] = status == 1