"""Partially penalized LASSO by cyclic coordinate descent.

The objective is

    (1/m) * sum_i (y_i - b - u_i' a - x_i' beta)^2 + lam * ||beta_std||_1

where ``b`` and ``a`` (the unpenalized columns, e.g. an LLM guess) are free and
``beta_std`` are the coefficients of the penalized columns after centering and
scaling them to unit (population) standard deviation on the fitting rows.
Coefficients are reported on the original column scale.

The intercept and unpenalized block enter the objective quadratically with no
penalty, so they are profiled out exactly: the response and the standardized
penalized columns are projected onto the orthogonal complement of
``[1, U]`` and coordinate descent runs on the projected problem. The residual
is then orthogonal to ``[1, U]`` at every iterate, which is the stationarity
condition for the free coefficients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from dmla.data_model import CvMode, make_fold_plan
from dmla.errors import DataValidationError, DegenerateGridError

# Columns whose projected squared norm falls below this fraction of m are
# treated as carrying no information beyond the unpenalized block.
_COLLINEAR_EPS = 1e-12
# Coordinate sweeps before the first attempt at an exact solve on the current
# support; doubled after each failed attempt.
_SWEEPS_PER_SUPPORT_STEP = 20


def soft_threshold(z: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return float(np.sign(z) * max(abs(z) - gamma, 0.0))


@numba.njit(cache=True, nogil=True)
def _cd_kernel(X, colsq, r, beta, lam, tol, max_iter):
    """Cyclic coordinate descent on the projected problem, in place.

    Alternates full sweeps with sweeps restricted to the nonzero set; the
    solver stops only after a full sweep in which no coefficient moved by
    ``tol`` or more.
    """
    m, p = X.shape
    inv_m = 1.0 / m
    active_only = False
    sweeps = 0
    while sweeps < max_iter:
        max_delta = 0.0
        for j in range(p):
            cj = colsq[j]
            if cj <= 0.0:
                continue
            bj = beta[j]
            if active_only and bj == 0.0:
                continue
            g = 0.0
            for i in range(m):
                g += X[i, j] * r[i]
            z = g * inv_m + cj * bj
            if z > lam:
                new = (z - lam) / cj
            elif z < -lam:
                new = (z + lam) / cj
            else:
                new = 0.0
            delta = new - bj
            if delta != 0.0:
                for i in range(m):
                    r[i] -= delta * X[i, j]
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        sweeps += 1
        if max_delta < tol:
            if not active_only:
                return sweeps, True
            active_only = False
        else:
            active_only = True
    return sweeps, False


@numba.njit(cache=True, nogil=True)
def _cd_gram_kernel(G, xty, colsq, beta, lam, tol, max_iter):
    """Same iteration as ``_cd_kernel`` but tracks the gradient ``xty - G beta``.

    Each coordinate move costs O(p) instead of O(m), which wins when p < m.
    """
    p = G.shape[0]
    grad = xty - G @ beta
    active_only = False
    sweeps = 0
    while sweeps < max_iter:
        max_delta = 0.0
        for j in range(p):
            cj = colsq[j]
            if cj <= 0.0:
                continue
            bj = beta[j]
            if active_only and bj == 0.0:
                continue
            z = grad[j] + cj * bj
            if z > lam:
                new = (z - lam) / cj
            elif z < -lam:
                new = (z + lam) / cj
            else:
                new = 0.0
            delta = new - bj
            if delta != 0.0:
                for k in range(p):
                    grad[k] -= delta * G[k, j]
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        sweeps += 1
        if max_delta < tol:
            if not active_only:
                return sweeps, True
            active_only = False
        else:
            active_only = True
    return sweeps, False


@dataclass(frozen=True, eq=False)
class DesignSpec:
    """Regression problem for one nuisance fit.

    ``unpenalized`` (m x q) excludes the intercept, which is always present.
    Training means and scales of the penalized columns are computed on
    construction and reused to map coefficients back to the original scale.
    """

    response: np.ndarray
    unpenalized: np.ndarray
    penalized: np.ndarray
    means: np.ndarray = field(init=False, repr=False)
    scales: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float).ravel()
        m = y.shape[0]
        u = np.asarray(self.unpenalized, dtype=float)
        if u.size == 0:
            u = np.empty((m, 0))
        elif u.ndim == 1:
            u = u.reshape(-1, 1)
        x = np.asarray(self.penalized, dtype=float)
        if x.size == 0:
            x = np.empty((m, 0))
        elif x.ndim == 1:
            x = x.reshape(-1, 1)
        if u.shape[0] != m or x.shape[0] != m:
            raise DataValidationError(
                f"row counts disagree: response {m}, unpenalized {u.shape[0]}, penalized {x.shape[0]}"
            )
        if m < 1:
            raise DataValidationError("design has no rows")
        if u.shape[1] + x.shape[1] < 1:
            raise DataValidationError("design needs at least one unpenalized or penalized column")
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "unpenalized", u)
        object.__setattr__(self, "penalized", x)
        object.__setattr__(self, "means", x.mean(axis=0))
        object.__setattr__(self, "scales", x.std(axis=0))

    @property
    def m(self) -> int:
        return self.response.shape[0]

    @property
    def q(self) -> int:
        return self.unpenalized.shape[1]

    @property
    def p(self) -> int:
        return self.penalized.shape[1]

    def subset(self, rows) -> "DesignSpec":
        return DesignSpec(self.response[rows], self.unpenalized[rows], self.penalized[rows])

    def standardized(self) -> tuple[np.ndarray, np.ndarray]:
        """Standardized penalized block and the mask of zero-variance columns."""
        zero = ~(self.scales > 0)
        safe = np.where(zero, 1.0, self.scales)
        xs = (self.penalized - self.means) / safe
        xs[:, zero] = 0.0
        return xs, zero


@dataclass(frozen=True, eq=False)
class LassoFit:
    intercept: float
    unpenalized_coefs: np.ndarray
    penalized_coefs: np.ndarray
    lambda_: float
    n_iterations: int
    converged: bool
    active_set_size: int
    zero_variance_cols: tuple = ()

    def predict(self, unpenalized, penalized) -> np.ndarray:
        u = np.asarray(unpenalized, dtype=float)
        x = np.asarray(penalized, dtype=float)
        out = np.full(x.shape[0] if x.ndim == 2 else u.shape[0], self.intercept)
        if self.unpenalized_coefs.size:
            out = out + u.reshape(out.shape[0], -1) @ self.unpenalized_coefs
        if self.penalized_coefs.size:
            out = out + x.reshape(out.shape[0], -1) @ self.penalized_coefs
        return out

    def standardized_coefs(self, spec: DesignSpec) -> np.ndarray:
        return self.penalized_coefs * spec.scales


@dataclass
class _Projected:
    """Design after profiling out the intercept and the unpenalized block."""

    spec: DesignSpec
    xp: np.ndarray  # Fortran-ordered projected standardized columns
    yp: np.ndarray
    colsq: np.ndarray
    q_basis: np.ndarray  # orthonormal basis of centered unpenalized columns
    r_factor: np.ndarray
    zero_variance: np.ndarray
    y_mean: float
    u_mean: np.ndarray
    xs: np.ndarray

    @classmethod
    def build(cls, spec: DesignSpec) -> "_Projected":
        m = spec.m
        xs, zero = spec.standardized()
        y_mean = float(spec.response.mean())
        yc = spec.response - y_mean
        u_mean = spec.unpenalized.mean(axis=0)
        uc = spec.unpenalized - u_mean
        if spec.q:
            qb, rf = np.linalg.qr(uc)
            diag = np.abs(np.diag(rf))
            ref = max(np.sqrt(m) * np.abs(uc).max(), 1.0)
            if diag.min() <= 1e-10 * ref:
                raise DataValidationError("unpenalized columns are constant or collinear with each other")
            yp = yc - qb @ (qb.T @ yc)
            xp = xs - qb @ (qb.T @ xs)
        else:
            qb = np.empty((m, 0))
            rf = np.empty((0, 0))
            yp = yc
            xp = xs.copy()
        colsq = (xp * xp).sum(axis=0) / m
        colsq[zero] = 0.0
        colsq[colsq < _COLLINEAR_EPS] = 0.0
        return cls(spec, np.asfortranarray(xp), yp, colsq, qb, rf, zero, y_mean, u_mean, xs)

    def __post_init__(self):
        self._gram = None
        self._xty = None
        self._safe_scales = np.where(self.zero_variance, 1.0, self.spec.scales)
        self._zero_cols = tuple(int(j) for j in np.flatnonzero(self.zero_variance))
        self._lambda_max = None

    def lambda_max(self) -> float:
        if self._lambda_max is None:
            if self.spec.p == 0:
                self._lambda_max = 0.0
            else:
                grad = np.abs(self.xs.T @ self.yp) / self.spec.m
                grad[self.colsq == 0.0] = 0.0
                self._lambda_max = float(grad.max())
        return self._lambda_max

    def solve(self, lam, beta0, tol, max_iter) -> LassoFit:
        spec = self.spec
        beta = np.zeros(spec.p) if beta0 is None else np.array(beta0, dtype=float)
        beta[self.colsq == 0.0] = 0.0
        if not spec.p:
            return self._finish(lam, beta, 0, True)
        if lam >= self.lambda_max():
            # Zero is optimal; skip the sweeps so round-off cannot leave dust.
            return self._finish(lam, np.zeros(spec.p), 0, True)
        use_gram = spec.p < spec.m
        if use_gram and self._gram is None:
            self._gram = np.ascontiguousarray(self.xp.T @ self.xp) / spec.m
            self._xty = self.xp.T @ self.yp / spec.m
        lam, tol = float(lam), float(tol)
        sweeps = 0
        converged = False
        budget = _SWEEPS_PER_SUPPORT_STEP
        while sweeps < max_iter:
            chunk = min(budget, max_iter - sweeps)
            if use_gram:
                done, converged = _cd_gram_kernel(self._gram, self._xty, self.colsq, beta, lam, tol, chunk)
            else:
                r = self.yp - self.xp @ beta
                done, converged = _cd_kernel(self.xp, self.colsq, r, beta, lam, tol, chunk)
            sweeps += done
            if converged:
                break
            if not self._support_step(lam, beta):
                budget *= 2
        return self._finish(lam, beta, sweeps, converged)

    def _support_step(self, lam, beta) -> bool:
        """Try jumping to the exact minimizer for the current support and signs.

        On a fixed support A with signs s the stationarity conditions are
        linear, ``G_AA b = c_A - lam * s``. The jump is taken only if the
        solution keeps the signs and no inactive coordinate violates
        ``|grad_j| <= lam``, i.e. only if it is optimal.
        """
        active = np.flatnonzero(beta)
        if active.size == 0:
            return False
        signs = np.sign(beta[active])
        m = self.spec.m
        if self._gram is not None:
            g_aa = self._gram[np.ix_(active, active)]
            c_a = self._xty[active]
        else:
            xa = self.xp[:, active]
            g_aa = xa.T @ xa / m
            c_a = xa.T @ self.yp / m
        try:
            b_a = np.linalg.solve(g_aa, c_a - lam * signs)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(b_a)) or np.any(b_a * signs <= 0):
            return False
        if self._gram is not None:
            grad = self._xty - self._gram[:, active] @ b_a
        else:
            grad = self.xp.T @ (self.yp - self.xp[:, active] @ b_a) / m
        inactive = np.ones(beta.size, dtype=bool)
        inactive[active] = False
        inactive &= self.colsq > 0
        slack = 1e-10 * max(lam, 1.0)
        if inactive.any() and np.abs(grad[inactive]).max() > lam + slack:
            return False
        beta[:] = 0.0
        beta[active] = b_a
        return True

    def _finish(self, lam, beta_std, sweeps, converged) -> LassoFit:
        spec = self.spec
        beta = beta_std / self._safe_scales
        if spec.q:
            # Free coefficients solve the least-squares problem on [U] given beta.
            resid = spec.response - self.y_mean - self.xs @ beta_std
            alpha = np.linalg.solve(self.r_factor, self.q_basis.T @ resid)
        else:
            alpha = np.zeros(0)
        intercept = self.y_mean - float(self.u_mean @ alpha) - float(spec.means @ beta)
        return LassoFit(
            intercept=intercept,
            unpenalized_coefs=alpha,
            penalized_coefs=beta,
            lambda_=float(lam),
            n_iterations=int(sweeps),
            converged=bool(converged),
            active_set_size=int(np.count_nonzero(beta_std)),
            zero_variance_cols=self._zero_cols,
        )


def _warn_zero_variance(proj: _Projected):
    cols = np.flatnonzero(proj.zero_variance)
    if cols.size:
        warnings.warn(
            f"penalized columns {cols.tolist()} have zero variance; coefficients pinned to 0",
            RuntimeWarning,
            stacklevel=3,
        )


def fit_lasso(
    spec: DesignSpec,
    lam: float,
    warm_start: Optional[LassoFit] = None,
    tol: float = 1e-7,
    max_iter: int = 10_000,
) -> LassoFit:
    """Fit the partially penalized LASSO at one penalty value.

    A non-converged fit is returned with ``converged=False`` rather than
    raised, so callers can decide how to treat it.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    proj = _Projected.build(spec)
    _warn_zero_variance(proj)
    beta0 = None if warm_start is None else warm_start.standardized_coefs(spec)
    return proj.solve(lam, beta0, tol, max_iter)


def lambda_max(spec: DesignSpec) -> float:
    """Smallest penalty at which every penalized coefficient is zero."""
    return _Projected.build(spec).lambda_max()


def build_lambda_grid(lmax: float, grid_size: int, min_ratio: float) -> np.ndarray:
    if not lmax > 0:
        raise DegenerateGridError("lambda_max is 0; the unpenalized fit already solves the problem")
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    if not 0 < min_ratio < 1:
        raise ValueError("min_ratio must lie in (0, 1)")
    if grid_size == 1:
        return np.array([float(lmax)])
    grid = lmax * np.exp(np.linspace(0.0, np.log(min_ratio), grid_size))
    grid[0] = lmax
    return grid


def fit_path(spec: DesignSpec, grid, tol: float = 1e-7, max_iter: int = 10_000) -> list[LassoFit]:
    """Fits along ``grid`` in order, each warm-started from the previous one."""
    proj = _Projected.build(spec)
    _warn_zero_variance(proj)
    fits = []
    beta = None
    for lam in grid:
        fit = proj.solve(lam, beta, tol, max_iter)
        beta = fit.standardized_coefs(spec)
        fits.append(fit)
    return fits


@dataclass(frozen=True, eq=False)
class LambdaPath:
    grid: np.ndarray
    cv_errors: np.ndarray
    chosen_index: int
    nonconverged: np.ndarray  # per grid point, count of inner fits that hit max_iter

    @property
    def chosen_lambda(self) -> float:
        return float(self.grid[self.chosen_index])


def _choose(errors: np.ndarray) -> int:
    finite = np.isfinite(errors)
    if not finite.any():
        return 0
    best = errors[finite].min()
    # Grid is decreasing, so the first minimizer is the largest lambda.
    return int(np.flatnonzero(errors == best)[0])


def select_lambda_cv(
    spec: DesignSpec,
    grid,
    mode=CvMode("loocv"),
    seed: int = 0,
    tol: float = 1e-7,
    max_iter: int = 10_000,
) -> LambdaPath:
    """Choose a penalty by leave-one-out or inner K-fold cross-validation.

    LOOCV is exact: for each held-out row the model is refit from scratch on
    the remaining rows (standardization included), walking the grid with warm
    starts. The CV error of a grid point is the mean squared held-out error
    over all m rows.
    """
    mode = CvMode.parse(mode)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("grid must be a non-empty vector")
    if grid.size > 1 and not np.all(np.diff(grid) < 0):
        raise ValueError("grid must be strictly decreasing")
    m = spec.m
    if mode.kind == "loocv":
        held_out = [np.array([i]) for i in range(m)]
    else:
        plan = make_fold_plan(m, mode.inner_k, seed)
        held_out = [plan.test_indices(f) for f in range(plan.k)]

    sq_err = np.full((grid.size, m), np.inf)
    nonconv = np.zeros(grid.size, dtype=np.int64)
    all_rows = np.arange(m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for test in held_out:
            train = np.setdiff1d(all_rows, test, assume_unique=True)
            sub = spec.subset(train)
            try:
                fits = fit_path(sub, grid, tol=tol, max_iter=max_iter)
            except DataValidationError:
                continue
            u_test = spec.unpenalized[test]
            x_test = spec.penalized[test]
            for g, fit in enumerate(fits):
                if not fit.converged:
                    nonconv[g] += 1
                pred = fit.predict(u_test, x_test)
                err = (spec.response[test] - pred) ** 2
                if np.all(np.isfinite(err)):
                    sq_err[g, test] = err
    errors = sq_err.mean(axis=1)
    return LambdaPath(grid=grid, cv_errors=errors, chosen_index=_choose(errors), nonconverged=nonconv)


def objective(spec: DesignSpec, fit: LassoFit) -> float:
    """Penalized objective ``mean(r^2)/2 + lambda*|beta_std|_1``.

    The one-half puts lambda on the scale of the KKT conditions and of
    ``lambda_max``; without it the same fit solves the problem at 2*lambda.
    """
    resid = spec.response - fit.predict(spec.unpenalized, spec.penalized)
    return float(0.5 * np.mean(resid**2) + fit.lambda_ * np.abs(fit.standardized_coefs(spec)).sum())


def kkt_violation(spec: DesignSpec, fit: LassoFit) -> float:
    """Largest violation of the stationarity conditions on the standardized scale."""
    m = spec.m
    resid = spec.response - fit.predict(spec.unpenalized, spec.penalized)
    free = np.column_stack([np.ones(m), spec.unpenalized])
    worst = float(np.abs(free.T @ resid).max() / m)
    if spec.p:
        xs, zero = spec.standardized()
        grad = xs.T @ resid / m
        beta = fit.standardized_coefs(spec)
        lam = fit.lambda_
        nz = (beta != 0) & ~zero
        z = (beta == 0) & ~zero
        if nz.any():
            worst = max(worst, float(np.abs(grad[nz] - lam * np.sign(beta[nz])).max()))
        if z.any():
            worst = max(worst, float(np.maximum(np.abs(grad[z]) - lam, 0.0).max()))
    return worst
