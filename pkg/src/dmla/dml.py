"""Cross-fitted partialling-out estimator for the partially linear model."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dmla.data_model import EstimatorConfig, FoldPlan, ObservationTable, make_fold_plan
from dmla.errors import DataValidationError, DegenerateGridError, DegenerateTreatmentError, EstimationError, IncomparableRunsError
from dmla.lasso import DesignSpec, LambdaPath, LassoFit, build_lambda_grid, fit_path, lambda_max, select_lambda_cv

MODEL_KINDS = ("outcome", "treatment")


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    outcome_fits: tuple
    treatment_fits: tuple
    outcome_paths: tuple
    treatment_paths: tuple
    g_hat: np.ndarray  # out-of-fold predictions of E[Y|W]
    m_hat: np.ndarray  # out-of-fold predictions of E[D|W]

    @property
    def lambdas_y(self) -> list[float]:
        return [f.lambda_ for f in self.outcome_fits]

    @property
    def lambdas_d(self) -> list[float]:
        return [f.lambda_ for f in self.treatment_fits]


def _inner_seed(seed: int, fold: int, kind: str) -> int:
    ss = np.random.SeedSequence([seed, fold, MODEL_KINDS.index(kind)])
    return int(ss.generate_state(1)[0])


def _design(t: ObservationTable, rows, kind: str, use_guesses: bool, penalize_guess: bool):
    response = t.y if kind == "outcome" else t.d
    guess = t.y_guess if kind == "outcome" else t.d_guess
    x = t.x[rows]
    if not use_guesses:
        return response[rows], np.empty((len(rows), 0)), x
    g = guess[rows].reshape(-1, 1)
    if penalize_guess:
        return response[rows], np.empty((len(rows), 0)), np.hstack([g, x])
    return response[rows], g, x


def _fit_one(t, plan, cfg, use_guesses, fold, kind):
    train = plan.train_indices(fold)
    test = plan.test_indices(fold)
    spec = DesignSpec(*_design(t, train, kind, use_guesses, cfg.penalize_guess))
    if cfg.fixed_lambdas is not None:
        grid = np.array(sorted(set(cfg.fixed_lambdas), reverse=True))
    else:
        try:
            grid = build_lambda_grid(lambda_max(spec), cfg.lambda_grid_size, cfg.lambda_min_ratio)
        except DegenerateGridError:
            grid = np.array([0.0])
    if grid.size == 1:
        path = LambdaPath(grid=grid, cv_errors=np.array([np.nan]), chosen_index=0, nonconverged=np.zeros(1, dtype=np.int64))
    else:
        path = select_lambda_cv(
            spec, grid, cfg.cv_mode, seed=_inner_seed(cfg.seed, fold, kind), tol=cfg.tol, max_iter=cfg.max_iter
        )
    fit = fit_path(spec, grid[: path.chosen_index + 1], tol=cfg.tol, max_iter=cfg.max_iter)[-1]
    if not fit.converged:
        raise EstimationError(
            f"{kind} model for fold {fold} did not converge in {cfg.max_iter} sweeps", fold=fold, model=kind
        )
    test_u, test_x = _design(t, test, kind, use_guesses, cfg.penalize_guess)[1:]
    return fit, path, test, fit.predict(test_u, test_x)


def fit_nuisances(
    t: ObservationTable, plan: FoldPlan, cfg: EstimatorConfig, use_guesses: bool, workers: int = 1
) -> NuisanceFits:
    """Fit both nuisance regressions on every fold complement and predict out of fold.

    Penalties are selected separately for each fold and each nuisance. With
    ``use_guesses`` false the guess columns are not used at all, which is the
    embeddings-only comparison model.
    """
    if plan.n != t.n:
        raise DataValidationError(f"fold plan covers {plan.n} rows but table has {t.n}")
    if use_guesses and not t.has_guesses:
        raise DataValidationError("use_guesses requested but the table lacks y_guess/d_guess")
    tasks = [(fold, kind) for fold in range(plan.k) for kind in MODEL_KINDS]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _fit_one(t, plan, cfg, use_guesses, *a), tasks))
    else:
        results = [_fit_one(t, plan, cfg, use_guesses, *a) for a in tasks]

    g_hat = np.full(t.n, np.nan)
    m_hat = np.full(t.n, np.nan)
    fits = {kind: [] for kind in MODEL_KINDS}
    paths = {kind: [] for kind in MODEL_KINDS}
    for (fold, kind), (fit, path, test, pred) in zip(tasks, results):
        (g_hat if kind == "outcome" else m_hat)[test] = pred
        fits[kind].append(fit)
        paths[kind].append(path)
    return NuisanceFits(
        outcome_fits=tuple(fits["outcome"]),
        treatment_fits=tuple(fits["treatment"]),
        outcome_paths=tuple(paths["outcome"]),
        treatment_paths=tuple(paths["treatment"]),
        g_hat=g_hat,
        m_hat=m_hat,
    )


def residual_on_residual(r, v) -> tuple[float, float]:
    """No-intercept slope of ``r`` on ``v`` and its heteroskedasticity-robust SE.

    ``SE^2 = (sum v^2)^-2 * sum v^2 eps^2`` with ``eps = r - theta * v``; no
    degrees-of-freedom correction.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    if r.shape != v.shape:
        raise ValueError(f"residual vectors differ in shape: {r.shape} vs {v.shape}")
    svv = float(v @ v)
    if not svv > 0:
        raise DegenerateTreatmentError("treatment residuals have no variation")
    theta = float(v @ r) / svv
    eps = r - theta * v
    var = float((v * v) @ (eps * eps)) / svv**2
    return theta, float(np.sqrt(var))


def _rmse(resid) -> float:
    return float(np.sqrt(np.mean(np.square(resid))))


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / denom) if denom > 0 else float("nan")


def table_fingerprint(t: ObservationTable) -> str:
    h = hashlib.sha256()
    for arr in (t.y, t.d, t.x):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("\x1f".join(t.ids).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DmlResult:
    theta_hat: float
    robust_se: float
    rmse_y: float
    rmse_d: float
    residuals_r: np.ndarray
    residuals_v: np.ndarray
    use_guesses: bool
    config_fingerprint: str
    plan_fingerprint: str
    data_fingerprint: str
    rmse_y_by_fold: tuple = ()
    rmse_d_by_fold: tuple = ()
    lambdas_y: tuple = ()
    lambdas_d: tuple = ()
    guess_correlations: Optional[tuple] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "use_guesses": self.use_guesses,
            "theta_hat": self.theta_hat,
            "robust_se": self.robust_se,
            "rmse_y": self.rmse_y,
            "rmse_d": self.rmse_d,
            "rmse_y_by_fold": list(self.rmse_y_by_fold),
            "rmse_d_by_fold": list(self.rmse_d_by_fold),
            "lambdas_y": list(self.lambdas_y),
            "lambdas_d": list(self.lambdas_d),
            "guess_correlations": None if self.guess_correlations is None else list(self.guess_correlations),
            "config_fingerprint": self.config_fingerprint,
            "plan_fingerprint": self.plan_fingerprint,
            "data_fingerprint": self.data_fingerprint,
            "config": self.config,
            "residuals_r": self.residuals_r.tolist(),
            "residuals_v": self.residuals_v.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DmlResult":
        gc = data.get("guess_correlations")
        return cls(
            theta_hat=data["theta_hat"],
            robust_se=data["robust_se"],
            rmse_y=data["rmse_y"],
            rmse_d=data["rmse_d"],
            residuals_r=np.asarray(data["residuals_r"], dtype=float),
            residuals_v=np.asarray(data["residuals_v"], dtype=float),
            use_guesses=data["use_guesses"],
            config_fingerprint=data["config_fingerprint"],
            plan_fingerprint=data["plan_fingerprint"],
            data_fingerprint=data["data_fingerprint"],
            rmse_y_by_fold=tuple(data.get("rmse_y_by_fold", ())),
            rmse_d_by_fold=tuple(data.get("rmse_d_by_fold", ())),
            lambdas_y=tuple(data.get("lambdas_y", ())),
            lambdas_d=tuple(data.get("lambdas_d", ())),
            guess_correlations=None if gc is None else tuple(gc),
            config=data.get("config", {}),
        )


def run_dml(
    t: ObservationTable,
    cfg: EstimatorConfig,
    use_guesses: bool,
    plan: Optional[FoldPlan] = None,
    workers: int = 1,
) -> DmlResult:
    if plan is None:
        plan = make_fold_plan(t.n, cfg.k_folds, cfg.seed)
    fits = fit_nuisances(t, plan, cfg, use_guesses, workers=workers)
    r = t.y - fits.g_hat
    v = t.d - fits.m_hat
    theta, se = residual_on_residual(r, v)
    folds = [plan.test_indices(f) for f in range(plan.k)]
    corr = None
    if t.has_guesses:
        corr = (_pearson(t.y, t.y_guess), _pearson(t.d, t.d_guess))
    return DmlResult(
        theta_hat=theta,
        robust_se=se,
        rmse_y=_rmse(r),
        rmse_d=_rmse(v),
        residuals_r=r,
        residuals_v=v,
        use_guesses=bool(use_guesses),
        config_fingerprint=cfg.fingerprint(),
        plan_fingerprint=plan.fingerprint(),
        data_fingerprint=table_fingerprint(t),
        rmse_y_by_fold=tuple(_rmse(r[idx]) for idx in folds),
        rmse_d_by_fold=tuple(_rmse(v[idx]) for idx in folds),
        lambdas_y=tuple(fits.lambdas_y),
        lambdas_d=tuple(fits.lambdas_d),
        guess_correlations=corr,
        config=cfg.to_dict(),
    )


TABLE_COLUMNS = ("RMSE (E[Y|W])", "RMSE (E[D|W])", "theta_hat", "Robust SE")


@dataclass(frozen=True)
class ComparisonReport:
    without_guess: tuple  # (rmse_y, rmse_d, theta_hat, robust_se)
    with_guess: tuple
    delta_rmse_y: float
    delta_rmse_d: float
    delta_robust_se: float
    theta_without: float
    theta_with: float

    def rows(self) -> list[tuple]:
        return [("Embeddings only", *self.without_guess), ("With LLM", *self.with_guess)]

    def format_table(self) -> str:
        head = f"{'':>16} | " + " ".join(f"{c:>14}" for c in TABLE_COLUMNS)
        lines = [head, "-" * len(head)]
        for label, *vals in self.rows():
            lines.append(f"{label:>16} | " + " ".join(f"{v:>14.6g}" for v in vals))
        lines.append(
            f"{'delta':>16} | {self.delta_rmse_y:>14.6g} {self.delta_rmse_d:>14.6g} "
            f"{self.theta_with - self.theta_without:>14.6g} {self.delta_robust_se:>14.6g}"
        )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "columns": list(TABLE_COLUMNS),
            "rows": [[label, *vals] for label, *vals in self.rows()],
            "delta_rmse_y": self.delta_rmse_y,
            "delta_rmse_d": self.delta_rmse_d,
            "delta_robust_se": self.delta_robust_se,
            "theta_with": self.theta_with,
            "theta_without": self.theta_without,
        }


def compare_runs(with_guess: DmlResult, without_guess: DmlResult) -> ComparisonReport:
    """Side-by-side comparison; deltas are with-guess minus embeddings-only."""
    for attr in ("config_fingerprint", "plan_fingerprint", "data_fingerprint"):
        a, b = getattr(with_guess, attr), getattr(without_guess, attr)
        if a != b:
            raise IncomparableRunsError(f"runs differ in {attr}: {a} vs {b}")

    def row(res):
        return (res.rmse_y, res.rmse_d, res.theta_hat, res.robust_se)

    return ComparisonReport(
        without_guess=row(without_guess),
        with_guess=row(with_guess),
        delta_rmse_y=with_guess.rmse_y - without_guess.rmse_y,
        delta_rmse_d=with_guess.rmse_d - without_guess.rmse_d,
        delta_robust_se=with_guess.robust_se - without_guess.robust_se,
        theta_without=without_guess.theta_hat,
        theta_with=with_guess.theta_hat,
    )
