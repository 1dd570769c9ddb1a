"""Synthetic partially linear data and Monte Carlo validation of the estimator.

Model::

    Y = D * theta0 + g(X) + U
    D = m(X) + V

with ``X`` i.i.d. standard normal embeddings and ``g``, ``m`` depending on the
first ``s`` coordinates only. Guess columns are noisy copies of the nuisance
targets, with noise scaled so the guess correlates with its target at a
chosen level.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from dmla.data_model import EstimatorConfig, ObservationTable
from dmla.dml import compare_runs, run_dml
from dmla.errors import ConfigurationError
from dmla.preprocess import RawListing, empirical_quantile

FORM_KINDS = ("sparse_linear", "index_nonlinear", "mixed")
GUESS_TARGETS = ("w", "wd")
GUESS_CALIBRATIONS = ("observed", "target")


@dataclass(frozen=True)
class FunctionForm:
    kind: str = "sparse_linear"
    s: int = 5
    amplitude: float = 1.0
    # Variance share of the nonlinear part; used by "mixed" only.
    share: float = 0.5

    def __post_init__(self):
        if self.kind not in FORM_KINDS:
            raise ConfigurationError(f"unknown function form {self.kind!r}")
        if self.s < 1:
            raise ConfigurationError("s must be >= 1")
        if not 0.0 <= self.share <= 1.0:
            raise ConfigurationError("share must lie in [0, 1]")

    @classmethod
    def parse(cls, text) -> "FunctionForm":
        """``kind[:s[:amplitude[:share]]]``, e.g. ``index_nonlinear:5:1.5``."""
        if isinstance(text, FunctionForm):
            return text
        if isinstance(text, dict):
            return cls(**text)
        parts = str(text).split(":")
        try:
            s = int(parts[1]) if len(parts) > 1 else 5
            amp = float(parts[2]) if len(parts) > 2 else 1.0
            share = float(parts[3]) if len(parts) > 3 else 0.5
        except ValueError as exc:
            raise ConfigurationError(f"bad function form {text!r}") from exc
        return cls(parts[0], s, amp, share)

    def __str__(self):
        base = f"{self.kind}:{self.s}:{self.amplitude:g}"
        return f"{base}:{self.share:g}" if self.kind == "mixed" else base


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bump_raw(z):
    # Two opposed sigmoids: a smooth U shape with no linear component under N(0,1).
    return _sigmoid(3.0 * (z - 1.0)) + _sigmoid(-3.0 * (z + 1.0))


def _standardizer(fn):
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    weights = weights / weights.sum()
    vals = fn(nodes)
    mean = float(weights @ vals)
    sd = float(np.sqrt(weights @ (vals - mean) ** 2))
    return mean, sd


_BUMP_MEAN, _BUMP_SD = _standardizer(_bump_raw)


def index_weights(s: int, decay: bool) -> np.ndarray:
    """Unit-norm weights on the first s coordinates (uniform or harmonic)."""
    w = 1.0 / np.arange(1, s + 1) if decay else np.ones(s)
    return w / np.linalg.norm(w)


def evaluate_form(form: FunctionForm, x: np.ndarray, decay: bool = False) -> np.ndarray:
    """Evaluate a form; the index has unit variance so ``amplitude`` is the SD of the output."""
    s = min(form.s, x.shape[1])
    z = x[:, :s] @ index_weights(s, decay)
    if form.kind == "sparse_linear":
        return form.amplitude * z
    bump = (_bump_raw(z) - _BUMP_MEAN) / _BUMP_SD
    if form.kind == "index_nonlinear":
        return form.amplitude * bump
    # z is odd and the bump even, so the two parts are uncorrelated and the
    # output variance stays amplitude**2.
    return form.amplitude * (math.sqrt(1.0 - form.share) * z + math.sqrt(form.share) * bump)


@dataclass(frozen=True)
class DgpSpec:
    n: int = 500
    p: int = 50
    theta0: float = 1.0
    g_form: FunctionForm = field(default_factory=FunctionForm)
    m_form: FunctionForm = field(default_factory=FunctionForm)
    noise_sd_u: float = 1.0
    noise_sd_v: float = 1.0
    rho_y: float = 0.5
    rho_d: float = 0.5
    seed: int = 0
    # "w": the outcome guess tracks E[Y|W] = theta0*m + g. "wd": it tracks
    # E[Y|W,D] = theta0*d + g, which leaks V into the guess.
    guess_target: str = "w"
    # "target": rho is the correlation with the conditional mean itself.
    # "observed": rho is the correlation with the realized y or d.
    guess_calibration: str = "target"
    rank_transform_d: bool = False

    def __post_init__(self):
        object.__setattr__(self, "g_form", FunctionForm.parse(self.g_form))
        object.__setattr__(self, "m_form", FunctionForm.parse(self.m_form))
        if self.n < 2 or self.p < 1:
            raise ConfigurationError("need n >= 2 and p >= 1")
        if not (self.noise_sd_u > 0 and self.noise_sd_v > 0):
            raise ConfigurationError("noise SDs must be > 0")
        for name in ("rho_y", "rho_d"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.guess_target not in GUESS_TARGETS:
            raise ConfigurationError(f"guess_target must be one of {GUESS_TARGETS}")
        if self.guess_calibration not in GUESS_CALIBRATIONS:
            raise ConfigurationError(f"guess_calibration must be one of {GUESS_CALIBRATIONS}")

    def with_seed(self, seed: int) -> "DgpSpec":
        return DgpSpec(**{**self.to_dict(), "seed": seed})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["g_form"] = str(self.g_form)
        out["m_form"] = str(self.m_form)
        return out


@dataclass(frozen=True, eq=False)
class SynthDataset:
    table: ObservationTable
    g_values: np.ndarray
    m_values: np.ndarray
    u: np.ndarray
    v: np.ndarray
    spec: DgpSpec

    @property
    def outcome_target(self) -> np.ndarray:
        """The conditional mean the outcome guess was calibrated against."""
        if self.spec.guess_target == "wd":
            return self.table.d * self.spec.theta0 + self.g_values
        return self.spec.theta0 * self.m_values + self.g_values


def noisy_guess(
    target: np.ndarray, rho: float, rng: np.random.Generator, reference: Optional[np.ndarray] = None
) -> np.ndarray:
    """``target`` plus independent normal noise at a chosen correlation.

    Without ``reference`` the correlation is with ``target``: for guess = T + e
    with e independent, corr = sd_T / sqrt(sd_T^2 + sd_e^2), so
    sd_e = sd_T * sqrt(1/rho^2 - 1). With ``reference`` (a noisy outcome whose
    conditional mean is T) the correlation is with the reference instead:
    corr = cov(T, R) / (sd_R * sqrt(sd_T^2 + sd_e^2)), which needs
    rho <= corr(T, R). rho = 0 returns pure noise at the target's scale.
    """
    sd_t = float(target.std())
    e = rng.standard_normal(target.shape[0])
    if rho <= 0.0:
        return target.mean() + sd_t * e
    if reference is None:
        if rho >= 1.0:
            return target.copy()
        return target + sd_t * math.sqrt(1.0 / rho**2 - 1.0) * e
    cov = float(np.mean((target - target.mean()) * (reference - reference.mean())))
    ceiling = cov / (sd_t * float(reference.std())) if sd_t > 0 else 0.0
    if rho > ceiling + 1e-12:
        raise ConfigurationError(
            f"guess correlation {rho} exceeds the attainable {ceiling:.3f} for this DGP"
        )
    var_e = max((cov / (rho * float(reference.std()))) ** 2 - sd_t**2, 0.0)
    return target + math.sqrt(var_e) * e


def generate(spec: DgpSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    x = rng.standard_normal((spec.n, spec.p))
    g = evaluate_form(spec.g_form, x, decay=False)
    m = evaluate_form(spec.m_form, x, decay=True)
    u = spec.noise_sd_u * rng.standard_normal(spec.n)
    v = spec.noise_sd_v * rng.standard_normal(spec.n)
    d = m + v
    if spec.rank_transform_d:
        d = empirical_quantile(d, d)
    y = d * spec.theta0 + g + u
    y_target = d * spec.theta0 + g if spec.guess_target == "wd" else spec.theta0 * m + g
    observed = spec.guess_calibration == "observed"
    # Guess noise draws come last so toggling rho leaves x, u, v unchanged.
    y_guess = noisy_guess(y_target, spec.rho_y, rng, reference=y if observed else None)
    d_guess = noisy_guess(m, spec.rho_d, rng, reference=d if observed else None)
    table = ObservationTable(
        y=y, d=d, x=x, ids=[f"s{i:05d}" for i in range(spec.n)], y_guess=y_guess, d_guess=d_guess
    )
    return SynthDataset(table=table, g_values=g, m_values=m, u=u, v=v, spec=spec)


@dataclass(frozen=True)
class RepResult:
    rep: int
    seed: int
    theta_with: float
    se_with: float
    rmse_y_with: float
    rmse_d_with: float
    theta_without: float
    se_without: float
    rmse_y_without: float
    rmse_d_without: float
    covers_with: bool
    covers_without: bool


def _run_rep(spec: DgpSpec, cfg: EstimatorConfig, rep: int, z: float) -> RepResult:
    seed = spec.seed + rep
    data = generate(spec.with_seed(seed))
    rep_cfg = EstimatorConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + rep})
    with_g = run_dml(data.table, rep_cfg, use_guesses=True)
    without_g = run_dml(data.table, rep_cfg, use_guesses=False)
    compare_runs(with_g, without_g)

    def covers(res):
        return bool(abs(res.theta_hat - spec.theta0) <= z * res.robust_se)

    return RepResult(
        rep=rep,
        seed=seed,
        theta_with=with_g.theta_hat,
        se_with=with_g.robust_se,
        rmse_y_with=with_g.rmse_y,
        rmse_d_with=with_g.rmse_d,
        theta_without=without_g.theta_hat,
        se_without=without_g.robust_se,
        rmse_y_without=without_g.rmse_y,
        rmse_d_without=without_g.rmse_d,
        covers_with=covers(with_g),
        covers_without=covers(without_g),
    )


def _sd(a: np.ndarray) -> float:
    return float(a.std(ddof=1)) if a.size > 1 else 0.0


@dataclass(frozen=True)
class ArmSummary:
    theta_mean: float
    theta_sd: float
    coverage: float
    se_mean: float
    rmse_y_mean: float
    rmse_d_mean: float

    @property
    def theta_mc_se(self) -> float:
        return self.theta_sd


@dataclass(frozen=True, eq=False)
class MCSummary:
    reps: int
    theta0: float
    with_guess: ArmSummary
    without_guess: ArmSummary
    frac_rmse_y_improved: float
    frac_se_improved: float
    delta_rmse_d_mean: float
    delta_rmse_d_sd: float
    spec: dict
    config: dict
    per_rep: tuple

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "theta0": self.theta0,
            "with_guess": asdict(self.with_guess),
            "without_guess": asdict(self.without_guess),
            "frac_rmse_y_improved": self.frac_rmse_y_improved,
            "frac_se_improved": self.frac_se_improved,
            "delta_rmse_d_mean": self.delta_rmse_d_mean,
            "delta_rmse_d_sd": self.delta_rmse_d_sd,
            "spec": self.spec,
            "config": self.config,
            "per_rep": [asdict(r) for r in self.per_rep],
        }


def _arm(reps: list[RepResult], suffix: str) -> ArmSummary:
    theta = np.array([getattr(r, f"theta_{suffix}") for r in reps])
    return ArmSummary(
        theta_mean=float(theta.mean()),
        theta_sd=_sd(theta),
        coverage=float(np.mean([getattr(r, f"covers_{suffix}") for r in reps])),
        se_mean=float(np.mean([getattr(r, f"se_{suffix}") for r in reps])),
        rmse_y_mean=float(np.mean([getattr(r, f"rmse_y_{suffix}") for r in reps])),
        rmse_d_mean=float(np.mean([getattr(r, f"rmse_d_{suffix}") for r in reps])),
    )


def monte_carlo(
    spec: DgpSpec, cfg: EstimatorConfig, reps: int, workers: int = 1, z: float = 1.96
) -> MCSummary:
    """Replicate ``generate`` + both estimator runs ``reps`` times.

    Replication ``r`` uses data seed ``spec.seed + r`` and fold seed
    ``cfg.seed + r``, so the summary does not depend on execution order.
    """
    if reps < 1:
        raise ConfigurationError("reps must be >= 1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda r: _run_rep(spec, cfg, r, z), range(reps)))
    else:
        results = [_run_rep(spec, cfg, r, z) for r in range(reps)]
    delta_d = np.array([r.rmse_d_with - r.rmse_d_without for r in results])
    return MCSummary(
        reps=reps,
        theta0=spec.theta0,
        with_guess=_arm(results, "with"),
        without_guess=_arm(results, "without"),
        frac_rmse_y_improved=float(np.mean([r.rmse_y_with < r.rmse_y_without for r in results])),
        frac_se_improved=float(np.mean([r.se_with < r.se_without for r in results])),
        delta_rmse_d_mean=float(delta_d.mean()),
        delta_rmse_d_sd=_sd(delta_d),
        spec=spec.to_dict(),
        config=cfg.to_dict(),
        per_rep=tuple(results),
    )


# Summary magnitudes of the jewelry-auction sample used to calibrate
# the bundled raw listings.
CALIBRATION_TARGETS = {
    "log_price_median": 4.69,
    "log_price_sd": 1.15,
    "feedback_q25": 621.0,
    "feedback_median": 4062.0,
    "feedback_q75": 9823.0,
    "images_median": 6,
    "price_guess_corr": 0.669,
    "score_guess_corr": 0.500,
}

_Z75 = 0.6744897501960817

_METALS = ("10k Yellow Gold", "14k Yellow Gold", "18k Yellow Gold", "14k White Gold", "14k Rose Gold")
_STYLES = ("Pendant", "Chain", "Cuban Link", "Rope", "Locket", "Cross", "Charm")


def generate_listings(
    n: int = 333,
    p_img: int = 16,
    p_txt: int = 8,
    seed: int = 0,
    with_guesses: bool = True,
) -> list[RawListing]:
    """Raw listings with magnitudes resembling the auction sample.

    Log price and the feedback score depend on low-dimensional latent item
    traits that also drive the image and text embeddings, so the embeddings
    carry (nonlinear) signal about both.
    """
    t = CALIBRATION_TARGETS
    rng = np.random.default_rng(seed)
    value = rng.standard_normal(n)
    scale = rng.standard_normal(n)
    log_price = t["log_price_median"] + t["log_price_sd"] * (0.8 * value + 0.6 * scale * np.abs(value) / 0.8)
    log_price = t["log_price_median"] + t["log_price_sd"] * (log_price - np.median(log_price)) / log_price.std()
    price = np.round(np.exp(log_price), 2).clip(0.99)

    # Split log-normal hitting the three feedback quartiles.
    lo_sd = (math.log(t["feedback_median"]) - math.log(t["feedback_q25"])) / _Z75
    hi_sd = (math.log(t["feedback_q75"]) - math.log(t["feedback_median"])) / _Z75
    zf = 0.6 * scale + 0.8 * rng.standard_normal(n)
    log_fb = math.log(t["feedback_median"]) + np.where(zf < 0, lo_sd, hi_sd) * zf
    feedback = np.floor(np.exp(log_fb)).astype(np.int64)

    n_images = np.clip(np.round(np.exp(rng.normal(math.log(t["images_median"]), 0.55, n))), 1, 24).astype(int)
    dir_img = rng.standard_normal((3, p_img))
    dir_txt = rng.standard_normal((3, p_txt))
    latent = np.column_stack([value, scale, np.tanh(value * scale)])

    price_guess = score_guess = None
    if with_guesses:
        rp, rs = t["price_guess_corr"], t["score_guess_corr"]
        lg = log_price + log_price.std() * math.sqrt(1 / rp**2 - 1) * rng.standard_normal(n)
        price_guess = np.round(np.exp(lg)).clip(12.99)
        lq = log_fb + log_fb.std() * math.sqrt(1 / rs**2 - 1) * rng.standard_normal(n)
        score_guess = np.round(np.exp(lq - 0.7)).astype(np.int64).clip(12)

    listings = []
    for i in range(n):
        imgs = latent[i] @ dir_img + 0.8 * rng.standard_normal((n_images[i], p_img))
        txt = latent[i] @ dir_txt + 0.5 * rng.standard_normal(p_txt)
        metal = _METALS[int(rng.integers(len(_METALS)))]
        style = _STYLES[int(rng.integers(len(_STYLES)))]
        grams = round(float(np.exp(0.6 * value[i] + rng.normal(0.5, 0.4))), 1)
        text = (
            f"Title: {metal} {style} Necklace {grams}g\n"
            f"Seller: seller_{i:04d}\n"
            f"Feedback Score: {int(feedback[i])}\n"
            f"Positive Feedback Percent: {round(95 + 5 * rng.random(), 1)}\n"
            f"Metal: {metal}\n"
            f"Style: {style}\n"
            f"Total Weight: {grams} g\n"
            f"Condition: Pre-owned"
        )
        listings.append(
            RawListing(
                id=f"L{i:04d}",
                price=float(price[i]),
                feedback_score=int(feedback[i]),
                image_embeddings=[row.tolist() for row in imgs],
                text_embedding=txt.tolist(),
                price_guess=None if price_guess is None else float(price_guess[i]),
                score_guess=None if score_guess is None else int(score_guess[i]),
                text=text,
                image_links=[f"https://images.example.invalid/L{i:04d}/{k}.jpg" for k in range(n_images[i])],
            )
        )
    return listings
