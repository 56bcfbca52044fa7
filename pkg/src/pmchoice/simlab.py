"""Simulation lab: data generating processes, oracles, and Monte Carlo.

Every design draws random utilities of the form u(index, effects,
shock), computes choices by utility argmax, and returns the observable
panel alongside a hidden truth record (effect and shock draws, true
coefficients).  The truth record never flows into the estimation path;
it exists only for oracles and evaluation metrics.

Designs
-------
``baseline``
    Scale effect A0 ~ U[2, 2.5] and per-product location shifters; the
    second covariate loads on a latent variable that also drives the
    second product's shifter, so covariates and effects are
    dependent.  u = A0 * (index + shifter) + shock.
``varying``
    Baseline family with the second covariate's noise variance pinned
    at 6 regardless of J, for sweeps over (D, J, T).
``point-id`` / ``partial-id``
    Baseline family with bounded latent support; the partial variant
    makes the first covariate a +/-1 coin and bounds every support,
    which breaks point identification while keeping locations and
    scales comparable.
``multiplicative-fe``
    u = A * index + shock with A = 1 + latent and the second covariate
    a mixture (1-alpha)*noise + alpha*latent: promotion-style
    confounding where the effect multiplies the whole index.
``oracle-logit``
    No effects at all, standard normal covariates, Gumbel shocks:
    choice probabilities have the closed softmax form, so the
    first-stage regression can be bypassed entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .criterion import CriterionEvaluator, Smoother
from .data import PanelDataset, PeriodPair, select_pairs, stack_pair
from .firststage import ProbDiffEstimates, RegressorSpec, cross_validate, default_cv_grid, fit_prob_diffs
from .optimizer import EstimationResult, GridConfig, estimate_set

__all__ = [
    "DgpConfig",
    "SimTruth",
    "simulate",
    "LogitOracle",
    "TrueProbDiffs",
    "OlsResult",
    "RankDeficientError",
    "ols_baseline",
    "EstimatorSettings",
    "estimate_dataset",
    "first_stage_mse",
    "run_first_stage_mc",
    "McReport",
    "run_monte_carlo",
]

DESIGNS = (
    "baseline", "varying", "point-id", "partial-id",
    "multiplicative-fe", "oracle-logit",
)

_SQRT3 = np.sqrt(3.0)
_SQRT6 = np.sqrt(6.0)


@dataclass(frozen=True)
class DgpConfig:
    """Design name, dimensions, true coefficients and seed.

    ``beta_true`` defaults per design: (2, 1, ..., 1) everywhere
    except the multiplicative-effect design's (-4, 2, 2).
    ``alpha_mix`` is that design's confounding strength in [0, 1].
    """

    design: str = "baseline"
    n_agents: int = 1000
    n_covariates: int = 3
    n_products: int = 3
    n_periods: int = 2
    beta_true: tuple = ()
    alpha_mix: float = 0.3
    outside_option: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; expected one of {DESIGNS}")
        if self.n_agents < 1 or self.n_periods < 2:
            raise ValueError("need n_agents >= 1 and n_periods >= 2")
        if self.design == "multiplicative-fe":
            if self.n_covariates != 3:
                raise ValueError("the multiplicative-effect design is defined for D=3")
        elif self.n_covariates < 2:
            raise ValueError("need n_covariates >= 2")
        if self.n_products < 2:
            raise ValueError("need n_products >= 2")
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ValueError("alpha_mix must lie in [0, 1]")
        beta = self.beta_true
        if not beta:
            if self.design == "multiplicative-fe":
                beta = (-4.0, 2.0, 2.0)
            else:
                beta = (2.0,) + (1.0,) * (self.n_covariates - 1)
        beta = tuple(float(b) for b in beta)
        if len(beta) != self.n_covariates:
            raise ValueError("beta_true length must equal n_covariates")
        if not any(b != 0.0 for b in beta):
            raise ValueError("beta_true must be nonzero")
        object.__setattr__(self, "beta_true", beta)

    @property
    def beta_direction(self) -> np.ndarray:
        b = np.asarray(self.beta_true)
        return b / np.linalg.norm(b)


@dataclass(frozen=True)
class SimTruth:
    """Hidden side of a simulation; never passed to the estimator."""

    beta_true: np.ndarray
    design: str
    latent: np.ndarray | None
    scale_effect: np.ndarray | None
    location_effects: np.ndarray | None
    shocks: np.ndarray


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    # Type-I extreme value via inverse CDF of uniforms.
    return -np.log(-np.log(rng.random(shape)))


def simulate(cfg: DgpConfig) -> tuple[PanelDataset, SimTruth]:
    """Draw a panel under the configured design.

    Choices are computed by utility argmax over the stored products
    (plus a zero-index outside alternative when configured).  Draw
    order is fixed per design, so a seed pins the dataset bit for bit.
    Exact utility ties, a probability-zero event under the continuous
    shocks, raise rather than being silently broken.
    """
    n, d, j, t = cfg.n_agents, cfg.n_covariates, cfg.n_products, cfg.n_periods
    rng = np.random.default_rng(cfg.seed)
    beta = np.asarray(cfg.beta_true)
    x = np.empty((n, j, t, d))

    if cfg.design == "multiplicative-fe":
        latent = rng.uniform(0.0, 1.0, size=(n, j))
        effects = 1.0 + latent
        x[..., 0] = rng.uniform(0.0, 4.0, size=(n, j, t))
        w = rng.uniform(0.0, 1.0, size=(n, j, t))
        x[..., 1] = (1.0 - cfg.alpha_mix) * w + cfg.alpha_mix * latent[:, :, None]
        x[..., 2] = x[..., 0] * x[..., 1]
        shocks = _gumbel(rng, (n, j, t))
        utilities = effects[:, :, None] * np.einsum("ijtd,d->ijt", x, beta) + shocks
        scale = None
    elif cfg.design == "oracle-logit":
        latent = None
        effects = None
        scale = None
        x[:] = rng.standard_normal((n, j, t, d))
        shocks = _gumbel(rng, (n, j, t))
        utilities = np.einsum("ijtd,d->ijt", x, beta) + shocks
    else:
        if cfg.design in ("point-id", "partial-id"):
            latent = rng.uniform(-_SQRT3, _SQRT3, size=n)
        else:
            latent = rng.standard_normal(n)
        scale = rng.uniform(2.0, 2.5, size=n)
        effects = np.zeros((n, j))
        effects[:, 1] = np.maximum(latent, 0.0)
        if j > 2:
            effects[:, 2:] = rng.uniform(-0.25, 0.25, size=(n, j - 2))
        if cfg.design == "partial-id":
            x[..., 0] = rng.choice(np.array([-1.0, 1.0]), size=(n, j, t))
        else:
            x[..., 0] = rng.uniform(-1.0, 1.0, size=(n, j, t))
        if cfg.design == "baseline":
            noise = rng.normal(0.0, np.sqrt(2.0 * j), size=(n, j, t))
        elif cfg.design == "partial-id":
            noise = rng.uniform(-_SQRT6, _SQRT6, size=(n, j, t))
        else:
            noise = rng.normal(0.0, _SQRT6, size=(n, j, t))
        x[..., 1] = latent[:, None, None] + noise
        if d > 2:
            if cfg.design == "partial-id":
                x[..., 2:] = rng.uniform(-1.0, 1.0, size=(n, j, t, d - 2))
            else:
                x[..., 2:] = rng.standard_normal((n, j, t, d - 2))
        shocks = _gumbel(rng, (n, j, t))
        index = np.einsum("ijtd,d->ijt", x, beta)
        utilities = scale[:, None, None] * (index + effects[:, :, None]) + shocks

    if cfg.outside_option:
        outside = _gumbel(rng, (n, t))
        best_inside = utilities.max(axis=1)
        chose_inside = best_inside >= outside
        if np.any(best_inside == outside):
            raise RuntimeError("exact utility tie against the outside option")
    ranks = (utilities == utilities.max(axis=1, keepdims=True)).sum(axis=1)
    if np.any(ranks != 1):
        raise RuntimeError("exact utility tie between products")
    y = (utilities == utilities.max(axis=1, keepdims=True)).astype(np.float64)
    if cfg.outside_option:
        y *= chose_inside[:, None, :]

    data = PanelDataset(
        covariates=x, outcomes=y, outcome_kind="choices",
        outside_option=cfg.outside_option,
    )
    truth = SimTruth(
        beta_true=beta.copy(), design=cfg.design, latent=latent,
        scale_effect=scale, location_effects=effects, shocks=shocks,
    )
    return data, truth


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LogitOracle:
    """Closed-form choice-probability differences for ``oracle-logit``.

    With Gumbel shocks and no heterogeneity, choice probabilities are
    the softmax of the covariate indexes, so the first-stage target is
    known exactly and the regression step can be skipped.
    """

    def __init__(self, cfg_or_beta, outside_option: bool | None = None):
        if isinstance(cfg_or_beta, DgpConfig):
            if cfg_or_beta.design != "oracle-logit":
                raise ValueError(
                    "the closed form holds only for the oracle-logit design; "
                    "designs with unobserved effects need a fitted first stage "
                    "(fit_prob_diffs) or the quadrature truth (TrueProbDiffs)"
                )
            self.beta = np.asarray(cfg_or_beta.beta_true, dtype=np.float64)
            self.outside_option = cfg_or_beta.outside_option
        else:
            self.beta = np.asarray(cfg_or_beta, dtype=np.float64)
            self.outside_option = bool(outside_option)

    def _choice_probs(self, delta: np.ndarray) -> np.ndarray:
        if self.outside_option:
            z = np.concatenate([delta, np.zeros(delta.shape[:-1] + (1,))], axis=-1)
            return _softmax(z)[..., :-1]
        return _softmax(delta)

    def predict_all(self, pair: PeriodPair, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        d = self.beta.size
        two_periods = rows.reshape(len(rows), 2, -1, d)
        delta = two_periods @ self.beta
        p = self._choice_probs(delta)
        diff = p[:, 0, :] - p[:, 1, :]
        return diff if pair.is_canonical else -diff

    def predict(self, j: int, pair: PeriodPair, rows: np.ndarray) -> np.ndarray:
        return self.predict_all(pair, rows)[:, j]


class TrueProbDiffs:
    """Quadrature evaluation of the true probability differences.

    For the baseline family the conditional expectation integrates the
    softmax over the posterior of the latent variable given the second
    covariate's two-period values (conjugate normal posterior, or a
    reweighted fixed grid for bounded latents), the scale effect, and
    the independent location shifters.  Used as a first-stage
    benchmark; exact up to the quadrature rule (``nodes`` per
    dimension).
    """

    def __init__(self, cfg: DgpConfig, nodes: int = 8):
        if cfg.design not in ("baseline", "varying", "point-id", "partial-id"):
            raise ValueError(
                "quadrature truth covers the scale-and-shift designs; the "
                "oracle-logit design has an exact closed form (LogitOracle)"
            )
        if cfg.outside_option:
            raise ValueError("quadrature truth assumes no outside option")
        self.cfg = cfg
        self.nodes = nodes
        self.beta = np.asarray(cfg.beta_true, dtype=np.float64)
        j = cfg.n_products
        if cfg.design == "baseline":
            self.noise = ("normal", 2.0 * j)
        elif cfg.design == "partial-id":
            self.noise = ("uniform", _SQRT6)
        else:
            self.noise = ("normal", 6.0)
        self.z_prior = "uniform" if cfg.design in ("point-id", "partial-id") else "normal"

        gh_x, gh_w = np.polynomial.hermite.hermgauss(nodes)
        gl_x, gl_w = np.polynomial.legendre.leggauss(nodes)
        self._gh = (gh_x, gh_w / np.sqrt(np.pi))
        self._gl = (gl_x, gl_w / 2.0)  # weights for U[-1, 1] averaging

    def _latent_nodes(self, x2: np.ndarray):
        """Per-row latent nodes and weights given the 2J second-covariate values."""
        n, m = x2.shape
        if self.z_prior == "normal" and self.noise[0] == "normal":
            var = self.noise[1]
            prec = 1.0 + m / var
            mean = (x2.sum(axis=1) / var) / prec
            sd = np.sqrt(1.0 / prec)
            xk, wk = self._gh
            z = mean[:, None] + sd * np.sqrt(2.0) * xk[None, :]
            w = np.broadcast_to(wk, (n, wk.size)).copy()
            return z, w
        # Bounded latent: fixed Gauss-Legendre grid on the prior support,
        # reweighted by the likelihood of the observed second covariate.
        half = _SQRT3
        xk, wk = self._gl
        z = np.broadcast_to(half * xk, (n, xk.size)).copy()
        if self.noise[0] == "normal":
            var = self.noise[1]
            resid = x2[:, None, :] - z[:, :, None]
            loglik = -0.5 * (resid ** 2).sum(axis=2) / var
            loglik -= loglik.max(axis=1, keepdims=True)
            w = wk[None, :] * np.exp(loglik)
        else:
            halfwidth = self.noise[1]
            resid = np.abs(x2[:, None, :] - z[:, :, None])
            inside = (resid <= halfwidth).all(axis=2)
            w = wk[None, :] * inside
            empty = w.sum(axis=1) == 0.0
            if np.any(empty):
                w[empty] = wk
        w = w / w.sum(axis=1, keepdims=True)
        return z, w

    def predict_all(self, pair: PeriodPair, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        d = self.beta.size
        jprod = self.cfg.n_products
        two = rows.reshape(len(rows), 2, jprod, d)
        delta = two @ self.beta  # (n, 2, J)
        x2 = two[..., 1].reshape(len(rows), 2 * jprod)
        z_nodes, z_w = self._latent_nodes(x2)

        gl_x, gl_w = self._gl
        a0_nodes = 2.25 + 0.25 * gl_x  # U[2, 2.5]
        a0_w = gl_w
        if jprod > 2:
            rest_nodes = 0.25 * gl_x  # U[-0.25, 0.25] per product >= 3
            rest_w = gl_w
            rest_grid = np.array(np.meshgrid(*([rest_nodes] * (jprod - 2)),
                                             indexing="ij")).reshape(jprod - 2, -1).T
            rest_weights = np.prod(np.array(
                np.meshgrid(*([rest_w] * (jprod - 2)), indexing="ij")
            ).reshape(jprod - 2, -1), axis=0)
        else:
            rest_grid = np.zeros((1, 0))
            rest_weights = np.array([1.0])

        out = np.zeros((len(rows), jprod))
        shift = np.zeros((len(rows), jprod))
        for kz in range(z_nodes.shape[1]):
            shift[:, 1] = np.maximum(z_nodes[:, kz], 0.0)
            wz = z_w[:, kz]
            for a0, wa0 in zip(a0_nodes, a0_w):
                for rest, wr in zip(rest_grid, rest_weights):
                    shift[:, 2:] = rest
                    logits = a0 * (delta + shift[:, None, :])
                    p = _softmax(logits)
                    out += (wz * wa0 * wr)[:, None] * (p[:, 0, :] - p[:, 1, :])
        return out if pair.is_canonical else -out

    def predict(self, j: int, pair: PeriodPair, rows: np.ndarray) -> np.ndarray:
        return self.predict_all(pair, rows)[:, j]


# -- first-stage evaluation ----------------------------------------


def first_stage_mse(data: PanelDataset, estimates, truth_source,
                    smoother, pairs=None) -> float:
    """Mean squared error of smoothed estimated vs true differences.

    Averages (G(estimate) - G(truth))^2 over agents, products, and
    both orderings of each canonical pair at the realized covariates.
    """
    if not isinstance(smoother, Smoother):
        smoother = Smoother(smoother)
    if pairs is None:
        pairs = select_pairs(data.n_periods, "all")
    total, count = 0.0, 0
    for pair in pairs:
        cp = pair.canonical
        rows = stack_pair(data, cp)
        for j in range(data.n_products):
            g_hat = estimates.predict(j, cp, rows)
            g_true = truth_source.predict(j, cp, rows)
            for sign in (1.0, -1.0):
                diff = smoother(sign * g_hat) - smoother(sign * g_true)
                total += float(diff @ diff)
                count += diff.size
    return total / count


def run_first_stage_mc(cfg: DgpConfig, spec: RegressorSpec, n_reps: int,
                       smoothers=("indicator", "positive-part", "adjusted-cdf"),
                       pairs: str = "auto", truth_nodes: int = 8,
                       jobs: int = 1) -> dict:
    """Monte Carlo of first-stage accuracy, one MSE per smoother and rep."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_reps)
    args = [
        (replace(cfg, seed=int(s.generate_state(1)[0])),
         replace(spec, seed=int(s.generate_state(2)[1])),
         smoothers, pairs, truth_nodes)
        for s in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_first_stage_rep, args))
    else:
        rows = [_first_stage_rep(a) for a in args]
    per_smoother = {kind: np.array([r[kind] for r in rows]) for kind in smoothers}
    return {
        "mean_mse": {kind: float(v.mean()) for kind, v in per_smoother.items()},
        "max_mse": {kind: float(v.max()) for kind, v in per_smoother.items()},
        "per_rep": per_smoother,
        "n_reps": n_reps,
    }


def _first_stage_rep(args):
    cfg, spec, smoothers, pairs, truth_nodes = args
    data, _ = simulate(cfg)
    est = fit_prob_diffs(data, spec, pairs)
    truth = TrueProbDiffs(cfg, nodes=truth_nodes)
    return {kind: first_stage_mse(data, est, truth, kind) for kind in smoothers}


# -- least-squares baselines ---------------------------------------


class RankDeficientError(ValueError):
    """Raised when the regression design matrix is rank deficient."""


@dataclass(frozen=True)
class OlsResult:
    direction: np.ndarray
    coefficients: np.ndarray
    fixed_effects: bool
    residual_ss: float


def _check_rank(x: np.ndarray, names: list[str]):
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        # QR with column pivoting: the trailing pivots carry the
        # (near) linearly dependent columns.
        from scipy.linalg import qr

        _, _, piv = qr(x, mode="economic", pivoting=True)
        bad = sorted(names[c] for c in piv[rank:])
        raise RankDeficientError(
            f"design matrix is rank deficient; collinear columns: {', '.join(bad)}"
        )


def ols_baseline(data: PanelDataset, with_fixed_effects: bool = False) -> OlsResult:
    """Pooled linear probability regression of outcomes on covariates.

    The plain variant includes an intercept.  The fixed-effects
    variant demeans outcomes and covariates within each
    (agent, product) cell across periods, absorbing per-cell additive
    effects.  The slope vector is also returned normalized to unit
    length for comparability with the set estimator's midpoint.
    """
    n, j, t, d = data.covariates.shape
    x = data.covariates.reshape(n * j * t, d)
    y = data.outcomes.reshape(n * j * t)
    names = [f"x{k + 1}" for k in range(d)]
    if with_fixed_effects:
        xc = data.covariates - data.covariates.mean(axis=2, keepdims=True)
        yc = data.outcomes - data.outcomes.mean(axis=2, keepdims=True)
        design = xc.reshape(n * j * t, d)
        target = yc.reshape(n * j * t)
        _check_rank(design, names)
        coef, res, *_ = np.linalg.lstsq(design, target, rcond=None)
        slopes = coef
    else:
        design = np.column_stack([np.ones(len(x)), x])
        target = y
        _check_rank(design, ["intercept"] + names)
        coef, res, *_ = np.linalg.lstsq(design, target, rcond=None)
        slopes = coef[1:]
    norm = np.linalg.norm(slopes)
    if norm == 0.0:
        raise RankDeficientError("all slope coefficients are zero; no direction")
    rss = float(res[0]) if np.size(res) else float(
        np.sum((target - design @ coef) ** 2)
    )
    return OlsResult(
        direction=slopes / norm,
        coefficients=slopes,
        fixed_effects=with_fixed_effects,
        residual_ss=rss,
    )


# -- full pipeline and Monte Carlo ---------------------------------


@dataclass(frozen=True)
class EstimatorSettings:
    """Everything the two-stage estimator needs besides the data.

    ``gamma`` picks the source of probability differences: ``"fit"``
    (first-stage regression), ``"oracle"`` (closed-form logit, only on
    the oracle design), or ``"true"`` (quadrature truth, baseline
    family).  ``cross_validated`` tunes the regressor spec on the
    dataset before the final fit.
    """

    gamma: str = "fit"
    regressor: RegressorSpec = field(default_factory=RegressorSpec)
    smoother: str = "adjusted-cdf"
    pairs: str = "auto"
    grid: GridConfig = field(default_factory=GridConfig)
    cross_validated: bool = False
    fit_all_products: bool = False
    pooled_first_stage: bool = False

    def __post_init__(self):
        if self.gamma not in ("fit", "oracle", "true"):
            raise ValueError("gamma must be one of 'fit', 'oracle', 'true'")


def _both_orders(pairs):
    out = []
    for p in pairs:
        out.append(p)
        out.append(p.reversed)
    return out


def estimate_dataset(data: PanelDataset, settings: EstimatorSettings,
                     dgp: DgpConfig | None = None):
    """Run the two-stage pipeline on one dataset.

    Returns the set-estimation result plus the probability-difference
    source (for reuse or persistence).  Oracle and quadrature sources
    need the generating configuration.
    """
    if isinstance(settings.pairs, str):
        canonical = select_pairs(data.n_periods, settings.pairs,
                                 seed=settings.regressor.seed)
    else:
        canonical = sorted({p.canonical for p in settings.pairs},
                           key=lambda p: (p.t, p.s))
    if settings.gamma == "oracle":
        if dgp is None:
            raise ValueError("oracle differences need the generating DgpConfig")
        source = LogitOracle(dgp)
    elif settings.gamma == "true":
        if dgp is None:
            raise ValueError("quadrature truth needs the generating DgpConfig")
        source = TrueProbDiffs(dgp)
    else:
        spec = settings.regressor
        if settings.cross_validated:
            spec = cross_validate(data, default_cv_grid(spec), canonical,
                                  seed=spec.seed)
        source = fit_prob_diffs(data, spec, canonical,
                                fit_all_products=settings.fit_all_products,
                                pooled=settings.pooled_first_stage)
    ev = CriterionEvaluator(
        data, source, smoother=settings.smoother, pairs=_both_orders(canonical),
    )
    result = estimate_set(ev, settings.grid)
    return result, source


@dataclass
class McReport:
    """Aggregate Monte Carlo metrics in the layout of the paper-style tables.

    Per-dimension rows: bias of the midpoint, upper and lower bounds,
    and mean set width.  Aggregates: root mean squared norm error and
    mean norm deviation of the midpoint (and of the bounds), summed
    absolute bias, the share of replications with every coefficient
    sign correct, and the share whose per-dimension bounds cover the
    true direction.
    """

    design: str
    n_reps: int
    n_failed: int
    bias_mid: np.ndarray
    bias_upper: np.ndarray
    bias_lower: np.ndarray
    mean_width: np.ndarray
    rmse: float
    mnd: float
    mad: float
    rmse_upper: float
    rmse_lower: float
    mnd_upper: float
    mnd_lower: float
    sign_rate: float
    coverage_rate: float
    slack: float
    ols_sign_rate: float | None = None
    ols_fe_sign_rate: float | None = None
    failures: tuple = ()
    per_rep: dict = field(default_factory=dict)

    def __post_init__(self):
        for rate in (self.sign_rate, self.coverage_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        for name in ("bias_mid", "bias_upper", "bias_lower", "mean_width",
                     "rmse", "mnd", "mad"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite metric {name}")

    def summary_text(self) -> str:
        d = len(self.bias_mid)
        lines = [
            f"design={self.design}  reps={self.n_reps}  failed={self.n_failed}"
            f"  slack={self.slack:.6g}",
            "metric      " + "".join(f"      b{k + 1}" for k in range(d)),
        ]
        for name, row in (("bias", self.bias_mid), ("upper bias", self.bias_upper),
                          ("lower bias", self.bias_lower), ("mean(u-l)", self.mean_width)):
            lines.append(f"{name:<12}" + "".join(f" {v:+8.4f}" for v in row))
        lines.append(f"rMSE        {self.rmse:8.4f}")
        lines.append(f"MND         {self.mnd:8.4f}")
        lines.append(f"MAD         {self.mad:8.4f}")
        lines.append(f"sign rate   {self.sign_rate:8.2%}")
        lines.append(f"coverage    {self.coverage_rate:8.2%}")
        if self.ols_sign_rate is not None:
            lines.append(f"OLS sign rate    {self.ols_sign_rate:8.2%}")
        if self.ols_fe_sign_rate is not None:
            lines.append(f"OLS-FE sign rate {self.ols_fe_sign_rate:8.2%}")
        return "\n".join(lines)

    def to_csv(self, path):
        import csv as _csv

        d = len(self.bias_mid)
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["metric"] + [f"b{k + 1}" for k in range(d)])
            w.writerow(["bias_mid"] + list(self.bias_mid))
            w.writerow(["bias_upper"] + list(self.bias_upper))
            w.writerow(["bias_lower"] + list(self.bias_lower))
            w.writerow(["mean_width"] + list(self.mean_width))
            for name in ("rmse", "mnd", "mad", "rmse_upper", "rmse_lower",
                         "mnd_upper", "mnd_lower", "sign_rate", "coverage_rate",
                         "slack"):
                w.writerow([name, getattr(self, name)])
            if self.ols_sign_rate is not None:
                w.writerow(["ols_sign_rate", self.ols_sign_rate])
            if self.ols_fe_sign_rate is not None:
                w.writerow(["ols_fe_sign_rate", self.ols_fe_sign_rate])
            w.writerow(["n_reps", self.n_reps])
            w.writerow(["n_failed", self.n_failed])


def _result_record(result: EstimationResult) -> dict:
    return {
        "beta_mid": result.beta_mid,
        "beta_upper": result.beta_upper,
        "beta_lower": result.beta_lower,
        "q_min": result.q_min,
        "converged": result.converged,
    }


def _mc_rep(args) -> dict:
    cfg, settings, with_ols = args
    data, truth = simulate(cfg)
    result, _ = estimate_dataset(data, settings, dgp=cfg)
    rec = _result_record(result)
    if with_ols:
        rec["ols"] = ols_baseline(data, with_fixed_effects=False).direction
        rec["ols_fe"] = ols_baseline(data, with_fixed_effects=True).direction
    return rec


def run_monte_carlo(cfg: DgpConfig, settings: EstimatorSettings, n_reps: int,
                    with_ols: bool = False, jobs: int = 1) -> McReport:
    """Replicate simulate -> first stage -> set estimate, then aggregate.

    Per-replication seeds derive from ``cfg.seed``, so reports are
    reproducible bit for bit (including under ``jobs > 1``; results
    aggregate in replication order).  A failed replication is recorded
    and excluded from the aggregates rather than aborting the run.
    """
    if n_reps < 1:
        raise ValueError("need at least one replication")
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_reps)
    args = []
    for s in seeds:
        st = s.generate_state(2)
        rep_cfg = replace(cfg, seed=int(st[0]))
        rep_settings = replace(
            settings, regressor=replace(settings.regressor, seed=int(st[1]))
        )
        args.append((rep_cfg, rep_settings, with_ols))

    records: list[dict | None] = [None] * n_reps
    failures = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(_mc_rep, a) for i, a in enumerate(args)}
            for i in range(n_reps):
                try:
                    records[i] = futures[i].result()
                except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                    failures.append((i, repr(exc)))
    else:
        for i, a in enumerate(args):
            try:
                records[i] = _mc_rep(a)
            except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                failures.append((i, repr(exc)))

    done = [r for r in records if r is not None]
    if not done:
        raise RuntimeError(f"all {n_reps} replications failed: {failures[:3]}")
    return _aggregate(done, failures, cfg, _slack_of(settings, cfg),
                      with_ols=with_ols)


def _aggregate(done: list[dict], failures, cfg: DgpConfig, slack: float,
               with_ols: bool = False) -> McReport:
    target = cfg.beta_direction

    def _stack(key):
        return np.array([r[key] for r in done])

    mids, uppers, lowers = _stack("beta_mid"), _stack("beta_upper"), _stack("beta_lower")
    # Bias-style metrics compare against the true direction flipped,
    # per replication, into the midpoint's hemisphere; the global sign
    # is not pinned down by the weak sign restrictions alone in
    # degenerate designs.  Sign and coverage rates use the raw truth.
    align = np.where(mids @ target >= 0.0, 1.0, -1.0)
    t_aligned = align[:, None] * target
    err_mid = mids - t_aligned
    err_up = uppers - t_aligned
    err_lo = lowers - t_aligned
    signs_ok = np.all(np.sign(mids) == np.sign(target), axis=1)
    covered = np.all((lowers <= target + 1e-12) & (target <= uppers + 1e-12), axis=1)

    bias_mid = err_mid.mean(axis=0)
    report = McReport(
        design=cfg.design,
        n_reps=len(done),
        n_failed=len(failures),
        bias_mid=bias_mid,
        bias_upper=err_up.mean(axis=0),
        bias_lower=err_lo.mean(axis=0),
        mean_width=(uppers - lowers).mean(axis=0),
        rmse=float(np.sqrt((np.linalg.norm(err_mid, axis=1) ** 2).mean())),
        mnd=float(np.linalg.norm(err_mid, axis=1).mean()),
        mad=float(np.abs(bias_mid).sum()),
        rmse_upper=float(np.sqrt((np.linalg.norm(err_up, axis=1) ** 2).mean())),
        rmse_lower=float(np.sqrt((np.linalg.norm(err_lo, axis=1) ** 2).mean())),
        mnd_upper=float(np.linalg.norm(err_up, axis=1).mean()),
        mnd_lower=float(np.linalg.norm(err_lo, axis=1).mean()),
        sign_rate=float(signs_ok.mean()),
        coverage_rate=float(covered.mean()),
        slack=slack,
        failures=tuple(failures),
        per_rep={
            "beta_mid": mids, "beta_upper": uppers, "beta_lower": lowers,
            "q_min": np.array([r["q_min"] for r in done]),
            "converged": np.array([r["converged"] for r in done]),
        },
    )
    if with_ols:
        ols_ok = np.array([
            np.all(np.sign(r["ols"]) == np.sign(target)) for r in done
        ])
        fe_ok = np.array([
            np.all(np.sign(r["ols_fe"]) == np.sign(target)) for r in done
        ])
        report.ols_sign_rate = float(ols_ok.mean())
        report.ols_fe_sign_rate = float(fe_ok.mean())
        report.per_rep["ols"] = _stack("ols")
        report.per_rep["ols_fe"] = _stack("ols_fe")
    return report


def _slack_of(settings: EstimatorSettings, cfg: DgpConfig) -> float:
    from .optimizer import resolve_slack

    return resolve_slack(settings.grid, cfg.n_agents)


def _sweep_rep(args) -> list[dict]:
    cfg, settings, slacks = args
    data, _ = simulate(cfg)
    if isinstance(settings.pairs, str):
        canonical = select_pairs(data.n_periods, settings.pairs,
                                 seed=settings.regressor.seed)
    else:
        canonical = sorted({p.canonical for p in settings.pairs},
                           key=lambda p: (p.t, p.s))
    source = fit_prob_diffs(data, settings.regressor, canonical,
                            fit_all_products=settings.fit_all_products,
                            pooled=settings.pooled_first_stage)
    ev = CriterionEvaluator(data, source, smoother=settings.smoother,
                            pairs=_both_orders(canonical))
    out = []
    for c in slacks:
        grid = replace(settings.grid, slack=float(c))
        out.append(_result_record(estimate_set(ev, grid)))
    return out


def run_slack_sweep(cfg: DgpConfig, settings: EstimatorSettings,
                    slacks: Sequence[float], n_reps: int,
                    jobs: int = 1) -> dict[float, McReport]:
    """Monte Carlo over several set-estimation levels, sharing fits.

    The first stage and criterion are computed once per replication
    and reused for every level c, so sweeping the level costs only the
    extra grid searches.  Returns one report per level.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_reps)
    args = []
    for s in seeds:
        st = s.generate_state(2)
        rep_cfg = replace(cfg, seed=int(st[0]))
        rep_settings = replace(
            settings, regressor=replace(settings.regressor, seed=int(st[1]))
        )
        args.append((rep_cfg, rep_settings, tuple(float(c) for c in slacks)))

    rows: list[list[dict] | None] = [None] * n_reps
    failures = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(_sweep_rep, a) for i, a in enumerate(args)}
            for i in range(n_reps):
                try:
                    rows[i] = futures[i].result()
                except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                    failures.append((i, repr(exc)))
    else:
        for i, a in enumerate(args):
            try:
                rows[i] = _sweep_rep(a)
            except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                failures.append((i, repr(exc)))

    good = [r for r in rows if r is not None]
    if not good:
        raise RuntimeError(f"all {n_reps} replications failed: {failures[:3]}")
    reports = {}
    for k, c in enumerate(slacks):
        reports[float(c)] = _aggregate([r[k] for r in good], failures, cfg,
                                       float(c))
    return reports
