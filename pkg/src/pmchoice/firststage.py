"""First-stage nonparametric regression of outcome differences.

For each product and period pair, the intertemporal difference in
outcomes is regressed on the stacked two-period covariates, giving an
estimate of the conditional choice-probability difference as a
function of both periods' characteristics.  Only canonical (t < s)
pairs and all but the last product need fitting: reversing a pair
negates the target, and in binary mode without an outside option the
per-period probabilities sum to one, so the differences sum to zero
across products and the last one is minus the sum of the others.

The default regressor is a single-hidden-layer network (sigmoid
units, linear output, squared-error loss with a ridge penalty)
trained by full-batch gradient descent with an adaptive step size.  A
product-Gaussian-kernel local-averaging regressor is available as an
architecture-independent alternative, and a small cross-validation
front end selects hyperparameters.  All fits are deterministic given
the data, the spec and its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import PanelDataset, PeriodPair, outcome_diff, select_pairs, stack_pair

__all__ = [
    "RegressorSpec",
    "ShallowNetwork",
    "KernelRegressor",
    "ConstantPredictor",
    "ProbDiffEstimates",
    "fit_prob_diffs",
    "cross_validate",
    "default_cv_grid",
    "save_estimates",
    "load_estimates",
]

_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RegressorSpec:
    """Hyperparameters and training controls for a first-stage fit.

    ``kind`` selects the regressor: ``"network"`` (single hidden
    layer) or ``"kernel"`` (Nadaraya-Watson with a product Gaussian
    kernel).  ``bandwidth`` multiplies the rule-of-thumb bandwidth of
    the kernel regressor.  ``ridge`` penalizes squared network weights
    (biases exempt).  ``cv_folds`` only matters to
    :func:`cross_validate`.
    """

    kind: str = "network"
    hidden_units: int = 16
    ridge: float = 1e-4
    bandwidth: float = 1.0
    cv_folds: int = 5
    max_epochs: int = 300
    learning_rate: float = 0.5
    patience: int = 30
    tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("network", "kernel"):
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        if self.hidden_units < 1 or self.bandwidth <= 0 or self.ridge < 0:
            raise ValueError("hidden_units must be >= 1, bandwidth > 0, ridge >= 0")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.max_epochs < 1 or self.learning_rate <= 0 or self.patience < 1:
            raise ValueError("bad training controls")


def _standardize_fit(x: np.ndarray):
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    return mean, sd


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class ShallowNetwork:
    """Single-hidden-layer regressor trained by full-batch descent.

    Features are standardized internally (the training-sample moments
    are stored and reused at prediction time).  The step size grows
    slightly after every accepted step and halves with rollback after
    a rejected one, so the training loss never increases; training
    stops on a patience rule, on a vanishing step, or at the epoch cap.
    """

    def __init__(self, spec: RegressorSpec):
        self.spec = spec
        self.mean = None
        self.sd = None
        self.params = None
        self.n_features = None
        self.train_loss_path = None
        self.degenerate = False

    # -- parameter bookkeeping ------------------------------------
    @staticmethod
    def init_params(n_features: int, hidden: int, rng: np.random.Generator):
        a1 = np.sqrt(6.0 / (n_features + hidden))
        a2 = np.sqrt(6.0 / (hidden + 1))
        return {
            "w1": rng.uniform(-a1, a1, size=(n_features, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.uniform(-a2, a2, size=hidden),
            "b2": np.zeros(1),
        }

    @staticmethod
    def pack(params):
        return np.concatenate([params["w1"].ravel(), params["b1"],
                               params["w2"], params["b2"]])

    @staticmethod
    def unpack(vec, n_features, hidden):
        i0 = n_features * hidden
        return {
            "w1": vec[:i0].reshape(n_features, hidden),
            "b1": vec[i0:i0 + hidden],
            "w2": vec[i0 + hidden:i0 + 2 * hidden],
            "b2": vec[i0 + 2 * hidden:],
        }

    @staticmethod
    def loss_only(vec, x, y, hidden, ridge):
        """Penalized mean squared error (forward pass only)."""
        n, p = x.shape
        pr = ShallowNetwork.unpack(vec, p, hidden)
        z = _sigmoid(x @ pr["w1"] + pr["b1"])
        resid = z @ pr["w2"] + pr["b2"][0] - y
        loss = float(resid @ resid) / n
        return loss + ridge * (float(np.sum(pr["w1"] ** 2)) + float(pr["w2"] @ pr["w2"]))

    @staticmethod
    def loss_and_grad(vec, x, y, hidden, ridge):
        """Penalized mean squared error and its parameter gradient.

        Used directly by the finite-difference gradient checks; the
        gradient is with respect to the packed parameter vector.
        """
        n, p = x.shape
        pr = ShallowNetwork.unpack(vec, p, hidden)
        act = x @ pr["w1"] + pr["b1"]
        z = _sigmoid(act)
        yhat = z @ pr["w2"] + pr["b2"][0]
        resid = yhat - y
        loss = float(resid @ resid) / n
        loss += ridge * (float(np.sum(pr["w1"] ** 2)) + float(pr["w2"] @ pr["w2"]))
        r = (2.0 / n) * resid
        g_w2 = z.T @ r + 2.0 * ridge * pr["w2"]
        g_b2 = np.array([r.sum()])
        da = np.outer(r, pr["w2"]) * z * (1.0 - z)
        g_w1 = x.T @ da + 2.0 * ridge * pr["w1"]
        g_b1 = da.sum(axis=0)
        grad = np.concatenate([g_w1.ravel(), g_b1, g_w2, g_b2])
        return loss, grad

    # -- training --------------------------------------------------
    def fit(self, x: np.ndarray, y: np.ndarray) -> "ShallowNetwork":
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.n_features = x.shape[1]
        self.mean, self.sd = _standardize_fit(x)
        xs = (x - self.mean) / self.sd
        rng = np.random.default_rng(spec.seed)
        vec = self.pack(self.init_params(self.n_features, spec.hidden_units, rng))

        lr = spec.learning_rate
        loss, grad = self.loss_and_grad(vec, xs, y, spec.hidden_units, spec.ridge)
        path = [loss]
        streak = 0
        for _ in range(spec.max_epochs):
            stepped = False
            while lr > 1e-14:
                trial = vec - lr * grad
                trial_loss, trial_grad = self.loss_and_grad(
                    trial, xs, y, spec.hidden_units, spec.ridge
                )
                if trial_loss <= loss:
                    stepped = True
                    break
                lr *= 0.5
            if not stepped:
                break
            improvement = loss - trial_loss
            vec, loss, grad = trial, trial_loss, trial_grad
            lr *= 1.1
            path.append(loss)
            if improvement <= spec.tol * max(1.0, loss):
                streak += 1
                if streak >= spec.patience:
                    break
            else:
                streak = 0
        self.params = self.unpack(vec, self.n_features, spec.hidden_units)
        self.train_loss_path = np.asarray(path)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        xs = (x - self.mean) / self.sd
        z = _sigmoid(xs @ self.params["w1"] + self.params["b1"])
        return z @ self.params["w2"] + self.params["b2"][0]


class KernelRegressor:
    """Nadaraya-Watson local averaging with a product Gaussian kernel.

    Bandwidths follow a rule of thumb on standardized features,
    n^(-1/(p+4)) per dimension, times the spec's ``bandwidth``
    multiplier.  Query points far from all training points fall back
    to the global training mean.
    """

    def __init__(self, spec: RegressorSpec):
        self.spec = spec
        self.mean = None
        self.sd = None
        self.x_train = None
        self.y_train = None
        self.h = None
        self.degenerate = False

    def fit(self, x: np.ndarray, y: np.ndarray) -> "KernelRegressor":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.mean, self.sd = _standardize_fit(x)
        self.x_train = (x - self.mean) / self.sd
        self.y_train = y
        n, p = x.shape
        self.h = self.spec.bandwidth * n ** (-1.0 / (p + 4))
        return self

    def predict(self, x: np.ndarray, chunk: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        xs = (x - self.mean) / self.sd
        out = np.empty(len(xs))
        fallback = float(self.y_train.mean())
        inv_two_h2 = 0.5 / (self.h * self.h)
        for c0 in range(0, len(xs), chunk):
            xq = xs[c0:c0 + chunk]
            d2 = ((xq[:, None, :] - self.x_train[None, :, :]) ** 2).sum(axis=2)
            logw = -d2 * inv_two_h2
            logw -= logw.max(axis=1, keepdims=True)
            w = np.exp(logw)
            denom = w.sum(axis=1)
            num = w @ self.y_train
            res = np.where(denom > 0.0, num / np.where(denom > 0.0, denom, 1.0), fallback)
            out[c0:c0 + chunk] = res
        return out


class ConstantPredictor:
    """Fallback for degenerate regressions with a zero-variance target."""

    def __init__(self, value: float):
        self.value = float(value)
        self.degenerate = True

    def fit(self, x, y):
        return self

    def predict(self, x) -> np.ndarray:
        return np.full(len(x), self.value)


def _make_regressor(spec: RegressorSpec):
    return KernelRegressor(spec) if spec.kind == "kernel" else ShallowNetwork(spec)


@dataclass
class ProbDiffEstimates:
    """Fitted choice-probability-difference regressors for a panel.

    ``fits`` maps (product, canonical pair key) to a predictor over
    rows stacked in that pair's order (earlier period first, see
    :func:`pmchoice.data.stack_pair`).  Queries resolve missing
    entries by construction: a reversed pair negates the prediction of
    its canonical pair, and when ``derive_last`` is set the last
    product is minus the sum of the fitted products' predictions
    (valid because binary choices without an outside option sum to one
    per period).  All predictions are clipped to [-1, 1].

    In ``pooled`` mode there is a single regressor per product,
    trained on the stacked rows of every selected pair: the
    probability difference is one stationary function of the
    two-period covariates, so long panels can trade the per-pair fits
    for one fit on many times more rows.
    """

    n_products: int
    pairs: tuple
    fits: dict
    spec: RegressorSpec
    derive_last: bool
    pooled: bool = False
    insample_mse: dict = field(default_factory=dict)
    degenerate_fits: tuple = ()

    def _canonical_key(self, pair: PeriodPair):
        cp = pair.canonical
        return (cp.t, cp.s)

    def predict(self, j: int, pair: PeriodPair, rows: np.ndarray) -> np.ndarray:
        """Estimated probability difference for product j and a pair.

        ``rows`` must be stacked in the *canonical* order of the
        unordered pair; querying the reversed ordering flips the sign
        of the prediction, so predict(j, (t,s), rows) is exactly the
        negative of predict(j, (s,t), rows).
        """
        if not isinstance(pair, PeriodPair):
            pair = PeriodPair(*pair)
        key = self._canonical_key(pair)
        if key not in self.pairs:
            raise KeyError(f"no estimate for period pair {key}")
        sign = 1.0 if pair.is_canonical else -1.0
        rows = np.asarray(rows, dtype=np.float64)
        fit_key = j if self.pooled else (j, key)
        if fit_key in self.fits:
            raw = np.clip(self.fits[fit_key].predict(rows), -1.0, 1.0)
        elif self.derive_last and j == self.n_products - 1:
            raw = np.zeros(len(rows))
            for k in range(self.n_products - 1):
                other = k if self.pooled else (k, key)
                raw -= np.clip(self.fits[other].predict(rows), -1.0, 1.0)
        else:
            raise KeyError(f"no estimate for product {j} and pair {key}")
        return np.clip(sign * raw, -1.0, 1.0)


def _products_to_fit(data: PanelDataset, fit_all: bool = False) -> tuple[range, bool]:
    derive_last = (
        not fit_all
        and data.outcome_kind == "choices"
        and not data.outside_option
        and data.n_products > 1
    )
    fitted = range(data.n_products - 1) if derive_last else range(data.n_products)
    return fitted, derive_last


def fit_prob_diffs(data: PanelDataset, spec: RegressorSpec | None = None,
                   pairs: str | Sequence[PeriodPair] = "auto",
                   fit_all_products: bool = False,
                   pooled: bool = False) -> ProbDiffEstimates:
    """Fit all first-stage regressions for a dataset.

    ``pairs`` is a policy string understood by
    :func:`pmchoice.data.select_pairs` or an explicit sequence of
    period pairs (reduced to canonical orderings).  One regressor is
    fitted per (product, canonical pair); zero-variance targets get a
    flagged constant predictor instead of failing.  Per-fit seeds are
    derived from ``spec.seed``, so results are reproducible and
    independent of any execution order.

    By default the last product is not fitted when the outcome
    differences must sum to zero across products (binary choices, no
    outside option); its predictor is derived from the others.  With
    ``fit_all_products`` every product gets its own regression, which
    avoids stacking the other fits' errors onto the last product at
    the cost of one more fit per pair.

    ``pooled`` stacks the rows of all selected pairs into a single
    regression per product, treating the probability difference as the
    same stationary function of the two-period covariates across
    pairs.  With few agents and many periods this multiplies the
    effective sample size of each fit and is the practical choice.
    """
    spec = spec or RegressorSpec()
    if isinstance(pairs, str):
        pair_list = select_pairs(data.n_periods, pairs, seed=spec.seed)
    else:
        pair_list = sorted({p.canonical for p in pairs}, key=lambda p: (p.t, p.s))
        for p in pair_list:
            data.check_pair(p)
    fitted_products, derive_last = _products_to_fit(data, fit_all_products)
    fits, mses, degenerate = {}, {}, []

    if pooled:
        x = np.vstack([stack_pair(data, p) for p in pair_list])
        seeds = np.random.SeedSequence(spec.seed).generate_state(data.n_products)
        for j in fitted_products:
            y = np.concatenate([outcome_diff(data, j, p) for p in pair_list])
            if np.all(y == y[0]):
                model = ConstantPredictor(y[0])
                degenerate.append(j)
            else:
                model = _make_regressor(replace(spec, seed=int(seeds[j]))).fit(x, y)
            fits[j] = model
            resid = model.predict(x) - y
            mses[j] = float(resid @ resid) / len(y)
    else:
        jobs = [(j, p) for p in pair_list for j in fitted_products]
        seeds = np.random.SeedSequence(spec.seed).generate_state(max(len(jobs), 1))
        for (j, pair), fit_seed in zip(jobs, seeds):
            x = stack_pair(data, pair)
            y = outcome_diff(data, j, pair)
            key = (j, (pair.t, pair.s))
            if np.all(y == y[0]):
                model = ConstantPredictor(y[0])
                degenerate.append(key)
            else:
                model = _make_regressor(replace(spec, seed=int(fit_seed))).fit(x, y)
            fits[key] = model
            resid = model.predict(x) - y
            mses[key] = float(resid @ resid) / len(y)
    return ProbDiffEstimates(
        n_products=data.n_products,
        pairs=tuple((p.t, p.s) for p in pair_list),
        fits=fits,
        spec=spec,
        derive_last=derive_last,
        pooled=pooled,
        insample_mse=mses,
        degenerate_fits=tuple(degenerate),
    )


def default_cv_grid(base: RegressorSpec | None = None) -> list[RegressorSpec]:
    """Desk-scale hyperparameter grid: units x ridge for networks."""
    base = base or RegressorSpec()
    if base.kind == "kernel":
        return [replace(base, bandwidth=b) for b in (0.5, 1.0, 2.0)]
    return [
        replace(base, hidden_units=h, ridge=r)
        for h in (4, 8, 16)
        for r in (0.0, 1e-4, 1e-2)
    ]


def cross_validate(data: PanelDataset, grid: Sequence[RegressorSpec],
                   pairs: str | Sequence[PeriodPair] = "auto",
                   seed: int = 0) -> RegressorSpec:
    """Pick the grid element with the lowest k-fold validation MSE.

    Agents are split into ``cv_folds`` folds (per the first grid
    element); every candidate is fitted on each training split for
    every (product, pair) regression and scored on the held-out
    agents.  Exact ties go to fewer hidden units, then a larger ridge
    penalty.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if isinstance(pairs, str):
        pair_list = select_pairs(data.n_periods, pairs, seed=seed)
    else:
        pair_list = sorted({p.canonical for p in pairs}, key=lambda p: (p.t, p.s))
    fitted_products, _ = _products_to_fit(data)
    k = grid[0].cv_folds
    n = data.n_agents
    if n < k:
        raise ValueError(f"need at least {k} agents for {k}-fold validation")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)

    scores = []
    for spec in grid:
        errs = []
        for fold in folds:
            mask = np.zeros(n, dtype=bool)
            mask[fold] = True
            for pair in pair_list:
                x = stack_pair(data, pair)
                for j in fitted_products:
                    y = outcome_diff(data, j, pair)
                    if np.all(y[~mask] == y[~mask][0]):
                        model = ConstantPredictor(y[~mask][0])
                    else:
                        model = _make_regressor(spec).fit(x[~mask], y[~mask])
                    resid = model.predict(x[mask]) - y[mask]
                    errs.append(float(resid @ resid) / mask.sum())
        scores.append(float(np.mean(errs)))
    best = min(scores)
    tied = [spec for spec, sc in zip(grid, scores) if sc == best]
    tied.sort(key=lambda s: (s.hidden_units, -s.ridge))
    return tied[0]


# -- persistence ---------------------------------------------------


def save_estimates(est: ProbDiffEstimates, path):
    """Dump fitted regressors (weights, standardization, spec) to .npz."""
    payload = {}
    meta = {
        "format": _FORMAT_VERSION,
        "n_products": est.n_products,
        "pairs": list(est.pairs),
        "derive_last": est.derive_last,
        "spec": est.spec.__dict__,
        "insample_mse": {f"{j}|{t}|{s}": v for (j, (t, s)), v in est.insample_mse.items()},
        "degenerate": [f"{j}|{t}|{s}" for j, (t, s) in est.degenerate_fits],
        "fits": {},
    }
    for (j, (t, s)), model in est.fits.items():
        tag = f"{j}|{t}|{s}"
        if isinstance(model, ConstantPredictor):
            meta["fits"][tag] = {"kind": "constant", "value": model.value}
        elif isinstance(model, KernelRegressor):
            meta["fits"][tag] = {"kind": "kernel", "h": model.h}
            payload[f"{tag}/mean"] = model.mean
            payload[f"{tag}/sd"] = model.sd
            payload[f"{tag}/x"] = model.x_train
            payload[f"{tag}/y"] = model.y_train
        else:
            meta["fits"][tag] = {"kind": "network",
                                 "hidden": model.spec.hidden_units}
            payload[f"{tag}/mean"] = model.mean
            payload[f"{tag}/sd"] = model.sd
            for name, arr in model.params.items():
                payload[f"{tag}/{name}"] = arr
    payload["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_estimates(path) -> ProbDiffEstimates:
    """Inverse of :func:`save_estimates`."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["meta"]).decode())
        if meta["format"] != _FORMAT_VERSION:
            raise ValueError(f"unsupported estimates file format {meta['format']}")
        spec = RegressorSpec(**meta["spec"])
        fits = {}
        for tag, info in meta["fits"].items():
            j, t, s = (int(v) for v in tag.split("|"))
            if info["kind"] == "constant":
                model = ConstantPredictor(info["value"])
            elif info["kind"] == "kernel":
                model = KernelRegressor(spec)
                model.mean = archive[f"{tag}/mean"]
                model.sd = archive[f"{tag}/sd"]
                model.x_train = archive[f"{tag}/x"]
                model.y_train = archive[f"{tag}/y"]
                model.h = info["h"]
            else:
                model = ShallowNetwork(replace(spec, hidden_units=info["hidden"]))
                model.mean = archive[f"{tag}/mean"]
                model.sd = archive[f"{tag}/sd"]
                model.n_features = model.mean.size
                model.params = {name: archive[f"{tag}/{name}"]
                                for name in ("w1", "b1", "w2", "b2")}
            fits[(j, (t, s))] = model
    return ProbDiffEstimates(
        n_products=meta["n_products"],
        pairs=tuple(tuple(p) for p in meta["pairs"]),
        fits=fits,
        spec=spec,
        derive_last=meta["derive_last"],
        insample_mse={
            (int(a), (int(b), int(c))): v
            for (a, b, c), v in (
                (k.split("|"), v) for k, v in meta["insample_mse"].items()
            )
        },
        degenerate_fits=tuple(
            (int(p[0]), (int(p[1]), int(p[2])))
            for p in (tag.split("|") for tag in meta["degenerate"])
        ),
    )
