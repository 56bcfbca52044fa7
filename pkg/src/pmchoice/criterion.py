"""Criterion function for the second estimation stage.

The estimator turns weak multivariate monotonicity into a penalty: if
the choice probability of product j rose between two periods, then it
cannot be that j's covariate index weakly fell while every other
product's index weakly rose.  The criterion accumulates, over
products, ordered period pairs, and agents, a smoothed magnitude of
the observed probability increase times the indicator of that
forbidden sign configuration.  It is nonnegative, zero at the true
parameter direction, invariant to positive rescaling of the
parameter, and piecewise constant: between sign flips of the
covariate-difference indexes it has zero derivative.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# The sandboxed TBB runtime predates what numba wants; it falls back
# to another threading layer and the warning is pure noise.
warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

from numba import njit, prange
from scipy.special import erf

from .data import PanelDataset, PeriodPair, covariate_diff, stack_pair

__all__ = [
    "Smoother",
    "smooth",
    "sign_restriction",
    "sign_restriction_subset",
    "CriterionEvaluator",
    "criterion_value",
    "criterion_value_reference",
    "subset_criterion_value",
]

SMOOTHER_KINDS = ("indicator", "positive-part", "adjusted-cdf")
_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class Smoother:
    """One-sided sign-preserving transform of probability differences.

    Every kind satisfies G(z) = 0 for z <= 0 and G(z) > 0 for z > 0.
    ``"indicator"`` is the raw event 1{z > 0}; ``"positive-part"`` is
    max(z, 0), Lipschitz but unbounded; ``"adjusted-cdf"`` is
    2*Phi(max(z, 0)) - 1 with Phi the standard normal CDF, Lipschitz
    and bounded by 1, which both damps sign errors of small estimated
    differences and caps the influence of large ones.
    """

    kind: str = "adjusted-cdf"

    def __post_init__(self):
        if self.kind not in SMOOTHER_KINDS:
            raise ValueError(
                f"unknown smoother {self.kind!r}; expected one of {SMOOTHER_KINDS}"
            )

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "indicator":
            return (z > 0.0).astype(np.float64)
        if self.kind == "positive-part":
            return np.maximum(z, 0.0)
        # 2*Phi(max(z,0)) - 1 == erf(max(z,0)/sqrt(2)), accurate to
        # machine precision, far below the 1e-12 contract.
        return erf(np.maximum(z, 0.0) / _SQRT2)


def smooth(smoother, z):
    """Evaluate a smoother (instance or kind name) at z."""
    if not isinstance(smoother, Smoother):
        smoother = Smoother(smoother)
    return smoother(z)


def sign_restriction(delta_x, j: int, beta) -> np.ndarray:
    """Indicator of the sign configuration forbidden for product j.

    ``delta_x`` holds per-product covariate differences between two
    periods, shape (J, D) or batched (N, J, D).  The result is 1 when
    product j's index difference is <= 0 while every other product's
    index difference is >= 0, with weak inequalities exactly: a zero
    difference satisfies both sides, so an all-zero ``delta_x`` yields
    1.  Invariant under ``beta -> c * beta`` for any c > 0.
    """
    dx = np.asarray(delta_x, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    batched = dx.ndim == 3
    if not batched:
        dx = dx[None]
    n, n_products, _ = dx.shape
    if not 0 <= j < n_products:
        raise ValueError(f"product {j} out of range for J={n_products}")
    s = dx @ beta
    others = np.ones(n, dtype=bool)
    for k in range(n_products):
        if k != j:
            others &= s[:, k] >= 0.0
    out = ((s[:, j] <= 0.0) & others).astype(np.float64)
    return out if batched else float(out[0])


def sign_restriction_subset(delta_x, products: Iterable[int], beta) -> np.ndarray:
    """Subset version of the forbidden-sign-configuration indicator.

    1 when the index differences of every product in ``products`` are
    <= 0 while those of every product outside it are >= 0.  With a
    singleton subset this reduces to :func:`sign_restriction`.
    """
    dx = np.asarray(delta_x, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    batched = dx.ndim == 3
    if not batched:
        dx = dx[None]
    subset = frozenset(int(p) for p in products)
    n, n_products, _ = dx.shape
    if not subset or not subset <= set(range(n_products)):
        raise ValueError("subset must be a nonempty subset of product indices")
    s = dx @ beta
    out = np.ones(n, dtype=bool)
    for k in range(n_products):
        if k in subset:
            out &= s[:, k] <= 0.0
        else:
            out &= s[:, k] >= 0.0
    out = out.astype(np.float64)
    return out if batched else float(out[0])


@njit(parallel=True, cache=True)
def _criterion_kernel(dx, wpos, wneg, betas, block):  # pragma: no cover - jitted
    npts = betas.shape[0]
    n, nprod, ndim = dx.shape
    out = np.zeros(npts)
    nblocks = (npts + block - 1) // block
    for nb in prange(nblocks):
        c0 = nb * block
        w = min(c0 + block, npts) - c0
        acc = np.zeros(w)
        s = np.empty((w, nprod))
        for i in range(n):
            for c in range(w):
                cle = 0
                cge = 0
                for j in range(nprod):
                    t = 0.0
                    for d in range(ndim):
                        t += dx[i, j, d] * betas[c0 + c, d]
                    s[c, j] = t
                    cle += t <= 0.0
                    cge += t >= 0.0
                for j in range(nprod):
                    le = s[c, j] <= 0.0
                    ge = s[c, j] >= 0.0
                    hit_pos = le and (cge - ge == nprod - 1)
                    hit_neg = ge and (cle - le == nprod - 1)
                    acc[c] += wpos[i, j] * hit_pos + wneg[i, j] * hit_neg
            # Sum over agents runs in a fixed order within a single
            # thread per grid point, so results are reproducible no
            # matter how blocks are scheduled.
        for c in range(w):
            out[c0 + c] = acc[c] / n
    return out


@dataclass(frozen=True)
class _PairTerms:
    """Precomputed per-pair arrays driving criterion evaluation.

    ``delta_x`` is X(t) - X(s) for the canonical (t < s) ordering.
    ``w_forward`` weights the (t, s) direction: the smoothed estimated
    probability differences; ``w_backward`` weights (s, t), i.e. the
    smoothed negated differences paired with negated covariate
    differences inside the kernel.
    """

    pair: PeriodPair
    delta_x: np.ndarray
    gamma: np.ndarray
    w_forward: np.ndarray
    w_backward: np.ndarray


class CriterionEvaluator:
    """Sample criterion with all data-dependent terms precomputed.

    Parameters
    ----------
    data : PanelDataset
        The estimation panel.
    gamma : object
        Source of intertemporal choice-probability differences: any
        object with ``predict(j, pair, rows) -> (N,)`` returning
        values in [-1, 1] for rows stacked in the pair's canonical
        order (fitted first-stage estimates or a closed-form oracle).
    smoother : Smoother or str
        One-sided sign-preserving transform applied to the estimated
        differences.
    pairs : sequence of PeriodPair, optional
        Ordered pairs whose terms enter the aggregate.  Defaults to
        both orderings of every unordered pair of periods.
    products : sequence of int, optional
        Products whose terms enter the aggregate (the sign restriction
        always involves all products).  Defaults to all.

    Evaluation is deterministic given inputs, and the evaluator is
    immutable: many parameter points can be evaluated concurrently.
    """

    def __init__(self, data: PanelDataset, gamma, smoother="adjusted-cdf",
                 pairs: Sequence[PeriodPair] | None = None,
                 products: Sequence[int] | None = None,
                 block: int = 16):
        if not isinstance(smoother, Smoother):
            smoother = Smoother(smoother)
        self.smoother = smoother
        self.n_agents = data.n_agents
        self.n_products = data.n_products
        self.n_covariates = data.n_covariates
        self._block = int(block)

        if pairs is None:
            pairs = [
                PeriodPair(t, s)
                for t in range(data.n_periods)
                for s in range(data.n_periods)
                if t != s
            ]
        include = set()
        for p in pairs:
            data.check_pair(p)
            include.add((p.t, p.s))
        if products is None:
            products = range(data.n_products)
        included_products = sorted({int(j) for j in products})
        for j in included_products:
            data.check_product(j)
        self.included_pairs = tuple(sorted(include))
        self.included_products = tuple(included_products)

        canonical = sorted({p.canonical for p in pairs}, key=lambda p: (p.t, p.s))
        terms = []
        for cp in canonical:
            rows = stack_pair(data, cp)
            g = np.empty((data.n_agents, data.n_products))
            for j in range(data.n_products):
                g[:, j] = gamma.predict(j, cp, rows)
            g = np.clip(g, -1.0, 1.0)
            wf = np.zeros_like(g)
            wb = np.zeros_like(g)
            fwd = (cp.t, cp.s) in include
            bwd = (cp.s, cp.t) in include
            for j in included_products:
                if fwd:
                    wf[:, j] = smoother(g[:, j])
                if bwd:
                    wb[:, j] = smoother(-g[:, j])
            terms.append(_PairTerms(
                pair=cp,
                delta_x=np.ascontiguousarray(covariate_diff(data, cp)),
                gamma=g,
                w_forward=np.ascontiguousarray(wf),
                w_backward=np.ascontiguousarray(wb),
            ))
        self._terms = tuple(terms)

    def evaluate(self, betas) -> np.ndarray:
        """Criterion at one parameter point or a batch.

        Accepts shape (D,) or (m, D); parameter points need not be
        normalized (only index-difference signs matter).  Returns a
        scalar or an (m,) array.
        """
        b = np.asarray(betas, dtype=np.float64)
        scalar = b.ndim == 1
        b = np.ascontiguousarray(np.atleast_2d(b))
        if b.shape[1] != self.n_covariates:
            raise ValueError(f"expected parameter dimension {self.n_covariates}")
        total = np.zeros(b.shape[0])
        for term in self._terms:
            total += _criterion_kernel(
                term.delta_x, term.w_forward, term.w_backward, b, self._block
            )
        return float(total[0]) if scalar else total

    def max_term(self, beta) -> float:
        """Largest single smoothed-difference x restriction term.

        Zero exactly when every term of the criterion vanishes at
        ``beta`` (the term-by-term identification check).
        """
        beta = np.asarray(beta, dtype=np.float64)
        worst = 0.0
        for term in self._terms:
            s = term.delta_x @ beta
            le = s <= 0.0
            ge = s >= 0.0
            n_ge = ge.sum(axis=1, keepdims=True)
            n_le = le.sum(axis=1, keepdims=True)
            nprod = s.shape[1]
            lam_f = le & (n_ge - ge == nprod - 1)
            lam_b = ge & (n_le - le == nprod - 1)
            worst = max(worst, float((term.w_forward * lam_f).max(initial=0.0)))
            worst = max(worst, float((term.w_backward * lam_b).max(initial=0.0)))
        return worst


def criterion_value(ev: CriterionEvaluator, beta) -> float:
    """Convenience wrapper: the criterion at a single point."""
    return float(ev.evaluate(np.asarray(beta, dtype=np.float64)))


def criterion_value_reference(ev: CriterionEvaluator, beta) -> float:
    """Plain-numpy evaluation used as an independent cross-check.

    Computes the same aggregate as :meth:`CriterionEvaluator.evaluate`
    with vectorized boolean algebra instead of the compiled kernel.
    """
    beta = np.asarray(beta, dtype=np.float64)
    total = 0.0
    for term in ev._terms:
        s = term.delta_x @ beta
        nprod = s.shape[1]
        le = s <= 0.0
        ge = s >= 0.0
        n_ge = ge.sum(axis=1, keepdims=True)
        n_le = le.sum(axis=1, keepdims=True)
        lam_f = le & (n_ge - ge == nprod - 1)
        lam_b = ge & (n_le - le == nprod - 1)
        total += (term.w_forward * lam_f).sum() / ev.n_agents
        total += (term.w_backward * lam_b).sum() / ev.n_agents
    return float(total)


def subset_criterion_value(ev: CriterionEvaluator, beta, products: Iterable[int]) -> float:
    """Aggregate criterion term for a product subset (not in the default sum).

    For each included ordered pair, penalizes the event that the
    estimated probability differences of every product in the subset
    are jointly positive (smoothed through their minimum) while the
    subset's forbidden sign configuration holds.  Singleton subsets
    reproduce the corresponding per-product terms of the default
    criterion.
    """
    beta = np.asarray(beta, dtype=np.float64)
    subset = sorted({int(p) for p in products})
    if not subset or min(subset) < 0 or max(subset) >= ev.n_products:
        raise ValueError("subset must be a nonempty subset of product indices")
    total = 0.0
    for term in ev._terms:
        lam_f = sign_restriction_subset(term.delta_x, subset, beta)
        lam_b = sign_restriction_subset(-term.delta_x, subset, beta)
        g_min_f = term.gamma[:, subset].min(axis=1)
        g_min_b = (-term.gamma[:, subset]).min(axis=1)
        if (term.pair.t, term.pair.s) in ev.included_pairs:
            total += float(ev.smoother(g_min_f) @ lam_f) / ev.n_agents
        if (term.pair.s, term.pair.t) in ev.included_pairs:
            total += float(ev.smoother(g_min_b) @ lam_b) / ev.n_agents
    return total
