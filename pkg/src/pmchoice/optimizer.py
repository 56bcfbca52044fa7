"""Adaptive-grid minimization over the unit sphere in angle space.

The criterion is piecewise constant with zero derivative almost
everywhere, so gradient methods are useless; the minimizer set is
found by recursively refined global grid search instead.  Each round
evaluates the criterion on a rectangular grid in angle space, keeps
the points in the lower quantile of the observed values (plus every
point within the set-estimation slack of the running minimum, which
is never discarded), takes the enclosing rectangle of the kept points
with wraparound handling in the periodic first angle, inflates it by
a buffer, and re-grids.  Refinement stops once the rectangle's
geodesic diameter reaches the requested precision.

The returned enclosures are conservative: every evaluated point whose
value ties the final minimum (or lies within the slack of it) is
inside the corresponding returned rectangle.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .sphere import (
    TWO_PI,
    AngleRectangle,
    angles_to_unit,
    enclosing_rectangle,
)

__all__ = [
    "GridConfig",
    "RoundTrace",
    "EstimationResult",
    "minimize_criterion",
    "estimate_set",
    "resolve_slack",
    "trace_to_text",
]


@dataclass(frozen=True)
class GridConfig:
    """Controls for the adaptive grid search.

    ``base_grid_per_dim`` points are placed along each of the D-1
    angle coordinates every round.  ``quantile_alpha`` is the fraction
    of distinct criterion values (not points) defining the kept lower
    tail; all ties at the threshold are kept, since the piecewise
    constant criterion produces massive ties.  ``buffer_fraction``
    inflates the enclosing rectangle by that many grid cells per side
    before re-gridding.  ``slack`` is the set-estimation level c above
    the minimum; when None it is resolved as
    ``slack_kappa * N^(-1/4) * log(N)`` from the sample size.
    """

    base_grid_per_dim: int = 17
    quantile_alpha: float = 0.10
    buffer_fraction: float = 0.5
    precision: float = 1e-3
    max_rounds: int = 12
    slack: float | None = None
    slack_kappa: float = 0.01

    def __post_init__(self):
        if self.base_grid_per_dim < 3:
            raise ValueError("need at least 3 grid points per dimension")
        if not 0.0 < self.quantile_alpha < 1.0:
            raise ValueError("quantile_alpha must be in (0, 1)")
        if self.buffer_fraction < 0 or self.precision <= 0 or self.max_rounds < 1:
            raise ValueError("bad grid configuration")
        if self.slack is not None and self.slack < 0:
            raise ValueError("slack must be nonnegative")


def resolve_slack(cfg: GridConfig, n_obs: int | None) -> float:
    """Explicit slack, or the kappa * N^(-1/4) * log N rule."""
    if cfg.slack is not None:
        return float(cfg.slack)
    if n_obs is None or n_obs < 1:
        raise ValueError("slack rule needs the sample size; pass n_obs or an evaluator")
    return float(cfg.slack_kappa * n_obs ** (-0.25) * np.log(n_obs))


@dataclass(frozen=True)
class RoundTrace:
    round: int
    rectangle: AngleRectangle
    n_evaluated: int
    q_min: float
    threshold: float
    n_kept: int


@dataclass(frozen=True)
class EstimationResult:
    """Output of the adaptive grid search.

    ``kept_points`` are the angle coordinates (first coordinate in
    [-pi, pi)) of every evaluated point within ``slack`` of the final
    minimum; ``argmin_points`` are those attaining the minimum
    exactly.  ``beta_lower``/``beta_upper``/``beta_mid`` are
    per-dimension bounds and midpoints of the kept points mapped to
    unit vectors, the reported parameter bounds.
    """

    argmin_enclosure: AngleRectangle
    set_enclosure: AngleRectangle
    beta_lower: np.ndarray
    beta_upper: np.ndarray
    beta_mid: np.ndarray
    q_min: float
    slack: float
    n_evaluations: int
    n_rounds: int
    converged: bool
    argmin_points: np.ndarray
    kept_points: np.ndarray
    trace: tuple = ()


def _canonical(theta: np.ndarray) -> np.ndarray:
    out = theta.copy()
    out[:, 0] = -np.pi + np.mod(out[:, 0] + np.pi, TWO_PI)
    return out


def _grid(lo: np.ndarray, hi: np.ndarray, m: int) -> np.ndarray:
    axes = [np.linspace(lo[d], hi[d], m) for d in range(lo.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([ax.ravel() for ax in mesh], axis=1)


def _unwrap_into(first: np.ndarray, lo0: float) -> np.ndarray:
    return lo0 + np.mod(first - lo0, TWO_PI)


def _run(evaluator, cfg: GridConfig, dim: int | None, slack_value: float):
    evaluate = evaluator.evaluate if hasattr(evaluator, "evaluate") else evaluator
    if dim is None:
        dim = getattr(evaluator, "n_covariates", None)
        if dim is None:
            raise ValueError("pass dim explicitly for a bare criterion callable")
    if dim < 2:
        raise ValueError("parameter dimension must be at least 2")
    k = dim - 1
    m = cfg.base_grid_per_dim

    lo = np.array([-np.pi] + [-np.pi / 2] * (k - 1))
    hi = np.array([np.pi] + [np.pi / 2] * (k - 1))
    full_circle = True

    cache: dict[tuple, float] = {}
    keepers: dict[tuple, float] = {}
    argmins: dict[tuple, float] = {}
    q_min = np.inf
    trace = []
    converged = False
    n_rounds = 0
    prev_diameter = np.inf

    for rnd in range(1, cfg.max_rounds + 1):
        n_rounds = rnd
        pts = _canonical(_grid(lo, hi, m))
        keys = [tuple(p) for p in pts]
        fresh, seen = [], set()
        for i, key in enumerate(keys):
            if key not in cache and key not in seen:
                fresh.append(i)
                seen.add(key)
        if fresh:
            vals = np.asarray(evaluate(angles_to_unit(pts[fresh])), dtype=np.float64)
            for i, v in zip(fresh, vals):
                cache[keys[i]] = float(v)
        round_vals = np.array([cache[key] for key in keys])

        q_min = min(q_min, float(round_vals.min()))
        cutoff = q_min + slack_value
        keepers = {key: v for key, v in keepers.items() if v <= cutoff}
        argmins = {key: v for key, v in argmins.items() if v == q_min}
        for key, v in zip(keys, round_vals):
            if v <= cutoff:
                keepers[key] = v
            if v == q_min:
                argmins[key] = v

        threshold = float(np.quantile(np.unique(round_vals), cfg.quantile_alpha,
                                      method="lower"))
        selected = {key for key, v in zip(keys, round_vals) if v <= threshold}
        selected |= set(keepers)
        sel = np.array(sorted(selected))

        pad = cfg.buffer_fraction * (hi - lo) / (m - 1)
        if full_circle:
            rect = enclosing_rectangle(sel)
            new_lo = rect.lower - pad
            new_hi = rect.upper + pad
        else:
            first = _unwrap_into(sel[:, 0], lo[0])
            new_lo = np.concatenate([[first.min()], sel[:, 1:].min(axis=0)]) - pad
            new_hi = np.concatenate([[first.max()], sel[:, 1:].max(axis=0)]) + pad
            # Monotone refinement: never grow past the previous frame.
            new_lo = np.maximum(new_lo, lo)
            new_hi = np.minimum(new_hi, hi)
        if k > 1:
            new_lo[1:] = np.clip(new_lo[1:], -np.pi / 2, np.pi / 2)
            new_hi[1:] = np.clip(new_hi[1:], -np.pi / 2, np.pi / 2)
        if new_hi[0] - new_lo[0] >= TWO_PI:
            new_lo[0], new_hi[0] = -np.pi, np.pi

        lo, hi = new_lo, new_hi
        full_circle = hi[0] - lo[0] >= TWO_PI - 1e-12
        rect_now = AngleRectangle(lo, hi, wrapped=hi[0] > np.pi + 1e-12)
        trace.append(RoundTrace(
            round=rnd, rectangle=rect_now, n_evaluated=len(fresh),
            q_min=q_min, threshold=threshold, n_kept=len(keepers),
        ))
        diameter = rect_now.geodesic_diameter()
        if diameter <= cfg.precision:
            converged = True
            break
        if prev_diameter - diameter <= 0.1 * cfg.precision:
            # Refinement has stopped: the enclosure is pinned by the
            # retained level set, not by grid resolution, and further
            # rounds would re-evaluate the same region.
            break
        prev_diameter = diameter

    kept_pts = np.array(sorted(keepers))
    argmin_pts = np.array(sorted(argmins))
    set_rect = enclosing_rectangle(kept_pts)
    # Anchoring the argmin bounds in the set enclosure's frame keeps
    # the nesting argmin_enclosure <= set_enclosure structural even
    # when both cross the seam.
    am_first = _unwrap_into(argmin_pts[:, 0], set_rect.lower[0])
    am_lo = argmin_pts.min(axis=0)
    am_hi = argmin_pts.max(axis=0)
    am_lo[0], am_hi[0] = am_first.min(), am_first.max()
    argmin_rect = AngleRectangle(am_lo, am_hi, wrapped=am_hi[0] > np.pi + 1e-12)

    beta_kept = angles_to_unit(kept_pts)
    beta_lower = beta_kept.min(axis=0)
    beta_upper = beta_kept.max(axis=0)
    return EstimationResult(
        argmin_enclosure=argmin_rect,
        set_enclosure=set_rect,
        beta_lower=beta_lower,
        beta_upper=beta_upper,
        beta_mid=0.5 * (beta_lower + beta_upper),
        q_min=q_min,
        slack=slack_value,
        n_evaluations=len(cache),
        n_rounds=n_rounds,
        converged=converged,
        argmin_points=argmin_pts,
        kept_points=kept_pts,
        trace=tuple(trace),
    )


def minimize_criterion(evaluator, cfg: GridConfig | None = None,
                       dim: int | None = None) -> EstimationResult:
    """Enclose the criterion's argmin set (slack 0).

    ``evaluator`` is a :class:`pmchoice.criterion.CriterionEvaluator`
    or any callable mapping an (m, D) array of parameter points to m
    criterion values.  Every evaluated point attaining the running
    minimum ends up inside the returned rectangles.
    """
    cfg = cfg or GridConfig()
    return _run(evaluator, cfg, dim, 0.0)


def estimate_set(evaluator, cfg: GridConfig | None = None,
                 dim: int | None = None,
                 n_obs: int | None = None) -> EstimationResult:
    """Enclose the level set within ``slack`` of the criterion minimum.

    The slack comes from the config (explicit value or sample-size
    rule); points within it of the running minimum are never discarded
    during refinement.  With slack 0 this coincides with
    :func:`minimize_criterion`.
    """
    cfg = cfg or GridConfig()
    if n_obs is None:
        n_obs = getattr(evaluator, "n_agents", None)
    return _run(evaluator, cfg, dim, resolve_slack(cfg, n_obs))


def trace_to_text(result: EstimationResult) -> str:
    """Round-by-round refinement log as plain structured text."""
    buf = io.StringIO()
    buf.write("round\tn_evaluated\tq_min\tthreshold\tn_kept\tdiameter\tlower\tupper\n")
    for t in result.trace:
        rect = t.rectangle
        buf.write(
            f"{t.round}\t{t.n_evaluated}\t{t.q_min:.6g}\t{t.threshold:.6g}\t"
            f"{t.n_kept}\t{rect.geodesic_diameter():.6g}\t"
            f"{np.array2string(rect.lower, precision=6, separator=',')}\t"
            f"{np.array2string(rect.upper, precision=6, separator=',')}\n"
        )
    return buf.getvalue()
