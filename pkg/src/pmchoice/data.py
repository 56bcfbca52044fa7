"""Panel data model for multinomial choice estimation.

A dataset holds an (agents x products x periods x covariates) tensor
together with either binary choices or market shares for every
(agent, product, period).  Datasets are immutable after construction
and safe to share across workers.

The canonical interchange format is a long CSV with header
``agent,product,period,outcome,x1..xD`` and one row per
(agent, product, period): the shape of scanner-type panel data.  An
outside alternative with zero utility index, when present, is
implicit (no stored rows); estimation only ever touches the stored
products.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "PanelDataset",
    "PeriodPair",
    "ValidationError",
    "ParseError",
    "load_csv",
    "save_csv",
    "stack_pair",
    "outcome_diff",
    "select_pairs",
]


class ValidationError(ValueError):
    """A dataset violates one of its structural invariants."""


class ParseError(ValueError):
    """A CSV row could not be parsed; the message carries the line number."""


@dataclass(frozen=True)
class PeriodPair:
    """Ordered pair of distinct period indices (0-based).

    (t, s) and (s, t) are different pairs: each ordering carries
    complementary identifying information, because the sign
    restriction evaluated on (t, s) covariate differences is not a
    deterministic transform of the one evaluated on (s, t).
    """

    t: int
    s: int

    def __post_init__(self):
        if self.t == self.s:
            raise ValidationError("period pair must have distinct periods")
        if self.t < 0 or self.s < 0:
            raise ValidationError("period indices are 0-based and nonnegative")

    @property
    def reversed(self) -> "PeriodPair":
        return PeriodPair(self.s, self.t)

    @property
    def canonical(self) -> "PeriodPair":
        """The ordering with the smaller period first."""
        return self if self.t < self.s else PeriodPair(self.s, self.t)

    @property
    def is_canonical(self) -> bool:
        return self.t < self.s


@dataclass(frozen=True)
class PanelDataset:
    """Immutable panel of covariates and outcomes.

    Parameters
    ----------
    covariates : np.ndarray, shape (N, J, T, D)
        Observable characteristics, all entries finite.
    outcomes : np.ndarray, shape (N, J, T)
        Binary choices in {0, 1} (``outcome_kind="choices"``) or
        market shares in [0, 1] (``outcome_kind="shares"``).
    outcome_kind : str
        Either ``"choices"`` or ``"shares"``.
    outside_option : bool
        Whether an implicit zero-index alternative exists.  With no
        outside option, choices sum to exactly one within each
        (agent, period), and shares may sum to at most one either way.
    """

    covariates: np.ndarray
    outcomes: np.ndarray
    outcome_kind: str = "choices"
    outside_option: bool = False
    agent_labels: tuple = field(default=(), compare=False)
    product_labels: tuple = field(default=(), compare=False)
    period_labels: tuple = field(default=(), compare=False)

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.covariates, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.outcomes, dtype=np.float64))
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "outcomes", y)
        if x.ndim != 4:
            raise ValidationError("covariates must have shape (N, J, T, D)")
        if y.shape != x.shape[:3]:
            raise ValidationError("outcomes must have shape (N, J, T) matching covariates")
        n, j, t, d = x.shape
        if min(n, j, d) < 1 or t < 2:
            raise ValidationError("need N>=1, J>=1, D>=1 and T>=2")
        if not np.all(np.isfinite(x)):
            raise ValidationError("covariates contain non-finite entries")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes contain non-finite entries")
        if self.outcome_kind == "choices":
            if not np.all((y == 0.0) | (y == 1.0)):
                raise ValidationError("binary mode requires outcomes in {0, 1}")
            sums = y.sum(axis=1)
            if self.outside_option:
                if np.any(sums > 1.0):
                    raise ValidationError(
                        "binary mode: choices sum to more than one within an (agent, period)"
                    )
            elif not np.all(sums == 1.0):
                raise ValidationError(
                    "binary mode without outside option: choices must sum to one "
                    "within each (agent, period)"
                )
        elif self.outcome_kind == "shares":
            if np.any(y < 0.0) or np.any(y > 1.0):
                raise ValidationError("share mode requires outcomes in [0, 1]")
            if np.any(y.sum(axis=1) > 1.0 + 1e-9):
                raise ValidationError(
                    "share mode: shares sum to more than one within an (agent, period)"
                )
        else:
            raise ValidationError(f"unknown outcome kind {self.outcome_kind!r}")
        x.setflags(write=False)
        y.setflags(write=False)

    @property
    def n_agents(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_products(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_periods(self) -> int:
        return self.covariates.shape[2]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[3]

    def check_pair(self, pair: PeriodPair):
        if pair.t >= self.n_periods or pair.s >= self.n_periods:
            raise ValidationError(
                f"period pair ({pair.t}, {pair.s}) out of range for T={self.n_periods}"
            )

    def check_product(self, j: int):
        if not 0 <= j < self.n_products:
            raise ValidationError(f"product {j} out of range for J={self.n_products}")


def stack_pair(data: PanelDataset, pair: PeriodPair) -> np.ndarray:
    """Two-period design matrix, shape (N, 2*J*D).

    Row i concatenates agent i's covariates at ``pair.t`` and then at
    ``pair.s``, each period flattened product-major, covariate-minor:

        [x(j=0, d=0..D-1), x(j=1, d=0..D-1), ..., x(j=J-1, .)]

    first for period t, then the same layout for period s.
    """
    data.check_pair(pair)
    n = data.n_agents
    xt = data.covariates[:, :, pair.t, :].reshape(n, -1)
    xs = data.covariates[:, :, pair.s, :].reshape(n, -1)
    return np.concatenate([xt, xs], axis=1)


def outcome_diff(data: PanelDataset, j: int, pair: PeriodPair) -> np.ndarray:
    """Per-agent outcome difference for product j between the periods.

    Element i is ``outcome[i, j, pair.t] - outcome[i, j, pair.s]``;
    values lie in [-1, 1] and flip sign when the pair is reversed.
    """
    data.check_product(j)
    data.check_pair(pair)
    return data.outcomes[:, j, pair.t] - data.outcomes[:, j, pair.s]


def covariate_diff(data: PanelDataset, pair: PeriodPair) -> np.ndarray:
    """Covariate differences X[.., t, :] - X[.., s, :], shape (N, J, D)."""
    data.check_pair(pair)
    return data.covariates[:, :, pair.t, :] - data.covariates[:, :, pair.s, :]


def select_pairs(n_periods: int, policy: str = "auto", seed: int = 0) -> list[PeriodPair]:
    """Resolve a pair-selection policy into canonical period pairs.

    Policies
    --------
    ``"all"``
        Every unordered pair (t < s): T*(T-1)/2 pairs.
    ``"adjacent"``
        Consecutive periods only: (0,1), (1,2), ...
    ``"random:k"``
        A seeded sample of k distinct unordered pairs.
    ``"auto"``
        ``"all"`` for T <= 4, ``"adjacent"`` for longer panels, where
        the quadratic growth in pairs is rarely worth the extra fits.
    """
    if n_periods < 2:
        raise ValidationError("need at least two periods")
    if policy == "auto":
        policy = "all" if n_periods <= 4 else "adjacent"
    if policy == "all":
        return [
            PeriodPair(t, s)
            for t in range(n_periods - 1)
            for s in range(t + 1, n_periods)
        ]
    if policy == "adjacent":
        return [PeriodPair(t, t + 1) for t in range(n_periods - 1)]
    if policy.startswith("random:"):
        k = int(policy.split(":", 1)[1])
        allp = [
            (t, s) for t in range(n_periods - 1) for s in range(t + 1, n_periods)
        ]
        if not 1 <= k <= len(allp):
            raise ValidationError(f"random pair count must be in 1..{len(allp)}")
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(allp), size=k, replace=False)
        return [PeriodPair(*allp[i]) for i in sorted(idx)]
    raise ValidationError(f"unknown pair policy {policy!r}")


_BASE_COLUMNS = ("agent", "product", "period", "outcome")


def load_csv(path, shares: bool = False, outside_option: bool = False,
             schema: dict | None = None) -> PanelDataset:
    """Read a long-format CSV into a validated dataset.

    The expected header is ``agent,product,period,outcome,x1..xD``.
    ``schema`` may remap the four id/outcome columns (keys ``agent``,
    ``product``, ``period``, ``outcome``) and list covariate columns
    under ``covariates``; all other columns are ignored.  Every
    (agent, product, period) combination must appear exactly once, and
    rows with missing cells are rejected with their line number.
    """
    schema = schema or {}
    cov_cols = schema.get("covariates")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col_of = {}
        for key in _BASE_COLUMNS:
            name = schema.get(key, key)
            if name not in header:
                raise ParseError(f"{path}: missing column {name!r}")
            col_of[key] = header.index(name)
        if cov_cols is None:
            cov_cols = [h for h in header if h not in
                        {schema.get(k, k) for k in _BASE_COLUMNS}]
        if not cov_cols:
            raise ParseError(f"{path}: no covariate columns found")
        for name in cov_cols:
            if name not in header:
                raise ParseError(f"{path}: missing covariate column {name!r}")
        cov_idx = [header.index(name) for name in cov_cols]

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            needed = [col_of[k] for k in _BASE_COLUMNS] + cov_idx
            if len(row) <= max(needed) or any(not row[c].strip() for c in needed):
                raise ParseError(f"{path}:{lineno}: missing cell")
            try:
                outcome = float(row[col_of["outcome"]])
                covs = [float(row[c]) for c in cov_idx]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows.append((row[col_of["agent"]], row[col_of["product"]],
                         row[col_of["period"]], outcome, covs))

    if not rows:
        raise ParseError(f"{path}: no data rows")

    def _axis(values):
        labels = sorted(set(values), key=_label_key)
        return labels, {v: i for i, v in enumerate(labels)}

    agents, agent_of = _axis([r[0] for r in rows])
    products, product_of = _axis([r[1] for r in rows])
    periods, period_of = _axis([r[2] for r in rows])
    n, j, t, d = len(agents), len(products), len(periods), len(cov_cols)

    x = np.full((n, j, t, d), np.nan)
    y = np.full((n, j, t), np.nan)
    for a, p, per, outcome, covs in rows:
        ia, ij, it = agent_of[a], product_of[p], period_of[per]
        if not np.isnan(y[ia, ij, it]):
            raise ValidationError(
                f"duplicate row for agent={a} product={p} period={per}"
            )
        y[ia, ij, it] = outcome
        x[ia, ij, it, :] = covs
    if np.isnan(y).any():
        ia, ij, it = np.argwhere(np.isnan(y))[0]
        raise ValidationError(
            f"incomplete panel: no row for agent={agents[ia]} "
            f"product={products[ij]} period={periods[it]}"
        )
    return PanelDataset(
        covariates=x,
        outcomes=y,
        outcome_kind="shares" if shares else "choices",
        outside_option=outside_option,
        agent_labels=tuple(agents),
        product_labels=tuple(products),
        period_labels=tuple(periods),
    )


def _label_key(v):
    """Sort numerically when possible so period order is natural."""
    try:
        return (0, float(v), "")
    except ValueError:
        return (1, 0.0, v)


def save_csv(data: PanelDataset, path):
    """Write the canonical long CSV; floats round-trip bit-for-bit."""
    n, j, t, d = data.covariates.shape
    agents = data.agent_labels or tuple(range(n))
    products = data.product_labels or tuple(range(1, j + 1))
    periods = data.period_labels or tuple(range(1, t + 1))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_BASE_COLUMNS) + [f"x{k + 1}" for k in range(d)])
        for ia in range(n):
            for ij in range(j):
                for it in range(t):
                    writer.writerow(
                        [agents[ia], products[ij], periods[it],
                         repr(float(data.outcomes[ia, ij, it]))]
                        + [repr(float(v)) for v in data.covariates[ia, ij, it]]
                    )
