import numpy as np
import pytest

from pmchoice import (
    PanelDataset,
    PeriodPair,
    ParseError,
    ValidationError,
    load_csv,
    outcome_diff,
    save_csv,
    select_pairs,
    stack_pair,
)


def choices_for(n, j, t, rng):
    """Valid one-hot choice tensor."""
    y = np.zeros((n, j, t))
    picks = rng.integers(0, j, size=(n, t))
    for i in range(n):
        for k in range(t):
            y[i, picks[i, k], k] = 1.0
    return y


def small_dataset(n=4, j=2, t=3, d=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return PanelDataset(
        covariates=rng.standard_normal((n, j, t, d)),
        outcomes=choices_for(n, j, t, rng),
        **kw,
    )


class TestValidation:
    def test_accepts_well_formed(self):
        data = small_dataset()
        assert data.n_agents == 4 and data.n_products == 2
        assert data.n_periods == 3 and data.n_covariates == 2

    def test_rejects_double_choice(self):
        rng = np.random.default_rng(1)
        y = choices_for(2, 2, 2, rng)
        y[0, :, 0] = 1.0
        with pytest.raises(ValidationError):
            PanelDataset(rng.standard_normal((2, 2, 2, 1)), y)

    def test_choices_must_sum_to_one_without_outside_option(self):
        rng = np.random.default_rng(2)
        y = choices_for(2, 2, 2, rng)
        y[1, :, 1] = 0.0
        with pytest.raises(ValidationError):
            PanelDataset(rng.standard_normal((2, 2, 2, 1)), y)
        # the same tensor is fine when an outside option absorbs it
        PanelDataset(rng.standard_normal((2, 2, 2, 1)), y, outside_option=True)

    def test_share_bounds(self):
        x = np.zeros((1, 2, 2, 1))
        PanelDataset(x, np.full((1, 2, 2), 0.5), outcome_kind="shares")
        with pytest.raises(ValidationError):
            PanelDataset(x, np.full((1, 2, 2), 0.6), outcome_kind="shares")
        with pytest.raises(ValidationError):
            PanelDataset(x, np.full((1, 2, 2), -0.1), outcome_kind="shares")

    def test_rejects_nonfinite_covariates(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 2, 1))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            PanelDataset(x, choices_for(2, 2, 2, rng))

    def test_immutable_after_construction(self):
        data = small_dataset()
        with pytest.raises(ValueError):
            data.covariates[0, 0, 0, 0] = 5.0

    def test_period_pair_must_be_distinct(self):
        with pytest.raises(ValidationError):
            PeriodPair(1, 1)


class TestStackPair:
    def test_single_product_single_covariate(self):
        x = np.zeros((1, 1, 2, 1))
        x[0, 0, 0, 0] = 3.0
        x[0, 0, 1, 0] = 5.0
        y = choices_for(1, 1, 2, np.random.default_rng(0))
        data = PanelDataset(x, y)
        assert np.array_equal(stack_pair(data, PeriodPair(0, 1))[0], [3.0, 5.0])

    def test_product_major_layout(self):
        x = np.zeros((1, 2, 2, 1))
        x[0, 0, 0, 0], x[0, 1, 0, 0] = 11.0, 21.0
        x[0, 0, 1, 0], x[0, 1, 1, 0] = 12.0, 22.0
        data = PanelDataset(x, choices_for(1, 2, 2, np.random.default_rng(0)))
        assert np.array_equal(stack_pair(data, PeriodPair(0, 1))[0], [11, 21, 12, 22])
        assert np.array_equal(stack_pair(data, PeriodPair(1, 0))[0], [12, 22, 11, 21])

    def test_bad_period_rejected(self):
        data = small_dataset()
        with pytest.raises(ValidationError):
            stack_pair(data, PeriodPair(0, 9))


class TestOutcomeDiff:
    def test_basic_values(self):
        y = np.zeros((1, 2, 2))
        y[0, 0, 0] = 1.0  # chooses product 0 in period 0
        y[0, 1, 1] = 1.0  # product 1 in period 1
        data = PanelDataset(np.zeros((1, 2, 2, 1)), y)
        assert outcome_diff(data, 0, PeriodPair(0, 1))[0] == 1.0
        assert outcome_diff(data, 1, PeriodPair(0, 1))[0] == -1.0

    def test_share_arithmetic(self):
        s = np.zeros((1, 1, 2))
        s[0, 0, 0], s[0, 0, 1] = 0.4, 0.25
        data = PanelDataset(np.zeros((1, 1, 2, 1)), s, outcome_kind="shares")
        assert abs(outcome_diff(data, 0, PeriodPair(0, 1))[0] - 0.15) <= 1e-15

    def test_reversal_negates(self):
        data = small_dataset(n=20, j=3, t=4)
        for j in range(3):
            fwd = outcome_diff(data, j, PeriodPair(1, 3))
            bwd = outcome_diff(data, j, PeriodPair(3, 1))
            assert np.array_equal(fwd, -bwd)

    def test_sums_to_zero_across_products(self):
        data = small_dataset(n=30, j=4, t=3)
        total = sum(outcome_diff(data, j, PeriodPair(0, 2)) for j in range(4))
        assert np.array_equal(total, np.zeros(30))


class TestCsvRoundTrip:
    def test_minimal_file(self, tmp_path):
        p = tmp_path / "panel.csv"
        p.write_text(
            "agent,product,period,outcome,x1\n"
            "1,1,1,1,0.5\n1,2,1,0,-0.25\n1,1,2,0,0.125\n1,2,2,1,2.0\n"
            "2,1,1,0,1.5\n2,2,1,1,-1.0\n2,1,2,1,0.75\n2,2,2,0,0.0\n"
        )
        data = load_csv(p)
        assert (data.n_agents, data.n_products, data.n_periods, data.n_covariates) == (2, 2, 2, 1)

    def test_double_choice_in_file(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(
            "agent,product,period,outcome,x1\n"
            "1,1,1,1,0.5\n1,2,1,1,-0.25\n1,1,2,0,0.1\n1,2,2,1,2.0\n"
        )
        with pytest.raises(ValidationError):
            load_csv(p)

    def test_symmetric_shares_accepted(self, tmp_path):
        p = tmp_path / "shares.csv"
        rows = ["agent,product,period,outcome,x1"]
        for prod in range(1, 5):
            for per in (1, 2):
                rows.append(f"1,{prod},{per},0.25,{prod * per}")
        p.write_text("\n".join(rows) + "\n")
        data = load_csv(p, shares=True)
        assert data.outcome_kind == "shares"
        assert np.allclose(data.outcomes.sum(axis=1), 1.0)

    def test_missing_cell_reports_line(self, tmp_path):
        p = tmp_path / "gap.csv"
        p.write_text(
            "agent,product,period,outcome,x1\n"
            "1,1,1,1,0.5\n1,2,1,0,\n1,1,2,0,0.1\n1,2,2,1,2.0\n"
        )
        with pytest.raises(ParseError, match=":3"):
            load_csv(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "cols.csv"
        p.write_text("agent,product,outcome,x1\n1,1,1,0.5\n")
        with pytest.raises(ParseError, match="period"):
            load_csv(p)

    def test_incomplete_panel(self, tmp_path):
        p = tmp_path / "short.csv"
        p.write_text(
            "agent,product,period,outcome,x1\n"
            "1,1,1,1,0.5\n1,2,1,0,-0.2\n1,1,2,1,0.1\n"
        )
        with pytest.raises(ValidationError, match="incomplete"):
            load_csv(p)

    def test_save_load_bit_for_bit(self, tmp_path):
        data = small_dataset(n=6, j=3, t=2, d=4, seed=99)
        p = tmp_path / "roundtrip.csv"
        save_csv(data, p)
        back = load_csv(p)
        assert np.array_equal(back.covariates, data.covariates)
        assert np.array_equal(back.outcomes, data.outcomes)

    def test_schema_remap(self, tmp_path):
        p = tmp_path / "named.csv"
        p.write_text(
            "dma,brand,week,share,price,promo\n"
            "1,a,1,0.3,1.5,0.0\n1,b,1,0.4,2.0,1.0\n"
            "1,a,2,0.5,1.25,1.0\n1,b,2,0.1,2.25,0.0\n"
        )
        data = load_csv(
            p, shares=True,
            schema={"agent": "dma", "product": "brand", "period": "week",
                    "outcome": "share", "covariates": ["price", "promo"]},
        )
        assert data.n_covariates == 2
        assert data.product_labels == ("a", "b")


class TestSelectPairs:
    def test_all_pairs(self):
        pairs = select_pairs(4, "all")
        assert len(pairs) == 6
        assert all(p.t < p.s for p in pairs)

    def test_adjacent(self):
        pairs = select_pairs(5, "adjacent")
        assert [(p.t, p.s) for p in pairs] == [(0, 1), (1, 2), (2, 3), (3, 4)]

    def test_random_sample_is_seeded(self):
        a = select_pairs(8, "random:5", seed=3)
        b = select_pairs(8, "random:5", seed=3)
        assert a == b
        assert len(set((p.t, p.s) for p in a)) == 5

    def test_auto_switches_on_length(self):
        assert len(select_pairs(3, "auto")) == 3      # all pairs
        assert len(select_pairs(10, "auto")) == 9     # adjacent

    def test_unknown_policy(self):
        with pytest.raises(ValidationError):
            select_pairs(4, "every-other")
