"""IC series/summary, backtest, and decay against scipy and hand computations."""

import math

import numpy as np
import pytest
from scipy import stats

from alphaforge import metrics, ops
from alphaforge.expr import parse
from alphaforge.metrics import (MIN_OBS, ShapeMismatch, TooFewInstruments,
                                backtest, delay_alpha, ic_histogram, ic_series,
                                ic_summary, signal_decay)
from alphaforge.ops import AlphaMatrix
from alphaforge.panel import ReturnMatrix, forward_returns, synth_panel


def _random_pair(n_d, n_i, seed, mask_frac=0.15):
    rng = np.random.default_rng(seed)
    av = rng.standard_normal((n_d, n_i))
    fv = rng.standard_normal((n_d, n_i))
    aok = rng.random((n_d, n_i)) >= mask_frac
    fok = rng.random((n_d, n_i)) >= mask_frac
    am = AlphaMatrix(values=np.where(aok, av, 0.0), valid=aok, expr_id="a")
    fm = ReturnMatrix(horizon=1, values=np.where(fok, fv, 0.0), valid=fok)
    return am, fm


class TestICSeries:
    @pytest.mark.parametrize("method,ref", [
        ("spearman", lambda x, y: stats.spearmanr(x, y).statistic),
        ("pearson", lambda x, y: stats.pearsonr(x, y).statistic),
    ])
    def test_matches_scipy(self, method, ref):
        for seed in range(10):
            am, fm = _random_pair(20, 30, seed)
            ic, ok = ic_series(am, fm, method)
            for t in range(20):
                sel = am.valid[t] & fm.valid[t]
                if sel.sum() < MIN_OBS:
                    assert not ok[t]
                    continue
                r = ref(am.values[t][sel], fm.values[t][sel])
                assert ok[t]
                assert abs(ic[t] - r) <= 1e-12, (method, t)

    def test_ties_handled(self):
        rng = np.random.default_rng(0)
        av = np.round(rng.standard_normal((10, 15)), 0)  # heavy ties
        fv = np.round(rng.standard_normal((10, 15)), 0)
        ok = np.ones((10, 15), dtype=bool)
        am = AlphaMatrix(values=av, valid=ok, expr_id="a")
        fm = ReturnMatrix(horizon=1, values=fv, valid=ok.copy())
        ic, day_ok = ic_series(am, fm)
        for t in range(10):
            r = stats.spearmanr(av[t], fv[t]).statistic
            if math.isnan(r):
                assert not day_ok[t]
            else:
                assert abs(ic[t] - r) <= 1e-12

    def test_constant_side_invalid(self):
        am, fm = _random_pair(5, 10, 1, mask_frac=0.0)
        am.values[2] = 3.14
        ic, ok = ic_series(am, fm)
        assert not ok[2] and ic[2] == 0.0

    def test_shape_mismatch(self):
        am, _ = _random_pair(5, 10, 1)
        _, fm = _random_pair(5, 11, 1)
        with pytest.raises(ShapeMismatch):
            ic_series(am, fm)

    def test_unknown_method(self):
        am, fm = _random_pair(5, 10, 1)
        with pytest.raises(metrics.MetricsError):
            ic_series(am, fm, "kendall")


class TestICSummary:
    def test_values(self):
        ic = np.array([0.1, 0.2, 0.0, 0.3, -0.1])
        ok = np.array([True, True, False, True, True])
        s = ic_summary(ic, ok)
        vals = ic[ok]
        assert s.n_days == 4
        assert abs(s.mean_ic - vals.mean()) <= 1e-15
        assert abs(s.std_ic - vals.std(ddof=1)) <= 1e-15
        assert abs(s.icir - vals.mean() / vals.std(ddof=1)) <= 1e-12
        assert abs(s.t_stat - s.icir * math.sqrt(4)) <= 1e-12

    def test_zero_std(self):
        s = ic_summary(np.array([0.5, 0.5]), np.array([True, True]))
        assert s.icir is None and s.t_stat is None

    def test_empty(self):
        s = ic_summary(np.array([]), np.array([], dtype=bool))
        assert s.n_days == 0 and s.icir is None


@pytest.fixture(scope="module")
def panel():
    panel, _ = synth_panel(150, 30, "ts_delta(close,5)", 0.3, 17)
    return panel


class TestBacktest:

    def test_oracle_alpha_never_loses(self, panel):
        fwd = forward_returns(panel, 1)
        oracle = AlphaMatrix(values=fwd.values, valid=fwd.valid, expr_id="oracle")
        rep = backtest(oracle, panel, cost_bps=0.0)
        assert (rep.daily_returns >= 0.0).all()
        assert rep.sharpe is not None and rep.sharpe > 3.0

    def test_report_consistency(self, panel):
        am = ops.evaluate(parse("cs_rank(ts_delta(close,5))"), panel)
        rep = backtest(am, panel)
        d = rep.daily_returns
        assert abs(rep.annual_return - d.mean() * 252) <= 1e-12
        assert abs(rep.sharpe - d.mean() / d.std(ddof=1) * math.sqrt(252)) <= 1e-12
        eq = np.cumprod(1.0 + d)
        assert np.allclose(rep.equity_curve, eq, atol=1e-12, rtol=0)
        peak = np.maximum.accumulate(eq)
        assert abs(rep.max_drawdown - np.max(1.0 - eq / peak)) <= 1e-12
        assert len(rep.dates) == d.size == panel.n_days - 1

    def test_costs_reduce_returns(self, panel):
        am = ops.evaluate(parse("cs_rank(ts_delta(close,5))"), panel)
        free = backtest(am, panel, cost_bps=0.0)
        paid = backtest(am, panel, cost_bps=25.0)
        assert paid.annual_return < free.annual_return

    def test_weights_budget_via_turnover(self, panel):
        # first traded day moves from flat to +-1 books: turnover exactly 1
        am = ops.evaluate(parse("cs_rank(close)"), panel)
        rep = backtest(am, panel)
        assert abs(rep.daily_returns.size - (panel.n_days - 1)) == 0
        assert rep.mean_turnover <= 2.0 + 1e-12

    def test_degenerate_alpha_flat(self, panel):
        n_d, n_i = panel.n_days, panel.n_inst
        am = AlphaMatrix(values=np.ones((n_d, n_i)),
                         valid=np.ones((n_d, n_i), dtype=bool), expr_id="const")
        rep = backtest(am, panel, cost_bps=10.0)
        assert np.array_equal(rep.daily_returns, np.zeros(n_d - 1))
        assert rep.sharpe is None

    def test_too_few_instruments(self, mock):
        am = ops.evaluate(parse("close"), mock)
        with pytest.raises(TooFewInstruments):
            backtest(am, mock, q=0.1)  # needs >= 20 names, mock has 5

    def test_bad_quantile(self, panel):
        am = ops.evaluate(parse("close"), panel)
        with pytest.raises(metrics.MetricsError):
            backtest(am, panel, q=0.7)


class TestDecay:
    def test_lag_zero_matches_ic(self):
        panel, _ = synth_panel(100, 20, "ts_delta(close,5)", 0.2, 5)
        fwd = forward_returns(panel, 1)
        am = ops.evaluate(parse("ts_delta(close,5)"), panel)
        prof = signal_decay(am, fwd, K=5)
        ic, ok = ic_series(am, fwd)
        assert prof.lags == [0, 1, 2, 3, 4, 5]
        assert abs(prof.mean_ics[0] - ic[ok].mean()) <= 1e-12

    def test_planted_signal_decays(self):
        panel, _ = synth_panel(300, 30, "ts_delta(close,5)", 0.2, 5)
        fwd = forward_returns(panel, 1)
        am = ops.evaluate(parse("ts_delta(close,5)"), panel)
        prof = signal_decay(am, fwd, K=8)
        assert prof.mean_ics[0] > prof.mean_ics[8]

    def test_delay_alpha_shifts(self):
        am, _ = _random_pair(6, 8, 2)
        lag = delay_alpha(am, 2)
        assert np.array_equal(lag.values[2:], am.values[:4])
        assert not lag.valid[:2].any()

    def test_k_too_large(self):
        am, fm = _random_pair(10, 8, 2)
        with pytest.raises(metrics.MetricsError):
            signal_decay(am, fm, K=5)


class TestHistogram:
    def test_counts_and_range(self):
        ic = np.array([-0.95, -0.5, 0.0, 0.2, 0.2, 0.99])
        ok = np.ones(6, dtype=bool)
        h = ic_histogram(ic, ok, bins=4)
        assert len(h["edges"]) == 5 and len(h["counts"]) == 4
        assert sum(h["counts"]) == 6
        assert h["edges"][0] == -1.0 and h["edges"][-1] == 1.0

    def test_bad_bins(self):
        with pytest.raises(metrics.MetricsError):
            ic_histogram(np.array([0.0]), np.array([True]), bins=1)
