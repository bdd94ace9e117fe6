"""Alpha evaluation: IC series/summary, long-short quantile backtest,
signal decay and IC distribution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import AlphaMatrix
from .panel import PanelData, ReturnMatrix, forward_returns

MIN_OBS = 5          # valid pairs needed for a day to count
TRADING_DAYS = 252


class MetricsError(Exception):
    pass


class ShapeMismatch(MetricsError):
    pass


class TooFewInstruments(MetricsError):
    pass


@dataclass
class ICSummary:
    mean_ic: float
    std_ic: float
    icir: float | None  # None when std == 0
    t_stat: float | None
    n_days: int

    def to_json(self) -> dict:
        return {"mean_ic": self.mean_ic, "std_ic": self.std_ic,
                "icir": self.icir, "t_stat": self.t_stat, "n_days": self.n_days}


@dataclass
class BacktestReport:
    dates: list[str]                # ISO dates of the traded days
    daily_returns: np.ndarray
    equity_curve: np.ndarray
    annual_return: float
    sharpe: float | None
    max_drawdown: float
    mean_turnover: float
    cost_bps: float
    quantile: float

    def to_json(self) -> dict:
        return {
            "dates": self.dates,
            "daily_returns": [float(x) for x in self.daily_returns],
            "equity_curve": [float(x) for x in self.equity_curve],
            "annual_return": self.annual_return,
            "sharpe": self.sharpe,
            "max_drawdown": self.max_drawdown,
            "mean_turnover": self.mean_turnover,
            "cost_bps": self.cost_bps,
            "quantile": self.quantile,
        }


@dataclass
class DecayProfile:
    lags: list[int]
    mean_ics: list[float | None]  # None where no day had enough pairs

    def to_json(self) -> dict:
        return {"lags": self.lags, "mean_ics": self.mean_ics}


def ic_series(alpha: AlphaMatrix, fwd: ReturnMatrix,
              method: str = "spearman") -> tuple[np.ndarray, np.ndarray]:
    """Per-day cross-sectional correlation between alpha and forward returns.

    Returns (ic, valid) day-indexed arrays; a day is invalid with fewer than
    MIN_OBS jointly unmasked pairs or a degenerate (constant) side.
    """
    if alpha.values.shape != fwd.values.shape:
        raise ShapeMismatch(f"{alpha.values.shape} vs {fwd.values.shape}")
    if method not in ("spearman", "pearson"):
        raise MetricsError(f"unknown method {method}")
    joint = alpha.valid & fwd.valid
    n = joint.sum(axis=1)
    if method == "spearman":
        x, _ = ops.rank_rows(alpha.values, joint)
        y, _ = ops.rank_rows(fwd.values, joint)
    else:
        x = np.where(joint, alpha.values, 0.0)
        y = np.where(joint, fwd.values, 0.0)
    safe_n = np.maximum(n, 1)[:, None]
    xm = np.where(joint, x, 0.0)
    ym = np.where(joint, y, 0.0)
    xc = np.where(joint, x - xm.sum(axis=1, keepdims=True) / safe_n, 0.0)
    yc = np.where(joint, y - ym.sum(axis=1, keepdims=True) / safe_n, 0.0)
    num = (xc * yc).sum(axis=1)
    den = np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
    ok = (n >= MIN_OBS) & (den > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ic = np.where(ok, num / np.where(den > 0.0, den, 1.0), 0.0)
    return np.clip(ic, -1.0, 1.0), ok


def ic_summary(ic: np.ndarray, ok: np.ndarray) -> ICSummary:
    vals = ic[ok]
    n = int(vals.size)
    if n == 0:
        return ICSummary(0.0, 0.0, None, None, 0)
    mean = float(vals.mean())
    std = float(vals.std(ddof=1)) if n > 1 else 0.0
    icir = mean / std if std > 0 else None
    t_stat = icir * math.sqrt(n) if icir is not None else None
    return ICSummary(mean, std, icir, t_stat, n)


def backtest(alpha: AlphaMatrix, panel: PanelData, horizon: int = 1,
             q: float = 0.1, cost_bps: float = 10.0) -> BacktestReport:
    """Daily-rebalanced long-short quantile portfolio.

    Each day with enough valid names: long the top ceil(q*n) by alpha with
    weights summing to +1, short the bottom ceil(q*n) summing to -1; the day's
    return is the long-short forward-return spread net of linear costs on
    half-L1 turnover. Degenerate days (constant alpha, too few names) hold
    zero positions and return 0.
    """
    if not 0.0 < q <= 0.5:
        raise MetricsError("q must be in (0, 0.5]")
    fwd = forward_returns(panel, horizon)
    n_d, n_i = alpha.values.shape
    if alpha.values.shape != fwd.values.shape:
        raise ShapeMismatch(f"{alpha.values.shape} vs {fwd.values.shape}")
    min_names = math.ceil(2.0 / q)
    if n_i < min_names:
        raise TooFewInstruments(f"need >= {min_names} instruments for q={q}")

    trade_days = [t for t in range(n_d - horizon)]
    rets, turns = [], []
    w_prev = np.zeros(n_i)
    for t in trade_days:
        sel = alpha.valid[t] & fwd.valid[t]
        w = np.zeros(n_i)
        r = 0.0
        n = int(sel.sum())
        if n >= min_names:
            a = alpha.values[t][sel]
            if np.ptp(a) > 0.0:
                k = math.ceil(q * n)
                idx = np.flatnonzero(sel)
                order = np.argsort(a, kind="stable")
                short_idx = idx[order[:k]]
                long_idx = idx[order[-k:]]
                w[long_idx] = 1.0 / k
                w[short_idx] = -1.0 / k
                r = float(fwd.values[t][long_idx].mean() - fwd.values[t][short_idx].mean())
        turnover = 0.5 * float(np.abs(w - w_prev).sum())
        r -= cost_bps * 1e-4 * turnover
        rets.append(r)
        turns.append(turnover)
        w_prev = w

    daily = np.array(rets)
    equity = np.cumprod(1.0 + daily)
    annual = float(daily.mean() * TRADING_DAYS) if daily.size else 0.0
    std = float(daily.std(ddof=1)) if daily.size > 1 else 0.0
    sharpe = float(daily.mean() / std * math.sqrt(TRADING_DAYS)) if std > 0 else None
    peak = np.maximum.accumulate(equity) if equity.size else equity
    mdd = float(np.max(1.0 - equity / peak)) if equity.size else 0.0
    return BacktestReport(
        dates=[panel.dates[t].isoformat() for t in trade_days],
        daily_returns=daily,
        equity_curve=equity,
        annual_return=annual,
        sharpe=sharpe,
        max_drawdown=mdd,
        mean_turnover=float(np.mean(turns)) if turns else 0.0,
        cost_bps=cost_bps,
        quantile=q,
    )


def delay_alpha(alpha: AlphaMatrix, lag: int) -> AlphaMatrix:
    """Alpha shifted forward in time by `lag` days (row t shows row t-lag)."""
    n_d = alpha.values.shape[0]
    v = np.zeros_like(alpha.values)
    ok = np.zeros_like(alpha.valid)
    if lag < n_d:
        v[lag:] = alpha.values[: n_d - lag]
        ok[lag:] = alpha.valid[: n_d - lag]
    return AlphaMatrix(values=v, valid=ok, expr_id=alpha.expr_id)


def signal_decay(alpha: AlphaMatrix, fwd: ReturnMatrix, K: int = 10,
                 method: str = "spearman") -> DecayProfile:
    n_d = alpha.values.shape[0]
    if K >= n_d / 2:
        raise MetricsError("K too large for history")
    lags, means = [], []
    for k in range(K + 1):
        ic, ok = ic_series(delay_alpha(alpha, k), fwd, method)
        lags.append(k)
        means.append(float(ic[ok].mean()) if ok.any() else None)
    return DecayProfile(lags=lags, mean_ics=means)


def ic_histogram(ic: np.ndarray, ok: np.ndarray, bins: int = 20) -> dict:
    """Equal-width histogram of daily ICs over [-1, 1]."""
    if bins < 2:
        raise MetricsError("bins must be >= 2")
    counts, edges = np.histogram(ic[ok], bins=bins, range=(-1.0, 1.0))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}
