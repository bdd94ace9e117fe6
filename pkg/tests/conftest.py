"""Shared fixtures and independent reference implementations.

The naive interpreter below recomputes expression semantics cell by cell in
plain Python; it shares no code with the vectorized evaluator and serves as
the oracle for the operator tests.
"""

import math

import numpy as np
import pytest

from alphaforge import expr as ex
from alphaforge import gp
from alphaforge.panel import FIELDS, PanelData, mock_panel, synth_panel


@pytest.fixture(scope="session")
def mock():
    return mock_panel(30, 5, 1)


@pytest.fixture(scope="session")
def small_synth():
    panel, _ = synth_panel(120, 20, "ts_delta(close,5)", 0.5, 11)
    return panel


def random_panel(n_days, n_inst, seed, mask_frac=0.05):
    """Panel of positive random prices and volumes with sprinkled masks.

    OHLC internal ordering is respected so panel invariants hold, but values
    are otherwise arbitrary; intended for operator-semantics tests only.
    """
    rng = np.random.default_rng(seed)
    close = np.exp(rng.normal(4.0, 0.3, (n_days, n_inst)))
    opn = close * np.exp(rng.normal(0.0, 0.01, (n_days, n_inst)))
    hi = np.maximum(opn, close) * (1.0 + np.abs(rng.normal(0, 0.005, (n_days, n_inst))))
    lo = np.minimum(opn, close) * (1.0 - np.abs(rng.normal(0, 0.005, (n_days, n_inst))))
    vwap = lo + (hi - lo) * rng.uniform(0.2, 0.8, (n_days, n_inst))
    volume = np.exp(rng.normal(10.0, 0.8, (n_days, n_inst)))
    values = {"open": opn, "high": hi, "low": lo, "close": close,
              "volume": volume, "vwap": vwap}
    valid = {name: rng.random((n_days, n_inst)) >= mask_frac for name in FIELDS}
    from datetime import date, timedelta
    dates = tuple(date(2018, 1, 1) + timedelta(days=i) for i in range(n_days))
    sector = tuple(f"G{i % 4}" for i in range(n_inst))
    return PanelData(dates=dates, instruments=tuple(f"R{i:03d}" for i in range(n_inst)),
                     values=values, valid=valid, sector=sector)


def random_valid_exprs(n, panel, seed, max_depth=5):
    """n distinct expressions that fully validate against the given panel."""
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    while len(out) < n:
        e = gp.random_tree(rng, int(rng.integers(2, max_depth + 1)))
        canon = ex.canonical(e)
        if canon in seen:
            continue
        if ex.validate(canon, panel).ok:
            seen.add(canon)
            out.append(e)
    return out


# -- naive per-cell reference interpreter -----------------------------------


def _naive_rank_avg(values, target):
    less = sum(1 for v in values if v < target)
    equal = sum(1 for v in values if v == target)
    return less + (equal + 1) / 2.0


def naive_eval(e, panel):
    """Cell-by-cell reference evaluation. Returns (values, valid) lists of
    lists; masked cells hold 0.0."""
    n_d, n_i = panel.n_days, panel.n_inst
    sectors = panel.sector

    if isinstance(e, ex.Const):
        return ([[e.value] * n_i for _ in range(n_d)],
                [[True] * n_i for _ in range(n_d)])
    if isinstance(e, ex.Feature):
        v, ok = panel.field(e.name)
        return ([[float(v[t, i]) for i in range(n_i)] for t in range(n_d)],
                [[bool(ok[t, i]) for i in range(n_i)] for t in range(n_d)])

    if isinstance(e, ex.Unary):
        cv, cok = naive_eval(e.child, panel)
        out = [[0.0] * n_i for _ in range(n_d)]
        ook = [[False] * n_i for _ in range(n_d)]
        for t in range(n_d):
            for i in range(n_i):
                if not cok[t][i]:
                    continue
                x = cv[t][i]
                if e.op == "neg":
                    out[t][i], ook[t][i] = -x, True
                elif e.op == "abs":
                    out[t][i], ook[t][i] = abs(x), True
                elif e.op == "log":
                    if x > 0:
                        out[t][i], ook[t][i] = math.log(x), True
                elif e.op == "sqrt":
                    if x >= 0:
                        out[t][i], ook[t][i] = math.sqrt(x), True
        return out, ook

    if isinstance(e, ex.Binary):
        lv, lok = naive_eval(e.left, panel)
        rv, rok = naive_eval(e.right, panel)
        out = [[0.0] * n_i for _ in range(n_d)]
        ook = [[False] * n_i for _ in range(n_d)]
        for t in range(n_d):
            for i in range(n_i):
                if not (lok[t][i] and rok[t][i]):
                    continue
                a, b = lv[t][i], rv[t][i]
                if e.op == "add":
                    r = a + b
                elif e.op == "sub":
                    r = a - b
                elif e.op == "mul":
                    r = a * b
                else:
                    if b == 0.0:
                        continue
                    r = a / b
                if math.isfinite(r):
                    out[t][i], ook[t][i] = r, True
        return out, ook

    if isinstance(e, ex.TsOp):
        cv, cok = naive_eval(e.child, panel)
        c2v = c2ok = None
        if e.child2 is not None:
            c2v, c2ok = naive_eval(e.child2, panel)
        w = e.window
        out = [[0.0] * n_i for _ in range(n_d)]
        ook = [[False] * n_i for _ in range(n_d)]
        for t in range(w - 1, n_d):
            for i in range(n_i):
                win = [cv[s][i] for s in range(t - w + 1, t + 1)]
                if not all(cok[s][i] for s in range(t - w + 1, t + 1)):
                    continue
                if e.child2 is not None:
                    win2 = [c2v[s][i] for s in range(t - w + 1, t + 1)]
                    if not all(c2ok[s][i] for s in range(t - w + 1, t + 1)):
                        continue
                if e.op == "ts_delay":
                    r = win[0]
                elif e.op == "ts_delta":
                    r = win[-1] - win[0]
                elif e.op == "ts_mean":
                    r = sum(win) / w
                elif e.op == "ts_std":
                    m = sum(win) / w
                    r = math.sqrt(sum((x - m) ** 2 for x in win) / (w - 1))
                elif e.op == "ts_min":
                    r = min(win)
                elif e.op == "ts_max":
                    r = max(win)
                elif e.op == "ts_rank":
                    r = (_naive_rank_avg(win, win[-1]) - 1.0) / (w - 1.0)
                else:  # ts_corr
                    if max(win) == min(win) or max(win2) == min(win2):
                        continue
                    mx, my = sum(win) / w, sum(win2) / w
                    num = sum((a - mx) * (b - my) for a, b in zip(win, win2))
                    den = math.sqrt(sum((a - mx) ** 2 for a in win)
                                    * sum((b - my) ** 2 for b in win2))
                    if den == 0.0:
                        r = 0.0
                    else:
                        r = min(1.0, max(-1.0, num / den))
                out[t][i], ook[t][i] = r, True
        return out, ook

    if isinstance(e, ex.CsOp):
        cv, cok = naive_eval(e.child, panel)
        out = [[0.0] * n_i for _ in range(n_d)]
        ook = [[False] * n_i for _ in range(n_d)]
        for t in range(n_d):
            idx = [i for i in range(n_i) if cok[t][i]]
            vals = [cv[t][i] for i in idx]
            if not idx:
                continue
            if e.op == "cs_rank":
                if len(idx) == 1:
                    out[t][idx[0]], ook[t][idx[0]] = 0.5, True
                else:
                    for i in idx:
                        r = _naive_rank_avg(vals, cv[t][i])
                        out[t][i] = (r - 1.0) / (len(idx) - 1.0)
                        ook[t][i] = True
            else:  # cs_scale
                if max(vals) == min(vals):
                    continue  # degenerate day stays fully masked
                m = sum(vals) / len(vals)
                sd = math.sqrt(sum((x - m) ** 2 for x in vals) / len(vals))
                for i in idx:
                    out[t][i] = (cv[t][i] - m) / sd
                    ook[t][i] = True
        return out, ook

    # group_neutralize
    cv, cok = naive_eval(e.child, panel)
    out = [[0.0] * n_i for _ in range(n_d)]
    ook = [[False] * n_i for _ in range(n_d)]
    for t in range(n_d):
        for g in set(sectors):
            idx = [i for i in range(n_i) if sectors[i] == g and cok[t][i]]
            if not idx:
                continue
            m = sum(cv[t][i] for i in idx) / len(idx)
            for i in idx:
                out[t][i] = cv[t][i] - m
                ook[t][i] = True
    return out, ook
