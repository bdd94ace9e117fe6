"""Acceptance gate: one test per headline guarantee, each printing a single
PASS/FAIL line. Run with -s (or read the captured output) for the summary."""

import json
import math
import os
import time

import numpy as np
import pytest

from alphaforge import alphabot, gp, metrics, ops
from alphaforge.cli import main as cli_main
from alphaforge.expr import (DIMENSIONLESS, canonical, check_units, parse,
                             validate)
from alphaforge.ops import AlphaMatrix
from alphaforge.panel import (ReturnMatrix, forward_returns, mock_panel,
                              synth_panel)
from alphaforge.pool import PoolStore
from conftest import random_panel, random_valid_exprs

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures", "decompiler")


def _verdict(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def sweep():
    """200 random valid expressions and the 120x20 panel they run on."""
    panel = random_panel(120, 20, seed=77, mask_frac=0.03)
    exprs = random_valid_exprs(200, panel, seed=78, max_depth=5)
    return panel, exprs


def test_search_enhancement():
    panel, _ = synth_panel(750, 100, "ts_delta(close,5)", 0.5, 123)
    fwd = forward_returns(panel, 1)
    seeds = [parse(s) for s in ("close", "volume", "cs_rank(ts_delta(close,3))")]
    best_seed = max(gp.fitness(s, panel, fwd, 0.7)[1] for s in seeds)
    t0 = time.monotonic()
    wins, uplifts = 0, []
    for rs in range(10):
        res = gp.run_search(seeds, panel, fwd, gp.GPConfig(rng_seed=rs))
        v = res.elites[0].val_fitness
        wins += v > best_seed
        uplifts.append(v - best_seed)
    elapsed = time.monotonic() - t0
    mean_uplift = float(np.mean(uplifts))
    ok = wins >= 8 and mean_uplift >= 0.02 and elapsed < 300
    _verdict("search-enhancement", ok,
             f"wins {wins}/10, mean uplift {mean_uplift:+.4f}, {elapsed:.0f}s")


def test_decompiler_loop():
    mock = mock_panel(30, 5, 1)
    provider = alphabot.FixtureProvider.from_dir(FIXTURE_DIR)
    valid, _ = alphabot.mine_seed_alphas("momentum with quality filters",
                                         provider, None, mock)
    round1 = alphabot.parse_blocks(provider.responses[0])
    n_round1_valid = sum(validate(b.expression, mock).ok for b in round1)

    stubborn_text = "\n\n".join(
        b for b in provider.responses[0].split("\n\n")
        if any(n in b for n in ("broken_syntax", "unknown_field", "unit_clash",
                                "neg_log", "tiny_window", "neg_sqrt")))
    stubborn = alphabot.FixtureProvider([stubborn_text], repeat_last=True)
    raised = False
    try:
        alphabot.mine_seed_alphas("idea", stubborn, None, mock,
                                  alphabot.MineConfig(max_rounds=3))
    except alphabot.NoValidAlphas:
        raised = True
    ok = (len(round1) == 10 and n_round1_valid == 4 and len(valid) == 10
          and provider.calls == 2 and raised and stubborn.calls == 3)
    _verdict("decompiler-loop", ok,
             f"round1 {n_round1_valid}/10 valid, final {len(valid)} in "
             f"{provider.calls} calls; stubborn raised={raised} after {stubborn.calls}")


def test_stream_batch_unification(sweep):
    panel, exprs = sweep
    t0 = time.monotonic()
    worst = 0.0
    for e in exprs:
        batch = ops.evaluate(e, panel)
        state = ops.stream_init(e, list(panel.instruments))
        for t in range(panel.n_days):
            v, ok = ops.stream_push(state, panel.day_row(t), panel.sector)
            assert np.array_equal(ok, batch.valid[t])
            if ok.any():
                worst = max(worst, float(np.abs(v[ok] - batch.values[t][ok]).max()))
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-9 and elapsed < 60
    _verdict("stream-batch", ok,
             f"200 exprs, max |stream-batch| {worst:.2e}, {elapsed:.1f}s")


def test_causality(sweep):
    panel, exprs = sweep
    cuts = np.linspace(10, panel.n_days, 10, dtype=int)
    bitwise = True
    for e in exprs:
        full = ops.evaluate(e, panel)
        for cut in cuts:
            part = ops.evaluate(e, panel.truncate(int(cut)))
            if not (np.array_equal(part.values, full.values[:cut])
                    and np.array_equal(part.valid, full.valid[:cut])):
                bitwise = False
    _verdict("causality", bitwise,
             f"200 exprs x {len(cuts)} cut dates, prefix rows bitwise equal")


def test_ic_oracle():
    def brute_spearman(x, y):
        def ranks(v):
            order = sorted(range(len(v)), key=lambda i: v[i])
            r = [0.0] * len(v)
            i = 0
            while i < len(order):
                j = i
                while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                    j += 1
                avg = (i + j) / 2.0 + 1.0
                for k in range(i, j + 1):
                    r[order[k]] = avg
                i = j + 1
            return r
        rx, ry = ranks(x), ranks(y)
        mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
        num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
        den = math.sqrt(sum((a - mx) ** 2 for a in rx)
                        * sum((b - my) ** 2 for b in ry))
        return num / den if den > 0 else None

    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(50):
        av = rng.standard_normal((20, 30))
        fv = rng.standard_normal((20, 30))
        aok = rng.random((20, 30)) >= 0.1
        fok = rng.random((20, 30)) >= 0.1
        am = AlphaMatrix(values=np.where(aok, av, 0.0), valid=aok, expr_id="x")
        fm = ReturnMatrix(horizon=1, values=np.where(fok, fv, 0.0), valid=fok)
        ic, ok = metrics.ic_series(am, fm, "spearman")
        for t in range(20):
            sel = aok[t] & fok[t]
            if sel.sum() < metrics.MIN_OBS:
                assert not ok[t]
                continue
            ref = brute_spearman(list(av[t][sel]), list(fv[t][sel]))
            if ref is None:
                assert not ok[t]
            else:
                worst = max(worst, abs(ic[t] - ref))
    _verdict("ic-oracle", worst <= 1e-12,
             f"50 panels, max |ic - brute force| {worst:.2e}")


def test_unit_rule_base():
    mock = mock_panel(30, 5, 1)
    rejected = not validate("volume + close", mock).unit_ok
    intro = "-((close - open) / ((high - low) + 0.001))"
    rep = validate(intro, mock)
    dimensionless = check_units(parse(intro)) == DIMENSIONLESS
    ok = rejected and rep.ok and dimensionless
    _verdict("unit-rules", ok,
             f"volume+close rejected={rejected}, intro alpha ok={rep.ok} "
             f"dimensionless={dimensionless}")


def test_idea_formula_consistency():
    panel, _ = synth_panel(100, 10, "ts_delta(close,5)", 0.5, 31)
    mock = mock_panel(30, 5, 1)
    c = panel.values["close"]
    n_d, n_i = c.shape

    def roll(stat, w):
        out = np.full((n_d, n_i), np.nan)
        for t in range(w - 1, n_d):
            out[t] = stat(c[t - w + 1: t + 1], axis=0)
        return out

    worst = 0.0

    # golden cross divergence: fast MA minus slow MA
    gc = "ts_mean(close,5) - ts_mean(close,20)"
    ref = roll(np.mean, 5) - roll(np.mean, 20)
    am = ops.evaluate(parse(gc), panel)
    assert validate(gc, mock).ok
    sel = am.valid & np.isfinite(ref)
    assert np.array_equal(am.valid, np.isfinite(ref))
    worst = max(worst, float(np.abs(am.values[sel] - ref[sel]).max()))

    # Bollinger upper-band breakout: indicator via (d+|d|)/(2|d|), masked on band
    d_expr = "(close - (ts_mean(close,20) + 2*ts_std(close,20)))"
    boll = f"({d_expr} + abs({d_expr})) / (2*abs({d_expr}))"
    band = roll(np.mean, 20) + 2 * roll(lambda a, axis: np.std(a, axis=axis, ddof=1), 20)
    dref = c - band
    ref_ok = np.isfinite(dref) & (dref != 0.0)
    ref_ind = np.where(dref > 0, 1.0, 0.0)
    am = ops.evaluate(parse(boll), panel)
    assert validate(boll, mock).ok
    assert np.array_equal(am.valid, ref_ok)
    worst = max(worst, float(np.abs(am.values[ref_ok] - ref_ind[ref_ok]).max()))

    # three consecutive bullish closes: sum of the last three move signs
    s = "ts_delta(close,2)/abs(ts_delta(close,2))"
    bulls = f"({s}) + ts_delay({s},2) + ts_delay({s},3)"
    diff = np.full((n_d, n_i), np.nan)
    diff[1:] = c[1:] - c[:-1]
    sign = np.where(diff > 0, 1.0, -1.0)
    ref3 = np.full((n_d, n_i), np.nan)
    ref3[3:] = sign[3:] + sign[2:-1] + sign[1:-2]
    ref3_ok = np.isfinite(ref3)
    for t in range(3, n_d):
        ref3_ok[t] &= (diff[t] != 0) & (diff[t - 1] != 0) & (diff[t - 2] != 0)
    am = ops.evaluate(parse(bulls), panel)
    assert validate(bulls, mock).ok
    assert np.array_equal(am.valid, ref3_ok)
    worst = max(worst, float(np.abs(am.values[ref3_ok] - ref3[ref3_ok]).max()))

    _verdict("idea-formula", worst <= 1e-9,
             f"three idea formulas vs references, max dev {worst:.2e}")


def test_backtest_sanity():
    panel, _ = synth_panel(250, 40, "ts_delta(close,5)", 0.5, 41)
    fwd = forward_returns(panel, 1)

    oracle = AlphaMatrix(values=fwd.values, valid=fwd.valid, expr_id="oracle")
    orep = metrics.backtest(oracle, panel, cost_bps=0.0)
    oracle_ok = (orep.daily_returns >= 0.0).all() and \
        orep.sharpe is not None and orep.sharpe > 3.0

    rng = np.random.default_rng(42)
    noise = AlphaMatrix(values=rng.standard_normal(fwd.values.shape),
                        valid=np.ones_like(fwd.valid), expr_id="noise")
    nrep = metrics.backtest(noise, panel, cost_bps=0.0)
    boots = np.array([rng.choice(nrep.daily_returns,
                                 nrep.daily_returns.size).mean() * 252
                      for _ in range(2000)])
    random_ok = abs(nrep.annual_return) <= 3.0 * boots.std()

    d = nrep.daily_returns
    recompute_ok = (
        abs(nrep.annual_return - d.mean() * 252) <= 1e-12
        and abs(nrep.sharpe - d.mean() / d.std(ddof=1) * math.sqrt(252)) <= 1e-12
        and np.abs(nrep.equity_curve - np.cumprod(1 + d)).max() <= 1e-12)

    ok = oracle_ok and random_ok and recompute_ok
    _verdict("backtest-sanity", ok,
             f"oracle sharpe {orep.sharpe:.1f} all-days>=0={bool((orep.daily_returns >= 0).all())}, "
             f"random annual {nrep.annual_return:+.4f} vs 3sigma {3 * boots.std():.4f}, "
             f"recompute ok={recompute_ok}")


def test_pool_decorrelation():
    panel, _ = synth_panel(150, 25, "ts_delta(close,5)", 0.4, 51)
    fwd = forward_returns(panel, 1)
    seeds = [parse(s) for s in ("close", "volume", "cs_rank(ts_delta(close,3))")]
    store = PoolStore(panel)
    n_rejected_dup = 0
    rs = 0
    while len(store.records) < 50 and rs < 40:
        cfg = gp.GPConfig(population_size=60, generations=4,
                          early_stop_patience=2, elite_k=10, rng_seed=rs)
        res = gp.run_search(seeds, panel, fwd, cfg)
        for ind in res.elites:
            rec = store.make_record(canonical(ind.expr))
            out = store.admit(rec)
            if out.get("reason") == "duplicate":
                n_rejected_dup += 1
            if len(store.records) >= 50:
                break
        rs += 1
    pairwise = store.pairwise_max_corr()
    dup = store.admit(store.make_record(next(iter(store.records.values())).expr_text))
    ok = (len(store.records) == 50 and pairwise <= 0.85 + 1e-9
          and dup["decision"] == "rejected" and dup["reason"] == "duplicate")
    _verdict("pool-decorrelation", ok,
             f"{len(store.records)} admitted over {rs} runs, pairwise max "
             f"|corr| {pairwise:.4f}, duplicate rejected={dup['decision'] == 'rejected'}")


def test_end_to_end_determinism(tmp_path):
    panel_path = str(tmp_path / "panel.bin")
    panel, _ = synth_panel(120, 20, "ts_delta(close,5)", 0.4, 61)
    panel.save(panel_path)
    cfg = tmp_path / "gp.json"
    cfg.write_text(json.dumps({"population_size": 40, "generations": 3,
                               "rng_seed": 0}))

    def run(data_dir):
        assert cli_main(["chat", "--idea", "momentum with volume confirmation",
                         "--provider", "mock-template", "--panel", panel_path,
                         "--data", str(data_dir), "--config", str(cfg)]) == 0
        sess_dir = os.path.join(str(data_dir), "sessions")
        (fn,) = os.listdir(sess_dir)
        lines = []
        for raw in open(os.path.join(sess_dir, fn)):
            obj = json.loads(raw)
            if "session" in obj:
                obj["session"].pop("id", None)
                obj["session"].pop("created_at", None)
            if "event" in obj:
                obj["event"].pop("ts", None)
            lines.append(json.dumps(obj, sort_keys=True))
        return lines

    a = run(tmp_path / "run_a")
    b = run(tmp_path / "run_b")
    ok = a == b and len(a) > 3
    _verdict("e2e-determinism", ok,
             f"two chat runs, {len(a)} journal lines, identical modulo timestamps")
