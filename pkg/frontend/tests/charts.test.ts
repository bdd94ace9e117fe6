import { describe, expect, it } from "vitest";

import {
  decaySeries,
  equitySeries,
  fitnessSeries,
  histogramSeries,
} from "../src/charts.js";
import type { AlphaReport, SessionEvent } from "../src/types.js";

function report(overrides: Partial<AlphaReport> = {}): AlphaReport {
  const n = 250;
  return {
    alpha_id: "aaaa1111",
    expr: "cs_rank(ts_delta(close,5))",
    explanation: "rank of change",
    ic_summary: { mean_ic: 0.1, std_ic: 0.2, icir: 0.5, t_stat: 3.0, n_days: n },
    backtest: {
      dates: Array.from({ length: n }, (_, i) => `2020-${i}`),
      daily_returns: Array.from({ length: n }, () => 0.001),
      equity_curve: Array.from({ length: n }, (_, i) => 1 + i * 0.001),
      annual_return: 0.25,
      sharpe: 2.0,
      max_drawdown: 0.05,
      mean_turnover: 0.3,
      cost_bps: 10,
      quantile: 0.1,
    },
    decay: {
      lags: [0, 1, 2, 3, 4],
      mean_ics: [0.12, 0.08, null, 0.02, 0.01],
    },
    ic_histogram: {
      edges: [-1, -0.5, 0, 0.5, 1],
      counts: [10, 80, 120, 40],
    },
    ...overrides,
  };
}

function progress(gen: number, val: number): SessionEvent {
  return {
    seq: gen + 3,
    ts: 0,
    kind: "generation_progress",
    payload: { gen, best_fitness: val + 0.02, val_best: val },
  };
}

describe("equitySeries", () => {
  it("has one point per traded day, verbatim from the report", () => {
    const s = equitySeries(report());
    expect(s.x).toHaveLength(250);
    expect(s.y).toEqual(report().backtest.equity_curve);
  });

  it("x strictly increasing", () => {
    const s = equitySeries(report());
    for (let i = 1; i < s.x.length; i++) expect(s.x[i]).toBeGreaterThan(s.x[i - 1]);
  });
});

describe("fitnessSeries", () => {
  it("extracts one point per generation", () => {
    const events: SessionEvent[] = [
      { seq: 2, ts: 0, kind: "search_started", payload: {} },
      progress(0, 0.05),
      progress(1, 0.08),
      progress(2, 0.11),
    ];
    const s = fitnessSeries(events);
    expect(s.x).toEqual([0, 1, 2]);
    expect(s.y).toEqual([0.05, 0.08, 0.11]);
  });

  it("uses only the most recent search in the session", () => {
    const events: SessionEvent[] = [
      { seq: 0, ts: 0, kind: "search_started", payload: {} },
      progress(0, 0.05),
      progress(1, 0.06),
      { seq: 5, ts: 0, kind: "search_started", payload: {} },
      { seq: 6, ts: 0, kind: "generation_progress",
        payload: { gen: 0, best_fitness: 0.3, val_best: 0.25 } },
    ];
    const s = fitnessSeries(events);
    expect(s.x).toEqual([0]);
    expect(s.y).toEqual([0.25]);
  });

  it("empty without progress events", () => {
    expect(fitnessSeries([]).x).toEqual([]);
  });
});

describe("histogramSeries", () => {
  it("one bar per bucket at the bin center", () => {
    const s = histogramSeries(report());
    expect(s.x).toEqual([-0.75, -0.25, 0.25, 0.75]);
    expect(s.y).toEqual([10, 80, 120, 40]);
  });

  it("rendered counts sum to report n_days", () => {
    const r = report();
    const total = histogramSeries(r).y.reduce((a, b) => a + b, 0);
    expect(total).toBe(r.ic_summary.n_days);
  });
});

describe("decaySeries", () => {
  it("skips lags without data while keeping x increasing", () => {
    const s = decaySeries(report());
    expect(s.x).toEqual([0, 1, 3, 4]);
    expect(s.y).toEqual([0.12, 0.08, 0.02, 0.01]);
  });
});

describe("series invariants", () => {
  it("rejects non-increasing x", () => {
    const bad = report({
      decay: { lags: [0, 2, 1], mean_ics: [0.1, 0.05, 0.02] },
    });
    expect(() => decaySeries(bad)).toThrow(/strictly increasing/);
  });
});
