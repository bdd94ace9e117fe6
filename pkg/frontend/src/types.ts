/** Wire types mirrored from the server API, plus client view models. */

export interface SessionEvent {
  seq: number;
  ts: number;
  kind: string;
  payload: Record<string, unknown>;
}

export type SessionState = "idle" | "mining" | "searching" | "reporting";

/** Client mirror of a server session, rebuilt purely from received events. */
export interface ViewSession {
  id: string;
  title: string;
  lastSeq: number;
  state: SessionState;
  events: SessionEvent[];
}

export interface SessionSummary {
  id: string;
  title: string;
  created_at: number;
  state: string;
  n_events: number;
}

export interface ProposedAlpha {
  name: string;
  expression: string;
  description: string;
}

/** One rendered line of the dialog transcript. */
export interface DialogItem {
  seq: number;
  role: "user" | "system" | "error";
  text: string;
  alphaIds?: string[];
}

/** Named (x, y) arrays backing one chart; x must be strictly increasing. */
export interface ChartSeries {
  name: string;
  x: number[];
  y: number[];
}

export interface AlphaReport {
  alpha_id: string;
  expr: string;
  explanation: string;
  ic_summary: {
    mean_ic: number;
    std_ic: number;
    icir: number | null;
    t_stat: number | null;
    n_days: number;
  };
  backtest: {
    dates: string[];
    daily_returns: number[];
    equity_curve: number[];
    annual_return: number;
    sharpe: number | null;
    max_drawdown: number;
    mean_turnover: number;
    cost_bps: number;
    quantile: number;
  };
  decay: { lags: number[]; mean_ics: (number | null)[] };
  ic_histogram: { edges: number[]; counts: number[] };
}
