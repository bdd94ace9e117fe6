/** Chart series extraction and canvas rendering.
 *
 * Series are taken verbatim from the server report JSON and the progress
 * events; nothing is recomputed client-side. Every series keeps x strictly
 * increasing, which the extractors enforce.
 */

import type { AlphaReport, ChartSeries, SessionEvent } from "./types.js";

function assertIncreasing(s: ChartSeries): ChartSeries {
  for (let i = 1; i < s.x.length; i++) {
    if (!(s.x[i] > s.x[i - 1])) {
      throw new Error(`series ${s.name}: x not strictly increasing at ${i}`);
    }
  }
  if (s.x.length !== s.y.length) {
    throw new Error(`series ${s.name}: x/y length mismatch`);
  }
  return s;
}

/** Cumulative long-short equity, one point per traded day. */
export function equitySeries(report: AlphaReport): ChartSeries {
  const y = report.backtest.equity_curve;
  return assertIncreasing({
    name: "equity",
    x: y.map((_, i) => i),
    y: [...y],
  });
}

/** Best validation IC per generation, taken from the progress events of the
 * most recent search in the session. */
export function fitnessSeries(events: SessionEvent[]): ChartSeries {
  let start = 0;
  for (let i = 0; i < events.length; i++) {
    if (events[i].kind === "search_started") start = i;
  }
  const x: number[] = [];
  const y: number[] = [];
  for (const ev of events.slice(start)) {
    if (ev.kind !== "generation_progress") continue;
    const p = ev.payload as any;
    x.push(Number(p.gen));
    y.push(Number(p.val_best));
  }
  return assertIncreasing({ name: "fitness", x, y });
}

/** Daily-IC histogram; x is the bin center of each reported bucket. */
export function histogramSeries(report: AlphaReport): ChartSeries {
  const { edges, counts } = report.ic_histogram;
  return assertIncreasing({
    name: "ic_histogram",
    x: counts.map((_, i) => (edges[i] + edges[i + 1]) / 2),
    y: [...counts],
  });
}

/** Mean IC at increasing signal lags; lags without enough data are omitted. */
export function decaySeries(report: AlphaReport): ChartSeries {
  const x: number[] = [];
  const y: number[] = [];
  report.decay.lags.forEach((lag, i) => {
    const v = report.decay.mean_ics[i];
    if (v !== null && v !== undefined) {
      x.push(lag);
      y.push(v);
    }
  });
  return assertIncreasing({ name: "decay", x, y });
}

// -- canvas rendering -------------------------------------------------------

const MARGIN = 28;

function scale(vals: number[], lo: number, hi: number): (v: number) => number {
  const min = Math.min(...vals);
  const max = Math.max(...vals);
  const span = max - min || 1;
  return (v) => lo + ((v - min) / span) * (hi - lo);
}

function clear(canvas: HTMLCanvasElement, title: string): CanvasRenderingContext2D {
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "#9aa4b2";
  ctx.font = "11px sans-serif";
  ctx.fillText(title, 6, 14);
  return ctx;
}

export function drawLine(canvas: HTMLCanvasElement, s: ChartSeries,
                         title: string, color = "#4da3ff"): void {
  const ctx = clear(canvas, title);
  if (s.x.length === 0) return;
  const sx = scale(s.x, MARGIN, canvas.width - 8);
  const sy = scale(s.y, canvas.height - MARGIN, 20);
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  s.x.forEach((x, i) => {
    const px = sx(x);
    const py = sy(s.y[i]);
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.stroke();
  ctx.fillStyle = "#9aa4b2";
  ctx.fillText(Math.min(...s.y).toPrecision(3), 2, canvas.height - MARGIN + 4);
  ctx.fillText(Math.max(...s.y).toPrecision(3), 2, 24);
}

export function drawBars(canvas: HTMLCanvasElement, s: ChartSeries,
                         title: string, color = "#7bd88f"): void {
  const ctx = clear(canvas, title);
  if (s.x.length === 0) return;
  const sx = scale(s.x, MARGIN, canvas.width - 8);
  const top = 20;
  const base = canvas.height - MARGIN;
  const maxY = Math.max(...s.y, 1);
  const w = Math.max(2, (canvas.width - MARGIN - 8) / s.x.length - 2);
  ctx.fillStyle = color;
  s.x.forEach((x, i) => {
    const h = (s.y[i] / maxY) * (base - top);
    ctx.fillRect(sx(x) - w / 2, base - h, w, h);
  });
}
