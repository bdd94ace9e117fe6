/** DOM wiring: session sidebar, dialog pane, and the alpha dashboard.
 *
 * All state lives in per-session ViewSession values built by the pure
 * reducer; rendering just projects them onto the DOM.
 */

import * as api from "./api.js";
import {
  decaySeries,
  drawBars,
  drawLine,
  equitySeries,
  fitnessSeries,
  histogramSeries,
} from "./charts.js";
import {
  applyEvent,
  dialogItems,
  inputEnabled,
  latestAlphaIds,
  newViewSession,
} from "./state.js";
import type { AlphaReport, SessionEvent, ViewSession } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

// local caches keyed by session id / alpha id
const sessions = new Map<string, ViewSession>();
const reports = new Map<string, AlphaReport>();

let currentId: string | null = null;
let currentAlpha: string | null = null;
let stream: api.StreamHandle | null = null;

// -- session sidebar --------------------------------------------------------

async function refreshSessionList(): Promise<void> {
  const list = await api.listSessions();
  const el = $("session-list");
  el.innerHTML = "";
  if (list.length === 0) {
    const hint = document.createElement("div");
    hint.className = "hint";
    hint.textContent =
      "No sessions yet. Create one and describe a trading idea to start mining.";
    el.appendChild(hint);
    return;
  }
  for (const s of list) {
    const row = document.createElement("div");
    row.className = "session-row" + (s.id === currentId ? " active" : "");
    row.textContent = `${s.title} · ${s.state}`;
    row.title = s.id;
    row.onclick = () => selectSession(s.id, s.title);
    el.appendChild(row);
  }
}

function view(): ViewSession | null {
  return currentId ? sessions.get(currentId) ?? null : null;
}

function selectSession(id: string, title: string): void {
  stream?.close();
  currentId = id;
  currentAlpha = null;
  if (!sessions.has(id)) sessions.set(id, newViewSession(id, title));
  openStream();
  render();
  void refreshSessionList();
}

// -- event stream -----------------------------------------------------------

function openStream(): void {
  const v = view();
  if (!v) return;
  const id = v.id;
  stream = api.streamEvents(
    id,
    v.lastSeq + 1,
    (ev: SessionEvent) => {
      const cur = sessions.get(id);
      if (!cur) return;
      sessions.set(id, applyEvent(cur, ev));
      if (id === currentId) render();
    },
    () => sessions.get(id)?.state !== "idle",
    () => void refreshSessionList(),
    (connected) => setBanner(!connected),
  );
}

function setBanner(show: boolean): void {
  $("banner").classList.toggle("hidden", !show);
}

// -- dialog -----------------------------------------------------------------

function renderDialog(v: ViewSession): void {
  const box = $("dialog-box");
  box.innerHTML = "";
  for (const item of dialogItems(v)) {
    const div = document.createElement("div");
    div.className = `msg ${item.role}`;
    div.textContent = item.text;
    if (item.alphaIds?.length) {
      const links = document.createElement("div");
      links.className = "alpha-links";
      for (const aid of item.alphaIds) {
        const a = document.createElement("button");
        a.className = "alpha-link";
        a.textContent = aid.slice(0, 10);
        a.onclick = () => void showDashboard(aid);
        links.appendChild(a);
      }
      div.appendChild(links);
    }
    box.appendChild(div);
  }
  box.scrollTop = box.scrollHeight;

  const input = $<HTMLInputElement>("idea-input");
  const send = $<HTMLButtonElement>("send-btn");
  const enabled = inputEnabled(v);
  input.disabled = !enabled;
  send.disabled = !enabled;
  input.placeholder = enabled
    ? "Describe a trading idea..."
    : `Session ${v.state}...`;
}

async function sendIdea(): Promise<void> {
  const v = view();
  const input = $<HTMLInputElement>("idea-input");
  const text = input.value.trim();
  if (!v || !text || !inputEnabled(v)) return;
  input.value = "";
  sessions.set(v.id, { ...v, state: "mining" });
  render();
  try {
    await api.postMessage(v.id, text);
  } catch (err) {
    sessions.set(v.id, { ...v, state: "idle" });
    render();
    alert(`Message rejected: ${err}`);
    return;
  }
  stream?.close();
  openStream();
}

// -- dashboard --------------------------------------------------------------

async function showDashboard(alphaId: string): Promise<void> {
  currentAlpha = alphaId;
  const empty = $("dash-empty");
  const body = $("dash-body");
  let report = reports.get(alphaId);
  if (!report) {
    try {
      report = await api.fetchReport(alphaId);
      reports.set(alphaId, report);
    } catch {
      empty.textContent = `No report available for alpha ${alphaId}.`;
      empty.classList.remove("hidden");
      body.classList.add("hidden");
      return;
    }
  }
  empty.classList.add("hidden");
  body.classList.remove("hidden");

  $("dash-expr").textContent = report.expr;
  const s = report.ic_summary;
  $("dash-stats").textContent =
    `IC ${s.mean_ic.toFixed(4)} (ICIR ${s.icir?.toFixed(2) ?? "n/a"}, ` +
    `${s.n_days} days) · sharpe ${report.backtest.sharpe?.toFixed(2) ?? "n/a"} · ` +
    `maxdd ${(report.backtest.max_drawdown * 100).toFixed(1)}% · ` +
    `annual ${(report.backtest.annual_return * 100).toFixed(1)}%`;
  $("dash-explain").textContent = report.explanation;

  drawLine($<HTMLCanvasElement>("chart-equity"), equitySeries(report),
           "long-short equity");
  drawLine($<HTMLCanvasElement>("chart-fitness"),
           fitnessSeries(view()?.events ?? []),
           "validation IC by generation", "#ffb454");
  drawBars($<HTMLCanvasElement>("chart-hist"), histogramSeries(report),
           "daily IC distribution");
  drawLine($<HTMLCanvasElement>("chart-decay"), decaySeries(report),
           "signal decay", "#d48aff");

  const deploy = $<HTMLButtonElement>("deploy-btn");
  deploy.disabled = false;
  deploy.onclick = async () => {
    deploy.disabled = true;
    try {
      const out = await api.deployAlpha(alphaId);
      const ok = (out as any).verification?.passed;
      toast(ok ? `Deployed ${alphaId.slice(0, 10)}` : "Deploy verification failed");
    } catch (err) {
      toast(`Deploy failed: ${err}`);
      deploy.disabled = false;
    }
  };
}

function toast(text: string): void {
  const el = $("toast");
  el.textContent = text;
  el.classList.remove("hidden");
  setTimeout(() => el.classList.add("hidden"), 3000);
}

// -- top-level render -------------------------------------------------------

function render(): void {
  const v = view();
  if (!v) return;
  $("session-title").textContent = v.title;
  renderDialog(v);
  const ids = latestAlphaIds(v);
  if (!currentAlpha && ids.length > 0) {
    void showDashboard(ids[0]);
  } else if (currentAlpha) {
    void showDashboard(currentAlpha);
  }
}

async function newSession(): Promise<void> {
  const title = prompt("Session title", "mining session") ?? "mining session";
  const s = await api.createSession(title);
  await refreshSessionList();
  selectSession(s.id, s.title);
}

export function init(): void {
  $("new-session-btn").onclick = () => void newSession();
  $("send-btn").onclick = () => void sendIdea();
  $<HTMLInputElement>("idea-input").onkeydown = (e) => {
    if (e.key === "Enter") void sendIdea();
  };
  void refreshSessionList();
}

init();
