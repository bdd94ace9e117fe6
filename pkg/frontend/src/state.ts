/** Pure session-state logic: the view is a fold over received events.
 *
 * Replaying the same event sequence always yields the same ViewSession, and
 * duplicate deliveries (reconnects that overlap the resume point) are dropped
 * by sequence number, so the reducer is safe to feed from a lossy stream.
 */

import type {
  DialogItem,
  ProposedAlpha,
  SessionEvent,
  SessionState,
  ViewSession,
} from "./types.js";

const STATE_AFTER: Record<string, SessionState> = {
  user_message: "mining",
  alphas_proposed: "searching",
  search_started: "searching",
  generation_progress: "searching",
  search_finished: "reporting",
  report_ready: "idle",
  error: "idle",
};

export function newViewSession(id: string, title: string): ViewSession {
  return { id, title, lastSeq: -1, state: "idle", events: [] };
}

/** Fold one event in; duplicates and replays (seq <= lastSeq) are no-ops. */
export function applyEvent(view: ViewSession, ev: SessionEvent): ViewSession {
  if (ev.seq <= view.lastSeq) return view;
  return {
    ...view,
    lastSeq: ev.seq,
    state: STATE_AFTER[ev.kind] ?? view.state,
    events: [...view.events, ev],
  };
}

export function applyEvents(view: ViewSession, evs: SessionEvent[]): ViewSession {
  return evs.reduce(applyEvent, view);
}

export function inputEnabled(view: ViewSession): boolean {
  return view.state === "idle";
}

function summarizeProposed(alphas: ProposedAlpha[]): string {
  const lines = alphas.map((a) => `${a.name}: ${a.expression}`);
  return `Proposed ${alphas.length} seed alphas\n${lines.join("\n")}`;
}

/** Project the event log onto dialog bubbles. Progress ticks are collapsed
 * into the search_started line so long runs stay readable. */
export function dialogItems(view: ViewSession): DialogItem[] {
  const items: DialogItem[] = [];
  for (const ev of view.events) {
    const p = ev.payload as Record<string, any>;
    switch (ev.kind) {
      case "user_message":
        items.push({ seq: ev.seq, role: "user", text: String(p.text ?? "") });
        break;
      case "system_message":
        items.push({ seq: ev.seq, role: "system", text: String(p.text ?? "") });
        break;
      case "alphas_proposed":
        items.push({
          seq: ev.seq,
          role: "system",
          text: summarizeProposed((p.alphas ?? []) as ProposedAlpha[]),
        });
        break;
      case "search_started":
        items.push({
          seq: ev.seq,
          role: "system",
          text: `Search started (pop ${p.config?.population_size}, ` +
            `${p.config?.generations} generations)`,
        });
        break;
      case "generation_progress": {
        const last = items[items.length - 1];
        const line = `gen ${p.gen}  best ${Number(p.best_fitness).toFixed(4)}` +
          `  val ${Number(p.val_best).toFixed(4)}`;
        if (last && last.text.startsWith("Search started")) {
          const base = last.text.split("\n")[0];
          last.text = `${base}\n${line}`;
        }
        break;
      }
      case "search_finished":
        items.push({
          seq: ev.seq,
          role: "system",
          text: `Search finished (${p.stop_reason}), ${p.n_elites} elites`,
        });
        break;
      case "report_ready":
        items.push({
          seq: ev.seq,
          role: "system",
          text: `Report ready: ${(p.alpha_ids ?? []).length} alphas admitted`,
          alphaIds: (p.alpha_ids ?? []) as string[],
        });
        break;
      case "alpha_deployed":
        items.push({
          seq: ev.seq,
          role: "system",
          text: `Deployed ${p.alpha_id} ` +
            `(verification ${p.verification?.passed ? "passed" : "failed"})`,
        });
        break;
      case "error":
        items.push({
          seq: ev.seq,
          role: "error",
          text: `${p.error}: ${p.message ?? ""}`,
        });
        break;
    }
  }
  return items;
}

/** Alpha ids announced by the latest report_ready event, newest last. */
export function latestAlphaIds(view: ViewSession): string[] {
  for (let i = view.events.length - 1; i >= 0; i--) {
    const ev = view.events[i];
    if (ev.kind === "report_ready") {
      return ((ev.payload as any).alpha_ids ?? []) as string[];
    }
  }
  return [];
}
